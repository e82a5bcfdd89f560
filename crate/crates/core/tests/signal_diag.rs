//! Ground-truth signal diagnostics at shipped scale (ignored; calibration).

use hypercast_core::config::transfer_config;
use hypercast_core::eval::normalized_entropy;
use hypercast_core::stream::StreamGenerator;

#[test]
#[ignore]
fn oracle_headroom_at_shipped_scale() {
    let cfg = transfer_config();
    let mut sg = StreamGenerator::new(cfg.stream.clone(), cfg.seed).unwrap();
    let eval_start = cfg.eval_start_ts();

    let mut labels: std::collections::BTreeMap<String, Vec<bool>> = Default::default();
    let mut full: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut pooled: std::collections::BTreeMap<String, Vec<f64>> = Default::default();

    loop {
        let lens: Vec<usize> = (0..cfg.stream.n_users)
            .map(|u| sg.history_of(u as u64).len())
            .collect();
        let Some(req) = sg.next_request() else { break };
        if req.ts < eval_start || req.surface_id != 0 {
            continue;
        }
        for ev in &req.events {
            let hist = &sg.history_of(ev.user_id)[..lens[ev.user_id as usize]];
            for task in &cfg.stream.main_tasks {
                labels.entry(task.clone()).or_default().push(ev.labels[task]);
                full.entry(task.clone()).or_default().push(sg.ground_truth().probability(
                    req.day, ev.user_id, hist, ev.item_id, ev.surface_id, task,
                ));
                pooled.entry(task.clone()).or_default().push(
                    sg.ground_truth().pooled_probability(
                        req.day, ev.user_id, hist, ev.item_id, ev.surface_id, task,
                    ),
                );
            }
        }
    }
    for task in &cfg.stream.main_tasks {
        let y = &labels[task];
        let nf = normalized_entropy(task, y, &full[task]).unwrap().ne;
        let np = normalized_entropy(task, y, &pooled[task]).unwrap().ne;
        let rate = y.iter().filter(|&&b| b).count() as f64 / y.len() as f64;
        println!(
            "{task:24} n {:6}  rate {rate:.3}  oracle NE {nf:.4}  pooled NE {np:.4}  gap {:.4}",
            y.len(),
            np - nf
        );
    }
}
