//! Rough throughput measurement used to size experiment configs.
//! Run with: cargo test -p hypercast-core --test throughput -- --nocapture --ignored

use std::time::Instant;

use hypercast_core::encoder::{EncoderConfig, ItemFeatures};
use hypercast_core::fm::{fm_train_step, init_fm_params, CandidateExample, FmConfig, LabeledRequest, TaskSpec};
use hypercast_core::params::{AdamConfig, AdamState};
use hypercast_core::rng::Rng;

fn batch_of(n_requests: usize, n_hist: usize, m: usize, rng: &mut Rng) -> Vec<LabeledRequest> {
    (0..n_requests)
        .map(|_| {
            let history: Vec<ItemFeatures> = (0..n_hist)
                .map(|_| ItemFeatures::history(rng.next_u64() % 1000, 0, rng.below(24) as u32, rng.below(5) as u8))
                .collect();
            let candidates = (0..m)
                .map(|_| CandidateExample {
                    item: ItemFeatures::target(rng.next_u64() % 1000, 0, 3),
                    labels: [
                        ("like".to_string(), rng.bernoulli(0.3)),
                        ("share".to_string(), rng.bernoulli(0.1)),
                        ("video_complete".to_string(), rng.bernoulli(0.4)),
                        ("video_view_duration".to_string(), rng.bernoulli(0.5)),
                    ]
                    .into_iter()
                    .collect(),
                    aux_features: vec![0.1, 0.2, -0.3, 0.05],
                })
                .collect();
            LabeledRequest { history, surface: 0, candidates }
        })
        .collect()
}

fn bench(enc: EncoderConfig, label: &str) {
    let cfg = FmConfig {
        encoder: enc,
        tasks: vec![
            TaskSpec::main("like"),
            TaskSpec::main("share"),
            TaskSpec::main("video_complete"),
            TaskSpec::main("video_view_duration"),
            TaskSpec::aux("aux_a", [0]),
        ],
        surfaces: vec![0],
        align_hidden: 32,
        aux_feature_dim: 4,
    };
    let mut params = init_fm_params(&cfg, 0).unwrap();
    let mut state = AdamState::default();
    let mut rng = Rng::new(42);
    let n_hist = cfg.encoder.max_history;
    let m = 4;
    let reqs_per_batch = 8;
    // Warm up then measure.
    let warm = batch_of(reqs_per_batch, n_hist, m, &mut rng);
    fm_train_step(&warm, &mut params, &mut state, &cfg, &AdamConfig::default()).unwrap();
    let start = Instant::now();
    let mut examples = 0usize;
    let iters = 12;
    for _ in 0..iters {
        let batch = batch_of(reqs_per_batch, n_hist, m, &mut rng);
        examples += batch.iter().map(|r| r.candidates.len()).sum::<usize>();
        fm_train_step(&batch, &mut params, &mut state, &cfg, &AdamConfig::default()).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    println!(
        "{label}: {:.0} examples/s  ({examples} examples in {dt:.2}s)",
        examples as f64 / dt
    );
}

#[test]
#[ignore]
fn measure_train_throughput() {
    println!("cores: {}", std::thread::available_parallelism().unwrap());
    bench(EncoderConfig::test_small(), "small  (L2 d32 h16)");
    bench(EncoderConfig::mid_analog(), "mid    (L4 d64 h24)");
    bench(EncoderConfig::large_analog(), "large  (L8 d128 h24)");
}
