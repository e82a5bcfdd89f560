//! Experiment pipelines: foundation-to-expert transfer efficiency, the
//! embedding ablation, and generalization to tasks withheld from
//! foundation-model training. Each produces a machine-readable report of
//! per-task normalized entropies; the orchestrator writes them as
//! newline-delimited rows.

use std::path::Path;

use crate::config::{ExperimentSelection, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{ne_diff_pct, transfer_ratio, SIGNIFICANT_NE_DIFF_PCT};
use crate::fm::TaskKind;
use crate::pipeline::{
    prepare_output, write_sim_checkpoints, ExpertLaneInit, FmLaneInit, SimIo, SimResult,
    Simulation,
};

pub const FM_SMALL: &str = "fm-small";
pub const FM_LARGE: &str = "fm-large";
/// Version tag of the single foundation model in one-model experiments.
pub const FM_PRIMARY: &str = "fm-a";

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        let line =
            serde_json::to_string(row).map_err(|e| Error::Config(format!("report encode: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Transfer experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransferRow {
    pub surface: u32,
    pub task: String,
    pub task_kind: String,
    pub ne_fm_small: f64,
    pub ne_fm_large: f64,
    pub ne_expert_small: f64,
    pub ne_expert_large: f64,
    /// 100 * (NE(large FM) - NE(small FM)) / NE(small FM); negative is better.
    pub fm_diff_pct: f64,
    pub expert_diff_pct: f64,
    /// (NE(E_large) - NE(E_small)) / (NE(FM_large) - NE(FM_small)).
    pub transfer_ratio: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

/// Train a small and a large foundation model on identical streams, feed
/// their logged embeddings to architecturally identical warm-started
/// experts, and measure how much of the foundation-model improvement each
/// expert inherits.
pub fn run_transfer_experiment(run: &RunConfig, io: SimIo) -> Result<(TransferReport, SimResult)> {
    let fm_lanes = vec![
        FmLaneInit {
            version: FM_SMALL.into(),
            cfg: run.fm_config(&run.fm_small, &[])?,
            downsample: run.fm_downsample.clone(),
            lr: run.fm_small.lr_or(run.train.fm_lr),
        },
        FmLaneInit {
            version: FM_LARGE.into(),
            cfg: run.fm_config(&run.fm_large, &[])?,
            downsample: run.fm_downsample.clone(),
            lr: run.fm_large.lr_or(run.train.fm_lr),
        },
    ];

    let donor_end = run.donor_end_ts();
    let eval_start = run.eval_start_ts();
    let mut expert_lanes = Vec::new();
    for &surface in &run.expert_surfaces {
        let tasks = run.expert_task_specs(surface);
        let donor = format!("donor-s{surface}");
        expert_lanes.push(ExpertLaneInit {
            name: donor.clone(),
            cfg: run.expert_config(
                surface,
                FM_SMALL,
                run.fm_small.encoder.dim,
                true,
                false,
                tasks.clone(),
            ),
            start_ts: 0,
            end_ts: donor_end,
            warm_from: None,
            lr: run.train.expert_lr,
        });
        expert_lanes.push(ExpertLaneInit {
            name: format!("expert-s{surface}-small"),
            cfg: run.expert_config(
                surface,
                FM_SMALL,
                run.fm_small.encoder.dim,
                true,
                false,
                tasks.clone(),
            ),
            start_ts: donor_end,
            end_ts: eval_start,
            warm_from: Some(donor.clone()),
            lr: run.train.expert_lr,
        });
        expert_lanes.push(ExpertLaneInit {
            name: format!("expert-s{surface}-large"),
            cfg: run.expert_config(
                surface,
                FM_LARGE,
                run.fm_large.encoder.dim,
                true,
                false,
                tasks,
            ),
            start_ts: donor_end,
            end_ts: eval_start,
            warm_from: Some(donor),
            lr: run.train.expert_lr,
        });
    }

    let sim = Simulation::new(run, run.seed, fm_lanes, expert_lanes, io)?;
    let result = sim.run()?;
    let report = transfer_report(run, &result)?;
    Ok((report, result))
}

fn transfer_report(run: &RunConfig, result: &SimResult) -> Result<TransferReport> {
    let fm_small = result
        .eval
        .get(FM_SMALL)
        .ok_or_else(|| Error::Config("missing small foundation model eval".into()))?;
    let fm_large = result
        .eval
        .get(FM_LARGE)
        .ok_or_else(|| Error::Config("missing large foundation model eval".into()))?;
    let mut rows = Vec::new();
    for &surface in &run.expert_surfaces {
        let e_small = result
            .eval
            .get(&format!("expert-s{surface}-small"))
            .ok_or_else(|| Error::Config(format!("missing small expert eval for surface {surface}")))?;
        let e_large = result
            .eval
            .get(&format!("expert-s{surface}-large"))
            .ok_or_else(|| Error::Config(format!("missing large expert eval for surface {surface}")))?;
        for task in run.expert_task_specs(surface) {
            let kind = if run.stream.main_tasks.contains(&task.name) {
                TaskKind::Main
            } else {
                TaskKind::Aux
            };
            let ne_fm_small = fm_small.ne(surface, &task.name)?.ne;
            let ne_fm_large = fm_large.ne(surface, &task.name)?.ne;
            let ne_expert_small = e_small.ne(surface, &task.name)?.ne;
            let ne_expert_large = e_large.ne(surface, &task.name)?.ne;
            let fm_diff_pct = ne_diff_pct(ne_fm_large, ne_fm_small);
            let expert_diff_pct = ne_diff_pct(ne_expert_large, ne_expert_small);
            let tr = transfer_ratio(ne_fm_large, ne_fm_small, ne_expert_large, ne_expert_small).ok();
            rows.push(TransferRow {
                surface,
                task: task.name.clone(),
                task_kind: match kind {
                    TaskKind::Main => "main".into(),
                    TaskKind::Aux => "aux".into(),
                },
                ne_fm_small,
                ne_fm_large,
                ne_expert_small,
                ne_expert_large,
                fm_diff_pct,
                expert_diff_pct,
                transfer_ratio: tr,
                significant: fm_diff_pct.abs() >= SIGNIFICANT_NE_DIFF_PCT,
            });
        }
    }
    Ok(TransferReport { rows })
}

// ---------------------------------------------------------------------------
// Ablation experiment
// ---------------------------------------------------------------------------

pub const ABLATION_VARIANTS: [&str; 4] = ["baseline", "ue", "tae", "ue_tae"];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub ne_baseline: f64,
    pub ne_ue: f64,
    pub ne_tae: f64,
    pub ne_ue_tae: f64,
    pub diff_ue_pct: f64,
    pub diff_tae_pct: f64,
    pub diff_ue_tae_pct: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub surface: u32,
    pub rows: Vec<AblationRow>,
}

/// Feature ablation on one surface: the same model with no embedding
/// pathway, a stale pooled user-embedding pathway, the target-aware
/// pathway, and both.
pub fn run_ablation(run: &RunConfig, io: SimIo) -> Result<(AblationReport, SimResult)> {
    let surface = run.ablation_surface;
    let fm_lanes = vec![FmLaneInit {
        version: FM_PRIMARY.into(),
        cfg: run.fm_config(&run.fm_large, &[])?,
        downsample: run.fm_downsample.clone(),
        lr: run.fm_large.lr_or(run.train.fm_lr),
    }];

    let tasks = run.expert_task_specs(surface);
    let eval_start = run.eval_start_ts();
    let fm_dim = run.fm_large.encoder.dim;
    let mut expert_lanes = Vec::new();
    for (name, use_tae, use_ue) in [
        ("baseline", false, false),
        ("ue", false, true),
        ("tae", true, false),
        ("ue_tae", true, true),
    ] {
        // All four variants share one architecture (the one-stage scale), so
        // the only difference is which pathways feed the fusion module.
        let mut cfg =
            run.expert_config(surface, FM_PRIMARY, fm_dim, use_tae, use_ue, tasks.clone());
        cfg.short_encoder = run.fm_large.encoder.clone();
        cfg.short_history_len = run.fm_large.encoder.max_history;
        let start_ts =
            (run.stream.horizon() as f64 * run.train.comparison_start_frac) as u64;
        expert_lanes.push(ExpertLaneInit {
            name: name.into(),
            cfg,
            start_ts,
            end_ts: eval_start,
            warm_from: None,
            // The variants run at one-stage scale, so they take the large
            // architecture's learning rate.
            lr: run.fm_large.lr_or(run.train.expert_lr),
        });
    }

    let sim = Simulation::new(run, run.seed, fm_lanes, expert_lanes, io)?;
    let result = sim.run()?;

    let mut rows = Vec::new();
    for task in &tasks {
        let ne_of = |variant: &str| -> Result<f64> {
            result
                .eval
                .get(variant)
                .ok_or_else(|| Error::Config(format!("missing {variant} eval")))?
                .ne(surface, &task.name)
                .map(|r| r.ne)
        };
        let ne_baseline = ne_of("baseline")?;
        let ne_ue = ne_of("ue")?;
        let ne_tae = ne_of("tae")?;
        let ne_ue_tae = ne_of("ue_tae")?;
        rows.push(AblationRow {
            task: task.name.clone(),
            ne_baseline,
            ne_ue,
            ne_tae,
            ne_ue_tae,
            diff_ue_pct: ne_diff_pct(ne_ue, ne_baseline),
            diff_tae_pct: ne_diff_pct(ne_tae, ne_baseline),
            diff_ue_tae_pct: ne_diff_pct(ne_ue_tae, ne_baseline),
        });
    }
    Ok((AblationReport { surface, rows }, result))
}

// ---------------------------------------------------------------------------
// Generalization experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneralizationRow {
    pub task: String,
    pub ne_baseline_by_seed: Vec<f64>,
    pub ne_expert_by_seed: Vec<f64>,
    pub diff_pct_by_seed: Vec<f64>,
    pub mean_diff_pct: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneralizationReport {
    pub surface: u32,
    pub withheld_tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<GeneralizationRow>,
}

/// Train the foundation model with one surface's data subsampled and all
/// but one of its tasks withheld, then measure whether its embeddings still
/// help an expert on the withheld tasks, averaged over seeds.
pub fn run_generalization(run: &RunConfig, io: SimIo) -> Result<(GeneralizationReport, Option<SimResult>)> {
    let g = &run.generalization;
    // Withheld tasks must be absent from foundation-model training.
    let fm_cfg = run.fm_config(&run.fm_large, &g.withheld_tasks)?;
    for t in &g.withheld_tasks {
        if fm_cfg.task(t).is_some() {
            return Err(Error::Config(format!("withheld task {t} leaked into fm tasks")));
        }
    }
    let mut fm_downsample = run.fm_downsample.clone();
    let base = fm_downsample.get(&g.surface).copied().unwrap_or(1.0);
    fm_downsample.insert(g.surface, (base * g.fm_share).max(1e-9));

    let withheld: Vec<crate::fm::TaskSpec> = g
        .withheld_tasks
        .iter()
        .map(|t| crate::fm::TaskSpec::main(t.clone()))
        .collect();
    let eval_start = run.eval_start_ts();
    let fm_dim = run.fm_large.encoder.dim;

    let mut per_seed: Vec<(u64, SimResult)> = Vec::new();
    let mut first_io = Some(io);
    for &seed in &g.seeds {
        let fm_lanes = vec![FmLaneInit {
            version: FM_PRIMARY.into(),
            cfg: fm_cfg.clone(),
            downsample: fm_downsample.clone(),
            lr: run.fm_large.lr_or(run.train.fm_lr),
        }];
        let start_ts =
            (run.stream.horizon() as f64 * run.train.comparison_start_frac) as u64;
        let expert_lanes = vec![
            ExpertLaneInit {
                name: "expert-fm".into(),
                cfg: run.expert_config(g.surface, FM_PRIMARY, fm_dim, true, false, withheld.clone()),
                start_ts,
                end_ts: eval_start,
                warm_from: None,
                lr: run.train.expert_lr,
            },
            ExpertLaneInit {
                name: "expert-baseline".into(),
                cfg: run.expert_config(g.surface, FM_PRIMARY, fm_dim, false, false, withheld.clone()),
                start_ts,
                end_ts: eval_start,
                warm_from: None,
                lr: run.train.expert_lr,
            },
        ];
        let io = first_io.take().unwrap_or_default();
        let sim = Simulation::new(run, seed, fm_lanes, expert_lanes, io)?;
        per_seed.push((seed, sim.run()?));
    }

    let mut rows = Vec::new();
    for task in &g.withheld_tasks {
        let mut ne_baseline_by_seed = Vec::new();
        let mut ne_expert_by_seed = Vec::new();
        let mut diff_pct_by_seed = Vec::new();
        for (_, result) in &per_seed {
            let baseline = result.eval["expert-baseline"].ne(g.surface, task)?.ne;
            let expert = result.eval["expert-fm"].ne(g.surface, task)?.ne;
            ne_baseline_by_seed.push(baseline);
            ne_expert_by_seed.push(expert);
            diff_pct_by_seed.push(ne_diff_pct(expert, baseline));
        }
        let mean_diff_pct = diff_pct_by_seed.iter().sum::<f64>() / diff_pct_by_seed.len() as f64;
        rows.push(GeneralizationRow {
            task: task.clone(),
            ne_baseline_by_seed,
            ne_expert_by_seed,
            diff_pct_by_seed,
            mean_diff_pct,
        });
    }
    let report = GeneralizationReport {
        surface: g.surface,
        withheld_tasks: g.withheld_tasks.clone(),
        seeds: g.seeds.clone(),
        rows,
    };
    let last = per_seed.pop().map(|(_, r)| r);
    Ok((report, last))
}

// ---------------------------------------------------------------------------
// Pipeline orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub experiment: String,
    pub events_total: usize,
    pub embedding_records: usize,
    pub join_missing: u64,
    pub reports: Vec<String>,
    pub checkpoints: Vec<String>,
}

/// Execute the configured experiment(s), writing checkpoints, logs, and
/// reports under the output directory. Harness mode wires the tiers with
/// direct calls; otherwise serving and weight synchronization go through
/// real loopback tier servers.
pub fn run_pipeline(run: &RunConfig, out_root: &Path) -> Result<PipelineSummary> {
    run_pipeline_mode(run, out_root, true)
}

pub fn run_pipeline_mode(
    run: &RunConfig,
    out_root: &Path,
    harness: bool,
) -> Result<PipelineSummary> {
    run.validate().map_err(|e| e.in_stage("config"))?;
    let dirs = prepare_output(out_root).map_err(|e| e.in_stage("output"))?;

    let mut summary = PipelineSummary {
        seed: run.seed,
        experiment: format!("{:?}", run.experiment).to_lowercase(),
        events_total: 0,
        embedding_records: 0,
        join_missing: 0,
        reports: Vec::new(),
        checkpoints: Vec::new(),
    };

    let wants = |sel: ExperimentSelection| {
        run.experiment == sel || run.experiment == ExperimentSelection::All
    };
    // The artifact-producing run (logs plus checkpoints) is the transfer
    // experiment when selected, otherwise whichever single experiment runs.
    let logging_io = || SimIo {
        event_log: Some(dirs.logs.join("events.jsonl")),
        embedding_log: Some(dirs.logs.join("embeddings.jsonl")),
        log_cfg: None,
        wire_tiers: !harness,
    };
    let mut artifacts_written = false;

    if wants(ExperimentSelection::Transfer) {
        let (report, result) =
            run_transfer_experiment(run, logging_io()).map_err(|e| e.in_stage("transfer"))?;
        let path = dirs.reports.join("transfer.jsonl");
        write_jsonl(&path, &report.rows).map_err(|e| e.in_stage("transfer"))?;
        summary.reports.push("reports/transfer.jsonl".into());
        write_sim_checkpoints(&dirs, &result).map_err(|e| e.in_stage("transfer"))?;
        summary.events_total = result.events_total;
        summary.embedding_records = result.embedding_records;
        summary.join_missing = result.join_missing;
        for (version, _) in &result.fm_trainers {
            summary.checkpoints.push(format!("checkpoints/{version}.fmck"));
            summary
                .checkpoints
                .push(format!("checkpoints/{version}-inference.fmck"));
        }
        for (name, _) in &result.experts {
            summary.checkpoints.push(format!("checkpoints/{name}.fmck"));
        }
        artifacts_written = true;
    }

    if wants(ExperimentSelection::Ablation) {
        let io = if artifacts_written {
            SimIo { wire_tiers: !harness, ..SimIo::default() }
        } else {
            logging_io()
        };
        let (report, result) = run_ablation(run, io).map_err(|e| e.in_stage("ablation"))?;
        let path = dirs.reports.join("ablation.jsonl");
        write_jsonl(&path, &report.rows).map_err(|e| e.in_stage("ablation"))?;
        summary.reports.push("reports/ablation.jsonl".into());
        if !artifacts_written {
            write_sim_checkpoints(&dirs, &result).map_err(|e| e.in_stage("ablation"))?;
            summary.events_total = result.events_total;
            summary.embedding_records = result.embedding_records;
            summary.join_missing = result.join_missing;
            artifacts_written = true;
        }
    }

    if wants(ExperimentSelection::Generalization) {
        let io = if artifacts_written {
            SimIo { wire_tiers: !harness, ..SimIo::default() }
        } else {
            logging_io()
        };
        let (report, result) =
            run_generalization(run, io).map_err(|e| e.in_stage("generalization"))?;
        let path = dirs.reports.join("generalization.jsonl");
        write_jsonl(&path, &report.rows).map_err(|e| e.in_stage("generalization"))?;
        summary.reports.push("reports/generalization.jsonl".into());
        if !artifacts_written {
            if let Some(result) = result {
                write_sim_checkpoints(&dirs, &result).map_err(|e| e.in_stage("generalization"))?;
                summary.events_total = result.events_total;
                summary.embedding_records = result.embedding_records;
                summary.join_missing = result.join_missing;
            }
        }
    }

    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary encode: {e}")))?;
    std::fs::write(dirs.root.join("run.json"), summary_json + "\n")?;
    Ok(summary)
}
