//! Run configuration: one validated document drives generation, training,
//! synchronization, serving, and the experiment pipelines. Unknown keys are
//! rejected at parse time.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::fm::{FmConfig, TaskSpec};
use crate::stream::{StreamConfig, SurfaceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentSelection {
    Transfer,
    Ablation,
    Generalization,
    /// Every experiment in sequence (the smoke configuration uses this).
    All,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    /// Fraction of blocks published per tick.
    pub fraction: f64,
    /// Publish period in simulated seconds.
    pub period: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Candidates accumulated before a train step.
    pub batch_candidates: usize,
    pub fm_lr: f64,
    pub expert_lr: f64,
    /// Final fraction of simulated time held out for evaluation.
    pub eval_holdout_frac: f64,
    /// Fraction of simulated time used to train the warm-start donor.
    pub donor_frac: f64,
    /// Embedding-consuming comparison experts (ablation and generalization
    /// variants) start training after this fraction of simulated time, once
    /// the foundation model's logged embeddings have matured.
    pub comparison_start_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingJoinPolicy {
    /// Drop examples whose embeddings were never logged.
    SkipExample,
    /// Substitute a zero embedding.
    ZeroEmbedding,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmArchConfig {
    pub encoder: EncoderConfig,
    pub align_hidden: usize,
    /// Architecture-specific learning rate; larger stacks want a cooler
    /// one. Falls back to `train.fm_lr`.
    #[serde(default)]
    pub lr: Option<f64>,
}

impl FmArchConfig {
    pub fn lr_or(&self, fallback: f64) -> f64 {
        self.lr.unwrap_or(fallback)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertArchConfig {
    pub short_encoder: EncoderConfig,
    pub fusion_hidden: usize,
    pub fusion_out: usize,
    pub xf_hidden: usize,
    pub noise_sigma: f64,
    pub dropout_rho: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeConfig {
    /// A user's summary is recomputed once this many global events have
    /// passed since it was cached (freshness of hours, not minutes).
    pub refresh_events: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizationConfig {
    pub surface: u32,
    /// Share of the surface's data the foundation model trains on.
    pub fm_share: f64,
    /// The one surface task kept as a foundation-model auxiliary.
    pub included_task: String,
    /// Tasks withheld from foundation-model training and evaluated on the
    /// expert.
    pub withheld_tasks: Vec<String>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub experiment: ExperimentSelection,
    pub stream: StreamConfig,
    /// Data-to-trainer latency in simulated seconds.
    pub join_latency: u64,
    /// Fraction of impressed candidates the logging tier materializes.
    pub log_fraction: f64,
    pub missing_join: MissingJoinPolicy,
    pub sync: SyncConfig,
    pub train: TrainConfig,
    pub fm_small: FmArchConfig,
    pub fm_large: FmArchConfig,
    pub fm_downsample: BTreeMap<u32, f64>,
    pub expert_downsample: BTreeMap<u32, f64>,
    /// Surfaces that get expert models in the transfer experiment.
    pub expert_surfaces: Vec<u32>,
    pub expert_arch: ExpertArchConfig,
    pub ue: UeConfig,
    pub ablation_surface: u32,
    pub generalization: GeneralizationConfig,
    pub aux_feature_dim: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        if self.aux_feature_dim != self.stream.aux_feature_dim {
            return Err(Error::Config(format!(
                "aux_feature_dim {} must match stream.aux_feature_dim {}",
                self.aux_feature_dim, self.stream.aux_feature_dim
            )));
        }
        if !(self.log_fraction > 0.0 && self.log_fraction <= 1.0) {
            return Err(Error::Config("log_fraction must be in (0, 1]".into()));
        }
        if !(self.sync.fraction > 0.0 && self.sync.fraction <= 1.0) {
            return Err(Error::Config("sync.fraction must be in (0, 1]".into()));
        }
        if self.sync.period == 0 {
            return Err(Error::Config("sync.period must be positive".into()));
        }
        if self.train.batch_candidates == 0 {
            return Err(Error::Config("train.batch_candidates must be positive".into()));
        }
        if !(self.train.eval_holdout_frac > 0.0 && self.train.eval_holdout_frac < 1.0) {
            return Err(Error::Config("train.eval_holdout_frac must be in (0, 1)".into()));
        }
        if !(self.train.donor_frac > 0.0
            && self.train.donor_frac < 1.0 - self.train.eval_holdout_frac)
        {
            return Err(Error::Config(
                "train.donor_frac must leave room before the evaluation holdout".into(),
            ));
        }
        if !(self.train.comparison_start_frac >= 0.0
            && self.train.comparison_start_frac < 1.0 - self.train.eval_holdout_frac)
        {
            return Err(Error::Config(
                "train.comparison_start_frac must leave room before the evaluation holdout".into(),
            ));
        }
        self.fm_config(&self.fm_small, &[])?.validate()?;
        self.fm_config(&self.fm_large, &[])?.validate()?;
        for ratios in [&self.fm_downsample, &self.expert_downsample] {
            for (&surface, &r) in ratios {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::Config(format!(
                        "downsample ratio for surface {surface} must be in (0, 1], got {r}"
                    )));
                }
            }
        }
        for &s in &self.expert_surfaces {
            if !self.stream.surfaces.iter().any(|sc| sc.id == s) {
                return Err(Error::Config(format!("expert surface {s} not in stream")));
            }
        }
        if !self
            .stream
            .surfaces
            .iter()
            .any(|sc| sc.id == self.ablation_surface)
        {
            return Err(Error::Config(format!(
                "ablation surface {} not in stream",
                self.ablation_surface
            )));
        }
        let g = &self.generalization;
        let gsurf = self
            .stream
            .surfaces
            .iter()
            .find(|sc| sc.id == g.surface)
            .ok_or_else(|| {
                Error::Config(format!("generalization surface {} not in stream", g.surface))
            })?;
        if !gsurf.tasks.contains(&g.included_task) {
            return Err(Error::Config(format!(
                "generalization included task {} not on surface {}",
                g.included_task, g.surface
            )));
        }
        for t in &g.withheld_tasks {
            if !gsurf.tasks.contains(t) {
                return Err(Error::Config(format!(
                    "withheld task {t} not on surface {}",
                    g.surface
                )));
            }
            if t == &g.included_task {
                return Err(Error::Config(format!(
                    "task {t} cannot be both included and withheld"
                )));
            }
        }
        if !(g.fm_share > 0.0 && g.fm_share <= 1.0) {
            return Err(Error::Config("generalization fm_share must be in (0, 1]".into()));
        }
        if g.seeds.is_empty() {
            return Err(Error::Config("generalization needs at least one seed".into()));
        }
        self.expert_arch.short_encoder.validate()?;
        Ok(())
    }

    /// Foundation-model task list: the universal main tasks plus one scoped
    /// auxiliary per surface task, minus anything excluded.
    pub fn fm_task_specs(&self, exclude: &[String]) -> Vec<TaskSpec> {
        let mut tasks: Vec<TaskSpec> = self
            .stream
            .main_tasks
            .iter()
            .map(|t| TaskSpec::main(t.clone()))
            .collect();
        for surface in &self.stream.surfaces {
            for t in &surface.tasks {
                if !exclude.contains(t) {
                    tasks.push(TaskSpec::aux(t.clone(), [surface.id]));
                }
            }
        }
        tasks
    }

    /// Full foundation-model configuration for an architecture, with the
    /// given tasks excluded from alignment.
    pub fn fm_config(&self, arch: &FmArchConfig, exclude: &[String]) -> Result<FmConfig> {
        Ok(FmConfig {
            encoder: arch.encoder.clone(),
            tasks: self.fm_task_specs(exclude),
            surfaces: self.stream.surfaces.iter().map(|s| s.id).collect(),
            align_hidden: arch.align_hidden,
            aux_feature_dim: self.aux_feature_dim,
        })
    }

    /// Expert tasks for a surface: the main tasks plus the surface's own.
    pub fn expert_task_specs(&self, surface: u32) -> Vec<TaskSpec> {
        self.stream
            .tasks_on_surface(surface)
            .into_iter()
            .map(TaskSpec::main)
            .collect()
    }

    /// Build an expert configuration pinned to one foundation-model version.
    pub fn expert_config(
        &self,
        surface: u32,
        fm_version: &str,
        fm_dim: usize,
        use_tae: bool,
        use_ue: bool,
        tasks: Vec<TaskSpec>,
    ) -> ExpertConfig {
        let arch = &self.expert_arch;
        ExpertConfig {
            surface_id: surface,
            fm_version: fm_version.to_string(),
            fm_dim,
            use_tae,
            use_ue,
            ue_dim: fm_dim,
            short_encoder: arch.short_encoder.clone(),
            short_history_len: arch.short_encoder.max_history,
            tasks,
            fusion_hidden: arch.fusion_hidden,
            fusion_out: arch.fusion_out,
            xf_hidden: arch.xf_hidden,
            surface_feature_dim: self.aux_feature_dim,
            noise_sigma: arch.noise_sigma,
            dropout_rho: arch.dropout_rho,
        }
    }

    pub fn eval_start_ts(&self) -> u64 {
        let horizon = self.stream.horizon() as f64;
        (horizon * (1.0 - self.train.eval_holdout_frac)) as u64
    }

    pub fn donor_end_ts(&self) -> u64 {
        (self.stream.horizon() as f64 * self.train.donor_frac) as u64
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config encode: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn four_surfaces() -> Vec<SurfaceConfig> {
    vec![
        SurfaceConfig {
            id: 0,
            share: 1.0,
            tasks: vec![],
        },
        SurfaceConfig {
            id: 1,
            share: 1.0,
            tasks: vec![
                "surface_b_task_1".into(),
                "surface_b_task_2".into(),
                "surface_b_task_3".into(),
            ],
        },
        SurfaceConfig {
            id: 2,
            share: 1.0,
            tasks: vec![
                "surface_c_task_1".into(),
                "surface_c_task_2".into(),
                "surface_c_task_3".into(),
            ],
        },
        SurfaceConfig {
            id: 3,
            share: 1.0,
            tasks: vec![
                "surface_d_task_0".into(),
                "surface_d_task_1".into(),
                "surface_d_task_2".into(),
                "surface_d_task_3".into(),
                "surface_d_task_4".into(),
            ],
        },
    ]
}

fn main_tasks() -> Vec<String> {
    vec![
        "like".into(),
        "share".into(),
        "video_complete".into(),
        "video_view_duration".into(),
    ]
}

fn small_fm_encoder() -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        layers: 1,
        max_history: 2,
        item_embed_dim: 8,
        ctx_embed_dim: 4,
        item_buckets: 2048,
        ctx_buckets: 128,
        action_kinds: 5,
        fuse_hidden: 12,
        fuse_identity: false,
    }
}

fn large_fm_encoder() -> EncoderConfig {
    EncoderConfig {
        dim: 24,
        layers: 2,
        max_history: 16,
        item_embed_dim: 24,
        ctx_embed_dim: 12,
        item_buckets: 4096,
        ctx_buckets: 128,
        action_kinds: 5,
        fuse_hidden: 36,
        fuse_identity: false,
    }
}

fn default_expert_arch() -> ExpertArchConfig {
    ExpertArchConfig {
        short_encoder: EncoderConfig {
            dim: 16,
            layers: 1,
            max_history: 8,
            item_embed_dim: 16,
            ctx_embed_dim: 8,
            item_buckets: 1024,
            ctx_buckets: 64,
            action_kinds: 5,
            fuse_hidden: 24,
            fuse_identity: false,
        },
        fusion_hidden: 48,
        fusion_out: 32,
        xf_hidden: 32,
        noise_sigma: 0.02,
        dropout_rho: 0.05,
    }
}

fn base_config(experiment: ExperimentSelection) -> RunConfig {
    RunConfig {
        seed: 17,
        experiment,
        stream: StreamConfig {
            n_users: 400,
            n_items: 800,
            surfaces: four_surfaces(),
            days: 10,
            requests_per_day: 5_000,
            candidates_per_request: 4,
            latent_dim: 6,
            item_clusters: 12,
            drift_per_day: 0.04,
            recency_halflife: 8.0,
            history_window: 20,
            kernel_sharpness: 4.0,
            related_candidate_prob: 0.5,
            main_tasks: main_tasks(),
            aux_feature_dim: 4,
        },
        join_latency: 1_800,
        log_fraction: 1.0,
        missing_join: MissingJoinPolicy::SkipExample,
        sync: SyncConfig {
            fraction: 0.3,
            period: 60,
        },
        train: TrainConfig {
            batch_candidates: 32,
            fm_lr: 3e-3,
            expert_lr: 3e-3,
            eval_holdout_frac: 0.2,
            donor_frac: 0.4,
            comparison_start_frac: 0.25,
        },
        fm_small: FmArchConfig {
            encoder: small_fm_encoder(),
            align_hidden: 16,
            lr: None,
        },
        fm_large: FmArchConfig {
            encoder: large_fm_encoder(),
            align_hidden: 32,
            lr: Some(1.5e-3),
        },
        fm_downsample: [(0, 0.8), (1, 0.8), (2, 0.8), (3, 0.8)].into_iter().collect(),
        expert_downsample: BTreeMap::new(),
        expert_surfaces: vec![0, 1],
        expert_arch: default_expert_arch(),
        ue: UeConfig {
            refresh_events: 3_000,
        },
        ablation_surface: 0,
        generalization: GeneralizationConfig {
            surface: 3,
            fm_share: 0.2,
            included_task: "surface_d_task_0".into(),
            withheld_tasks: vec![
                "surface_d_task_1".into(),
                "surface_d_task_2".into(),
                "surface_d_task_3".into(),
                "surface_d_task_4".into(),
            ],
            seeds: vec![101, 202, 303],
        },
        aux_feature_dim: 4,
    }
}

/// The shipped transfer-experiment configuration (Table-2 analog scale).
pub fn transfer_config() -> RunConfig {
    base_config(ExperimentSelection::Transfer)
}

/// The shipped ablation configuration (Table-1 analog).
pub fn ablation_config() -> RunConfig {
    let mut cfg = base_config(ExperimentSelection::Ablation);
    cfg.stream.days = 8;
    cfg.stream.requests_per_day = 2_500;
    cfg
}

/// The shipped generalization configuration (Table-3 analog).
pub fn generalization_config() -> RunConfig {
    let mut cfg = base_config(ExperimentSelection::Generalization);
    cfg.stream.days = 8;
    cfg.stream.requests_per_day = 2_500;
    cfg
}

/// Minutes-scale end-to-end run exercising every stage.
pub fn smoke_config() -> RunConfig {
    let mut cfg = base_config(ExperimentSelection::All);
    cfg.stream.n_users = 80;
    cfg.stream.n_items = 400;
    cfg.stream.days = 4;
    cfg.stream.requests_per_day = 250;
    cfg.fm_small.encoder = EncoderConfig {
        dim: 8,
        layers: 1,
        max_history: 4,
        item_embed_dim: 8,
        ctx_embed_dim: 4,
        item_buckets: 256,
        ctx_buckets: 64,
        action_kinds: 5,
        fuse_hidden: 12,
        fuse_identity: false,
    };
    cfg.fm_small.align_hidden = 16;
    cfg.fm_large.encoder = EncoderConfig {
        dim: 12,
        layers: 1,
        max_history: 6,
        item_embed_dim: 12,
        ctx_embed_dim: 6,
        item_buckets: 256,
        ctx_buckets: 64,
        action_kinds: 5,
        fuse_hidden: 18,
        fuse_identity: false,
    };
    cfg.fm_large.align_hidden = 24;
    cfg.expert_arch.short_encoder = EncoderConfig {
        dim: 12,
        layers: 1,
        max_history: 6,
        item_embed_dim: 12,
        ctx_embed_dim: 6,
        item_buckets: 128,
        ctx_buckets: 32,
        action_kinds: 5,
        fuse_hidden: 16,
        fuse_identity: false,
    };
    cfg.expert_arch.fusion_hidden = 24;
    cfg.expert_arch.fusion_out = 16;
    cfg.expert_arch.xf_hidden = 16;
    cfg.generalization.seeds = vec![101];
    cfg
}

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "smoke" => Ok(smoke_config()),
        "transfer" => Ok(transfer_config()),
        "ablation" => Ok(ablation_config()),
        "generalization" => Ok(generalization_config()),
        other => Err(Error::Config(format!(
            "unknown preset {other}; expected smoke|transfer|ablation|generalization"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["smoke", "transfer", "ablation", "generalization"] {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut text = serde_json::to_string(&smoke_config()).unwrap();
        text = text.replacen("\"seed\"", "\"sneed\"", 1);
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sneed"), "{msg}");
    }

    #[test]
    fn roundtrip_preserves_config() {
        let cfg = transfer_config();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn fm_tasks_exclude_withheld() {
        let cfg = generalization_config();
        let tasks = cfg.fm_task_specs(&cfg.generalization.withheld_tasks);
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        assert!(names.contains(&"surface_d_task_0"));
        for withheld in &cfg.generalization.withheld_tasks {
            assert!(!names.contains(&withheld.as_str()), "{withheld} leaked");
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut cfg = smoke_config();
        cfg.sync.fraction = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = smoke_config();
        cfg.fm_downsample.insert(0, 1.5);
        assert!(cfg.validate().is_err());

        let mut cfg = smoke_config();
        cfg.generalization.included_task = "surface_d_task_1".into();
        // Included task also in withheld list.
        assert!(cfg.validate().is_err());
    }
}
