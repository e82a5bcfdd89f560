//! Per-surface expert models.
//!
//! An expert ingests materialized foundation-model embeddings through an
//! embedding module (normalization plus train-time noising), fuses them with
//! the output of its own small short-term encoder, mixes in surface
//! features, and predicts its surface's tasks. Experts never touch
//! foundation-model weights: embeddings arrive as constant input features.
//!
//! The module also defines the two comparison models used by the evaluation
//! harness: a one-stage baseline (same architecture with the embedding
//! pathway removed and the short-term encoder enlarged), and a user-embedding
//! pathway fed by a stale, target-independent pooled history summary.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::{
    build_unified_sequence, encode, init_encoder_params, EncoderConfig, ItemFeatures,
};
use crate::error::{Error, Result};
use crate::fm::{LossReport, TaskLoss, TaskSpec};
use crate::graph::{Tape, Var};
use crate::params::{adam_step, merge_grads, AdamConfig, AdamState, ParamSet, TapeParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Prefix of the expert's short-term encoder blocks.
pub const EXPERT_ST_PREFIX: &str = "expert.st";

/// Block prefixes freshly initialized (not copied) by `warm_start`.
pub const WARM_START_EXCLUDED: &[&str] = &["expert.fmemb.", "expert.uemb.", "expert.fuse."];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub surface_id: u32,
    /// The single foundation-model version this expert consumes.
    pub fm_version: String,
    /// Dimension of the consumed target-aware embeddings.
    pub fm_dim: usize,
    /// Target-aware embedding pathway on/off (off for the one-stage baseline).
    pub use_tae: bool,
    /// User-embedding pathway on/off.
    pub use_ue: bool,
    pub ue_dim: usize,
    pub short_encoder: EncoderConfig,
    pub short_history_len: usize,
    pub tasks: Vec<TaskSpec>,
    pub fusion_hidden: usize,
    pub fusion_out: usize,
    pub xf_hidden: usize,
    pub surface_feature_dim: usize,
    /// Train-time gaussian noise applied after embedding normalization.
    pub noise_sigma: f64,
    /// Train-time dropout rate on the normalized embedding.
    pub dropout_rho: f64,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        self.short_encoder.validate()?;
        if self.short_encoder.max_history != self.short_history_len {
            return Err(Error::Config(format!(
                "short_history_len {} must equal short_encoder.max_history {}",
                self.short_history_len, self.short_encoder.max_history
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("expert needs at least one task".into()));
        }
        for t in &self.tasks {
            if t.weight <= 0.0 {
                return Err(Error::Config(format!("task {} weight must be positive", t.name)));
            }
        }
        if self.use_tae && self.fm_dim == 0 {
            return Err(Error::Config("fm_dim must be positive".into()));
        }
        if self.use_ue && self.ue_dim == 0 {
            return Err(Error::Config("ue_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rho) {
            return Err(Error::Config("dropout_rho must be in [0, 1)".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        for (name, v) in [
            ("fusion_hidden", self.fusion_hidden),
            ("fusion_out", self.fusion_out),
            ("xf_hidden", self.xf_hidden),
            ("surface_feature_dim", self.surface_feature_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("expert {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the fusion input: enabled pathways plus the short-term
    /// representation.
    pub fn fusion_input_dim(&self) -> usize {
        let mut dim = self.short_encoder.dim;
        if self.use_tae {
            dim += self.fm_dim;
        }
        if self.use_ue {
            dim += self.ue_dim;
        }
        dim
    }

    /// The one-stage comparison model for this expert: embedding pathways
    /// removed, short-term encoder enlarged to the given foundation-model
    /// encoder scale.
    pub fn one_stage_baseline(&self, fm_encoder: &EncoderConfig) -> ExpertConfig {
        ExpertConfig {
            use_tae: false,
            use_ue: false,
            short_encoder: fm_encoder.clone(),
            short_history_len: fm_encoder.max_history,
            ..self.clone()
        }
    }
}

/// One candidate item with its logged embedding and labels.
#[derive(Debug, Clone)]
pub struct ExpertCandidate {
    pub item: ItemFeatures,
    /// (version tag, vector) from the embedding log; consulted only when the
    /// target-aware pathway is enabled.
    pub fm_embedding: Option<(String, Vec<f64>)>,
    pub labels: BTreeMap<String, bool>,
    pub surface_features: Vec<f64>,
}

/// One expert request: recent history plus candidates on one surface.
#[derive(Debug, Clone)]
pub struct ExpertRequest {
    pub short_history: Vec<ItemFeatures>,
    pub surface: u32,
    pub candidates: Vec<ExpertCandidate>,
    /// Target-independent user summary for the user-embedding pathway.
    pub user_embedding: Option<Vec<f64>>,
}

pub enum ForwardMode<'a> {
    Train { rng: &'a mut Rng },
    Infer,
}

/// Fresh expert parameters for a configuration.
pub fn init_expert_params(cfg: &ExpertConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, EXPERT_ST_PREFIX, &cfg.short_encoder, seed);
    if cfg.use_tae {
        params.insert("expert.fmemb.gain", Tensor::filled(1, cfg.fm_dim, 1.0));
        params.insert("expert.fmemb.bias", Tensor::zeros(1, cfg.fm_dim));
    }
    if cfg.use_ue {
        params.insert("expert.uemb.gain", Tensor::filled(1, cfg.ue_dim, 1.0));
        params.insert("expert.uemb.bias", Tensor::zeros(1, cfg.ue_dim));
    }
    let rand = |name: String, rows: usize, cols: usize| {
        let mut rng = Rng::stream(seed, &name);
        let t = Tensor::new(rows, cols, rng.normal_vec(rows * cols, (1.0 / rows as f64).sqrt()))
            .unwrap();
        (name, t)
    };
    // The fusion input rows are initialized per pathway (in forward order:
    // embedding, user summary, short-term) with pathway-keyed streams, so
    // models differing only in enabled pathways share the rows they have in
    // common. The user-summary rows start at zero: that pathway contributes
    // nothing until training warrants it.
    let fin = cfg.fusion_input_dim();
    let mut w1 = Tensor::zeros(fin, cfg.fusion_hidden);
    let mut at = 0;
    let mut fill_rows = |w1: &mut Tensor, rows: usize, label: &str, zero: bool, at: &mut usize| {
        let mut rng = Rng::stream(seed, &format!("expert.fuse.w1#{label}"));
        let std = (1.0 / fin as f64).sqrt();
        for r in 0..rows {
            for c in 0..cfg.fusion_hidden {
                let v = if zero { 0.0 } else { rng.normal() * std };
                w1.set(*at + r, c, v);
            }
        }
        *at += rows;
    };
    if cfg.use_tae {
        fill_rows(&mut w1, cfg.fm_dim, "fm", false, &mut at);
    }
    if cfg.use_ue {
        fill_rows(&mut w1, cfg.ue_dim, "ue", true, &mut at);
    }
    fill_rows(&mut w1, cfg.short_encoder.dim, "st", false, &mut at);
    params.insert("expert.fuse.w1", w1);
    params.insert("expert.fuse.b1", Tensor::zeros(1, cfg.fusion_hidden));
    // Zero output layer: a fresh fusion module contributes nothing until
    // trained, so downstream blocks copied from a donor stay calibrated.
    params.insert(
        "expert.fuse.w2",
        Tensor::zeros(cfg.fusion_hidden, cfg.fusion_out),
    );
    params.insert("expert.fuse.b2", Tensor::zeros(1, cfg.fusion_out));
    let (n, t) = rand(
        "expert.xf.w1".into(),
        cfg.fusion_out + cfg.surface_feature_dim,
        cfg.xf_hidden,
    );
    params.insert(n, t);
    params.insert("expert.xf.b1", Tensor::zeros(1, cfg.xf_hidden));
    for task in &cfg.tasks {
        params.insert(format!("expert.head.{}.w", task.name), Tensor::zeros(cfg.xf_hidden, 1));
        params.insert(format!("expert.head.{}.b", task.name), Tensor::zeros(1, 1));
    }
    Ok(params)
}

/// Embedding module: layer-norm then learned affine; at train time adds
/// seeded gaussian noise and applies inverted dropout.
fn embedding_module(
    tape: &mut Tape,
    tp: &TapeParams,
    block: &str,
    e: Var,
    sigma: f64,
    rho: f64,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let x = tape.layer_norm(e);
    let x = tape.mul(x, tp.var(&format!("{block}.gain"))?)?;
    let mut x = tape.add(x, tp.var(&format!("{block}.bias"))?)?;
    if let ForwardMode::Train { rng } = mode {
        let (rows, cols) = tape.value(x).shape();
        if sigma > 0.0 {
            let noise = Tensor::new(rows, cols, rng.normal_vec(rows * cols, sigma))?;
            let noise = tape.leaf(noise);
            x = tape.add(x, noise)?;
        }
        if rho > 0.0 {
            let keep = 1.0 - rho;
            let mask_data: Vec<f64> = (0..rows * cols)
                .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = tape.leaf(Tensor::new(rows, cols, mask_data)?);
            x = tape.mul(x, mask)?;
        }
    }
    Ok(x)
}

/// Inference-mode embedding module on a plain vector.
pub fn fm_embedding_module_infer(params: &ParamSet, e: &[f64]) -> Result<Vec<f64>> {
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fm embedding input".into()));
    }
    let mut tape = Tape::new();
    let tp = params.tape_vars(&mut tape);
    let leaf = tape.leaf(Tensor::row_vector(e.to_vec()));
    let mut mode = ForwardMode::Infer;
    let out = embedding_module(&mut tape, &tp, "expert.fmemb", leaf, 0.0, 0.0, &mut mode)?;
    Ok(tape.value(out).row(0).to_vec())
}

/// Graph handles for one expert request.
pub struct ExpertRequestOutput {
    /// Task name -> M x 1 logits.
    pub logits: BTreeMap<String, Var>,
}

/// Forward one request through the expert.
pub fn expert_forward(
    tape: &mut Tape,
    tp: &TapeParams,
    cfg: &ExpertConfig,
    req: &ExpertRequest,
    mode: &mut ForwardMode,
) -> Result<ExpertRequestOutput> {
    if req.candidates.is_empty() {
        return Err(Error::Contract("expert request carries no candidates".into()));
    }
    let m = req.candidates.len();

    let mut parts: Vec<Var> = Vec::new();
    if cfg.use_tae {
        let mut emb = Tensor::zeros(m, cfg.fm_dim);
        for (r, cand) in req.candidates.iter().enumerate() {
            let (version, vec) = cand.fm_embedding.as_ref().ok_or_else(|| {
                Error::Contract(format!("candidate {} has no fm embedding", cand.item.item_id))
            })?;
            if version != &cfg.fm_version {
                return Err(Error::VersionMismatch {
                    expected: cfg.fm_version.clone(),
                    got: version.clone(),
                });
            }
            if vec.len() != cfg.fm_dim {
                return Err(Error::Contract(format!(
                    "fm embedding has {} dims, config says {}",
                    vec.len(),
                    cfg.fm_dim
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("fm embedding input".into()));
            }
            emb.row_mut(r).copy_from_slice(vec);
        }
        let leaf = tape.leaf(emb);
        parts.push(embedding_module(
            tape,
            tp,
            "expert.fmemb",
            leaf,
            cfg.noise_sigma,
            cfg.dropout_rho,
            mode,
        )?);
    }
    if cfg.use_ue {
        let ue = req.user_embedding.as_ref().ok_or_else(|| {
            Error::Contract("user-embedding pathway enabled but request carries none".into())
        })?;
        if ue.len() != cfg.ue_dim {
            return Err(Error::Contract(format!(
                "user embedding has {} dims, config says {}",
                ue.len(),
                cfg.ue_dim
            )));
        }
        // Same summary for every candidate: target-independent by
        // construction.
        let mut rows = Tensor::zeros(m, cfg.ue_dim);
        for r in 0..m {
            rows.row_mut(r).copy_from_slice(ue);
        }
        let leaf = tape.leaf(rows);
        parts.push(embedding_module(
            tape,
            tp,
            "expert.uemb",
            leaf,
            cfg.noise_sigma,
            cfg.dropout_rho,
            mode,
        )?);
    }

    let start = req
        .short_history
        .len()
        .saturating_sub(cfg.short_history_len);
    let targets: Vec<ItemFeatures> = req.candidates.iter().map(|c| c.item.clone()).collect();
    let seq = build_unified_sequence(
        tape,
        tp,
        EXPERT_ST_PREFIX,
        &cfg.short_encoder,
        &req.short_history[start..],
        &targets,
    )?;
    let short = encode(tape, tp, EXPERT_ST_PREFIX, &cfg.short_encoder, &seq)?;
    parts.push(short);

    let mut fin = parts[0];
    for &p in &parts[1..] {
        fin = tape.concat_cols(fin, p)?;
    }

    let h = tape.matmul(fin, tp.var("expert.fuse.w1")?)?;
    let h = tape.add(h, tp.var("expert.fuse.b1")?)?;
    let h = tape.silu(h);
    let fused = tape.matmul(h, tp.var("expert.fuse.w2")?)?;
    let fused = tape.add(fused, tp.var("expert.fuse.b2")?)?;

    let mut feats = Tensor::zeros(m, cfg.surface_feature_dim);
    for (r, cand) in req.candidates.iter().enumerate() {
        if cand.surface_features.len() != cfg.surface_feature_dim {
            return Err(Error::Contract(format!(
                "surface feature vector has {} entries, config says {}",
                cand.surface_features.len(),
                cfg.surface_feature_dim
            )));
        }
        feats.row_mut(r).copy_from_slice(&cand.surface_features);
    }
    let feats = tape.leaf(feats);
    let xin = tape.concat_cols(fused, feats)?;
    let x = tape.matmul(xin, tp.var("expert.xf.w1")?)?;
    let x = tape.add(x, tp.var("expert.xf.b1")?)?;
    let x = tape.silu(x);

    let mut logits = BTreeMap::new();
    for task in &cfg.tasks {
        let w = tp.var(&format!("expert.head.{}.w", task.name))?;
        let b = tp.var(&format!("expert.head.{}.b", task.name))?;
        let z = tape.matmul(x, w)?;
        let z = tape.add(z, b)?;
        logits.insert(task.name.clone(), z);
    }
    Ok(ExpertRequestOutput { logits })
}

/// Per-task probabilities for one request at inference.
pub fn expert_predict(
    params: &ParamSet,
    cfg: &ExpertConfig,
    req: &ExpertRequest,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    let tp = params.tape_vars(&mut tape);
    let out = expert_forward(&mut tape, &tp, cfg, req, &mut ForwardMode::Infer)?;
    let mut probs = BTreeMap::new();
    for (name, var) in &out.logits {
        let p = tape.sigmoid(*var);
        probs.insert(name.clone(), tape.value(p).data().to_vec());
    }
    Ok(probs)
}

fn request_loss_sums(
    tape: &mut Tape,
    out: &ExpertRequestOutput,
    cfg: &ExpertConfig,
    req: &ExpertRequest,
) -> Result<BTreeMap<String, Var>> {
    let m = req.candidates.len();
    let mut sums = BTreeMap::new();
    for task in &cfg.tasks {
        let Some(&logits) = out.logits.get(&task.name) else {
            continue;
        };
        let mut labels = Tensor::zeros(m, 1);
        let mut mask = Tensor::zeros(m, 1);
        let mut any = false;
        for (r, cand) in req.candidates.iter().enumerate() {
            if let Some(&y) = cand.labels.get(&task.name) {
                labels.set(r, 0, if y { 1.0 } else { 0.0 });
                mask.set(r, 0, 1.0);
                any = true;
            }
        }
        if !any {
            continue;
        }
        let probs = tape.sigmoid(logits);
        let losses = tape.bce(probs, labels)?;
        let mask = tape.leaf(mask);
        let masked = tape.mul(losses, mask)?;
        sums.insert(task.name.clone(), tape.sum_all(masked));
    }
    Ok(sums)
}

/// One expert train step. Contract mirrors the foundation-model step, except
/// gradients can never reach foundation-model weights: the embeddings are
/// constant inputs.
pub fn expert_train_step(
    batch: &[ExpertRequest],
    params: &mut ParamSet,
    state: &mut AdamState,
    cfg: &ExpertConfig,
    opt: &AdamConfig,
    step_seed: u64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut counts: BTreeMap<String, usize> =
        cfg.tasks.iter().map(|t| (t.name.clone(), 0)).collect();
    for req in batch {
        for cand in &req.candidates {
            for task in &cfg.tasks {
                if cand.labels.contains_key(&task.name) {
                    *counts.get_mut(&task.name).unwrap() += 1;
                }
            }
        }
    }
    let coeffs: BTreeMap<String, f64> = cfg
        .tasks
        .iter()
        .map(|t| {
            let n = counts[&t.name];
            (t.name.clone(), if n > 0 { t.weight / n as f64 } else { 0.0 })
        })
        .collect();

    let shared = &*params;
    let results: Vec<Result<(BTreeMap<String, Tensor>, BTreeMap<String, f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, req)| {
            let mut tape = Tape::new();
            let tp = shared.tape_vars(&mut tape);
            let mut rng = Rng::stream(step_seed, &format!("expert-req-{i}"));
            let mut mode = ForwardMode::Train { rng: &mut rng };
            let out = expert_forward(&mut tape, &tp, cfg, req, &mut mode)?;
            let sums = request_loss_sums(&mut tape, &out, cfg, req)?;
            let mut weighted: Option<Var> = None;
            let mut values = BTreeMap::new();
            for (name, sum) in &sums {
                values.insert(name.clone(), tape.value(*sum).item());
                let c = coeffs[name];
                if c == 0.0 {
                    continue;
                }
                let scaled = tape.scale(*sum, c);
                weighted = Some(match weighted {
                    Some(w) => tape.add(w, scaled)?,
                    None => scaled,
                });
            }
            let grads = match weighted {
                Some(w) => {
                    tape.check_finite(w, "request loss")?;
                    let mut grads = tape.backward(w)?;
                    tp.collect_grads(&mut grads)
                }
                None => BTreeMap::new(),
            };
            Ok((grads, values))
        })
        .collect();

    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for r in results {
        let (g, values) = r?;
        merge_grads(&mut grads, g);
        for (name, v) in values {
            *sums.entry(name).or_insert(0.0) += v;
        }
    }

    let mut report = LossReport::default();
    for task in &cfg.tasks {
        let n = counts[&task.name];
        let mean = if n > 0 {
            sums.get(&task.name).copied().unwrap_or(0.0) / n as f64
        } else {
            0.0
        };
        report.total += task.weight * mean;
        report.tasks.insert(
            task.name.clone(),
            TaskLoss {
                loss: mean,
                weight: task.weight,
                examples: n,
                skipped: n == 0,
            },
        );
    }
    if !report.total.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    adam_step(params, &grads, state, opt)?;
    Ok(report)
}

/// Copy every block from the donor except the embedding-module and fusion-
/// module blocks, which keep their fresh initialization. Donor blocks must
/// exist with matching shapes for everything copied.
pub fn warm_start(target: &mut ParamSet, donor: &ParamSet) -> Result<()> {
    let excluded =
        |name: &str| WARM_START_EXCLUDED.iter().any(|p| name.starts_with(p));
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut to_copy = Vec::new();
    for (name, block) in target.iter() {
        if excluded(name) {
            continue;
        }
        match donor.get(name) {
            None => missing.push(name.to_string()),
            Some(d) if d.tensor.shape() != block.tensor.shape() => {
                mismatched.push(format!(
                    "{name} ({:?} vs {:?})",
                    block.tensor.shape(),
                    d.tensor.shape()
                ));
            }
            Some(d) => to_copy.push((name.to_string(), d.clone())),
        }
    }
    if !missing.is_empty() || !mismatched.is_empty() {
        return Err(Error::BlockShape(format!(
            "warm start: missing [{}], mismatched [{}]",
            missing.join(", "),
            mismatched.join(", ")
        )));
    }
    for (name, block) in to_copy {
        target.insert_block(name, block);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Analytic FLOP meter
//
// Counts multiply-accumulates (x2 flops) of the dense matmuls and attention
// products in one forward pass. Normalizations, activations, and bias adds
// are omitted on both sides of any ratio.
// ---------------------------------------------------------------------------

/// Forward FLOPs of the sequence encoder on n_history + n_targets positions.
pub fn encoder_forward_flops(cfg: &EncoderConfig, n_history: usize, n_targets: usize) -> u64 {
    let s = (n_history.min(cfg.max_history) + n_targets) as u64;
    let d = cfg.dim as u64;
    let concat = (cfg.item_embed_dim + cfg.ctx_embed_dim) as u64;
    let hidden = cfg.fuse_hidden as u64;
    let fuse = 2 * s * concat * d + 2 * s * concat * hidden + 2 * s * hidden * d;
    let projections = 5 * 2 * s * d * d;
    let attention = 2 * (2 * s * s * d);
    fuse + cfg.layers as u64 * (projections + attention)
}

fn perceptron_flops(rows: u64, shapes: &[(u64, u64)]) -> u64 {
    shapes.iter().map(|&(i, o)| 2 * rows * i * o).sum()
}

/// Forward FLOPs of one expert request with the given history length and
/// candidate count.
pub fn expert_forward_flops(cfg: &ExpertConfig, n_history: usize, n_candidates: usize) -> u64 {
    let m = n_candidates as u64;
    let st = encoder_forward_flops(&cfg.short_encoder, n_history, n_candidates);
    let fuse = perceptron_flops(
        m,
        &[
            (cfg.fusion_input_dim() as u64, cfg.fusion_hidden as u64),
            (cfg.fusion_hidden as u64, cfg.fusion_out as u64),
        ],
    );
    let xf = perceptron_flops(
        m,
        &[(
            (cfg.fusion_out + cfg.surface_feature_dim) as u64,
            cfg.xf_hidden as u64,
        )],
    );
    let heads = perceptron_flops(m, &[(cfg.xf_hidden as u64, 1)]) * cfg.tasks.len() as u64;
    st + fuse + xf + heads
}

/// Expert-to-baseline forward compute ratio for a surface, both models
/// evaluated on the same request shape (full history, M candidates).
pub fn compute_budget_ratio(
    expert: &ExpertConfig,
    baseline: &ExpertConfig,
    n_history: usize,
    n_candidates: usize,
) -> f64 {
    let e = expert_forward_flops(expert, n_history, n_candidates) as f64;
    let b = expert_forward_flops(baseline, n_history, n_candidates) as f64;
    e / b
}
