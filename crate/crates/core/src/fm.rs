//! Foundation model: the encoder wrapped with shared multi-task heads and a
//! per-surface alignment module, the weighted multi-task loss with sample-
//! space masking, streaming train steps, and the pruned inference subgraph.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::encoder::{
    build_unified_sequence, encode, init_encoder_params, is_encoder_block, EncoderConfig,
    ItemFeatures,
};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{
    adam_step, merge_grads, AdamConfig, AdamState, ParamSet, TapeParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Block-name prefix of every foundation-model parameter.
pub const FM_PREFIX: &str = "fm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Main,
    Aux,
}

/// One prediction task: shared main tasks apply everywhere, auxiliary tasks
/// are scoped to a set of surfaces.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Surfaces the task is defined on; `None` means universal (main only).
    pub surfaces: Option<BTreeSet<u32>>,
    pub weight: f64,
}

impl TaskSpec {
    pub fn main(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: TaskKind::Main,
            surfaces: None,
            weight: 1.0,
        }
    }

    pub fn aux(name: impl Into<String>, surfaces: impl IntoIterator<Item = u32>) -> Self {
        Self {
            name: name.into(),
            kind: TaskKind::Aux,
            surfaces: Some(surfaces.into_iter().collect()),
            weight: 1.0,
        }
    }

    pub fn applies_to(&self, surface: u32) -> bool {
        match &self.surfaces {
            None => true,
            Some(set) => set.contains(&surface),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight <= 0.0 || !self.weight.is_finite() {
            return Err(Error::Config(format!(
                "task {}: weight must be positive",
                self.name
            )));
        }
        match (self.kind, &self.surfaces) {
            (TaskKind::Main, Some(_)) => Err(Error::Config(format!(
                "main task {} must have universal scope",
                self.name
            ))),
            (TaskKind::Aux, None) => Err(Error::Config(format!(
                "aux task {} needs a surface scope",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmConfig {
    pub encoder: EncoderConfig,
    pub tasks: Vec<TaskSpec>,
    pub surfaces: Vec<u32>,
    pub align_hidden: usize,
    pub aux_feature_dim: usize,
}

impl FmConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !self.tasks.iter().any(|t| t.kind == TaskKind::Main) {
            return Err(Error::Config("at least one main task required".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task name {}", t.name)));
            }
            if let Some(scope) = &t.surfaces {
                for s in scope {
                    if !self.surfaces.contains(s) {
                        return Err(Error::Config(format!(
                            "task {} scoped to unknown surface {s}",
                            t.name
                        )));
                    }
                }
            }
        }
        if self.align_hidden == 0 || self.aux_feature_dim == 0 {
            return Err(Error::Config(
                "align_hidden and aux_feature_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn main_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.kind == TaskKind::Main)
    }

    pub fn aux_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.kind == TaskKind::Aux)
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

/// One candidate of a request with its labels. A task label present in
/// `labels` means the example is in that task's sample space.
#[derive(Debug, Clone)]
pub struct CandidateExample {
    pub item: ItemFeatures,
    pub labels: BTreeMap<String, bool>,
    pub aux_features: Vec<f64>,
}

/// One request: a user history snapshot plus its candidates, all on one
/// surface. Requests group candidates so they share one encoded sequence.
#[derive(Debug, Clone)]
pub struct LabeledRequest {
    pub history: Vec<ItemFeatures>,
    pub surface: u32,
    pub candidates: Vec<CandidateExample>,
}

/// Graph handles for one request's forward pass.
pub struct FmRequestOutput {
    /// M x d target-aware embeddings.
    pub embeddings: Var,
    /// Task name -> M x 1 logits.
    pub main_logits: BTreeMap<String, Var>,
    /// Aux task name -> M x 1 logits (tasks scoped to the request surface).
    pub aux_logits: BTreeMap<String, Var>,
}

/// Plain-value forward output for one request.
#[derive(Debug, Clone)]
pub struct FmOutput {
    pub embeddings: Vec<Vec<f64>>,
    pub main_probs: BTreeMap<String, Vec<f64>>,
    pub aux_probs: BTreeMap<String, Vec<f64>>,
}

/// Fresh foundation-model parameters: encoder blocks, one linear head per
/// main task, and a two-layer alignment perceptron per surface with one
/// output head per scoped aux task.
pub fn init_fm_params(cfg: &FmConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, FM_PREFIX, &cfg.encoder, seed);
    let d = cfg.encoder.dim;
    for task in cfg.main_tasks() {
        params.insert(format!("fm.head.{}.w", task.name), Tensor::zeros(d, 1));
        params.insert(format!("fm.head.{}.b", task.name), Tensor::zeros(1, 1));
    }
    for &surface in &cfg.surfaces {
        let scoped: Vec<&TaskSpec> = cfg.aux_tasks().filter(|t| t.applies_to(surface)).collect();
        if scoped.is_empty() {
            continue;
        }
        let fan_in = d + cfg.aux_feature_dim;
        let name = format!("fm.align.s{surface}.w1");
        let mut rng = Rng::stream(seed, &name);
        params.insert(
            name,
            Tensor::new(
                fan_in,
                cfg.align_hidden,
                rng.normal_vec(fan_in * cfg.align_hidden, (1.0 / fan_in as f64).sqrt()),
            )?,
        );
        params.insert(
            format!("fm.align.s{surface}.b1"),
            Tensor::zeros(1, cfg.align_hidden),
        );
        for task in scoped {
            params.insert(
                format!("fm.align.s{surface}.{}.w2", task.name),
                Tensor::zeros(cfg.align_hidden, 1),
            );
            params.insert(
                format!("fm.align.s{surface}.{}.b2", task.name),
                Tensor::zeros(1, 1),
            );
        }
    }
    Ok(params)
}

/// Forward one request: encode, then main heads on the target-aware
/// embeddings, then the surface's alignment module over embedding plus
/// auxiliary features.
pub fn fm_forward(
    tape: &mut Tape,
    tp: &TapeParams,
    cfg: &FmConfig,
    request: &LabeledRequest,
) -> Result<FmRequestOutput> {
    if !cfg.surfaces.contains(&request.surface) {
        return Err(Error::Config(format!(
            "unknown surface id {}",
            request.surface
        )));
    }
    if request.candidates.is_empty() {
        return Err(Error::Contract("request carries no candidates".into()));
    }
    let targets: Vec<ItemFeatures> = request
        .candidates
        .iter()
        .map(|c| c.item.clone())
        .collect();
    let seq = build_unified_sequence(tape, tp, FM_PREFIX, &cfg.encoder, &request.history, &targets)?;
    let embeddings = encode(tape, tp, FM_PREFIX, &cfg.encoder, &seq)?;

    let mut main_logits = BTreeMap::new();
    for task in cfg.main_tasks() {
        let w = tp.var(&format!("fm.head.{}.w", task.name))?;
        let b = tp.var(&format!("fm.head.{}.b", task.name))?;
        let z = tape.matmul(embeddings, w)?;
        let z = tape.add(z, b)?;
        main_logits.insert(task.name.clone(), z);
    }

    let mut aux_logits = BTreeMap::new();
    let scoped: Vec<&TaskSpec> = cfg
        .aux_tasks()
        .filter(|t| t.applies_to(request.surface))
        .collect();
    if !scoped.is_empty() {
        let m = request.candidates.len();
        let mut feats = Tensor::zeros(m, cfg.aux_feature_dim);
        for (r, cand) in request.candidates.iter().enumerate() {
            if cand.aux_features.len() != cfg.aux_feature_dim {
                return Err(Error::Contract(format!(
                    "aux feature vector has {} entries, config says {}",
                    cand.aux_features.len(),
                    cfg.aux_feature_dim
                )));
            }
            feats.row_mut(r).copy_from_slice(&cand.aux_features);
        }
        let feats = tape.leaf(feats);
        let input = tape.concat_cols(embeddings, feats)?;
        let w1 = tp.var(&format!("fm.align.s{}.w1", request.surface))?;
        let b1 = tp.var(&format!("fm.align.s{}.b1", request.surface))?;
        let h = tape.matmul(input, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.silu(h);
        for task in scoped {
            let w2 = tp.var(&format!("fm.align.s{}.{}.w2", request.surface, task.name))?;
            let b2 = tp.var(&format!("fm.align.s{}.{}.b2", request.surface, task.name))?;
            let z = tape.matmul(h, w2)?;
            let z = tape.add(z, b2)?;
            aux_logits.insert(task.name.clone(), z);
        }
    }

    Ok(FmRequestOutput {
        embeddings,
        main_logits,
        aux_logits,
    })
}

/// Plain-value forward for serving and inspection.
pub fn fm_forward_values(
    params: &ParamSet,
    cfg: &FmConfig,
    request: &LabeledRequest,
) -> Result<FmOutput> {
    let mut tape = Tape::new();
    let tp = params.tape_vars(&mut tape);
    let out = fm_forward(&mut tape, &tp, cfg, request)?;
    let emb = tape.value(out.embeddings);
    let embeddings = (0..emb.rows()).map(|r| emb.row(r).to_vec()).collect();
    let mut main_probs = BTreeMap::new();
    for (name, var) in &out.main_logits {
        let p = tape.sigmoid(*var);
        main_probs.insert(name.clone(), tape.value(p).data().to_vec());
    }
    let mut aux_probs = BTreeMap::new();
    for (name, var) in &out.aux_logits {
        let p = tape.sigmoid(*var);
        aux_probs.insert(name.clone(), tape.value(p).data().to_vec());
    }
    Ok(FmOutput {
        embeddings,
        main_probs,
        aux_probs,
    })
}

/// Per-task loss summary.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    /// Mean over the task's valid examples (0.0 when skipped).
    pub loss: f64,
    pub weight: f64,
    /// Number of valid examples (the mask normalizer).
    pub examples: usize,
    /// True when no example in the batch was in the task's sample space.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub tasks: BTreeMap<String, TaskLoss>,
}

/// Count valid examples per task across the batch (the mask normalizers).
fn task_counts(cfg: &FmConfig, batch: &[LabeledRequest]) -> Result<BTreeMap<String, usize>> {
    let mut counts: BTreeMap<String, usize> =
        cfg.tasks.iter().map(|t| (t.name.clone(), 0)).collect();
    for req in batch {
        for cand in &req.candidates {
            for task in &cfg.tasks {
                let valid = match task.kind {
                    TaskKind::Main => {
                        if !cand.labels.contains_key(&task.name) {
                            return Err(Error::Contract(format!(
                                "main task {} missing a label",
                                task.name
                            )));
                        }
                        true
                    }
                    TaskKind::Aux => {
                        task.applies_to(req.surface) && cand.labels.contains_key(&task.name)
                    }
                };
                if valid {
                    *counts.get_mut(&task.name).unwrap() += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Per-request masked loss sums: for each task, the sum over the request's
/// candidates of delta * bce. Returned vars are 1x1 sums, not means.
fn request_loss_sums(
    tape: &mut Tape,
    out: &FmRequestOutput,
    cfg: &FmConfig,
    req: &LabeledRequest,
) -> Result<BTreeMap<String, Var>> {
    let m = req.candidates.len();
    let mut sums = BTreeMap::new();
    for task in &cfg.tasks {
        let logits = match task.kind {
            TaskKind::Main => out.main_logits.get(&task.name),
            TaskKind::Aux => out.aux_logits.get(&task.name),
        };
        let Some(&logits) = logits else { continue };
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

/// Weighted multi-task loss over a batch: each task's loss is the mean of
/// its per-example cross-entropies over the examples in its sample space,
/// and the total is the task-weighted sum. Tasks with an empty sample space
/// contribute zero and are flagged skipped.
pub fn fm_loss(
    tape: &mut Tape,
    outputs: &[FmRequestOutput],
    cfg: &FmConfig,
    batch: &[LabeledRequest],
) -> Result<(Var, LossReport)> {
    if outputs.len() != batch.len() {
        return Err(Error::Contract("outputs and batch length differ".into()));
    }
    let counts = task_counts(cfg, batch)?;
    let mut total: Option<Var> = None;
    let mut report = LossReport::default();
    let mut task_sums: BTreeMap<String, Var> = BTreeMap::new();
    for (out, req) in outputs.iter().zip(batch.iter()) {
        for (name, sum) in request_loss_sums(tape, out, cfg, req)? {
            match task_sums.get_mut(&name) {
                Some(acc) => *acc = tape.add(*acc, sum)?,
                None => {
                    task_sums.insert(name, sum);
                }
            }
        }
    }
    for task in &cfg.tasks {
        let n = counts[&task.name];
        let (mean_var, mean_val) = match (task_sums.get(&task.name), n) {
            (Some(&sum), n) if n > 0 => {
                let mean = tape.scale(sum, 1.0 / n as f64);
                (Some(mean), tape.value(mean).item())
            }
            _ => (None, 0.0),
        };
        report.tasks.insert(
            task.name.clone(),
            TaskLoss {
                loss: mean_val,
                weight: task.weight,
                examples: n,
                skipped: n == 0,
            },
        );
        report.total += task.weight * mean_val;
        if let Some(mean) = mean_var {
            let weighted = tape.scale(mean, task.weight);
            total = Some(match total {
                Some(t) => tape.add(t, weighted)?,
                None => weighted,
            });
        }
    }
    let total_var = match total {
        Some(t) => t,
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    Ok((total_var, report))
}

/// Convenience: forward + loss on one tape, returning the report only.
pub fn fm_loss_value(params: &ParamSet, cfg: &FmConfig, batch: &[LabeledRequest]) -> Result<LossReport> {
    let mut tape = Tape::new();
    let tp = params.tape_vars(&mut tape);
    let outputs: Vec<FmRequestOutput> = batch
        .iter()
        .map(|req| fm_forward(&mut tape, &tp, cfg, req))
        .collect::<Result<_>>()?;
    let (_, report) = fm_loss(&mut tape, &outputs, cfg, batch)?;
    Ok(report)
}

/// One streaming train step: forward/backward over the batch (requests in
/// parallel, gradients reduced in deterministic order), then one Adam
/// update. A non-finite loss aborts the step with weights untouched.
pub fn fm_train_step(
    batch: &[LabeledRequest],
    params: &mut ParamSet,
    state: &mut AdamState,
    cfg: &FmConfig,
    opt: &AdamConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let counts = task_counts(cfg, batch)?;
    // Per-task coefficient applied to each per-request loss sum so the batch
    // total matches `fm_loss` exactly.
    let coeffs: BTreeMap<String, f64> = cfg
        .tasks
        .iter()
        .map(|t| {
            let n = counts[&t.name];
            let c = if n > 0 { t.weight / n as f64 } else { 0.0 };
            (t.name.clone(), c)
        })
        .collect();

    let shared = &*params;
    let results: Vec<Result<(BTreeMap<String, Tensor>, BTreeMap<String, f64>)>> = batch
        .par_iter()
        .map(|req| {
            let mut tape = Tape::new();
            let tp = shared.tape_vars(&mut tape);
            let out = fm_forward(&mut tape, &tp, cfg, req)?;
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
    let mut task_value_sums: BTreeMap<String, f64> = BTreeMap::new();
    for r in results {
        let (g, values) = r?;
        merge_grads(&mut grads, g);
        for (name, v) in values {
            *task_value_sums.entry(name).or_insert(0.0) += v;
        }
    }

    let mut report = LossReport::default();
    for task in &cfg.tasks {
        let n = counts[&task.name];
        let mean = if n > 0 {
            task_value_sums.get(&task.name).copied().unwrap_or(0.0) / n as f64
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
    for g in grads.values() {
        if !g.is_finite() {
            return Err(Error::NonFinite("batch gradient".into()));
        }
    }
    adam_step(params, &grads, state, opt)?;
    Ok(report)
}

/// The pruned inference subgraph: exactly the blocks needed to compute
/// target-aware embeddings (embedding tables plus encoder layers); heads and
/// alignment modules are excluded.
pub fn export_inference_subgraph(params: &ParamSet) -> ParamSet {
    params.filtered(|name| is_encoder_block(FM_PREFIX, name))
}
