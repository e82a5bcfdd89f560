//! End-to-end simulation driver.
//!
//! Plays a synthetic stream through the full loop: requests are served
//! against published (not trainer) weights for every active model version,
//! served embeddings are materialized to the feature store, events join
//! back into training examples after the configured latency, foundation
//! models train in streaming fashion with periodic partial publication, and
//! experts train on the logged embeddings of their pinned version. The last
//! stretch of simulated time is held out: examples there are buffered and
//! scored after training with frozen weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use crate::config::{MissingJoinPolicy, RunConfig};
use crate::encoder::{encode_history_summary, ItemFeatures};
use crate::error::{Error, Result};
use crate::expert::{
    expert_predict, expert_train_step, init_expert_params, warm_start, ExpertCandidate,
    ExpertConfig, ExpertRequest,
};
use crate::fm::{
    export_inference_subgraph, fm_forward_values, fm_train_step, init_fm_params,
    CandidateExample, FmConfig, LabeledRequest, TaskKind,
};
use crate::params::{write_checkpoint, AdamConfig, AdamState, ParamSet};
use crate::rng::hash_keys;
use crate::serving::{
    serve_fm, EmbeddingRecord, EmbeddingStore, FmEmbedRequest, FmEmbedResponse, LogTierConfig,
    Publisher, VersionRegistry, WeightDelta,
};
use crate::stream::{
    downsample_keep, write_event_log, GeneratedRequest, InteractionEvent, Joiner, StreamGenerator,
    TrainingExample,
};
use crate::wire::{
    fetch_fm_over_wire, paramset_to_wire_blocks, FmTier, RunningServer, WireBlock, WireClient,
    WireRequest, WireResponse,
};

/// One foundation model being trained, published, and served.
pub struct FmLaneInit {
    pub version: String,
    pub cfg: FmConfig,
    pub downsample: BTreeMap<u32, f64>,
    pub lr: f64,
}

/// One expert being trained on logged embeddings inside a time window.
pub struct ExpertLaneInit {
    pub name: String,
    pub cfg: ExpertConfig,
    /// Examples with event time in [start_ts, end_ts) train this lane.
    pub start_ts: u64,
    pub end_ts: u64,
    /// Copy shared blocks from this lane's current state at creation.
    pub warm_from: Option<String>,
    pub lr: f64,
}

#[derive(Default)]
pub struct SimIo {
    pub event_log: Option<PathBuf>,
    pub embedding_log: Option<PathBuf>,
    pub log_cfg: Option<LogTierConfig>,
    /// Route serving and delta application through real loopback tier
    /// servers instead of direct calls (process mode).
    pub wire_tiers: bool,
}

/// Collected evaluation material: per (surface, task), the labels and
/// predicted probabilities on the held-out suffix.
#[derive(Debug, Default, Clone)]
pub struct ModelEval {
    pub groups: BTreeMap<(u32, String), (Vec<bool>, Vec<f64>)>,
}

impl ModelEval {
    fn push(&mut self, surface: u32, task: &str, label: bool, prob: f64) {
        let entry = self
            .groups
            .entry((surface, task.to_string()))
            .or_default();
        entry.0.push(label);
        entry.1.push(prob);
    }

    pub fn ne(&self, surface: u32, task: &str) -> Result<crate::eval::NeResult> {
        let (labels, probs) = self
            .groups
            .get(&(surface, task.to_string()))
            .ok_or_else(|| {
                Error::NeUndefined(format!("no eval data for surface {surface} task {task}"))
            })?;
        crate::eval::normalized_entropy(task, labels, probs)
    }
}

pub struct SimResult {
    pub eval: BTreeMap<String, ModelEval>,
    pub fm_trainers: BTreeMap<String, (FmConfig, ParamSet)>,
    pub experts: BTreeMap<String, (ExpertConfig, ParamSet)>,
    pub events_total: usize,
    pub embedding_records: usize,
    pub join_missing: u64,
    pub fm_steps: BTreeMap<String, u64>,
    pub expert_steps: BTreeMap<String, u64>,
}

struct FmLane {
    version: String,
    cfg: FmConfig,
    trainer: ParamSet,
    adam: AdamState,
    opt: AdamConfig,
    publisher: Publisher,
    next_publish: u64,
    downsample: BTreeMap<u32, f64>,
    pending: Vec<TrainingExample>,
    pending_candidates: usize,
    steps: u64,
}

struct ExpertLane {
    name: String,
    cfg: ExpertConfig,
    params: Option<ParamSet>,
    adam: AdamState,
    opt: AdamConfig,
    start_ts: u64,
    end_ts: u64,
    warm_from: Option<String>,
    pending: Vec<TrainingExample>,
    pending_candidates: usize,
    steps: u64,
    /// user -> (summary, global event index at refresh)
    ue_cache: BTreeMap<u64, (Vec<f64>, u64)>,
    /// Stable weights behind the user-embedding pathway, captured when the
    /// lane starts (a separate summary model does not chase the trainer).
    ue_weights: Option<std::sync::Arc<ParamSet>>,
}

/// Loopback tier servers used in process mode.
struct WireTiers {
    addr: String,
    _server: RunningServer,
    _tier: Arc<FmTier>,
}

pub struct Simulation<'a> {
    run: &'a RunConfig,
    seed: u64,
    generator: StreamGenerator,
    registry: Arc<RwLock<VersionRegistry>>,
    wire: Option<WireTiers>,
    store: EmbeddingStore,
    joiner: Joiner,
    fm_lanes: Vec<FmLane>,
    expert_lanes: Vec<ExpertLane>,
    eval_start: u64,
    eval_examples: Vec<TrainingExample>,
    event_writer: Option<std::io::BufWriter<std::fs::File>>,
    events_total: usize,
    global_events: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(
        run: &'a RunConfig,
        seed: u64,
        fm_inits: Vec<FmLaneInit>,
        expert_inits: Vec<ExpertLaneInit>,
        io: SimIo,
    ) -> Result<Self> {
        run.validate()?;
        let generator = StreamGenerator::new(run.stream.clone(), seed)?;
        let registry = Arc::new(RwLock::new(VersionRegistry::new()));

        let wire = if io.wire_tiers {
            let default_encoder = fm_inits
                .first()
                .map(|i| i.cfg.encoder.clone())
                .ok_or_else(|| Error::Config("wire mode needs at least one model".into()))?;
            let tier = Arc::new(FmTier::new(Arc::clone(&registry), default_encoder));
            let handler_tier = Arc::clone(&tier);
            let server = crate::wire::serve("127.0.0.1:0", Arc::new(move |req| {
                handler_tier.handle(req)
            }))?;
            let addr = server.local_addr.to_string();
            Some(WireTiers {
                addr,
                _server: server,
                _tier: tier,
            })
        } else {
            None
        };

        let mut fm_lanes = Vec::new();
        for init in fm_inits {
            let trainer = init_fm_params(&init.cfg, seed ^ hash_keys(&[1, fnv(&init.version)]))?;
            let pruned = export_inference_subgraph(&trainer);
            let publisher = Publisher::new(init.version.clone(), &pruned);
            match &wire {
                Some(tiers) => {
                    // Register through the admin protocol, as an operator
                    // bringing a version online would.
                    tiers._tier.set_encoder(&init.version, init.cfg.encoder.clone());
                    let mut client = WireClient::connect(&tiers.addr)?;
                    let resp = client.request(&WireRequest::AdminRegisterVersion {
                        version: init.version.clone(),
                        now: 0,
                        primary: fm_lanes.is_empty(),
                        blocks: paramset_to_wire_blocks(&pruned),
                    })?;
                    if let WireResponse::Error { code, message } = resp {
                        return Err(Error::Wire(format!("register failed: {code}: {message}")));
                    }
                }
                None => {
                    registry
                        .write()
                        .unwrap()
                        .register(init.version.clone(), pruned, 0);
                }
            }
            fm_lanes.push(FmLane {
                version: init.version,
                cfg: init.cfg,
                trainer,
                adam: AdamState::default(),
                opt: AdamConfig::with_lr(init.lr),
                publisher,
                next_publish: run.sync.period,
                downsample: init.downsample,
                pending: Vec::new(),
                pending_candidates: 0,
                steps: 0,
            });
        }
        let expert_lanes = expert_inits
            .into_iter()
            .map(|init| ExpertLane {
                name: init.name,
                cfg: init.cfg,
                params: None,
                adam: AdamState::default(),
                opt: AdamConfig::with_lr(init.lr),
                start_ts: init.start_ts,
                end_ts: init.end_ts,
                warm_from: init.warm_from,
                pending: Vec::new(),
                pending_candidates: 0,
                steps: 0,
                ue_cache: BTreeMap::new(),
                ue_weights: None,
            })
            .collect();

        let store = match (&io.embedding_log, io.log_cfg) {
            (Some(path), cfg) => EmbeddingStore::with_file(path, cfg.unwrap_or_default())?,
            (None, _) => EmbeddingStore::new_in_memory(),
        };
        let event_writer = match &io.event_log {
            Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
            None => None,
        };

        Ok(Self {
            eval_start: run.eval_start_ts(),
            run,
            seed,
            generator,
            registry,
            wire,
            store,
            joiner: Joiner::new(run.join_latency),
            fm_lanes,
            expert_lanes,
            eval_examples: Vec::new(),
            event_writer,
            events_total: 0,
            global_events: 0,
        })
    }

    /// Serve an embedding request directly or over the wire.
    fn embed(&self, enc_cfg: &crate::encoder::EncoderConfig, req: &FmEmbedRequest) -> Result<FmEmbedResponse> {
        match &self.wire {
            Some(tiers) => fetch_fm_over_wire(&tiers.addr, req),
            None => serve_fm(&self.registry.read().unwrap(), enc_cfg, req),
        }
    }

    /// Apply a published delta directly or through the admin protocol.
    fn apply_delta(&self, delta: &WeightDelta, now: u64) -> Result<()> {
        match &self.wire {
            Some(tiers) => {
                let mut client = WireClient::connect(&tiers.addr)?;
                let resp = client.request(&WireRequest::AdminApplyDelta {
                    version: delta.version.clone(),
                    seq: delta.seq,
                    now,
                    blocks: delta.blocks.iter().map(WireBlock::from_delta).collect(),
                })?;
                match resp {
                    WireResponse::Ack { .. } => Ok(()),
                    WireResponse::Error { code, message } => {
                        Err(Error::Wire(format!("apply failed: {code}: {message}")))
                    }
                    other => Err(Error::Wire(format!("unexpected response {other:?}"))),
                }
            }
            None => {
                self.registry.read().unwrap().apply_delta(delta, now)?;
                Ok(())
            }
        }
    }

    fn history_features(&self, user: u64, hist_len: usize, cap: usize) -> Vec<ItemFeatures> {
        let history = &self.generator.history_of(user)[..hist_len];
        let start = history.len().saturating_sub(cap);
        history[start..].iter().map(|h| h.to_features()).collect()
    }

    fn max_history_cap(&self) -> usize {
        let fm_max = self
            .fm_lanes
            .iter()
            .map(|l| l.cfg.encoder.max_history)
            .max()
            .unwrap_or(0);
        let ex_max = self
            .expert_lanes
            .iter()
            .map(|l| l.cfg.short_history_len)
            .max()
            .unwrap_or(0);
        fm_max.max(ex_max).max(1)
    }

    fn serve_and_log(&mut self, req: &GeneratedRequest) -> Result<()> {
        let cap = self.max_history_cap();
        let history = self.history_features(req.user_id, req.hist_len, cap);
        let targets: Vec<ItemFeatures> = req
            .events
            .iter()
            .map(|ev| ItemFeatures::target(ev.item_id, ev.surface_id, ev.ctx.time_bucket))
            .collect();
        let active = self.registry.read().unwrap().active_versions();
        for version in active {
            let enc_cfg = self
                .fm_lanes
                .iter()
                .find(|l| l.version == version)
                .map(|l| l.cfg.encoder.clone())
                .ok_or_else(|| Error::VersionInactive(version.clone()))?;
            let resp = self.embed(
                &enc_cfg,
                &FmEmbedRequest {
                    version: Some(version.clone()),
                    history: history.clone(),
                    targets: targets.clone(),
                },
            )?;
            for (ev, vector) in req.events.iter().zip(resp.embeddings) {
                // Logging-tier capacity: only a fraction of impressions is
                // materialized.
                let h = hash_keys(&[7, self.seed, ev.request_id, ev.item_id]);
                let keep =
                    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) < self.run.log_fraction;
                if !keep {
                    continue;
                }
                self.store.append(EmbeddingRecord {
                    request_id: ev.request_id,
                    user_id: ev.user_id,
                    item_id: ev.item_id,
                    version: version.clone(),
                    vector,
                    served_ts: ev.ts,
                })?;
            }
        }
        Ok(())
    }

    fn publish_due(&mut self, now: u64) -> Result<()> {
        for i in 0..self.fm_lanes.len() {
            while self.fm_lanes[i].next_publish <= now {
                let pruned = export_inference_subgraph(&self.fm_lanes[i].trainer);
                let delta = self.fm_lanes[i]
                    .publisher
                    .publish_partial(&pruned, self.run.sync.fraction)?;
                let at = self.fm_lanes[i].next_publish;
                self.apply_delta(&delta, at)?;
                self.fm_lanes[i].next_publish += self.run.sync.period;
            }
        }
        Ok(())
    }

    /// Force the published state to match the trainers exactly.
    fn publish_full(&mut self, now: u64) -> Result<()> {
        for i in 0..self.fm_lanes.len() {
            let pruned = export_inference_subgraph(&self.fm_lanes[i].trainer);
            let delta = self.fm_lanes[i].publisher.publish_partial(&pruned, 1.0)?;
            self.apply_delta(&delta, now)?;
        }
        Ok(())
    }

    fn route(&mut self, ex: TrainingExample) -> Result<()> {
        if ex.ts >= self.eval_start {
            self.eval_examples.push(ex);
            return Ok(());
        }
        for i in 0..self.fm_lanes.len() {
            let ratio = self.fm_lanes[i]
                .downsample
                .get(&ex.surface_id)
                .copied()
                .unwrap_or(1.0);
            let lane_seed = hash_keys(&[2, self.seed, fnv(&self.fm_lanes[i].version)]);
            if downsample_keep(lane_seed, &ex, ratio) {
                let mut stripped = ex.clone();
                stripped.embeddings.clear();
                self.fm_lanes[i].pending.push(stripped);
                self.fm_lanes[i].pending_candidates += 1;
                if self.fm_lanes[i].pending_candidates >= self.run.train.batch_candidates {
                    self.step_fm_lane(i)?;
                }
            }
        }
        for i in 0..self.expert_lanes.len() {
            let (start, end, surface) = {
                let l = &self.expert_lanes[i];
                (l.start_ts, l.end_ts, l.cfg.surface_id)
            };
            if ex.surface_id != surface || ex.ts < start || ex.ts >= end {
                continue;
            }
            let ratio = self
                .run
                .expert_downsample
                .get(&ex.surface_id)
                .copied()
                .unwrap_or(1.0);
            let lane_seed = hash_keys(&[3, self.seed, fnv(&self.expert_lanes[i].name)]);
            if !downsample_keep(lane_seed, &ex, ratio) {
                continue;
            }
            self.ensure_expert_initialized(i)?;
            self.expert_lanes[i].pending.push(ex.clone());
            self.expert_lanes[i].pending_candidates += 1;
            if self.expert_lanes[i].pending_candidates >= self.run.train.batch_candidates {
                self.step_expert_lane(i)?;
            }
        }
        Ok(())
    }

    fn ensure_expert_initialized(&mut self, i: usize) -> Result<()> {
        if self.expert_lanes[i].params.is_some() {
            return Ok(());
        }
        // A donor being warm-started from must finish its remaining batch
        // first so the copied state reflects its full window.
        if let Some(donor_name) = self.expert_lanes[i].warm_from.clone() {
            let donor_idx = self
                .expert_lanes
                .iter()
                .position(|l| l.name == donor_name)
                .ok_or_else(|| Error::Config(format!("warm-start donor {donor_name} unknown")))?;
            if !self.expert_lanes[donor_idx].pending.is_empty() {
                self.step_expert_lane(donor_idx)?;
            }
            let donor_params = self.expert_lanes[donor_idx]
                .params
                .clone()
                .ok_or_else(|| Error::Config(format!("donor {donor_name} never trained")))?;
            let lane = &mut self.expert_lanes[i];
            let mut fresh = init_expert_params(&lane.cfg, self.seed ^ hash_keys(&[4]))?;
            warm_start(&mut fresh, &donor_params)?;
            lane.params = Some(fresh);
        } else {
            let lane = &mut self.expert_lanes[i];
            lane.params = Some(init_expert_params(&lane.cfg, self.seed ^ hash_keys(&[4]))?);
        }
        if self.expert_lanes[i].cfg.use_ue {
            let version = self.expert_lanes[i].cfg.fm_version.clone();
            let (_, snapshot) = self.registry.read().unwrap().resolve(Some(&version))?;
            self.expert_lanes[i].ue_weights = Some(std::sync::Arc::new(snapshot.params.clone()));
        }
        Ok(())
    }

    fn group_fm_requests(
        &self,
        examples: &[TrainingExample],
        cap: usize,
    ) -> Vec<LabeledRequest> {
        let mut out: Vec<LabeledRequest> = Vec::new();
        let mut last_request: Option<u64> = None;
        for ex in examples {
            let cand = CandidateExample {
                item: ex.item.clone(),
                labels: ex.labels.clone(),
                aux_features: ex.aux_features.clone(),
            };
            if last_request == Some(ex.request_id) {
                out.last_mut().unwrap().candidates.push(cand);
            } else {
                out.push(LabeledRequest {
                    history: self.history_features(ex.user_id, ex.hist_len, cap),
                    surface: ex.surface_id,
                    candidates: vec![cand],
                });
                last_request = Some(ex.request_id);
            }
        }
        out
    }

    fn step_fm_lane(&mut self, i: usize) -> Result<()> {
        let examples = std::mem::take(&mut self.fm_lanes[i].pending);
        self.fm_lanes[i].pending_candidates = 0;
        if examples.is_empty() {
            return Ok(());
        }
        let cap = self.fm_lanes[i].cfg.encoder.max_history;
        let batch = self.group_fm_requests(&examples, cap);
        let lane = &mut self.fm_lanes[i];
        fm_train_step(&batch, &mut lane.trainer, &mut lane.adam, &lane.cfg, &lane.opt)?;
        lane.steps += 1;
        Ok(())
    }

    /// Build the expert-side view of a training example; None when the
    /// pinned embedding is missing and policy says skip.
    fn expert_candidate(
        &self,
        lane: &ExpertLane,
        ex: &TrainingExample,
    ) -> Option<ExpertCandidate> {
        let embedding = match ex.embeddings.get(&lane.cfg.fm_version) {
            Some(v) => Some((lane.cfg.fm_version.clone(), v.clone())),
            None if !lane.cfg.use_tae => None,
            None => match self.run.missing_join {
                MissingJoinPolicy::SkipExample => return None,
                MissingJoinPolicy::ZeroEmbedding => {
                    Some((lane.cfg.fm_version.clone(), vec![0.0; lane.cfg.fm_dim]))
                }
            },
        };
        Some(ExpertCandidate {
            item: ex.item.clone(),
            fm_embedding: if lane.cfg.use_tae { embedding } else { None },
            labels: ex.labels.clone(),
            surface_features: ex.aux_features.clone(),
        })
    }

    /// Stale-refreshed target-independent user summary from the lane's
    /// pinned served weights.
    fn user_summary(&mut self, lane_idx: usize, user: u64, hist_len: usize) -> Result<Vec<f64>> {
        let refresh = self.run.ue.refresh_events;
        let now_events = self.global_events;
        if let Some((vec, at)) = self.expert_lanes[lane_idx].ue_cache.get(&user) {
            if now_events.saturating_sub(*at) < refresh {
                return Ok(vec.clone());
            }
        }
        let version = self.expert_lanes[lane_idx].cfg.fm_version.clone();
        let weights = self.expert_lanes[lane_idx]
            .ue_weights
            .clone()
            .ok_or_else(|| Error::Config("user-embedding weights never captured".into()))?;
        let enc_cfg = self
            .fm_lanes
            .iter()
            .find(|l| l.version == version)
            .map(|l| l.cfg.encoder.clone())
            .ok_or_else(|| Error::VersionInactive(version.clone()))?;
        let history = self.history_features(user, hist_len, enc_cfg.max_history);
        let summary = encode_history_summary(&weights, crate::fm::FM_PREFIX, &enc_cfg, &history)?;
        self.expert_lanes[lane_idx]
            .ue_cache
            .insert(user, (summary.clone(), now_events));
        Ok(summary)
    }

    fn group_expert_requests(
        &mut self,
        lane_idx: usize,
        examples: &[TrainingExample],
    ) -> Result<Vec<ExpertRequest>> {
        let cap = self.expert_lanes[lane_idx].cfg.short_history_len;
        let use_ue = self.expert_lanes[lane_idx].cfg.use_ue;
        let mut out: Vec<ExpertRequest> = Vec::new();
        let mut last_request: Option<u64> = None;
        for ex in examples {
            let cand = {
                let lane = &self.expert_lanes[lane_idx];
                match self.expert_candidate(lane, ex) {
                    Some(c) => c,
                    None => continue,
                }
            };
            if last_request == Some(ex.request_id) {
                out.last_mut().unwrap().candidates.push(cand);
            } else {
                let user_embedding = if use_ue {
                    Some(self.user_summary(lane_idx, ex.user_id, ex.hist_len)?)
                } else {
                    None
                };
                out.push(ExpertRequest {
                    short_history: self.history_features(ex.user_id, ex.hist_len, cap),
                    surface: ex.surface_id,
                    candidates: vec![cand],
                    user_embedding,
                });
                last_request = Some(ex.request_id);
            }
        }
        Ok(out)
    }

    fn step_expert_lane(&mut self, i: usize) -> Result<()> {
        let examples = std::mem::take(&mut self.expert_lanes[i].pending);
        self.expert_lanes[i].pending_candidates = 0;
        if examples.is_empty() {
            return Ok(());
        }
        let batch = self.group_expert_requests(i, &examples)?;
        if batch.is_empty() {
            return Ok(());
        }
        let lane = &mut self.expert_lanes[i];
        let params = lane.params.as_mut().expect("initialized before stepping");
        let step_seed = hash_keys(&[5, self.seed, lane.steps]);
        expert_train_step(&batch, params, &mut lane.adam, &lane.cfg, &lane.opt, step_seed)?;
        lane.steps += 1;
        Ok(())
    }

    /// Drive the whole stream, then evaluate on the held-out suffix.
    pub fn run(mut self) -> Result<SimResult> {
        while let Some(req) = self.generator.next_request() {
            let now = req.ts;
            self.publish_due(now).map_err(|e| e.in_stage("publish"))?;
            let released = {
                let r = self.joiner.release(now, &self.store);
                r
            };
            for ex in released {
                self.route(ex).map_err(|e| e.in_stage("train"))?;
            }
            self.serve_and_log(&req).map_err(|e| e.in_stage("serve"))?;
            if let Some(w) = self.event_writer.as_mut() {
                use std::io::Write;
                for ev in &req.events {
                    let line = serde_json::to_string(ev)
                        .map_err(|e| Error::Wire(format!("event encode: {e}")))?;
                    w.write_all(line.as_bytes())?;
                    w.write_all(b"\n")?;
                }
            }
            self.events_total += req.events.len();
            self.global_events += req.events.len() as u64;
            self.joiner.offer(&req);
        }

        // Drain the joiner and finish remaining batches.
        let drained = self.joiner.release(u64::MAX, &self.store);
        for ex in drained {
            self.route(ex).map_err(|e| e.in_stage("train"))?;
        }
        for i in 0..self.fm_lanes.len() {
            self.step_fm_lane(i).map_err(|e| e.in_stage("train"))?;
        }
        for i in 0..self.expert_lanes.len() {
            if self.expert_lanes[i].params.is_some() {
                self.step_expert_lane(i).map_err(|e| e.in_stage("train"))?;
            }
        }
        let horizon = self.run.stream.horizon();
        self.publish_full(horizon).map_err(|e| e.in_stage("publish"))?;
        if let Some(w) = self.event_writer.as_mut() {
            use std::io::Write;
            w.flush()?;
        }
        self.store.flush()?;

        self.evaluate().map_err(|e| e.in_stage("eval"))
    }

    fn evaluate(mut self) -> Result<SimResult> {
        let mut eval: BTreeMap<String, ModelEval> = BTreeMap::new();
        let eval_examples = std::mem::take(&mut self.eval_examples);

        // Group the suffix into requests once.
        let mut groups: Vec<Vec<&TrainingExample>> = Vec::new();
        let mut last: Option<u64> = None;
        for ex in &eval_examples {
            if last == Some(ex.request_id) {
                groups.last_mut().unwrap().push(ex);
            } else {
                groups.push(vec![ex]);
                last = Some(ex.request_id);
            }
        }

        // Foundation models: score every task they optimize, per surface.
        for lane in &self.fm_lanes {
            let mut collector = ModelEval::default();
            for group in &groups {
                let surface = group[0].surface_id;
                let request = LabeledRequest {
                    history: self.history_features(
                        group[0].user_id,
                        group[0].hist_len,
                        lane.cfg.encoder.max_history,
                    ),
                    surface,
                    candidates: group
                        .iter()
                        .map(|ex| CandidateExample {
                            item: ex.item.clone(),
                            labels: ex.labels.clone(),
                            aux_features: ex.aux_features.clone(),
                        })
                        .collect(),
                };
                let out = fm_forward_values(&lane.trainer, &lane.cfg, &request)?;
                for task in &lane.cfg.tasks {
                    let probs = match task.kind {
                        TaskKind::Main => out.main_probs.get(&task.name),
                        TaskKind::Aux => out.aux_probs.get(&task.name),
                    };
                    let Some(probs) = probs else { continue };
                    for (ex, &p) in group.iter().zip(probs.iter()) {
                        if let Some(&y) = ex.labels.get(&task.name) {
                            collector.push(surface, &task.name, y, p);
                        }
                    }
                }
            }
            eval.insert(lane.version.clone(), collector);
        }

        // Experts: score their own tasks on their surface.
        for i in 0..self.expert_lanes.len() {
            if self.expert_lanes[i].params.is_none() {
                continue;
            }
            let mut collector = ModelEval::default();
            for group in &groups {
                if group[0].surface_id != self.expert_lanes[i].cfg.surface_id {
                    continue;
                }
                let owned: Vec<TrainingExample> = group.iter().map(|ex| (*ex).clone()).collect();
                let requests = self.group_expert_requests(i, &owned)?;
                let lane = &self.expert_lanes[i];
                let params = lane.params.as_ref().unwrap();
                for request in requests {
                    let probs = expert_predict(params, &lane.cfg, &request)?;
                    for task in &lane.cfg.tasks {
                        let Some(task_probs) = probs.get(&task.name) else { continue };
                        for (cand, &p) in request.candidates.iter().zip(task_probs.iter()) {
                            if let Some(&y) = cand.labels.get(&task.name) {
                                collector.push(lane.cfg.surface_id, &task.name, y, p);
                            }
                        }
                    }
                }
            }
            eval.insert(self.expert_lanes[i].name.clone(), collector);
        }

        let fm_trainers = self
            .fm_lanes
            .iter()
            .map(|l| (l.version.clone(), (l.cfg.clone(), l.trainer.clone())))
            .collect();
        let experts = self
            .expert_lanes
            .iter()
            .filter_map(|l| {
                l.params
                    .as_ref()
                    .map(|p| (l.name.clone(), (l.cfg.clone(), p.clone())))
            })
            .collect();
        Ok(SimResult {
            eval,
            fm_trainers,
            experts,
            events_total: self.events_total,
            embedding_records: self.store.len(),
            join_missing: self.joiner.missing_embedding_count,
            fm_steps: self.fm_lanes.iter().map(|l| (l.version.clone(), l.steps)).collect(),
            expert_steps: self
                .expert_lanes
                .iter()
                .map(|l| (l.name.clone(), l.steps))
                .collect(),
        })
    }
}

fn fnv(s: &str) -> u64 {
    crate::rng::fnv1a64(s.as_bytes())
}

// ---------------------------------------------------------------------------
// Artifact output and inspection
// ---------------------------------------------------------------------------

pub struct OutputDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
}

pub fn prepare_output(root: &Path) -> Result<OutputDirs> {
    let dirs = OutputDirs {
        root: root.to_path_buf(),
        checkpoints: root.join("checkpoints"),
        logs: root.join("logs"),
        reports: root.join("reports"),
    };
    std::fs::create_dir_all(&dirs.checkpoints)?;
    std::fs::create_dir_all(&dirs.logs)?;
    std::fs::create_dir_all(&dirs.reports)?;
    Ok(dirs)
}

/// Write all model states from a simulation as checkpoints.
pub fn write_sim_checkpoints(dirs: &OutputDirs, result: &SimResult) -> Result<()> {
    for (version, (_, params)) in &result.fm_trainers {
        write_checkpoint(&dirs.checkpoints.join(format!("{version}.fmck")), params, None)?;
        let pruned = export_inference_subgraph(params);
        write_checkpoint(
            &dirs.checkpoints.join(format!("{version}-inference.fmck")),
            &pruned,
            None,
        )?;
    }
    for (name, (cfg, params)) in &result.experts {
        write_checkpoint(
            &dirs.checkpoints.join(format!("{name}.fmck")),
            params,
            Some(&cfg.fm_version),
        )?;
    }
    Ok(())
}

/// Human-readable dump of a recognized artifact file.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(crate::params::CHECKPOINT_MAGIC) {
        let (params, tag) = crate::params::parse_checkpoint(&bytes)?;
        let mut out = String::new();
        out.push_str(&format!("checkpoint: {}\n", path.display()));
        if let Some(tag) = &tag {
            out.push_str(&format!("pinned version: {tag}\n"));
        }
        out.push_str(&format!(
            "blocks: {}  parameters: {}\n",
            params.len(),
            params.parameter_count()
        ));
        let mut inference = 0usize;
        for (name, block) in params.iter() {
            let in_subgraph = !(name.contains(".head.") || name.contains(".align."));
            if in_subgraph {
                inference += 1;
            }
            out.push_str(&format!(
                "  {name}  {}x{}  counter {}  {}\n",
                block.tensor.rows(),
                block.tensor.cols(),
                block.counter,
                if in_subgraph { "inference" } else { "training-only" }
            ));
        }
        out.push_str(&format!(
            "inference subgraph: {inference} of {} blocks\n",
            params.len()
        ));
        return Ok(out);
    }
    // Newline-delimited logs: decide by the first parsable line.
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config("unrecognized file format (not FMCK, not text)".into()))?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Config("empty file".into()))?;
    if serde_json::from_str::<InteractionEvent>(first).is_ok() {
        let events = crate::stream::read_event_log(path)?;
        let mut per_surface: BTreeMap<u32, usize> = BTreeMap::new();
        for ev in &events {
            *per_surface.entry(ev.surface_id).or_insert(0) += 1;
        }
        let mut out = format!("event log: {} records\n", events.len());
        for (surface, n) in per_surface {
            out.push_str(&format!("  surface {surface}: {n}\n"));
        }
        return Ok(out);
    }
    if let Ok(records) = crate::serving::read_embedding_log(path) {
        let mut per_version: BTreeMap<String, usize> = BTreeMap::new();
        for r in &records {
            *per_version.entry(r.version.clone()).or_insert(0) += 1;
        }
        let mut out = format!("embedding log: {} records\n", records.len());
        for (version, n) in per_version {
            out.push_str(&format!("  version {version}: {n}\n"));
        }
        return Ok(out);
    }
    Err(Error::Config(format!(
        "unrecognized file format: {}",
        path.display()
    )))
}

/// Write the event log for a whole stream without running any training
/// (used by tooling and tests).
pub fn dump_stream(run: &RunConfig, seed: u64, path: &Path) -> Result<usize> {
    let mut generator = StreamGenerator::new(run.stream.clone(), seed)?;
    let mut events = Vec::new();
    while let Some(req) = generator.next_request() {
        events.extend(req.events);
    }
    write_event_log(path, events.iter())
}
