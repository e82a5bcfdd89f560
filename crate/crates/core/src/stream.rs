//! Synthetic multi-surface interaction stream with a known ground truth.
//!
//! The ground-truth preference model is built so that the best achievable
//! prediction needs the interaction between a user's *recent history* and
//! the *specific candidate*: each label's logit carries an attention-style
//! term, a recency-weighted sharp similarity between history items and the
//! candidate. Pooling the history into one summary vector before comparing
//! (the classic user-embedding shortcut) provably loses part of that signal,
//! which is measured by the gap between the full and pooled oracles.
//!
//! The module also provides the event log file format, the dynamic joiner
//! that releases training examples after a configurable data-to-trainer
//! latency, and deterministic per-surface downsampling.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::encoder::ItemFeatures;
use crate::error::{Error, Result};
use crate::rng::{hash_keys, Rng};
use crate::serving::EmbeddingStore;

pub const SECONDS_PER_DAY: u64 = 86_400;

/// Action kinds recorded on history impressions, ordered by strength.
pub const ACTION_KINDS: usize = 5;

/// Strongest positive action among a set of main-task labels.
pub fn action_rank(labels: &BTreeMap<String, bool>) -> u8 {
    let on = |name: &str| labels.get(name).copied().unwrap_or(false);
    if on("share") {
        4
    } else if on("like") {
        3
    } else if on("video_complete") {
        2
    } else if on("video_view_duration") {
        1
    } else {
        0
    }
}

pub fn time_bucket_of(ts: u64) -> u32 {
    ((ts % SECONDS_PER_DAY) / 3_600) as u32
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    pub id: u32,
    /// Traffic share; shares are normalized over surfaces.
    pub share: f64,
    /// Surface-specific task names (labels generated on this surface only).
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub surfaces: Vec<SurfaceConfig>,
    pub days: usize,
    pub requests_per_day: usize,
    pub candidates_per_request: usize,
    pub latent_dim: usize,
    pub item_clusters: usize,
    /// Std of the per-day random walk on user latents; 0 disables drift.
    pub drift_per_day: f64,
    /// Recency half-life of the ground-truth attention term, in events.
    pub recency_halflife: f64,
    /// How many recent impressions the ground truth scans.
    pub history_window: usize,
    /// Similarity kernel sharpness; larger widens the pooled-vs-full gap.
    pub kernel_sharpness: f64,
    /// Probability that a candidate is drawn from the cluster of a recently
    /// seen item rather than uniformly.
    pub related_candidate_prob: f64,
    pub main_tasks: Vec<String>,
    pub aux_feature_dim: usize,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("n_users and n_items must be positive".into()));
        }
        if self.surfaces.is_empty() {
            return Err(Error::Config("at least one surface required".into()));
        }
        if self.days == 0 || self.requests_per_day == 0 || self.candidates_per_request == 0 {
            return Err(Error::Config("days, requests_per_day, candidates_per_request must be positive".into()));
        }
        if self.latent_dim == 0 || self.item_clusters == 0 {
            return Err(Error::Config("latent_dim and item_clusters must be positive".into()));
        }
        if self.main_tasks.is_empty() {
            return Err(Error::Config("main_tasks must not be empty".into()));
        }
        if self.aux_feature_dim == 0 {
            return Err(Error::Config("aux_feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.related_candidate_prob) {
            return Err(Error::Config("related_candidate_prob must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn total_requests(&self) -> usize {
        self.days * self.requests_per_day
    }

    pub fn total_events(&self) -> usize {
        self.total_requests() * self.candidates_per_request
    }

    pub fn horizon(&self) -> u64 {
        self.days as u64 * SECONDS_PER_DAY
    }

    /// Tasks whose labels are generated on a surface: main tasks plus the
    /// surface's own tasks.
    pub fn tasks_on_surface(&self, surface: u32) -> Vec<String> {
        let mut tasks = self.main_tasks.clone();
        if let Some(s) = self.surfaces.iter().find(|s| s.id == surface) {
            tasks.extend(s.tasks.iter().cloned());
        }
        tasks
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CtxFeatures {
    pub time_bucket: u32,
    /// Non-sequential per-candidate floats (noisy quality/affinity views).
    pub feats: Vec<f64>,
}

/// One user-item interaction: the unit of streaming data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InteractionEvent {
    pub user_id: u64,
    pub item_id: u64,
    pub surface_id: u32,
    pub ts: u64,
    pub labels: BTreeMap<String, bool>,
    pub ctx: CtxFeatures,
    pub request_id: u64,
}

/// One impression in a user's history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryItem {
    pub item_id: u64,
    pub surface_id: u32,
    pub ts: u64,
    pub time_bucket: u32,
    pub action: u8,
}

impl HistoryItem {
    pub fn to_features(&self) -> ItemFeatures {
        ItemFeatures::history(self.item_id, self.surface_id, self.time_bucket, self.action)
    }
}

/// Per-(surface, task) link coefficients over standardized terms.
#[derive(Debug, Clone)]
struct Link {
    attn: f64,
    affinity: f64,
    quality: f64,
    bias: f64,
}

/// Standardizers estimated once at construction.
#[derive(Debug, Clone, Default)]
struct TermStats {
    attn_mean: f64,
    attn_std: f64,
    pooled_mean: f64,
    pooled_std: f64,
    affinity_mean: f64,
    affinity_std: f64,
    quality_mean: f64,
    quality_std: f64,
}

/// The known preference model behind the stream.
pub struct GroundTruth {
    latent_dim: usize,
    history_window: usize,
    recency_decay: f64,
    kernel_sharpness: f64,
    /// Per-day snapshot of user latents (index: day, user).
    user_by_day: Vec<Vec<Vec<f64>>>,
    item_latent: Vec<Vec<f64>>,
    item_quality: Vec<f64>,
    item_cluster: Vec<usize>,
    cluster_members: Vec<Vec<u64>>,
    links: BTreeMap<(u32, String), Link>,
    stats: TermStats,
}

fn unit_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let mut v = rng.normal_vec(dim, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt().max(1e-12);
    let nb = dot(b, b).sqrt().max(1e-12);
    dot(a, b) / (na * nb)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Action positivity weight used by the ground truth: stronger past actions
/// make a history item more indicative of current interest.
fn action_weight(action: u8) -> f64 {
    1.0 + 0.25 * action as f64
}

impl GroundTruth {
    fn new(cfg: &StreamConfig, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "ground-truth");
        let dim = cfg.latent_dim;

        let centers: Vec<Vec<f64>> = (0..cfg.item_clusters).map(|_| unit_vec(&mut rng, dim)).collect();
        let mut item_latent = Vec::with_capacity(cfg.n_items);
        let mut item_cluster = Vec::with_capacity(cfg.n_items);
        let mut cluster_members = vec![Vec::new(); cfg.item_clusters];
        let mut item_quality = Vec::with_capacity(cfg.n_items);
        for item in 0..cfg.n_items {
            let c = rng.below(cfg.item_clusters);
            let mut v: Vec<f64> = centers[c]
                .iter()
                .map(|&x| x + 0.18 * rng.normal())
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            item_latent.push(v);
            item_cluster.push(c);
            cluster_members[c].push(item as u64);
            item_quality.push(rng.normal() * 0.8);
        }

        // Day-0 user latents; later days filled by `advance_day`.
        let day0: Vec<Vec<f64>> = (0..cfg.n_users).map(|_| unit_vec(&mut rng, dim)).collect();

        let recency_decay = 0.5f64.powf(1.0 / cfg.recency_halflife.max(1e-9));
        let mut gt = GroundTruth {
            latent_dim: dim,
            history_window: cfg.history_window,
            recency_decay,
            kernel_sharpness: cfg.kernel_sharpness,
            user_by_day: vec![day0],
            item_latent,
            item_quality,
            item_cluster,
            cluster_members,
            links: BTreeMap::new(),
            stats: TermStats::default(),
        };

        gt.stats = gt.estimate_term_stats(cfg, &mut Rng::stream(seed, "gt-calibration"));

        // Per-(surface, task) coefficients: the attention term dominates.
        let mut link_rng = Rng::stream(seed, "gt-links");
        for surface in &cfg.surfaces {
            for task in cfg.tasks_on_surface(surface.id) {
                let rate = link_rng.range(0.15, 0.38);
                gt.links.insert(
                    (surface.id, task),
                    Link {
                        attn: link_rng.range(1.9, 2.4),
                        affinity: link_rng.range(0.4, 0.7),
                        quality: link_rng.range(0.3, 0.6),
                        bias: logit(rate),
                    },
                );
            }
        }
        gt
    }

    /// Sample synthetic (history, candidate) pairs to standardize the terms.
    fn estimate_term_stats(&self, cfg: &StreamConfig, rng: &mut Rng) -> TermStats {
        let n = 2_000;
        let mut attn = Vec::with_capacity(n);
        let mut pooled = Vec::with_capacity(n);
        let mut aff = Vec::with_capacity(n);
        let mut qual = Vec::with_capacity(n);
        for _ in 0..n {
            let user = rng.below(cfg.n_users) as u64;
            let hist_len = 4 + rng.below(cfg.history_window.max(5));
            let history: Vec<HistoryItem> = (0..hist_len)
                .map(|i| HistoryItem {
                    item_id: rng.below(cfg.n_items) as u64,
                    surface_id: 0,
                    ts: i as u64,
                    time_bucket: 0,
                    action: rng.below(ACTION_KINDS) as u8,
                })
                .collect();
            let cand = if rng.bernoulli(cfg.related_candidate_prob) && !history.is_empty() {
                let anchor = history[rng.below(history.len())].item_id as usize;
                let cluster = self.item_cluster[anchor];
                let members = &self.cluster_members[cluster];
                members[rng.below(members.len())]
            } else {
                rng.below(cfg.n_items) as u64
            };
            attn.push(self.attention_term(&history, cand));
            pooled.push(self.pooled_attention_term(&history, cand));
            aff.push(dot(&self.user_by_day[0][user as usize], &self.item_latent[cand as usize]));
            qual.push(self.item_quality[cand as usize]);
        }
        let moments = |xs: &[f64]| -> (f64, f64) {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            (mean, var.sqrt().max(1e-6))
        };
        let (attn_mean, attn_std) = moments(&attn);
        let (pooled_mean, pooled_std) = moments(&pooled);
        let (affinity_mean, affinity_std) = moments(&aff);
        let (quality_mean, quality_std) = moments(&qual);
        TermStats {
            attn_mean,
            attn_std,
            pooled_mean,
            pooled_std,
            affinity_mean,
            affinity_std,
            quality_mean,
            quality_std,
        }
    }

    /// Daily random walk on user latents: a shared population component
    /// (tastes trend together) plus an individual component.
    fn advance_day(&mut self, drift: f64, rng: &mut Rng) {
        let dim = self.latent_dim;
        let shared: Vec<f64> = rng.normal_vec(dim, drift);
        let last = self.user_by_day.last().unwrap();
        let next: Vec<Vec<f64>> = last
            .iter()
            .map(|u| {
                let mut v: Vec<f64> = u
                    .iter()
                    .zip(shared.iter())
                    .map(|(&x, &s)| x + s + drift * rng.normal())
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                for x in &mut v {
                    *x /= norm;
                }
                v
            })
            .collect();
        self.user_by_day.push(next);
    }

    fn kernel(&self, cos: f64) -> f64 {
        (self.kernel_sharpness * (cos - 1.0)).exp()
    }

    /// Recency-weighted sharp similarity between history and the candidate.
    fn attention_term(&self, history: &[HistoryItem], item: u64) -> f64 {
        let start = history.len().saturating_sub(self.history_window);
        let recent = &history[start..];
        if recent.is_empty() {
            return 0.0;
        }
        let cand = &self.item_latent[item as usize];
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, h) in recent.iter().rev().enumerate() {
            let w = self.recency_decay.powi(i as i32) * action_weight(h.action);
            num += w * self.kernel(cosine(&self.item_latent[h.item_id as usize], cand));
            den += w;
        }
        num / den
    }

    /// Same term with the history pooled into one vector first: the best a
    /// target-independent summary of the history can do with this kernel.
    fn pooled_attention_term(&self, history: &[HistoryItem], item: u64) -> f64 {
        let start = history.len().saturating_sub(self.history_window);
        let recent = &history[start..];
        if recent.is_empty() {
            return 0.0;
        }
        let mut pooled = vec![0.0; self.latent_dim];
        let mut den = 0.0;
        for (i, h) in recent.iter().rev().enumerate() {
            let w = self.recency_decay.powi(i as i32) * action_weight(h.action);
            for (p, x) in pooled.iter_mut().zip(self.item_latent[h.item_id as usize].iter()) {
                *p += w * x;
            }
            den += w;
        }
        for p in &mut pooled {
            *p /= den;
        }
        self.kernel(cosine(&pooled, &self.item_latent[item as usize]))
    }

    fn logit_terms(
        &self,
        day: usize,
        user: u64,
        attn_z: f64,
        item: u64,
        surface: u32,
        task: &str,
    ) -> f64 {
        let link = &self.links[&(surface, task.to_string())];
        let day = day.min(self.user_by_day.len() - 1);
        let aff = dot(&self.user_by_day[day][user as usize], &self.item_latent[item as usize]);
        let s = &self.stats;
        let logit = link.attn * attn_z
            + link.affinity * (aff - s.affinity_mean) / s.affinity_std
            + link.quality * (self.item_quality[item as usize] - s.quality_mean) / s.quality_std
            + link.bias;
        // The standardized attention term is heavy-tailed (an exact repeat
        // of a just-seen item maxes the kernel); cap the logit so label
        // probabilities stay strictly inside (0, 1).
        logit.clamp(-8.0, 8.0)
    }

    /// True label probability given the full (history, candidate) pair.
    /// An empty history carries no evidence: its attention term is neutral.
    pub fn probability(
        &self,
        day: usize,
        user: u64,
        history: &[HistoryItem],
        item: u64,
        surface: u32,
        task: &str,
    ) -> f64 {
        let s = &self.stats;
        let z = if history.is_empty() {
            0.0
        } else {
            (self.attention_term(history, item) - s.attn_mean) / s.attn_std
        };
        sigmoid(self.logit_terms(day, user, z, item, surface, task))
    }

    /// Best probability reachable through a pooled (target-independent)
    /// history summary: the same link applied to the pooled similarity,
    /// standardized by the pooled term's own statistics.
    pub fn pooled_probability(
        &self,
        day: usize,
        user: u64,
        history: &[HistoryItem],
        item: u64,
        surface: u32,
        task: &str,
    ) -> f64 {
        let s = &self.stats;
        let z = if history.is_empty() {
            0.0
        } else {
            (self.pooled_attention_term(history, item) - s.pooled_mean) / s.pooled_std
        };
        sigmoid(self.logit_terms(day, user, z, item, surface, task))
    }

    pub fn item_quality(&self, item: u64) -> f64 {
        self.item_quality[item as usize]
    }

    pub fn user_item_affinity(&self, day: usize, user: u64, item: u64) -> f64 {
        let day = day.min(self.user_by_day.len() - 1);
        dot(&self.user_by_day[day][user as usize], &self.item_latent[item as usize])
    }

    /// The user's most-affine item clusters on a day. Candidate sampling
    /// draws from these rather than from the user's recent history, so the
    /// item exposure distribution is stationary whenever the latents are.
    fn preferred_clusters(&self, day: usize, user: u64, k: usize) -> Vec<usize> {
        let day = day.min(self.user_by_day.len() - 1);
        let z = &self.user_by_day[day][user as usize];
        let mut scored: Vec<(f64, usize)> = self
            .cluster_members
            .iter()
            .enumerate()
            .filter(|(_, members)| !members.is_empty())
            .map(|(c, members)| {
                // Representative member stands in for the cluster center.
                let rep = members[0] as usize;
                (dot(z, &self.item_latent[rep]), c)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, c)| c).collect()
    }
}

/// One generated request: the events it produced plus the serving view
/// (history snapshot length before the request).
#[derive(Debug, Clone)]
pub struct GeneratedRequest {
    pub request_id: u64,
    pub user_id: u64,
    pub surface_id: u32,
    pub ts: u64,
    pub day: usize,
    pub hist_len: usize,
    pub events: Vec<InteractionEvent>,
}

/// Deterministic multi-surface stream generator with user histories.
pub struct StreamGenerator {
    cfg: StreamConfig,
    gt: GroundTruth,
    rng: Rng,
    histories: Vec<Vec<HistoryItem>>,
    shares_cum: Vec<f64>,
    emitted_requests: usize,
    next_request_id: u64,
    current_day: usize,
    pref_cache: BTreeMap<(u64, usize), Vec<usize>>,
}

impl StreamGenerator {
    pub fn new(cfg: StreamConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let gt = GroundTruth::new(&cfg, seed);
        let total: f64 = cfg.surfaces.iter().map(|s| s.share.max(0.0)).sum();
        if total <= 0.0 {
            return Err(Error::Config("surface shares must sum positive".into()));
        }
        let mut acc = 0.0;
        let shares_cum = cfg
            .surfaces
            .iter()
            .map(|s| {
                acc += s.share.max(0.0) / total;
                acc
            })
            .collect();
        let histories = vec![Vec::new(); cfg.n_users];
        Ok(Self {
            rng: Rng::stream(seed, "stream"),
            gt,
            histories,
            shares_cum,
            emitted_requests: 0,
            next_request_id: 0,
            current_day: 0,
            pref_cache: BTreeMap::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.gt
    }

    pub fn history_of(&self, user: u64) -> &[HistoryItem] {
        &self.histories[user as usize]
    }

    fn pick_surface(&mut self) -> u32 {
        let x = self.rng.next_f64();
        for (i, &c) in self.shares_cum.iter().enumerate() {
            if x < c {
                return self.cfg.surfaces[i].id;
            }
        }
        self.cfg.surfaces.last().unwrap().id
    }

    fn pick_candidate(&mut self, user: u64, day: usize) -> u64 {
        if self.rng.bernoulli(self.cfg.related_candidate_prob) {
            let preferred = self.preferred_clusters_cached(user, day);
            let cluster = preferred[self.rng.below(preferred.len())];
            let members = &self.gt.cluster_members[cluster];
            members[self.rng.below(members.len())]
        } else {
            self.rng.below(self.cfg.n_items) as u64
        }
    }

    fn preferred_clusters_cached(&mut self, user: u64, day: usize) -> Vec<usize> {
        let key = (user, day);
        if let Some(v) = self.pref_cache.get(&key) {
            return v.clone();
        }
        let v = self.gt.preferred_clusters(day, user, 4);
        // Only the current day's entries are ever queried again.
        if self
            .pref_cache
            .keys()
            .next()
            .map(|(_, d)| *d < day)
            .unwrap_or(false)
        {
            self.pref_cache.clear();
        }
        self.pref_cache.insert(key, v.clone());
        v
    }

    /// Generate the next request, or None when the stream is exhausted.
    pub fn next_request(&mut self) -> Option<GeneratedRequest> {
        if self.emitted_requests >= self.cfg.total_requests() {
            return None;
        }
        let idx = self.emitted_requests;
        let day = idx / self.cfg.requests_per_day;
        while self.current_day < day {
            let drift = self.cfg.drift_per_day;
            let mut drift_rng = Rng::stream(self.rng.next_u64(), "drift");
            self.gt.advance_day(drift, &mut drift_rng);
            self.current_day += 1;
        }
        let within = idx % self.cfg.requests_per_day;
        let ts = day as u64 * SECONDS_PER_DAY
            + (within as u64 * SECONDS_PER_DAY) / self.cfg.requests_per_day as u64;
        let user = self.rng.below(self.cfg.n_users) as u64;
        let surface = self.pick_surface();
        let request_id = self.next_request_id;
        self.next_request_id += 1;
        self.emitted_requests += 1;

        let hist_len = self.histories[user as usize].len();
        let tasks = self.cfg.tasks_on_surface(surface);
        let time_bucket = time_bucket_of(ts);

        let mut events = Vec::with_capacity(self.cfg.candidates_per_request);
        let mut slate: Vec<u64> = Vec::with_capacity(self.cfg.candidates_per_request);
        for _ in 0..self.cfg.candidates_per_request {
            // Slates never repeat an item.
            let mut item = self.pick_candidate(user, day);
            let mut tries = 0;
            while slate.contains(&item) {
                item = if tries < 8 {
                    self.pick_candidate(user, day)
                } else {
                    (item + 1) % self.cfg.n_items as u64
                };
                tries += 1;
            }
            slate.push(item);
            let history = &self.histories[user as usize][..hist_len];
            let mut labels = BTreeMap::new();
            for task in &tasks {
                let p = self.gt.probability(day, user, history, item, surface, task);
                labels.insert(task.clone(), self.rng.bernoulli(p));
            }
            // Noisy side-channel features for the alignment/expert paths.
            // The affinity view is a day stale: fresh interest lives in the
            // history, not the feature pipeline.
            let mut feats = Vec::with_capacity(self.cfg.aux_feature_dim);
            feats.push(self.gt.item_quality(item) + 0.5 * self.rng.normal());
            if self.cfg.aux_feature_dim > 1 {
                feats.push(
                    self.gt.user_item_affinity(day.saturating_sub(1), user, item)
                        + 0.8 * self.rng.normal(),
                );
            }
            if self.cfg.aux_feature_dim > 2 {
                let phase = std::f64::consts::TAU * time_bucket as f64 / 24.0;
                feats.push(phase.sin());
            }
            if self.cfg.aux_feature_dim > 3 {
                let phase = std::f64::consts::TAU * time_bucket as f64 / 24.0;
                feats.push(phase.cos());
            }
            feats.resize(self.cfg.aux_feature_dim, 0.0);

            events.push(InteractionEvent {
                user_id: user,
                item_id: item,
                surface_id: surface,
                ts,
                labels,
                ctx: CtxFeatures { time_bucket, feats },
                request_id,
            });
        }

        // Histories grow only after every candidate's labels are drawn, so
        // same-timestamp siblings never leak into each other.
        for ev in &events {
            self.histories[user as usize].push(HistoryItem {
                item_id: ev.item_id,
                surface_id: ev.surface_id,
                ts: ev.ts,
                time_bucket: ev.ctx.time_bucket,
                action: action_rank(&ev.labels),
            });
        }

        Some(GeneratedRequest {
            request_id,
            user_id: user,
            surface_id: surface,
            ts,
            day,
            hist_len,
            events,
        })
    }
}

/// Joined record: event plus history snapshot marker plus the embeddings of
/// every active model version, released `latency` seconds after the event.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub request_id: u64,
    pub user_id: u64,
    pub surface_id: u32,
    pub ts: u64,
    pub available_at: u64,
    pub day: usize,
    pub item: ItemFeatures,
    pub labels: BTreeMap<String, bool>,
    pub aux_features: Vec<f64>,
    /// History length of the user at event time (for snapshot lookup).
    pub hist_len: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

struct PendingExample {
    example: TrainingExample,
}

/// Dynamic joiner: buffers events and releases them as training examples
/// once the configured latency has elapsed, attaching the embeddings logged
/// for every active version.
pub struct Joiner {
    latency: u64,
    pending: VecDeque<PendingExample>,
    pub missing_embedding_count: u64,
    pub released_count: u64,
}

impl Joiner {
    pub fn new(latency: u64) -> Self {
        Self {
            latency,
            pending: VecDeque::new(),
            missing_embedding_count: 0,
            released_count: 0,
        }
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    pub fn offer(&mut self, req: &GeneratedRequest) {
        for ev in &req.events {
            self.pending.push_back(PendingExample {
                example: TrainingExample {
                    request_id: ev.request_id,
                    user_id: ev.user_id,
                    surface_id: ev.surface_id,
                    ts: ev.ts,
                    available_at: ev.ts + self.latency,
                    day: req.day,
                    item: ItemFeatures::target(ev.item_id, ev.surface_id, ev.ctx.time_bucket),
                    labels: ev.labels.clone(),
                    aux_features: ev.ctx.feats.clone(),
                    hist_len: req.hist_len,
                    embeddings: BTreeMap::new(),
                },
            });
        }
    }

    /// Release every example whose availability time has arrived, attaching
    /// all logged embedding versions. Missing embeddings leave the map empty
    /// and are counted; consumers decide whether to skip or substitute.
    pub fn release(&mut self, now: u64, store: &EmbeddingStore) -> Vec<TrainingExample> {
        let mut out = Vec::new();
        while let Some(front) = self.pending.front() {
            if front.example.available_at > now {
                break;
            }
            let mut ex = self.pending.pop_front().unwrap().example;
            ex.embeddings = store.all_versions(ex.request_id, ex.item.item_id);
            if ex.embeddings.is_empty() {
                self.missing_embedding_count += 1;
            }
            self.released_count += 1;
            out.push(ex);
        }
        out
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

/// Deterministic per-surface downsampling decision.
pub fn downsample_keep(seed: u64, ex: &TrainingExample, ratio: f64) -> bool {
    if ratio >= 1.0 {
        return true;
    }
    let h = hash_keys(&[seed, ex.user_id, ex.item.item_id, ex.ts]);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) < ratio
}

/// Filter a stream of examples with independent per-surface keep fractions.
pub fn downsample(
    examples: Vec<TrainingExample>,
    ratios: &BTreeMap<u32, f64>,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    for (&surface, &r) in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!(
                "downsample ratio for surface {surface} must be in (0, 1], got {r}"
            )));
        }
    }
    Ok(examples
        .into_iter()
        .filter(|ex| {
            let ratio = ratios.get(&ex.surface_id).copied().unwrap_or(1.0);
            downsample_keep(seed, ex, ratio)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Event log file: newline-delimited, one object per line.
// ---------------------------------------------------------------------------

pub fn write_event_log<'a>(
    path: &Path,
    events: impl Iterator<Item = &'a InteractionEvent>,
) -> Result<usize> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for ev in events {
        let line = serde_json::to_string(ev)
            .map_err(|e| Error::Wire(format!("event encode: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

pub fn read_event_log(path: &Path) -> Result<Vec<InteractionEvent>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: InteractionEvent = serde_json::from_str(&line)
            .map_err(|e| Error::Wire(format!("event log line {}: {e}", i + 1)))?;
        out.push(ev);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_stream_cfg() -> StreamConfig {
        StreamConfig {
            n_users: 200,
            n_items: 400,
            surfaces: vec![
                SurfaceConfig { id: 0, share: 1.0, tasks: vec![] },
                SurfaceConfig { id: 1, share: 1.0, tasks: vec!["surface_b_task_1".into()] },
            ],
            days: 4,
            requests_per_day: 300,
            candidates_per_request: 3,
            latent_dim: 8,
            item_clusters: 24,
            drift_per_day: 0.08,
            recency_halflife: 8.0,
            history_window: 20,
            kernel_sharpness: 4.0,
            related_candidate_prob: 0.5,
            main_tasks: vec![
                "like".into(),
                "share".into(),
                "video_complete".into(),
                "video_view_duration".into(),
            ],
            aux_feature_dim: 4,
        }
    }

    fn collect_events(cfg: StreamConfig, seed: u64) -> Vec<InteractionEvent> {
        let mut sg = StreamGenerator::new(cfg, seed).unwrap();
        let mut out = Vec::new();
        while let Some(req) = sg.next_request() {
            out.extend(req.events);
        }
        out
    }

    #[test]
    fn same_seed_identical_streams() {
        let a = collect_events(test_stream_cfg(), 5);
        let b = collect_events(test_stream_cfg(), 5);
        assert_eq!(a, b);
        let c = collect_events(test_stream_cfg(), 6);
        assert_ne!(a, c);
    }

    #[test]
    fn timestamps_non_decreasing_and_day_aligned() {
        let events = collect_events(test_stream_cfg(), 7);
        for w in events.windows(2) {
            assert!(w[0].ts <= w[1].ts);
        }
        assert!(events.last().unwrap().ts < 4 * SECONDS_PER_DAY);
    }

    /// Simple inline normalized entropy for oracle checks.
    fn ne(labels: &[bool], probs: &[f64]) -> f64 {
        let n = labels.len() as f64;
        let p = labels.iter().filter(|&&y| y).count() as f64 / n;
        let ce = labels
            .iter()
            .zip(probs.iter())
            .map(|(&y, &q)| {
                let q = q.clamp(1e-12, 1.0 - 1e-12);
                if y { -q.ln() } else { -(1.0 - q).ln() }
            })
            .sum::<f64>()
            / n;
        let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        ce / h
    }

    /// Replay a stream, collecting (label, full-oracle p, pooled-oracle p)
    /// on one main task.
    fn oracle_trace(seed: u64) -> (Vec<bool>, Vec<f64>, Vec<f64>) {
        let mut sg = StreamGenerator::new(test_stream_cfg(), seed).unwrap();
        let mut labels = Vec::new();
        let mut full = Vec::new();
        let mut pooled = Vec::new();
        loop {
            let snapshot_lens: Vec<usize> =
                (0..200).map(|u| sg.history_of(u as u64).len()).collect();
            let Some(req) = sg.next_request() else { break };
            for ev in &req.events {
                let hist = &sg.history_of(ev.user_id)[..snapshot_lens[ev.user_id as usize]];
                labels.push(ev.labels["like"]);
                full.push(sg.ground_truth().probability(
                    req.day, ev.user_id, hist, ev.item_id, ev.surface_id, "like",
                ));
                pooled.push(sg.ground_truth().pooled_probability(
                    req.day, ev.user_id, hist, ev.item_id, ev.surface_id, "like",
                ));
            }
        }
        (labels, full, pooled)
    }

    #[test]
    fn full_oracle_beats_constant_and_pooled_summary() {
        let (labels, full, pooled) = oracle_trace(11);
        let ne_full = ne(&labels, &full);
        let base = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
        let ne_const = ne(&labels, &vec![base; labels.len()]);
        assert!((ne_const - 1.0).abs() < 1e-9);
        assert!(ne_full < 1.0, "full oracle NE {ne_full}");
        let ne_pooled = ne(&labels, &pooled);
        assert!(
            ne_pooled - ne_full > 0.02,
            "pooled {ne_pooled} vs full {ne_full}: target-aware gap too small"
        );
    }

    /// 2x2 chi-squared statistic for a day subset vs its complement.
    fn chi2_split(day_pos: &[f64], day_n: &[f64], mask: u32) -> f64 {
        let (mut ap, mut an, mut bp, mut bn) = (0.0, 0.0, 0.0, 0.0);
        for (d, (&pos, &n)) in day_pos.iter().zip(day_n.iter()).enumerate() {
            if mask & (1 << d) != 0 {
                ap += pos;
                an += n;
            } else {
                bp += pos;
                bn += n;
            }
        }
        let total = an + bn;
        let pos = ap + bp;
        let ea = an * pos / total;
        let eb = bn * pos / total;
        (ap - ea).powi(2) / ea
            + (bp - eb).powi(2) / eb
            + ((an - ap) - (an - ea)).powi(2) / (an - ea)
            + ((bn - bp) - (bn - eb)).powi(2) / (bn - eb)
    }

    /// Exact day-block permutation p-value of the contiguous half split.
    /// Labels within a day are correlated (shared users), so the null
    /// distribution comes from reassigning whole days, not events.
    fn half_split_p_value(day_pos: &[f64], day_n: &[f64]) -> f64 {
        let days = day_pos.len();
        let half = days / 2;
        let contiguous: u32 = (0..half).fold(0, |m, d| m | (1 << d));
        let observed = chi2_split(day_pos, day_n, contiguous);
        let mut total = 0usize;
        let mut at_least = 0usize;
        for mask in 0u32..(1 << days) {
            if mask.count_ones() as usize != half {
                continue;
            }
            total += 1;
            if chi2_split(day_pos, day_n, mask) >= observed - 1e-12 {
                at_least += 1;
            }
        }
        at_least as f64 / total as f64
    }

    fn day_label_stats(cfg: &StreamConfig, seed: u64, task: &str, warmup_days: usize) -> (Vec<f64>, Vec<f64>) {
        let events = collect_events(cfg.clone(), seed);
        let mut day_pos = vec![0.0; cfg.days];
        let mut day_n = vec![0.0; cfg.days];
        for ev in &events {
            let day = (ev.ts / SECONDS_PER_DAY) as usize;
            day_n[day] += 1.0;
            if ev.labels[task] {
                day_pos[day] += 1.0;
            }
        }
        (day_pos[warmup_days..].to_vec(), day_n[warmup_days..].to_vec())
    }

    #[test]
    fn drift_disabled_keeps_label_marginals_stationary() {
        let mut cfg = test_stream_cfg();
        cfg.drift_per_day = 0.0;
        cfg.days = 12;
        // Two warm-up days: histories fill before stationarity is assessed.
        for task in &cfg.main_tasks {
            let (day_pos, day_n) = day_label_stats(&cfg, 13, task, 2);
            let p = half_split_p_value(&day_pos, &day_n);
            assert!(p > 0.01, "task {task}: p {p}");
        }

        // Negative control for the oracle itself: a marked monotone trend
        // in the day rates must register as nonstationary.
        let day_n = vec![900.0; 10];
        let day_pos: Vec<f64> = (0..10).map(|d| 900.0 * (0.25 + 0.012 * d as f64)).collect();
        let p = half_split_p_value(&day_pos, &day_n);
        assert!(p <= 0.01, "synthetic trend went undetected: p {p}");
    }

    #[test]
    fn joiner_releases_at_event_time_plus_latency() {
        let mut sg = StreamGenerator::new(test_stream_cfg(), 17).unwrap();
        let store = EmbeddingStore::new_in_memory();
        let mut joiner = Joiner::new(1_800);
        let req = sg.next_request().unwrap();
        let ts = req.ts;
        joiner.offer(&req);
        assert!(joiner.release(ts, &store).is_empty());
        assert!(joiner.release(ts + 1_799, &store).is_empty());
        let released = joiner.release(ts + 1_800, &store);
        assert_eq!(released.len(), 3);
        for ex in &released {
            assert_eq!(ex.available_at, ex.ts + 1_800);
        }

        // Zero latency releases immediately.
        let mut j0 = Joiner::new(0);
        let req2 = sg.next_request().unwrap();
        j0.offer(&req2);
        let now = req2.ts;
        let rel = j0.release(now, &store);
        assert_eq!(rel.len(), 3);
        assert_eq!(rel[0].available_at, rel[0].ts);
    }

    #[test]
    fn joiner_attaches_all_logged_versions_or_counts_misses() {
        use crate::serving::EmbeddingRecord;
        let mut sg = StreamGenerator::new(test_stream_cfg(), 19).unwrap();
        let mut store = EmbeddingStore::new_in_memory();
        let mut joiner = Joiner::new(100);
        let req = sg.next_request().unwrap();
        for ev in &req.events {
            for version in ["fm-a", "fm-b"] {
                store
                    .append(EmbeddingRecord {
                        request_id: ev.request_id,
                        user_id: ev.user_id,
                        item_id: ev.item_id,
                        version: version.to_string(),
                        vector: vec![ev.item_id as f64, 1.0],
                        served_ts: ev.ts,
                    })
                    .unwrap();
            }
        }
        joiner.offer(&req);
        let rel = joiner.release(req.ts + 100, &store);
        for ex in &rel {
            assert_eq!(ex.embeddings.len(), 2);
            assert!(ex.embeddings.contains_key("fm-a"));
            assert!(ex.embeddings.contains_key("fm-b"));
        }
        assert_eq!(joiner.missing_embedding_count, 0);

        // Next request: nothing logged, so misses are counted and the map
        // stays empty.
        let req2 = sg.next_request().unwrap();
        joiner.offer(&req2);
        let rel2 = joiner.release(req2.ts + 100, &store);
        assert!(rel2.iter().all(|ex| ex.embeddings.is_empty()));
        assert_eq!(joiner.missing_embedding_count, 3);
    }

    #[test]
    fn temporal_hygiene_no_event_at_or_after_label_time() {
        let mut sg = StreamGenerator::new(test_stream_cfg(), 23).unwrap();
        let store = EmbeddingStore::new_in_memory();
        let mut joiner = Joiner::new(1800);
        let mut checked = 0;
        loop {
            let Some(req) = sg.next_request() else { break };
            joiner.offer(&req);
            for ex in joiner.release(req.ts, &store) {
                let hist = &sg.history_of(ex.user_id)[..ex.hist_len];
                for h in hist {
                    assert!(h.ts < ex.ts, "history event at {} >= label time {}", h.ts, ex.ts);
                }
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn downsample_identity_binomial_and_determinism() {
        let mut sg = StreamGenerator::new(test_stream_cfg(), 29).unwrap();
        let store = EmbeddingStore::new_in_memory();
        let mut joiner = Joiner::new(0);
        let mut examples = Vec::new();
        while let Some(req) = sg.next_request() {
            joiner.offer(&req);
            examples.extend(joiner.release(req.ts, &store));
        }
        let n = examples.len();
        assert_eq!(n, 3600);

        let all: BTreeMap<u32, f64> = [(0, 1.0), (1, 1.0)].into_iter().collect();
        assert_eq!(downsample(examples.clone(), &all, 1).unwrap().len(), n);

        let half: BTreeMap<u32, f64> = [(0, 0.5), (1, 0.5)].into_iter().collect();
        let kept = downsample(examples.clone(), &half, 1).unwrap();
        let expect = n as f64 * 0.5;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!(
            (kept.len() as f64 - expect).abs() < 3.0 * sigma,
            "kept {} of {n}",
            kept.len()
        );
        let kept2 = downsample(examples.clone(), &half, 1).unwrap();
        let ids: Vec<u64> = kept.iter().map(|e| e.request_id).collect();
        let ids2: Vec<u64> = kept2.iter().map(|e| e.request_id).collect();
        assert_eq!(ids, ids2);

        let bad: BTreeMap<u32, f64> = [(0, 1.5)].into_iter().collect();
        assert!(downsample(examples, &bad, 1).is_err());
    }

    #[test]
    fn event_log_roundtrip() {
        let events = collect_events(test_stream_cfg(), 31);
        let dir = std::env::temp_dir().join(format!("evlog-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("events.jsonl");
        let n = write_event_log(&path, events.iter().take(100)).unwrap();
        assert_eq!(n, 100);
        let back = read_event_log(&path).unwrap();
        assert_eq!(back.len(), 100);
        assert_eq!(&back[..], &events[..100]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
