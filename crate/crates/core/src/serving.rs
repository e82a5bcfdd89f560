//! Serving infrastructure: component-wise partial weight synchronization,
//! the multi-version registry, the embedding feature store, and the three
//! inference tiers' in-process cores.
//!
//! Synchronization moves whole named blocks. A publisher ranks blocks by how
//! much their update counters advanced since their last publish, breaking
//! ties round-robin, and additionally forces any block that has sat out
//! close to a full rotation, so every block is republished at least every
//! ceil(1/fraction) publishes. Server-side state lives behind an atomically
//! swapped immutable snapshot: a reader acquires one `Arc` per request and
//! can never observe a torn mix of blocks.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::encoder::{encode_request, EncoderConfig, ItemFeatures};
use crate::error::{Error, Result};
use crate::expert::{expert_predict, ExpertCandidate, ExpertConfig, ExpertRequest};
use crate::fm::FM_PREFIX;
use crate::params::ParamSet;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Hex encoding of f64 vectors (bit-exact, little-endian per value).
// ---------------------------------------------------------------------------

pub fn f64s_to_hex(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        for b in v.to_le_bytes() {
            s.push_str(&format!("{b:02x}"));
        }
    }
    s
}

pub fn hex_to_f64s(hex: &str) -> Result<Vec<f64>> {
    let bytes = hex.as_bytes();
    if bytes.len() % 16 != 0 {
        return Err(Error::Wire(format!(
            "hex vector length {} not a multiple of 16",
            bytes.len()
        )));
    }
    let nib = |c: u8| -> Result<u8> {
        match c {
            b'0'..=b'9' => Ok(c - b'0'),
            b'a'..=b'f' => Ok(c - b'a' + 10),
            b'A'..=b'F' => Ok(c - b'A' + 10),
            _ => Err(Error::Wire(format!("bad hex digit {}", c as char))),
        }
    };
    let mut out = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks(16) {
        let mut raw = [0u8; 8];
        for (i, pair) in chunk.chunks(2).enumerate() {
            raw[i] = (nib(pair[0])? << 4) | nib(pair[1])?;
        }
        out.push(f64::from_le_bytes(raw));
    }
    Ok(out)
}

/// Stable content checksum of a parameter set.
pub fn paramset_checksum(params: &ParamSet) -> u64 {
    let mut bytes = Vec::new();
    for (name, block) in params.iter() {
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&block.counter.to_le_bytes());
        for v in block.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fnv1a64(&bytes)
}

// ---------------------------------------------------------------------------
// Partial publication
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DeltaBlock {
    pub name: String,
    pub counter: u64,
    pub tensor: Tensor,
}

/// A consistent partial snapshot of trainer weights.
#[derive(Debug, Clone)]
pub struct WeightDelta {
    pub version: String,
    pub seq: u64,
    pub blocks: Vec<DeltaBlock>,
}

/// Publisher-side state for one model version.
pub struct Publisher {
    version: String,
    next_seq: u64,
    /// Update counter at each block's last publication.
    published_counter: BTreeMap<String, u64>,
    /// Publishes since each block was last included.
    age: BTreeMap<String, u64>,
    order: Vec<String>,
    cursor: usize,
}

impl Publisher {
    /// Track the given blocks (typically the pruned inference subgraph).
    pub fn new(version: impl Into<String>, blocks: &ParamSet) -> Self {
        let order: Vec<String> = blocks.names().map(|s| s.to_string()).collect();
        Self {
            version: version.into(),
            next_seq: 1,
            published_counter: order.iter().map(|n| (n.clone(), 0)).collect(),
            age: order.iter().map(|n| (n.clone(), 0)).collect(),
            order,
            cursor: 0,
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Select ceil(fraction * n) blocks: any block one publish away from a
    /// full rotation is forced in; the rest are ranked by counter advance
    /// since last publish, with a round-robin tiebreak.
    pub fn publish_partial(&mut self, trainer: &ParamSet, fraction: f64) -> Result<WeightDelta> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "publish fraction must be in (0, 1], got {fraction}"
            )));
        }
        let n = self.order.len();
        if n == 0 {
            return Err(Error::Config("publisher tracks no blocks".into()));
        }
        let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
        let cycle = n.div_ceil(k);
        let force_age = cycle.saturating_sub(1) as u64;

        let mut ranked: Vec<(bool, u64, usize, usize)> = self
            .order
            .iter()
            .enumerate()
            .map(|(idx, name)| {
                let advance = trainer.counter(name) - self.published_counter[name];
                let rr = (idx + n - self.cursor) % n;
                let forced = cycle > 1 && self.age[name] >= force_age;
                (forced, advance, rr, idx)
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.0.cmp(&a.0) // forced first
                .then(b.1.cmp(&a.1)) // larger advance first
                .then(a.2.cmp(&b.2)) // round-robin order
        });
        let chosen: Vec<usize> = ranked.iter().take(k).map(|r| r.3).collect();

        let mut blocks = Vec::with_capacity(k);
        for &idx in &chosen {
            let name = &self.order[idx];
            let block = trainer
                .get(name)
                .ok_or_else(|| Error::UnknownBlock(name.clone()))?;
            blocks.push(DeltaBlock {
                name: name.clone(),
                counter: block.counter,
                tensor: block.tensor.clone(),
            });
            self.published_counter.insert(name.clone(), block.counter);
            self.age.insert(name.clone(), 0);
        }
        for (idx, name) in self.order.iter().enumerate() {
            if !chosen.contains(&idx) {
                *self.age.get_mut(name).unwrap() += 1;
            }
        }
        self.cursor = (self.cursor + k) % n;

        let seq = self.next_seq;
        self.next_seq += 1;
        Ok(WeightDelta {
            version: self.version.clone(),
            seq,
            blocks,
        })
    }
}

// ---------------------------------------------------------------------------
// Server-side snapshots
// ---------------------------------------------------------------------------

/// Immutable server-side weight snapshot.
#[derive(Debug)]
pub struct Snapshot {
    pub params: ParamSet,
    pub applied_seq: u64,
    pub checksum: u64,
    /// Simulated time of the last applied delta (staleness metadata).
    pub applied_at: u64,
}

/// Swappable snapshot holder: one writer applies deltas, many readers each
/// grab an `Arc` and compute against a single consistent state.
pub struct ServerWeights {
    inner: Mutex<Arc<Snapshot>>,
}

impl ServerWeights {
    pub fn new(params: ParamSet, now: u64) -> Self {
        let checksum = paramset_checksum(&params);
        Self {
            inner: Mutex::new(Arc::new(Snapshot {
                params,
                applied_seq: 0,
                checksum,
                applied_at: now,
            })),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.inner.lock().unwrap())
    }

    /// Apply a delta: all listed blocks replaced in one atomic swap. Stale
    /// sequence numbers are rejected with no change.
    pub fn apply_partial(&self, delta: &WeightDelta, now: u64) -> Result<u64> {
        let mut guard = self.inner.lock().unwrap();
        if delta.seq <= guard.applied_seq {
            return Err(Error::StaleDelta {
                got: delta.seq,
                last: guard.applied_seq,
            });
        }
        let mut params = guard.params.clone();
        for b in &delta.blocks {
            params.replace(&b.name, b.tensor.clone(), b.counter)?;
        }
        let checksum = paramset_checksum(&params);
        *guard = Arc::new(Snapshot {
            params,
            applied_seq: delta.seq,
            checksum,
            applied_at: now,
        });
        Ok(checksum)
    }
}

// ---------------------------------------------------------------------------
// Version registry
// ---------------------------------------------------------------------------

pub struct VersionEntry {
    pub weights: ServerWeights,
    pub active: bool,
    pub registered_at: u64,
}

/// Multi-version control: active model versions with isolated snapshots.
#[derive(Default)]
pub struct VersionRegistry {
    versions: BTreeMap<String, VersionEntry>,
    primary: Option<String>,
}

impl VersionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tag: impl Into<String>, pruned: ParamSet, now: u64) {
        let tag = tag.into();
        let first = self.versions.is_empty();
        self.versions.insert(
            tag.clone(),
            VersionEntry {
                weights: ServerWeights::new(pruned, now),
                active: true,
                registered_at: now,
            },
        );
        if first {
            self.primary = Some(tag);
        }
    }

    pub fn set_primary(&mut self, tag: &str) -> Result<()> {
        if !self.versions.contains_key(tag) {
            return Err(Error::VersionInactive(tag.to_string()));
        }
        self.primary = Some(tag.to_string());
        Ok(())
    }

    pub fn deactivate(&mut self, tag: &str) -> Result<()> {
        let entry = self
            .versions
            .get_mut(tag)
            .ok_or_else(|| Error::VersionInactive(tag.to_string()))?;
        entry.active = false;
        Ok(())
    }

    pub fn active_versions(&self) -> Vec<String> {
        self.versions
            .iter()
            .filter(|(_, e)| e.active)
            .map(|(t, _)| t.clone())
            .collect()
    }

    /// Resolve a requested version (or the primary) to its snapshot.
    pub fn resolve(&self, version: Option<&str>) -> Result<(String, Arc<Snapshot>)> {
        let tag = match version {
            Some(t) => t.to_string(),
            None => self
                .primary
                .clone()
                .ok_or_else(|| Error::BadRequest("no primary version registered".into()))?,
        };
        let entry = self
            .versions
            .get(&tag)
            .filter(|e| e.active)
            .ok_or_else(|| Error::VersionInactive(tag.clone()))?;
        Ok((tag, entry.weights.snapshot()))
    }

    pub fn apply_delta(&self, delta: &WeightDelta, now: u64) -> Result<u64> {
        let entry = self
            .versions
            .get(&delta.version)
            .filter(|e| e.active)
            .ok_or_else(|| Error::VersionInactive(delta.version.clone()))?;
        entry.weights.apply_partial(delta, now)
    }
}

// ---------------------------------------------------------------------------
// Online FM serving tier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FmEmbedRequest {
    pub version: Option<String>,
    pub history: Vec<ItemFeatures>,
    pub targets: Vec<ItemFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmEmbedResponse {
    pub version: String,
    pub checksum: u64,
    pub embeddings: Vec<Vec<f64>>,
}

/// Compute target-aware embeddings from a registry snapshot.
pub fn serve_fm(
    registry: &VersionRegistry,
    enc_cfg: &EncoderConfig,
    req: &FmEmbedRequest,
) -> Result<FmEmbedResponse> {
    if req.targets.is_empty() {
        return Err(Error::BadRequest("no targets in request".into()));
    }
    if req.targets.iter().any(|t| t.action.is_some()) {
        return Err(Error::BadRequest("targets must not carry actions".into()));
    }
    if req.history.iter().any(|h| h.action.is_none()) {
        return Err(Error::BadRequest("history items must carry actions".into()));
    }
    let (version, snapshot) = registry.resolve(req.version.as_deref())?;
    let embeddings = encode_request(
        &snapshot.params,
        FM_PREFIX,
        enc_cfg,
        &req.history,
        &req.targets,
    )?;
    Ok(FmEmbedResponse {
        version,
        checksum: snapshot.checksum,
        embeddings,
    })
}

// ---------------------------------------------------------------------------
// Offline logging tier: the embedding feature store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub request_id: u64,
    pub user_id: u64,
    pub item_id: u64,
    pub version: String,
    pub vector: Vec<f64>,
    pub served_ts: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EmbeddingLine {
    request_id: u64,
    user_id: u64,
    item_id: u64,
    version: String,
    served_ts: u64,
    vector_hex: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogTierConfig {
    /// Records buffered before an automatic flush to the log file.
    pub batch_size: usize,
    /// Unflushed-record capacity; appends beyond it signal backpressure.
    pub capacity: usize,
}

impl Default for LogTierConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            capacity: 65_536,
        }
    }
}

/// Append-only embedding store with (request, item, version) uniqueness,
/// optional file persistence, and batched flushing.
pub struct EmbeddingStore {
    records: Vec<EmbeddingRecord>,
    index: BTreeMap<(u64, u64, String), usize>,
    file: Option<BufWriter<std::fs::File>>,
    path: Option<PathBuf>,
    cfg: LogTierConfig,
    unflushed: usize,
}

impl EmbeddingStore {
    pub fn new_in_memory() -> Self {
        Self {
            records: Vec::new(),
            index: BTreeMap::new(),
            file: None,
            path: None,
            cfg: LogTierConfig {
                batch_size: usize::MAX,
                capacity: usize::MAX,
            },
            unflushed: 0,
        }
    }

    pub fn with_file(path: &Path, cfg: LogTierConfig) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(Self {
            records: Vec::new(),
            index: BTreeMap::new(),
            file: Some(BufWriter::new(file)),
            path: Some(path.to_path_buf()),
            cfg,
            unflushed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append one record. Duplicate (request, candidate, version) keys are
    /// rejected; exceeding the unflushed capacity signals backpressure.
    pub fn append(&mut self, record: EmbeddingRecord) -> Result<()> {
        let key = (record.request_id, record.item_id, record.version.clone());
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateEmbedding {
                request_id: record.request_id,
                item_id: record.item_id,
                version: record.version,
            });
        }
        if self.unflushed >= self.cfg.capacity {
            return Err(Error::Backpressure {
                pending: self.unflushed,
            });
        }
        if let Some(w) = self.file.as_mut() {
            let line = EmbeddingLine {
                request_id: record.request_id,
                user_id: record.user_id,
                item_id: record.item_id,
                version: record.version.clone(),
                served_ts: record.served_ts,
                vector_hex: f64s_to_hex(&record.vector),
            };
            let json = serde_json::to_string(&line)
                .map_err(|e| Error::Wire(format!("embedding encode: {e}")))?;
            w.write_all(json.as_bytes())?;
            w.write_all(b"\n")?;
            self.unflushed += 1;
            if self.unflushed >= self.cfg.batch_size {
                self.flush()?;
            }
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.file.as_mut() {
            w.flush()?;
        }
        self.unflushed = 0;
        Ok(())
    }

    pub fn get(&self, request_id: u64, item_id: u64, version: &str) -> Option<&EmbeddingRecord> {
        self.index
            .get(&(request_id, item_id, version.to_string()))
            .map(|&i| &self.records[i])
    }

    /// All logged versions for one served candidate.
    pub fn all_versions(&self, request_id: u64, item_id: u64) -> BTreeMap<String, Vec<f64>> {
        let lo = (request_id, item_id, String::new());
        let hi = (request_id, item_id, "\u{10ffff}".to_string());
        self.index
            .range(lo..=hi)
            .map(|((_, _, v), &i)| (v.clone(), self.records[i].vector.clone()))
            .collect()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn per_version_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.version.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

pub fn read_embedding_log(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EmbeddingLine = serde_json::from_str(&line)
            .map_err(|e| Error::Wire(format!("embedding log line {}: {e}", i + 1)))?;
        out.push(EmbeddingRecord {
            request_id: parsed.request_id,
            user_id: parsed.user_id,
            item_id: parsed.item_id,
            version: parsed.version,
            vector: hex_to_f64s(&parsed.vector_hex)?,
            served_ts: parsed.served_ts,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Online expert serving tier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExpertPredictRequest {
    pub short_history: Vec<ItemFeatures>,
    pub candidates: Vec<ExpertCandidateInput>,
    pub user_embedding: Option<Vec<f64>>,
    /// When None, the tier fetches embeddings from the FM tier itself.
    pub precomputed: bool,
    /// Full history for the FM fetch path.
    pub fm_history: Vec<ItemFeatures>,
}

#[derive(Debug, Clone)]
pub struct ExpertCandidateInput {
    pub item: ItemFeatures,
    pub fm_embedding: Option<(String, Vec<f64>)>,
    pub surface_features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchFallback {
    /// Propagate FM-tier failures.
    Fail,
    /// Substitute zero embeddings when the FM tier fails.
    ZeroEmbedding,
}

/// In-process expert tier: expert weights behind a snapshot plus a handle to
/// the FM registry for fetch-directive requests.
pub struct ExpertServer {
    pub weights: ServerWeights,
    pub cfg: ExpertConfig,
    pub fm_encoder: EncoderConfig,
    pub fallback: FetchFallback,
    /// Simulated feature-assembly work (test hook for the latency contract).
    pub assembly_delay: std::time::Duration,
    pub fm_calls: AtomicU64,
}

impl ExpertServer {
    pub fn new(weights: ParamSet, cfg: ExpertConfig, fm_encoder: EncoderConfig) -> Self {
        Self {
            weights: ServerWeights::new(weights, 0),
            cfg,
            fm_encoder,
            fallback: FetchFallback::Fail,
            assembly_delay: std::time::Duration::ZERO,
            fm_calls: AtomicU64::new(0),
        }
    }

    /// Serve one request against the local FM registry.
    pub fn serve(
        &self,
        registry: &VersionRegistry,
        req: &ExpertPredictRequest,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        self.serve_via(
            |fm_req| serve_fm(registry, &self.fm_encoder, fm_req),
            req,
        )
    }

    /// Serve one request with a pluggable FM fetch (local registry or a wire
    /// call to the FM tier). With precomputed embeddings no fetch is made;
    /// otherwise the fetch and the surface-feature assembly run concurrently
    /// and are awaited together, so the added critical path is bounded by
    /// the longer of the two.
    pub fn serve_via<F>(
        &self,
        fetch: F,
        req: &ExpertPredictRequest,
    ) -> Result<BTreeMap<String, Vec<f64>>>
    where
        F: FnOnce(&FmEmbedRequest) -> Result<FmEmbedResponse> + Send,
    {
        if req.candidates.is_empty() {
            return Err(Error::BadRequest("no candidates in request".into()));
        }
        let snapshot = self.weights.snapshot();

        let embeddings: Vec<Option<(String, Vec<f64>)>> = if !self.cfg.use_tae {
            vec![None; req.candidates.len()]
        } else if req.precomputed {
            req.candidates
                .iter()
                .map(|c| {
                    c.fm_embedding.clone().ok_or_else(|| {
                        Error::BadRequest("precomputed request missing an embedding".into())
                    })
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .map(Some)
                .collect()
        } else {
            let fm_req = FmEmbedRequest {
                version: Some(self.cfg.fm_version.clone()),
                history: req.fm_history.clone(),
                targets: req.candidates.iter().map(|c| c.item.clone()).collect(),
            };
            self.fm_calls.fetch_add(1, Ordering::SeqCst);
            let fetched = std::thread::scope(|scope| {
                let fm = scope.spawn(|| fetch(&fm_req));
                let assembly = scope.spawn(|| {
                    if !self.assembly_delay.is_zero() {
                        std::thread::sleep(self.assembly_delay);
                    }
                });
                assembly.join().expect("assembly panicked");
                fm.join().expect("fm fetch panicked")
            });
            match fetched {
                Ok(resp) => resp
                    .embeddings
                    .into_iter()
                    .map(|v| Some((resp.version.clone(), v)))
                    .collect(),
                Err(e) => match self.fallback {
                    FetchFallback::Fail => return Err(e),
                    FetchFallback::ZeroEmbedding => req
                        .candidates
                        .iter()
                        .map(|_| Some((self.cfg.fm_version.clone(), vec![0.0; self.cfg.fm_dim])))
                        .collect(),
                },
            }
        };

        let expert_req = ExpertRequest {
            short_history: req.short_history.clone(),
            surface: self.cfg.surface_id,
            candidates: req
                .candidates
                .iter()
                .zip(embeddings)
                .map(|(c, emb)| ExpertCandidate {
                    item: c.item.clone(),
                    fm_embedding: emb,
                    labels: BTreeMap::new(),
                    surface_features: c.surface_features.clone(),
                })
                .collect(),
            user_embedding: req.user_embedding.clone(),
        };
        expert_predict(&snapshot.params, &self.cfg, &expert_req)
    }
}
