//! Named, versioned parameter blocks, the Adam optimizer, and the
//! checkpoint file format.
//!
//! A `ParamSet` is the unit of model state everywhere: trainers own one,
//! serving tiers hold immutable snapshots of one, and partial weight
//! synchronization moves individual blocks between them. The per-block
//! update counter records how many optimizer steps touched the block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub tensor: Tensor,
    pub counter: u64,
}

/// Named map of parameter blocks with monotone update counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    blocks: BTreeMap<String, ParamBlock>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.blocks
            .insert(name.into(), ParamBlock { tensor, counter: 0 });
    }

    pub fn insert_block(&mut self, name: impl Into<String>, block: ParamBlock) {
        self.blocks.insert(name.into(), block);
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .get(name)
            .map(|b| &b.tensor)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.blocks.get(name).map(|b| b.counter).unwrap_or(0)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamBlock)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.blocks.values().map(|b| b.tensor.len()).sum()
    }

    /// Replace a block's tensor and counter wholesale (partial sync apply).
    pub fn replace(&mut self, name: &str, tensor: Tensor, counter: u64) -> Result<()> {
        let block = self
            .blocks
            .get_mut(name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))?;
        if block.tensor.shape() != tensor.shape() {
            return Err(Error::BlockShape(format!(
                "{name}: have {:?}, delta carries {:?}",
                block.tensor.shape(),
                tensor.shape()
            )));
        }
        block.tensor = tensor;
        block.counter = counter;
        Ok(())
    }

    /// Retain only blocks whose name passes the predicate.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .filter(|(name, _)| keep(name))
                .map(|(name, block)| (name.clone(), block.clone()))
                .collect(),
        }
    }

    /// Insert every block into a tape as a leaf and remember the mapping.
    pub fn tape_vars(&self, tape: &mut Tape) -> TapeParams {
        let mut vars = BTreeMap::new();
        for (name, block) in &self.blocks {
            vars.insert(name.clone(), tape.leaf(block.tensor.clone()));
        }
        TapeParams { vars }
    }
}

/// Parameter blocks materialized as leaves on one tape.
pub struct TapeParams {
    vars: BTreeMap<String, Var>,
}

impl TapeParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    /// Pull gradients for every block that received one.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Accumulate `src` gradients into `dst` (summing overlapping blocks).
pub fn merge_grads(dst: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(existing) => existing.add_assign(&g),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Per-block first/second moment state.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: BTreeMap<String, AdamMoments>,
}

#[derive(Debug, Clone)]
struct AdamMoments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// One Adam update. Blocks without a gradient are left untouched; touched
/// blocks get their update counter incremented.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, grad) in grads {
        let block = params
            .blocks
            .get_mut(name)
            .ok_or_else(|| Error::UnknownBlock(name.clone()))?;
        if block.tensor.shape() != grad.shape() {
            return Err(Error::BlockShape(format!(
                "{name}: param {:?} vs grad {:?}",
                block.tensor.shape(),
                grad.shape()
            )));
        }
        let entry = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| AdamMoments {
                m: Tensor::zeros(grad.rows(), grad.cols()),
                v: Tensor::zeros(grad.rows(), grad.cols()),
                t: 0,
            });
        entry.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(entry.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(entry.t as i32);
        for i in 0..grad.len() {
            let g = grad.data()[i];
            let m = &mut entry.m.data_mut()[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            let v = &mut entry.v.data_mut()[i];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            block.tensor.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        block.counter += 1;
        if !block.tensor.is_finite() {
            return Err(Error::NonFinite(format!("adam update of block {name}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   magic "FMCK" | format version u32 | tag length u32 | tag bytes |
//   block count u32 | per block:
//     name length u32 | name bytes | rows u32 | cols u32 | counter u64 |
//     rows*cols f64 values, row-major
//
// All integers and floats little-endian. The tag carries the selected
// foundation-model version for expert checkpoints and is empty otherwise.
// ---------------------------------------------------------------------------

pub fn write_checkpoint(path: &Path, params: &ParamSet, version_tag: Option<&str>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let tag = version_tag.unwrap_or("");
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, block) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(block.tensor.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(block.tensor.cols() as u32).to_le_bytes());
        buf.extend_from_slice(&block.counter.to_le_bytes());
        for v in block.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamSet, Option<String>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ParamSet, Option<String>)> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {:?}",
            &magic[..magic.len().min(4)]
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {version}"
        )));
    }
    let tag_len = cur.u32()? as usize;
    let tag_bytes = cur.take(tag_len)?;
    let tag = std::str::from_utf8(tag_bytes)
        .map_err(|_| Error::CheckpointFormat("tag is not UTF-8".into()))?
        .to_string();
    let count = cur.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::CheckpointFormat("block name is not UTF-8".into()))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let counter = cur.u64()?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(cur.f64()?);
        }
        let tensor = Tensor::new(rows, cols, data)
            .map_err(|e| Error::CheckpointFormat(format!("block {name}: {e}")))?;
        params.insert_block(name, ParamBlock { tensor, counter });
    }
    let tag = if tag.is_empty() { None } else { Some(tag) };
    Ok((params, tag))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
