//! Target-aware sequence encoder.
//!
//! Builds one unified sequence per request: the user's chronological history
//! impressions followed by the request's target items, embedded through a
//! shared item/context transformation (history items additionally receive an
//! action embedding by direct summation). A stack of gated-attention blocks
//! then produces one target-aware embedding per target position.
//!
//! The attention mask makes history causal and lets each target attend to
//! the full history and itself only, never to sibling targets, so a target's
//! embedding does not depend on what else was in the request.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{AttentionMask, Tape, Var};
use crate::params::{ParamSet, TapeParams};
use crate::rng::{hash_keys, Rng};
use crate::tensor::Tensor;

/// Categorical features of one item occurrence.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ItemFeatures {
    pub item_id: u64,
    pub surface_id: u32,
    pub time_bucket: u32,
    /// Action the user took; present exactly for history impressions.
    pub action: Option<u8>,
}

impl ItemFeatures {
    pub fn history(item_id: u64, surface_id: u32, time_bucket: u32, action: u8) -> Self {
        Self {
            item_id,
            surface_id,
            time_bucket,
            action: Some(action),
        }
    }

    pub fn target(item_id: u64, surface_id: u32, time_bucket: u32) -> Self {
        Self {
            item_id,
            surface_id,
            time_bucket,
            action: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output embedding dimension d.
    pub dim: usize,
    /// Number of stacked attention blocks.
    pub layers: usize,
    /// History truncation length; most recent impressions are kept.
    pub max_history: usize,
    pub item_embed_dim: usize,
    pub ctx_embed_dim: usize,
    pub item_buckets: usize,
    pub ctx_buckets: usize,
    pub action_kinds: usize,
    /// Hidden width of the item/context fusion perceptron.
    pub fuse_hidden: usize,
    /// Test configuration: the fusion passes concat(item, ctx) straight
    /// through (requires dim == item_embed_dim + ctx_embed_dim).
    #[serde(default)]
    pub fuse_identity: bool,
}

impl EncoderConfig {
    /// Small configuration used throughout unit tests.
    pub fn test_small() -> Self {
        Self {
            dim: 32,
            layers: 2,
            max_history: 16,
            item_embed_dim: 32,
            ctx_embed_dim: 16,
            item_buckets: 512,
            ctx_buckets: 64,
            action_kinds: 5,
            fuse_hidden: 48,
            fuse_identity: false,
        }
    }

    /// Quarter-scale analog of the mid-size production encoder.
    pub fn mid_analog() -> Self {
        Self {
            dim: 64,
            layers: 4,
            max_history: 24,
            item_embed_dim: 64,
            ctx_embed_dim: 32,
            item_buckets: 2048,
            ctx_buckets: 128,
            action_kinds: 5,
            fuse_hidden: 96,
            fuse_identity: false,
        }
    }

    /// Double-depth, double-width analog of the large production encoder.
    pub fn large_analog() -> Self {
        Self {
            dim: 128,
            layers: 8,
            max_history: 24,
            item_embed_dim: 128,
            ctx_embed_dim: 64,
            item_buckets: 2048,
            ctx_buckets: 128,
            action_kinds: 5,
            fuse_hidden: 192,
            fuse_identity: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("layers", self.layers),
            ("item_embed_dim", self.item_embed_dim),
            ("ctx_embed_dim", self.ctx_embed_dim),
            ("item_buckets", self.item_buckets),
            ("ctx_buckets", self.ctx_buckets),
            ("action_kinds", self.action_kinds),
            ("fuse_hidden", self.fuse_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if self.fuse_identity && self.dim != self.item_embed_dim + self.ctx_embed_dim {
            return Err(Error::Config(format!(
                "fuse_identity requires dim == item_embed_dim + ctx_embed_dim, got {} vs {}",
                self.dim,
                self.item_embed_dim + self.ctx_embed_dim
            )));
        }
        Ok(())
    }

    pub fn item_index(&self, item_id: u64) -> usize {
        hash_keys(&[0x11, item_id]) as usize % self.item_buckets
    }

    pub fn ctx_index(&self, surface_id: u32, time_bucket: u32) -> usize {
        hash_keys(&[0x22, surface_id as u64, time_bucket as u64]) as usize % self.ctx_buckets
    }
}

/// Attention mask for N history positions followed by M target positions.
pub fn build_mask(n_history: usize, n_targets: usize) -> AttentionMask {
    let n = n_history + n_targets;
    let mut allow = vec![false; n * n];
    for i in 0..n_history {
        for j in 0..=i {
            allow[i * n + j] = true;
        }
    }
    for t in 0..n_targets {
        let row = n_history + t;
        for j in 0..n_history {
            allow[row * n + j] = true;
        }
        allow[row * n + row] = true;
    }
    AttentionMask::new(n, allow).expect("mask sized by construction")
}

/// Unified history+target sequence, embedded and masked, living on a tape.
pub struct UnifiedSequence {
    pub n_history: usize,
    pub n_targets: usize,
    pub mask: Arc<AttentionMask>,
    /// (n_history + n_targets) x dim position embeddings.
    pub positions: Var,
}

/// Register freshly initialized encoder blocks under `prefix`.
pub fn init_encoder_params(params: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, seed: u64) {
    let concat = cfg.item_embed_dim + cfg.ctx_embed_dim;
    let table = |name: &str, rows: usize, cols: usize, std: f64| -> Tensor {
        let mut rng = Rng::stream(seed, name);
        Tensor::new(rows, cols, rng.normal_vec(rows * cols, std)).unwrap()
    };
    let put = |params: &mut ParamSet, name: String, rows: usize, cols: usize, std: f64| {
        let t = table(&name, rows, cols, std);
        params.insert(name, t);
    };
    put(
        params,
        format!("{prefix}.embed.item"),
        cfg.item_buckets,
        cfg.item_embed_dim,
        0.2,
    );
    put(
        params,
        format!("{prefix}.embed.ctx"),
        cfg.ctx_buckets,
        cfg.ctx_embed_dim,
        0.2,
    );
    put(
        params,
        format!("{prefix}.embed.action"),
        cfg.action_kinds,
        cfg.dim,
        0.2,
    );

    if cfg.fuse_identity {
        params.insert(format!("{prefix}.fuse.skip"), Tensor::identity(concat));
        put(
            params,
            format!("{prefix}.fuse.w1"),
            concat,
            cfg.fuse_hidden,
            (1.0 / concat as f64).sqrt(),
        );
        params.insert(
            format!("{prefix}.fuse.w2"),
            Tensor::zeros(cfg.fuse_hidden, cfg.dim),
        );
    } else {
        put(
            params,
            format!("{prefix}.fuse.skip"),
            concat,
            cfg.dim,
            (1.0 / concat as f64).sqrt(),
        );
        put(
            params,
            format!("{prefix}.fuse.w1"),
            concat,
            cfg.fuse_hidden,
            (1.0 / concat as f64).sqrt(),
        );
        put(
            params,
            format!("{prefix}.fuse.w2"),
            cfg.fuse_hidden,
            cfg.dim,
            (1.0 / cfg.fuse_hidden as f64).sqrt(),
        );
    }
    params.insert(format!("{prefix}.fuse.b1"), Tensor::zeros(1, cfg.fuse_hidden));
    params.insert(format!("{prefix}.fuse.b2"), Tensor::zeros(1, cfg.dim));

    let proj_std = (1.0 / cfg.dim as f64).sqrt();
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wg"] {
            put(params, format!("{prefix}.layer{l}.{w}"), cfg.dim, cfg.dim, proj_std);
        }
        // Small output projection keeps the residual stream tame at init.
        put(
            params,
            format!("{prefix}.layer{l}.wo"),
            cfg.dim,
            cfg.dim,
            proj_std * 0.5,
        );
    }
}

/// Names of the encoder blocks (the inference subgraph) under `prefix`.
pub fn is_encoder_block(prefix: &str, name: &str) -> bool {
    name.starts_with(&format!("{prefix}.embed."))
        || name.starts_with(&format!("{prefix}.fuse."))
        || name.starts_with(&format!("{prefix}.layer"))
}

/// Shared item/context transformation f applied row-wise:
/// f(x) = x W_skip + silu(x W1 + b1) W2 + b2.
fn fuse_rows(tape: &mut Tape, params: &TapeParams, prefix: &str, x: Var) -> Result<Var> {
    let skip = tape.matmul(x, params.var(&format!("{prefix}.fuse.skip"))?)?;
    let h = tape.matmul(x, params.var(&format!("{prefix}.fuse.w1"))?)?;
    let h = tape.add(h, params.var(&format!("{prefix}.fuse.b1"))?)?;
    let h = tape.silu(h);
    let h = tape.matmul(h, params.var(&format!("{prefix}.fuse.w2"))?)?;
    let h = tape.add(h, params.var(&format!("{prefix}.fuse.b2"))?)?;
    tape.add(skip, h)
}

/// Embed a batch of item occurrences as rows. Rows with `with_action` get
/// the action embedding added by direct summation.
fn embed_rows(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    cfg: &EncoderConfig,
    items: &[&ItemFeatures],
    with_action: bool,
) -> Result<Var> {
    let item_idx: Vec<usize> = items.iter().map(|f| cfg.item_index(f.item_id)).collect();
    let ctx_idx: Vec<usize> = items
        .iter()
        .map(|f| cfg.ctx_index(f.surface_id, f.time_bucket))
        .collect();
    let emb_p = tape.gather_rows(params.var(&format!("{prefix}.embed.item"))?, item_idx)?;
    let emb_c = tape.gather_rows(params.var(&format!("{prefix}.embed.ctx"))?, ctx_idx)?;
    let x = tape.concat_cols(emb_p, emb_c)?;
    let base = fuse_rows(tape, params, prefix, x)?;
    if !with_action {
        return Ok(base);
    }
    let action_idx: Vec<usize> = items
        .iter()
        .map(|f| {
            let a = f.action.ok_or_else(|| {
                Error::Contract(format!("history item {} has no action", f.item_id))
            })?;
            if a as usize >= cfg.action_kinds {
                return Err(Error::Contract(format!(
                    "action {a} out of {} kinds",
                    cfg.action_kinds
                )));
            }
            Ok(a as usize)
        })
        .collect::<Result<_>>()?;
    let emb_a = tape.gather_rows(params.var(&format!("{prefix}.embed.action"))?, action_idx)?;
    tape.add(base, emb_a)
}

/// Embedding of one history impression: f(item, ctx) + action embedding.
pub fn embed_history_item(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    cfg: &EncoderConfig,
    feat: &ItemFeatures,
) -> Result<Var> {
    if feat.action.is_none() {
        return Err(Error::Contract(format!(
            "history item {} requires an action",
            feat.item_id
        )));
    }
    embed_rows(tape, params, prefix, cfg, &[feat], true)
}

/// Embedding of one target item: f(item, ctx), no action term.
pub fn embed_target_item(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    cfg: &EncoderConfig,
    feat: &ItemFeatures,
) -> Result<Var> {
    if feat.action.is_some() {
        return Err(Error::Contract(format!(
            "target item {} must not carry an action",
            feat.item_id
        )));
    }
    embed_rows(tape, params, prefix, cfg, &[feat], false)
}

/// Assemble the unified sequence: history embeddings (most recent
/// `max_history`, oldest dropped), then target embeddings, plus the mask.
pub fn build_unified_sequence(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    cfg: &EncoderConfig,
    history: &[ItemFeatures],
    targets: &[ItemFeatures],
) -> Result<UnifiedSequence> {
    if targets.is_empty() {
        return Err(Error::Contract("request carries no targets".into()));
    }
    let start = history.len().saturating_sub(cfg.max_history);
    let kept: Vec<&ItemFeatures> = history[start..].iter().collect();
    let target_refs: Vec<&ItemFeatures> = targets.iter().collect();
    for t in &target_refs {
        if t.action.is_some() {
            return Err(Error::Contract(format!(
                "target item {} must not carry an action",
                t.item_id
            )));
        }
    }

    let target_emb = embed_rows(tape, params, prefix, cfg, &target_refs, false)?;
    let positions = if kept.is_empty() {
        target_emb
    } else {
        let hist_emb = embed_rows(tape, params, prefix, cfg, &kept, true)?;
        tape.stack_rows(vec![hist_emb, target_emb])?
    };
    Ok(UnifiedSequence {
        n_history: kept.len(),
        n_targets: targets.len(),
        mask: Arc::new(build_mask(kept.len(), targets.len())),
        positions,
    })
}

/// Run the block stack; returns final hidden states for every position.
pub fn encode_states(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    cfg: &EncoderConfig,
    seq: &UnifiedSequence,
) -> Result<Var> {
    let inv_sqrt_d = 1.0 / (cfg.dim as f64).sqrt();
    let mut h = seq.positions;
    for l in 0..cfg.layers {
        let x = tape.layer_norm(h);
        let q = tape.matmul(x, params.var(&format!("{prefix}.layer{l}.wq"))?)?;
        let k = tape.matmul(x, params.var(&format!("{prefix}.layer{l}.wk"))?)?;
        let v = tape.matmul(x, params.var(&format!("{prefix}.layer{l}.wv"))?)?;
        let g = tape.matmul(x, params.var(&format!("{prefix}.layer{l}.wg"))?)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, inv_sqrt_d);
        let attn = tape.masked_softmax(scores, Arc::clone(&seq.mask))?;
        let mixed = tape.matmul(attn, v)?;
        let gate = tape.silu(g);
        let gated = tape.mul(mixed, gate)?;
        let out = tape.matmul(gated, params.var(&format!("{prefix}.layer{l}.wo"))?)?;
        h = tape.add(h, out)?;
    }
    Ok(h)
}

/// Encode a sequence and return the hidden states at target positions only:
/// one target-aware embedding per target, as an M x dim matrix.
pub fn encode(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    cfg: &EncoderConfig,
    seq: &UnifiedSequence,
) -> Result<Var> {
    let h = encode_states(tape, params, prefix, cfg, seq)?;
    let idx: Vec<usize> = (seq.n_history..seq.n_history + seq.n_targets).collect();
    tape.gather_rows(h, idx)
}

/// Convenience: full forward from raw features to target embeddings against
/// a plain parameter set (used by serving paths).
pub fn encode_request(
    params: &ParamSet,
    prefix: &str,
    cfg: &EncoderConfig,
    history: &[ItemFeatures],
    targets: &[ItemFeatures],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let tp = params.tape_vars(&mut tape);
    let seq = build_unified_sequence(&mut tape, &tp, prefix, cfg, history, targets)?;
    let out = encode(&mut tape, &tp, prefix, cfg, &seq)?;
    let t = tape.value(out);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Target-independent user summary: run the stack over the history alone
/// (causal mask, no targets) and mean-pool the final states. Empty history
/// gives a zero vector.
pub fn encode_history_summary(
    params: &ParamSet,
    prefix: &str,
    cfg: &EncoderConfig,
    history: &[ItemFeatures],
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Ok(vec![0.0; cfg.dim]);
    }
    let start = history.len().saturating_sub(cfg.max_history);
    let kept: Vec<&ItemFeatures> = history[start..].iter().collect();
    let mut tape = Tape::new();
    let tp = params.tape_vars(&mut tape);
    let positions = embed_rows(&mut tape, &tp, prefix, cfg, &kept, true)?;
    let seq = UnifiedSequence {
        n_history: kept.len(),
        n_targets: 0,
        mask: Arc::new(build_mask(kept.len(), 0)),
        positions,
    };
    let states = encode_states(&mut tape, &tp, prefix, cfg, &seq)?;
    let pooled = tape.mean_rows(states);
    Ok(tape.value(pooled).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    fn test_cfg() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            layers: 2,
            max_history: 8,
            item_embed_dim: 6,
            ctx_embed_dim: 4,
            item_buckets: 32,
            ctx_buckets: 16,
            action_kinds: 4,
            fuse_hidden: 10,
            fuse_identity: false,
        }
    }

    fn fresh(cfg: &EncoderConfig, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        init_encoder_params(&mut p, "fm", cfg, seed);
        p
    }

    fn hist(id: u64, action: u8) -> ItemFeatures {
        ItemFeatures::history(id, 0, 3, action)
    }

    fn tgt(id: u64) -> ItemFeatures {
        ItemFeatures::target(id, 0, 3)
    }

    /// Straight-line re-implementation of the history embedding: gather the
    /// hashed rows, run the fusion perceptron with plain vector math, add
    /// the action row.
    fn straight_line_history_embed(
        params: &ParamSet,
        cfg: &EncoderConfig,
        feat: &ItemFeatures,
    ) -> Vec<f64> {
        let item = params.tensor("fm.embed.item").unwrap();
        let ctx = params.tensor("fm.embed.ctx").unwrap();
        let act = params.tensor("fm.embed.action").unwrap();
        let mut x: Vec<f64> = item.row(cfg.item_index(feat.item_id)).to_vec();
        x.extend_from_slice(ctx.row(cfg.ctx_index(feat.surface_id, feat.time_bucket)));

        let matvec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; m.cols()];
            for (r, &vv) in v.iter().enumerate() {
                for (o, &mv) in out.iter_mut().zip(m.row(r)) {
                    *o += vv * mv;
                }
            }
            out
        };
        let silu = |v: f64| v / (1.0 + (-v).exp());

        let skip = matvec(params.tensor("fm.fuse.skip").unwrap(), &x);
        let mut h = matvec(params.tensor("fm.fuse.w1").unwrap(), &x);
        for (hv, b) in h.iter_mut().zip(params.tensor("fm.fuse.b1").unwrap().row(0)) {
            *hv = silu(*hv + b);
        }
        let mut out = matvec(params.tensor("fm.fuse.w2").unwrap(), &h);
        for ((o, s), b) in out
            .iter_mut()
            .zip(skip.iter())
            .zip(params.tensor("fm.fuse.b2").unwrap().row(0))
        {
            *o += s + b;
        }
        let a_row = act.row(feat.action.unwrap() as usize);
        for (o, a) in out.iter_mut().zip(a_row) {
            *o += a;
        }
        out
    }

    #[test]
    fn history_embed_matches_straight_line_oracle() {
        let cfg = test_cfg();
        let params = fresh(&cfg, 9);
        let feat = hist(1234, 2);

        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        let v = embed_history_item(&mut tape, &tp, "fm", &cfg, &feat).unwrap();
        let got = tape.value(v).row(0).to_vec();
        let want = straight_line_history_embed(&params, &cfg, &feat);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-14, "{g} vs {w}");
        }
    }

    #[test]
    fn zero_action_table_reduces_history_to_target_embedding() {
        let cfg = test_cfg();
        let mut params = fresh(&cfg, 10);
        params.insert(
            "fm.embed.action",
            Tensor::zeros(cfg.action_kinds, cfg.dim),
        );
        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        let h = embed_history_item(&mut tape, &tp, "fm", &cfg, &hist(77, 1)).unwrap();
        let t = embed_target_item(&mut tape, &tp, "fm", &cfg, &tgt(77)).unwrap();
        assert_eq!(tape.value(h), tape.value(t));
    }

    #[test]
    fn identity_fusion_passes_concat_through() {
        let mut cfg = test_cfg();
        cfg.fuse_identity = true;
        cfg.dim = cfg.item_embed_dim + cfg.ctx_embed_dim;
        cfg.validate().unwrap();
        let params = fresh(&cfg, 11);
        let feat = hist(5, 0);

        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        let v = embed_history_item(&mut tape, &tp, "fm", &cfg, &feat).unwrap();
        let got = tape.value(v).row(0).to_vec();

        let item = params.tensor("fm.embed.item").unwrap();
        let ctx = params.tensor("fm.embed.ctx").unwrap();
        let act = params.tensor("fm.embed.action").unwrap();
        let mut want: Vec<f64> = item.row(cfg.item_index(feat.item_id)).to_vec();
        want.extend_from_slice(ctx.row(cfg.ctx_index(feat.surface_id, feat.time_bucket)));
        for (w, a) in want.iter_mut().zip(act.row(0)) {
            *w += a;
        }
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn contract_violations() {
        let cfg = test_cfg();
        let params = fresh(&cfg, 12);
        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        assert!(embed_history_item(&mut tape, &tp, "fm", &cfg, &tgt(1)).is_err());
        assert!(embed_target_item(&mut tape, &tp, "fm", &cfg, &hist(1, 0)).is_err());
        assert!(build_unified_sequence(&mut tape, &tp, "fm", &cfg, &[hist(1, 0)], &[]).is_err());
    }

    #[test]
    fn target_embedding_deterministic_and_shares_fusion_weights() {
        let cfg = test_cfg();
        let mut params = fresh(&cfg, 13);
        let emb = |params: &ParamSet, id: u64, historical: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let tp = params.tape_vars(&mut tape);
            let v = if historical {
                embed_history_item(&mut tape, &tp, "fm", &cfg, &hist(id, 1)).unwrap()
            } else {
                embed_target_item(&mut tape, &tp, "fm", &cfg, &tgt(id)).unwrap()
            };
            tape.value(v).row(0).to_vec()
        };
        assert_eq!(emb(&params, 9, false), emb(&params, 9, false));

        let before_t = emb(&params, 9, false);
        let before_h = emb(&params, 9, true);
        let mut w2 = params.tensor("fm.fuse.w2").unwrap().clone();
        w2.data_mut()[0] += 0.5;
        params.insert("fm.fuse.w2", w2);
        assert_ne!(before_t, emb(&params, 9, false));
        assert_ne!(before_h, emb(&params, 9, true));
    }

    #[test]
    fn zero_tables_give_bias_only_constant() {
        let cfg = test_cfg();
        let mut params = fresh(&cfg, 14);
        for name in ["fm.embed.item", "fm.embed.ctx"] {
            let t = params.tensor(name).unwrap();
            let z = Tensor::zeros(t.rows(), t.cols());
            params.insert(name, z);
        }
        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        let a = embed_target_item(&mut tape, &tp, "fm", &cfg, &tgt(1)).unwrap();
        let b = embed_target_item(&mut tape, &tp, "fm", &cfg, &tgt(999)).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn mask_shapes_and_rows() {
        // Lone target: length 1, mask [[true]].
        let m = build_mask(0, 1);
        assert_eq!(m.size(), 1);
        assert!(m.allowed(0, 0));

        // N=2 history, M=2 targets.
        let m = build_mask(2, 2);
        let row = |i: usize| (0..4).map(|j| m.allowed(i, j)).collect::<Vec<_>>();
        assert_eq!(row(2), vec![true, true, true, false]);
        assert_eq!(row(3), vec![true, true, false, true]);
        // History causal.
        assert_eq!(row(0), vec![true, false, false, false]);
        assert_eq!(row(1), vec![true, true, false, false]);
    }

    #[test]
    fn sequence_length_is_history_plus_targets() {
        let cfg = test_cfg();
        let params = fresh(&cfg, 15);
        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        let history = vec![hist(1, 0), hist(2, 1), hist(3, 2)];
        let targets = vec![tgt(4), tgt(5)];
        let seq =
            build_unified_sequence(&mut tape, &tp, "fm", &cfg, &history, &targets).unwrap();
        assert_eq!(tape.value(seq.positions).rows(), 5);
        assert_eq!(seq.n_history, 3);
        assert_eq!(seq.n_targets, 2);
    }

    #[test]
    fn over_long_history_keeps_most_recent() {
        let mut cfg = test_cfg();
        cfg.max_history = 2;
        let params = fresh(&cfg, 16);
        let full = vec![hist(1, 0), hist(2, 1), hist(3, 2)];
        let tail = vec![hist(2, 1), hist(3, 2)];
        let targets = vec![tgt(9)];

        let run = |history: &[ItemFeatures]| -> Tensor {
            let mut tape = Tape::new();
            let tp = params.tape_vars(&mut tape);
            let seq =
                build_unified_sequence(&mut tape, &tp, "fm", &cfg, history, &targets).unwrap();
            tape.value(seq.positions).clone()
        };
        assert_eq!(run(&full), run(&tail));
        assert_eq!(run(&full).rows(), 3);
    }

    #[test]
    fn batched_sequence_rows_match_single_item_embeddings() {
        let cfg = test_cfg();
        let params = fresh(&cfg, 17);
        let history = vec![hist(1, 0), hist(2, 3)];
        let targets = vec![tgt(4)];
        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        let seq =
            build_unified_sequence(&mut tape, &tp, "fm", &cfg, &history, &targets).unwrap();
        let h0 = embed_history_item(&mut tape, &tp, "fm", &cfg, &history[0]).unwrap();
        let t0 = embed_target_item(&mut tape, &tp, "fm", &cfg, &targets[0]).unwrap();
        assert_eq!(tape.value(seq.positions).row(0), tape.value(h0).row(0));
        assert_eq!(tape.value(seq.positions).row(2), tape.value(t0).row(0));
    }

    fn encode_targets(
        params: &ParamSet,
        cfg: &EncoderConfig,
        history: &[ItemFeatures],
        targets: &[ItemFeatures],
    ) -> Vec<Vec<f64>> {
        encode_request(params, "fm", cfg, history, targets).unwrap()
    }

    #[test]
    fn sibling_targets_do_not_change_an_embedding() {
        let cfg = test_cfg();
        let params = fresh(&cfg, 18);
        let history = vec![hist(1, 0), hist(2, 1), hist(3, 2)];
        let solo = encode_targets(&params, &cfg, &history, &[tgt(50)]);
        let with_sibling = encode_targets(&params, &cfg, &history, &[tgt(50), tgt(999)]);
        assert_eq!(solo[0], with_sibling[0]);

        let shuffled = encode_targets(&params, &cfg, &history, &[tgt(999), tgt(50)]);
        assert_eq!(solo[0], shuffled[1]);
    }

    #[test]
    fn permuting_targets_permutes_outputs() {
        let cfg = test_cfg();
        let params = fresh(&cfg, 19);
        let history = vec![hist(1, 0)];
        let abc = encode_targets(&params, &cfg, &history, &[tgt(10), tgt(20), tgt(30)]);
        let cab = encode_targets(&params, &cfg, &history, &[tgt(30), tgt(10), tgt(20)]);
        assert_eq!(abc[0], cab[1]);
        assert_eq!(abc[1], cab[2]);
        assert_eq!(abc[2], cab[0]);
    }

    #[test]
    fn no_future_leakage_into_earlier_history_states() {
        let cfg = test_cfg();
        let params = fresh(&cfg, 20);
        let run = |third: u64| -> Tensor {
            let mut tape = Tape::new();
            let tp = params.tape_vars(&mut tape);
            let history = vec![hist(1, 0), hist(2, 1), hist(third, 2)];
            let seq =
                build_unified_sequence(&mut tape, &tp, "fm", &cfg, &history, &[tgt(9)]).unwrap();
            let states = encode_states(&mut tape, &tp, "fm", &cfg, &seq).unwrap();
            tape.value(states).clone()
        };
        let a = run(3);
        let b = run(777);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn single_layer_hand_rolled_attention_trace() {
        // One history item, one target, dim 2, hand-set weights; the whole
        // forward is reproduced with straight-line scalar math.
        let cfg = EncoderConfig {
            dim: 2,
            layers: 1,
            max_history: 4,
            item_embed_dim: 1,
            ctx_embed_dim: 1,
            item_buckets: 8,
            ctx_buckets: 8,
            action_kinds: 2,
            fuse_hidden: 2,
            fuse_identity: true,
        };
        cfg.validate().unwrap();
        let mut params = ParamSet::new();
        init_encoder_params(&mut params, "fm", &cfg, 0);
        // Deterministic small tables.
        let mut item = Tensor::zeros(8, 1);
        for i in 0..8 {
            item.set(i, 0, 0.1 * i as f64 + 0.05);
        }
        params.insert("fm.embed.item", item);
        let mut ctx = Tensor::zeros(8, 1);
        for i in 0..8 {
            ctx.set(i, 0, -0.2 + 0.07 * i as f64);
        }
        params.insert("fm.embed.ctx", ctx);
        params.insert(
            "fm.embed.action",
            Tensor::new(2, 2, vec![0.03, -0.02, 0.11, 0.07]).unwrap(),
        );
        params.insert("fm.layer0.wq", Tensor::new(2, 2, vec![0.5, 0.1, -0.2, 0.4]).unwrap());
        params.insert("fm.layer0.wk", Tensor::new(2, 2, vec![0.3, -0.1, 0.2, 0.6]).unwrap());
        params.insert("fm.layer0.wv", Tensor::new(2, 2, vec![0.7, 0.2, -0.3, 0.5]).unwrap());
        params.insert("fm.layer0.wg", Tensor::new(2, 2, vec![0.4, -0.4, 0.1, 0.2]).unwrap());
        params.insert("fm.layer0.wo", Tensor::new(2, 2, vec![0.9, 0.05, -0.15, 0.8]).unwrap());

        let history = vec![hist(3, 1)];
        let targets = vec![tgt(5)];
        let got = encode_targets(&params, &cfg, &history, &targets);

        // Straight-line trace.
        let row_of = |f: &ItemFeatures, with_action: bool| -> [f64; 2] {
            let p = params
                .tensor("fm.embed.item")
                .unwrap()
                .get(cfg.item_index(f.item_id), 0);
            let c = params
                .tensor("fm.embed.ctx")
                .unwrap()
                .get(cfg.ctx_index(f.surface_id, f.time_bucket), 0);
            let mut row = [p, c];
            if with_action {
                let a = params.tensor("fm.embed.action").unwrap();
                row[0] += a.get(f.action.unwrap() as usize, 0);
                row[1] += a.get(f.action.unwrap() as usize, 1);
            }
            row
        };
        let x0 = row_of(&history[0], true);
        let x1 = row_of(&targets[0], false);

        let ln = |x: [f64; 2]| -> [f64; 2] {
            let mean = (x[0] + x[1]) / 2.0;
            let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
            let inv = 1.0 / (var + crate::graph::LAYER_NORM_EPS).sqrt();
            [(x[0] - mean) * inv, (x[1] - mean) * inv]
        };
        let matvec2 = |name: &str, v: [f64; 2]| -> [f64; 2] {
            let m = params.tensor(name).unwrap();
            [
                v[0] * m.get(0, 0) + v[1] * m.get(1, 0),
                v[0] * m.get(0, 1) + v[1] * m.get(1, 1),
            ]
        };
        let silu = |v: f64| v / (1.0 + (-v).exp());

        // Target row (position 1) attends to history (0) and itself.
        let n0 = ln(x0);
        let n1 = ln(x1);
        let q1 = matvec2("fm.layer0.wq", n1);
        let k0 = matvec2("fm.layer0.wk", n0);
        let k1 = matvec2("fm.layer0.wk", n1);
        let v0 = matvec2("fm.layer0.wv", n0);
        let v1 = matvec2("fm.layer0.wv", n1);
        let g1 = matvec2("fm.layer0.wg", n1);
        let scale = 1.0 / (2.0f64).sqrt();
        let s0 = (q1[0] * k0[0] + q1[1] * k0[1]) * scale;
        let s1 = (q1[0] * k1[0] + q1[1] * k1[1]) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let z = e0 + e1;
        let (a0, a1) = (e0 / z, e1 / z);
        let mixed = [a0 * v0[0] + a1 * v1[0], a0 * v0[1] + a1 * v1[1]];
        let gated = [mixed[0] * silu(g1[0]), mixed[1] * silu(g1[1])];
        let out = matvec2("fm.layer0.wo", gated);
        let want = [x1[0] + out[0], x1[1] + out[1]];

        assert!((got[0][0] - want[0]).abs() < 1e-12, "{} vs {}", got[0][0], want[0]);
        assert!((got[0][1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn full_encoder_gradient_matches_finite_differences() {
        let cfg = EncoderConfig {
            dim: 6,
            layers: 2,
            max_history: 4,
            item_embed_dim: 4,
            ctx_embed_dim: 2,
            item_buckets: 8,
            ctx_buckets: 4,
            action_kinds: 3,
            fuse_hidden: 5,
            fuse_identity: false,
        };
        let params = fresh(&cfg, 21);
        let history = vec![hist(1, 0), hist(2, 2), hist(3, 1)];
        let targets = vec![tgt(4), tgt(5)];

        let loss_of = |params: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let tp = params.tape_vars(&mut tape);
            let seq =
                build_unified_sequence(&mut tape, &tp, "fm", &cfg, &history, &targets).unwrap();
            let out = encode(&mut tape, &tp, "fm", &cfg, &seq).unwrap();
            // Weighted sum so every output coordinate matters.
            let w = Tensor::new(
                2,
                6,
                (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.31).collect(),
            )
            .unwrap();
            let wv = tape.leaf(w);
            let p = tape.mul(out, wv).unwrap();
            let s = tape.sum_all(p);
            tape.value(s).item()
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let tp = params.tape_vars(&mut tape);
        let seq = build_unified_sequence(&mut tape, &tp, "fm", &cfg, &history, &targets).unwrap();
        let out = encode(&mut tape, &tp, "fm", &cfg, &seq).unwrap();
        let w = Tensor::new(
            2,
            6,
            (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.31).collect(),
        )
        .unwrap();
        let wv = tape.leaf(w);
        let p = tape.mul(out, wv).unwrap();
        let s = tape.sum_all(p);
        let mut grads = tape.backward(s).unwrap();
        let by_name = tp.collect_grads(&mut grads);

        let h = 1e-5;
        for (name, analytic) in &by_name {
            // Probe a handful of coordinates per block to keep runtime sane.
            let len = analytic.len();
            for probe in 0..len.min(5) {
                let i = probe * (len / 5.min(len)).max(1) % len;
                let mut plus = params.clone();
                let mut minus = params.clone();
                {
                    let t = plus.tensor(name).unwrap().clone();
                    let mut t2 = t.clone();
                    t2.data_mut()[i] += h;
                    plus.insert(name.clone(), t2);
                    let mut t3 = t;
                    t3.data_mut()[i] -= h;
                    minus.insert(name.clone(), t3);
                }
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-5, "{name}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }
}
