//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A `Tape` records a computation as a flat list of nodes; `Var` is an index
//! into it. Backward walks the list in reverse and accumulates exact
//! gradients. Graphs are single-threaded and short-lived: one per forward
//! pass, typically one per training request.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp applied inside every cross-entropy.
pub const PROB_CLIP: f64 = 1e-7;

/// Epsilon inside layer-norm's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask over an n x n score matrix.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != n * n {
            return Err(Error::Dimension(format!(
                "mask {n}x{n} needs {} entries, got {}",
                n * n,
                allow.len()
            )));
        }
        Ok(Self { n, allow })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    LayerNorm(Var),
    MaskedSoftmax(Var, Arc<AttentionMask>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    Bce(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a graph input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    /// Elementwise add. Shapes must match exactly, or `b` may be a 1 x cols
    /// row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y, "add")?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise multiply with the same broadcast rule as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y, "mul")?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Row-wise layer normalization (no learned affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            layer_norm_row(xv.row(r), out.row_mut(r));
        }
        self.push(out, Op::LayerNorm(x))
    }

    /// Row-wise softmax restricted to mask-allowed entries; disallowed
    /// entries produce exact zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<AttentionMask>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != mask.size() || xv.cols() != mask.size() {
            return Err(Error::Dimension(format!(
                "masked_softmax: scores {}x{} vs mask {}",
                xv.rows(),
                xv.cols(),
                mask.size()
            )));
        }
        let n = mask.size();
        let mut out = Tensor::zeros(n, n);
        for r in 0..n {
            let row = xv.row(r);
            let allow = mask.row(r);
            let mut max = f64::NEG_INFINITY;
            for (j, &a) in allow.iter().enumerate() {
                if a && row[j] > max {
                    max = row[j];
                }
            }
            debug_assert!(max.is_finite(), "mask row {r} allows no entries");
            let mut sum = 0.0;
            let out_row = out.row_mut(r);
            for (j, &a) in allow.iter().enumerate() {
                if a {
                    let e = (row[j] - max).exp();
                    out_row[j] = e;
                    sum += e;
                }
            }
            for (j, &a) in allow.iter().enumerate() {
                if a {
                    out_row[j] /= sum;
                }
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(x, mask)))
    }

    /// Select rows of `x` by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(indices.len(), xv.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= xv.rows() {
                return Err(Error::Dimension(format!(
                    "gather_rows: index {i} out of {} rows",
                    xv.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(out, Op::GatherRows(x, indices)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Dimension(format!(
                "concat_cols: {} vs {} rows",
                av.rows(),
                bv.rows()
            )));
        }
        let mut out = Tensor::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            out.row_mut(r)[..av.cols()].copy_from_slice(av.row(r));
            out.row_mut(r)[av.cols()..].copy_from_slice(bv.row(r));
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Stack inputs vertically. All inputs must share a column count.
    pub fn stack_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack_rows: no inputs".into()));
        }
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut at = 0;
        for &p in &parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Dimension(format!(
                    "stack_rows: {} vs {cols} cols",
                    pv.cols()
                )));
            }
            for r in 0..pv.rows() {
                out.row_mut(at).copy_from_slice(pv.row(r));
                at += 1;
            }
        }
        Ok(self.push(out, Op::StackRows(parts)))
    }

    /// Column means: r x c -> 1 x c.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let inv = 1.0 / xv.rows() as f64;
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v * inv;
            }
        }
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    /// Per-element binary cross-entropy of probabilities against fixed
    /// labels, with probabilities clamped to [PROB_CLIP, 1 - PROB_CLIP]
    /// before the log.
    pub fn bce(&mut self, probs: Var, labels: Tensor) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != labels.shape() {
            return Err(Error::Dimension(format!(
                "bce: probs {:?} vs labels {:?}",
                pv.shape(),
                labels.shape()
            )));
        }
        let mut out = Tensor::zeros(pv.rows(), pv.cols());
        for (o, (&p, &y)) in out
            .data_mut()
            .iter_mut()
            .zip(pv.data().iter().zip(labels.data().iter()))
        {
            let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            *o = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        Ok(self.push(out, Op::Bce(probs, labels)))
    }

    /// Mean of all elements as a 1x1 scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    // dA[i,k] = sum_j G[i,j] * B[k,j]
                    for i in 0..av.rows() {
                        let g_row = g.row(i);
                        for k in 0..av.cols() {
                            let b_row = bv.row(k);
                            let mut acc = 0.0;
                            for (gv, bvv) in g_row.iter().zip(b_row.iter()) {
                                acc += gv * bvv;
                            }
                            da.row_mut(i)[k] = acc;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    // dB[k,j] = sum_i A[i,k] * G[i,j]
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        let a_row = av.row(i);
                        let g_row = g.row(i);
                        for (k, &aik) in a_row.iter().enumerate() {
                            if aik == 0.0 {
                                continue;
                            }
                            for (o, &gv) in db.row_mut(k).iter_mut().zip(g_row.iter()) {
                                *o += aik * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose());
                }
                Op::Add(a, b) => {
                    let b_shape = self.value(*b).shape();
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, reduce_to(&g, b_shape));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = broadcast_zip(&g, bv, |gv, b| gv * b, "mul-bwd").expect("shape ok");
                    accumulate(&mut grads, *a, da);
                    let ga = g.mul_elem(av).expect("shape ok");
                    accumulate(&mut grads, *b, reduce_to(&ga, bv.shape()));
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.scale(*c));
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data().iter()) {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    let mut dx = g.clone();
                    for (d, &y) in dx.data_mut().iter_mut().zip(yv.data().iter()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm(x) => {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        layer_norm_row_backward(xv.row(r), yv.row(r), g.row(r), dx.row_mut(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(x, mask) => {
                    let yv = &node.value;
                    let n = mask.size();
                    let mut dx = Tensor::zeros(n, n);
                    for r in 0..n {
                        let y_row = yv.row(r);
                        let g_row = g.row(r);
                        let allow = mask.row(r);
                        let mut dot = 0.0;
                        for j in 0..n {
                            if allow[j] {
                                dot += y_row[j] * g_row[j];
                            }
                        }
                        let dx_row = dx.row_mut(r);
                        for j in 0..n {
                            if allow[j] {
                                dx_row[j] = y_row[j] * (g_row[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows(x, indices) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(i).iter_mut().zip(g.row(r).iter()) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..av.cols()]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[av.cols()..]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::StackRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r).copy_from_slice(g.row(at));
                            at += 1;
                        }
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let inv = 1.0 / xv.rows() as f64;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(0).iter()) {
                            *d = gv * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
                }
                Op::Bce(p, labels) => {
                    let pv = self.value(*p);
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for ((d, &pr), (&y, &gv)) in dp
                        .data_mut()
                        .iter_mut()
                        .zip(pv.data().iter())
                        .zip(labels.data().iter().zip(g.data().iter()))
                    {
                        if pr > PROB_CLIP && pr < 1.0 - PROB_CLIP {
                            *d = gv * (pr - y) / (pr * (1.0 - pr));
                        }
                    }
                    accumulate(&mut grads, *p, dp);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradient table produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn layer_norm_row(x: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = (v - mean) * inv_std;
    }
}

fn layer_norm_row_backward(x: &[f64], y: &[f64], g: &[f64], dx: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let g_mean = g.iter().sum::<f64>() / n;
    let gy_mean = g.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum::<f64>() / n;
    for ((d, &gv), &yv) in dx.iter_mut().zip(g.iter()).zip(y.iter()) {
        *d = inv_std * (gv - g_mean - yv * gy_mean);
    }
}

/// Elementwise combine with optional row-vector broadcast on `b`.
fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    what: &str,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(b.data().iter()) {
            *o = f(*o, bv);
        }
        return Ok(out);
    }
    if b.rows() == 1 && b.cols() == a.cols() {
        let mut out = a.clone();
        let brow = b.row(0);
        for r in 0..a.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(brow.iter()) {
                *o = f(*o, bv);
            }
        }
        return Ok(out);
    }
    Err(Error::Dimension(format!(
        "{what}: incompatible shapes {:?} vs {:?}",
        a.shape(),
        b.shape()
    )))
}

/// Reduce a gradient to the shape of a broadcast operand.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    debug_assert_eq!(shape.0, 1);
    debug_assert_eq!(shape.1, g.cols());
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &gv) in out.row_mut(0).iter_mut().zip(g.row(r).iter()) {
            *o += gv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central finite differences of a scalar function of flat inputs.
    fn numeric_grad(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        which: usize,
        h: f64,
    ) -> Tensor {
        let mut grad = Tensor::zeros(inputs[which].rows(), inputs[which].cols());
        for i in 0..inputs[which].len() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            let mut minus: Vec<Tensor> = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            minus[which].data_mut()[i] -= h;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
        analytic
            .data()
            .iter()
            .zip(numeric.data().iter())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    fn check_grad(f: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor], tol: f64) {
        let scalar = |ts: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (which, &v) in vars.iter().enumerate() {
            let analytic = grads.get(v).expect("missing gradient");
            let numeric = numeric_grad(&scalar, inputs, which, 1e-5);
            let err = max_rel_err(analytic, &numeric);
            assert!(err < tol, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn matmul_identity_forward() {
        let mut tape = Tape::new();
        let m = tape.leaf(random_tensor(&mut Rng::new(1), 3, 3));
        let i = tape.leaf(Tensor::identity(3));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(2, 1, vec![5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_backward_matches_transpose_broadcast() {
        // d/dA sum(A*B) = ones * B^T, i.e. each row is the column sums of B^T rows.
        let mut rng = Rng::new(5);
        let a_t = random_tensor(&mut rng, 3, 4);
        let b_t = random_tensor(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let a = tape.leaf(a_t);
        let b = tape.leaf(b_t.clone());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        let da = grads.get(a).unwrap();
        for r in 0..3 {
            for k in 0..4 {
                let expect: f64 = b_t.row(k).iter().sum();
                assert!((da.get(r, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_finite_difference() {
        let mut rng = Rng::new(2);
        let inputs = vec![random_tensor(&mut rng, 3, 4), random_tensor(&mut rng, 4, 2)];
        check_grad(
            &|tape, vars| {
                let c = tape.matmul(vars[0], vars[1]).unwrap();
                tape.sum_all(c)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut Rng::new(3), 2, 3));
        let z = tape.leaf(Tensor::zeros(2, 3));
        let out = tape.add(x, z).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn layer_norm_finite_difference() {
        let mut rng = Rng::new(4);
        let inputs = vec![random_tensor(&mut rng, 3, 6)];
        check_grad(
            &|tape, vars| {
                let y = tape.layer_norm(vars[0]);
                // Weight the outputs so the gradient is not row-degenerate.
                let w = tape.leaf(Tensor::new(3, 6, (0..18).map(|i| i as f64 * 0.13 - 1.0).collect()).unwrap());
                let p = tape.mul(y, w).unwrap();
                tape.sum_all(p)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn elementwise_ops_finite_difference() {
        let mut rng = Rng::new(6);
        let inputs = vec![random_tensor(&mut rng, 2, 5), random_tensor(&mut rng, 2, 5)];
        check_grad(
            &|tape, vars| {
                let s = tape.silu(vars[0]);
                let g = tape.sigmoid(vars[1]);
                let m = tape.mul(s, g).unwrap();
                let a = tape.add(m, vars[1]).unwrap();
                tape.sum_all(a)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn row_broadcast_finite_difference() {
        let mut rng = Rng::new(7);
        let inputs = vec![random_tensor(&mut rng, 4, 3), random_tensor(&mut rng, 1, 3)];
        check_grad(
            &|tape, vars| {
                let a = tape.add(vars[0], vars[1]).unwrap();
                let m = tape.mul(a, vars[1]).unwrap();
                tape.sum_all(m)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_grad_checks() {
        let mut rng = Rng::new(8);
        // Causal-style mask on 4 positions.
        let n = 4;
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        let mask = Arc::new(AttentionMask::new(n, allow).unwrap());
        let x = random_tensor(&mut rng, n, n);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.masked_softmax(xv, Arc::clone(&mask)).unwrap();
        for r in 0..n {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in (r + 1)..n {
                assert_eq!(tape.value(y).get(r, j), 0.0);
            }
        }

        let mask2 = Arc::clone(&mask);
        check_grad(
            &move |tape, vars| {
                let y = tape.masked_softmax(vars[0], Arc::clone(&mask2)).unwrap();
                let w = tape.leaf(Tensor::new(n, n, (0..n * n).map(|i| (i as f64).sin()).collect()).unwrap());
                let p = tape.mul(y, w).unwrap();
                tape.sum_all(p)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn gather_concat_stack_mean_finite_difference() {
        let mut rng = Rng::new(9);
        let inputs = vec![random_tensor(&mut rng, 5, 3), random_tensor(&mut rng, 5, 2)];
        check_grad(
            &|tape, vars| {
                let g = tape.gather_rows(vars[0], vec![0, 2, 2, 4]).unwrap();
                let h = tape.gather_rows(vars[1], vec![1, 1, 3, 0]).unwrap();
                let c = tape.concat_cols(g, h).unwrap();
                let m = tape.mean_rows(c);
                let s = tape.stack_rows(vec![m, m]).unwrap();
                let sq = tape.mul(s, s).unwrap();
                tape.sum_all(sq)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn bce_matches_hand_value_and_grad() {
        let labels = Tensor::new(4, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let probs = Tensor::new(4, 1, vec![0.8, 0.2, 0.3, 0.7]).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(probs.clone());
        let l = tape.bce(p, labels.clone()).unwrap();
        let mean = tape.mean_all(l);
        let expect = -(0.8f64.ln() + 0.8f64.ln() + 0.7f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((tape.value(mean).item() - expect).abs() < 1e-12);

        check_grad(
            &move |tape, vars| {
                let l = tape.bce(vars[0], labels.clone()).unwrap();
                tape.mean_all(l)
            },
            &[probs],
            1e-6,
        );
    }

    #[test]
    fn bce_clamps_extreme_probabilities() {
        let labels = Tensor::new(2, 1, vec![1.0, 0.0]).unwrap();
        let probs = Tensor::new(2, 1, vec![1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(probs);
        let l = tape.bce(p, labels).unwrap();
        assert!(tape.value(l).is_finite());
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn forward_deterministic() {
        let build = || {
            let mut rng = Rng::new(42);
            let mut tape = Tape::new();
            let a = tape.leaf(random_tensor(&mut rng, 4, 4));
            let b = tape.leaf(random_tensor(&mut rng, 4, 4));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.silu(c);
            let sum = tape.sum_all(s);
            tape.value(sum).item()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn finite_outputs_on_finite_inputs() {
        let mut rng = Rng::new(10);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let a = tape.leaf(random_tensor(&mut rng, 3, 3));
            let b = tape.leaf(random_tensor(&mut rng, 3, 3));
            let c = tape.matmul(a, b).unwrap();
            let n = tape.layer_norm(c);
            let s = tape.silu(n);
            let g = tape.sigmoid(s);
            let loss = tape.sum_all(g);
            assert!(tape.value(loss).is_finite());
            let grads = tape.backward(loss).unwrap();
            assert!(grads.get(a).unwrap().is_finite());
            assert!(grads.get(b).unwrap().is_finite());
        }
    }
}
