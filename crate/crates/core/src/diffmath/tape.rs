//! A small reverse-mode tape over whole-batch matrix operations.
//!
//! Every node holds an `N×d` value ([`Mat`]), a `requires_grad` flag and the
//! operation that produced it. Nodes are appended in evaluation order, so the
//! reverse of the node list is a valid reverse topological order and
//! [`Tape::backward`] is a single sweep.
//!
//! ```
//! use bridge_core::diffmath::{Mat, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Mat::from_rows(&[[1.0, 2.0]]));
//! let loss = tape.sum_squares(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use super::mat::{dot, norm, Mat};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. A node is a differentiable batch: its value,
/// whether gradients flow into it, and whether it was cut by a stop-gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    ProjectRows { x: Var, dirs: Mat, eps: f64 },
    ReplaceRows { base: Var, row: Var, mask: Vec<bool> },
    ConcatCols(Vec<Var>),
    SoftmaxXent { logits: Var, probs: Mat, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Mse { pred: Var, target: Mat },
    SumSquares(Var),
    WeightedSum { x: Var, weights: Mat },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v`; `None` when no
    /// gradient path reaches it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but returns zeros of the right shape for
    /// unreached nodes.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn is_stopped(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::StopGrad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch { op: "matmul", expected: (va.cols(), vb.cols()), found: vb.shape() });
        }
        let value = va.matmul(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::ShapeMismatch { op: "matmul_t", expected: (vb.rows(), va.cols()), found: vb.shape() });
        }
        let value = va.matmul_t(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    /// Adds the `1×m` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::ShapeMismatch { op: "add_bias", expected: (1, va.cols()), found: vb.shape() });
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(vb.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch { op: "add", expected: va.shape(), found: vb.shape() });
        }
        let value = va.zip_map(vb, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Scales every row onto the unit sphere.
    pub fn row_normalize(&mut self, x: Var, eps_norm: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let n = norm(row);
            if !(n >= eps_norm) {
                return Err(Error::DegenerateVector { norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowNormalize { x, norms }, rg))
    }

    /// Row-wise `(I - v_i v_iᵀ / (‖v_i‖² + eps)) x_i`. The directions are
    /// constants: no gradient flows into them.
    pub fn project_rows(&mut self, x: Var, dirs: Mat, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != dirs.shape() {
            return Err(Error::ShapeMismatch { op: "project_rows", expected: vx.shape(), found: dirs.shape() });
        }
        let mut value = vx.clone();
        for i in 0..value.rows() {
            let v = dirs.row(i);
            let k = dot(v, value.row(i)) / (dot(v, v) + eps);
            for (o, &vi) in value.row_mut(i).iter_mut().zip(v) {
                *o -= k * vi;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::ProjectRows { x, dirs, eps }, rg))
    }

    /// Rows of `base` where `mask` is set are replaced by the `1×m` node `row`.
    pub fn replace_rows(&mut self, base: Var, row: Var, mask: Vec<bool>) -> Result<Var> {
        let (vb, vr) = (self.value(base), self.value(row));
        if vr.rows() != 1 || vr.cols() != vb.cols() || mask.len() != vb.rows() {
            return Err(Error::ShapeMismatch { op: "replace_rows", expected: (1, vb.cols()), found: vr.shape() });
        }
        let mut value = vb.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(i).copy_from_slice(vr.as_slice());
            }
        }
        let rg = self.rg(base) || self.rg(row);
        Ok(self.push(value, Op::ReplaceRows { base, row, mask }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rows() != rows {
                return Err(Error::ShapeMismatch { op: "concat_cols", expected: (rows, vp.cols()), found: vp.shape() });
            }
            for i in 0..rows {
                value.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over unmasked rows of `-log softmax(logits_i)[targets_i]`. Rows with
    /// `mask[i] == false` are excluded from both the sum and the count. Returns
    /// a `1×1` node; zero when no row is active.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>, mask: Vec<bool>) -> Result<Var> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() || mask.len() != vl.rows() {
            return Err(Error::ShapeMismatch {
                op: "softmax_xent",
                expected: (vl.rows(), 1),
                found: (targets.len(), 1),
            });
        }
        let mut probs = Mat::zeros(vl.rows(), vl.cols());
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..vl.rows() {
            let row = vl.row(i);
            let lse = log_sum_exp(row);
            for (p, &z) in probs.row_mut(i).iter_mut().zip(row) {
                *p = libm::exp(z - lse);
            }
            if mask[i] {
                total += lse - row[targets[i]];
                count += 1;
            }
        }
        let value = Mat::filled(1, 1, if count > 0 { total / count as f64 } else { 0.0 });
        let rg = self.rg(logits);
        Ok(self.push(value, Op::SoftmaxXent { logits, probs, targets, mask, count }, rg))
    }

    /// Mean over rows of `‖pred_i - target_i‖²`.
    pub fn mse(&mut self, pred: Var, target: Mat) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Error::ShapeMismatch { op: "mse", expected: vp.shape(), found: target.shape() });
        }
        let sq: f64 = vp.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Mat::filled(1, 1, sq / vp.rows() as f64);
        let rg = self.rg(pred);
        Ok(self.push(value, Op::Mse { pred, target }, rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Mat::filled(1, 1, self.value(x).frobenius_sq());
        let rg = self.rg(x);
        self.push(value, Op::SumSquares(x), rg)
    }

    /// `Σ x ⊙ weights`, a linear functional of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Mat) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(Error::ShapeMismatch { op: "weighted_sum", expected: vx.shape(), found: weights.shape() });
        }
        let value = Mat::filled(1, 1, dot(vx.as_slice(), weights.as_slice()));
        let rg = self.rg(x);
        Ok(self.push(value, Op::WeightedSum { x, weights }, rg))
    }

    /// Backward sweep from a scalar (`1×1`) output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let v = self.value(loss);
        if v.shape() != (1, 1) {
            return Err(Error::ShapeMismatch { op: "backward", expected: (1, 1), found: v.shape() });
        }
        self.backward_with(loss, Mat::filled(1, 1, 1.0))
    }

    /// Vector-Jacobian product: sweeps backward from `output` seeded with the
    /// cotangent `seed` (same shape as the output's value).
    pub fn backward_with(&self, output: Var, seed: Mat) -> Result<Gradients> {
        let shape = self.value(output).shape();
        if seed.shape() != shape {
            return Err(Error::ShapeMismatch { op: "backward_with", expected: shape, found: seed.shape() });
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        if self.rg(output) {
            grads[output.0] = Some(seed);
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { node: idx });
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul_t(vb));
                }
                if self.rg(*b) {
                    acc(*b, va.t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul(vb));
                }
                if self.rg(*b) {
                    acc(*b, g.t_matmul(va));
                }
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.clone());
                if self.rg(*bias) {
                    let mut db = Mat::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (d, &x) in db.as_mut_slice().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::RowNormalize { x, norms } => {
                let mut dx = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let k = dot(y, g.row(i));
                    for (d, &yi) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = (*d - yi * k) / n;
                    }
                }
                acc(*x, dx);
            }
            Op::ProjectRows { x, dirs, eps } => {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    let v = dirs.row(i);
                    let k = dot(v, g.row(i)) / (dot(v, v) + eps);
                    for (d, &vi) in dx.row_mut(i).iter_mut().zip(v) {
                        *d -= k * vi;
                    }
                }
                acc(*x, dx);
            }
            Op::ReplaceRows { base, row, mask } => {
                let mut db = g.clone();
                let mut dr = Mat::zeros(1, g.cols());
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        for (d, &x) in dr.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                        db.row_mut(i).iter_mut().for_each(|d| *d = 0.0);
                    }
                }
                acc(*base, db);
                acc(*row, dr);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Mat::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(p, d);
                    }
                    off += c;
                }
            }
            Op::SoftmaxXent { logits, probs, targets, mask, count } => {
                let mut dz = Mat::zeros(probs.rows(), probs.cols());
                if *count > 0 {
                    let k = g.as_slice()[0] / *count as f64;
                    for i in 0..probs.rows() {
                        if !mask[i] {
                            continue;
                        }
                        for (d, &p) in dz.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *d = k * p;
                        }
                        dz[(i, targets[i])] -= k;
                    }
                }
                acc(*logits, dz);
            }
            Op::Mse { pred, target } => {
                let vp = self.value(*pred);
                let k = 2.0 * g.as_slice()[0] / vp.rows() as f64;
                acc(*pred, vp.zip_map(target, |a, b| k * (a - b)));
            }
            Op::SumSquares(x) => {
                let k = 2.0 * g.as_slice()[0];
                acc(*x, self.value(*x).scale(k));
            }
            Op::WeightedSum { x, weights } => acc(*x, weights.scale(g.as_slice()[0])),
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(row.iter().map(|&z| libm::exp(z - m)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_matches, random_mat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::from_rows(&[[1.0, 2.0]]));
        let l = tape.sum_squares(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_forward_identity_backward_zero() {
        let mut tape = Tape::new();
        let theta = tape.param(Mat::from_rows(&[[0.3, -1.2]]));
        let w = tape.constant(Mat::from_rows(&[[2.0], [5.0]]));
        let y = tape.matmul(theta, w).unwrap();
        let s = tape.stop_gradient(y);
        assert_eq!(tape.value(s), tape.value(y));
        assert!(tape.is_stopped(s) && !tape.requires_grad(s));
        let l = tape.weighted_sum(s, Mat::filled(1, 1, 1.0)).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(theta).is_none());
    }

    #[test]
    fn stopped_half_contributes_nothing() {
        let w = Mat::from_rows(&[[2.0], [5.0]]);
        let theta0 = Mat::from_rows(&[[0.3, -1.2]]);
        let build = |tape: &mut Tape, theta: Var, stop: bool| {
            let wv = tape.constant(w.clone());
            let y = tape.matmul(theta, wv).unwrap();
            let y2 = tape.matmul(theta, wv).unwrap();
            let z = if stop { tape.stop_gradient(y2) } else { y2 };
            let s = tape.add(y, z).unwrap();
            tape.weighted_sum(s, Mat::filled(1, 1, 1.0)).unwrap()
        };
        let mut tape = Tape::new();
        let theta = tape.param(theta0.clone());
        let l = build(&mut tape, theta, true);
        let g = tape.backward(l).unwrap().get(theta).unwrap().clone();
        // the non-stopped half alone: sum(θ·w), checked by finite differences
        assert_grad_matches(&theta0, &g, 1e-5, |t| t.matmul(&w).sum());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::from_rows(&[[1.0, 2.0]]));
        let y = tape.scale(x, f64::INFINITY);
        let l = tape.sum_squares(y);
        assert!(matches!(tape.backward(l), Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let x0 = random_mat(&mut rng, 4, 5, 1.0);
            let w = random_mat(&mut rng, 5, 3, 1.0);
            let b = random_mat(&mut rng, 1, 3, 1.0);
            let k = random_mat(&mut rng, 4, 3, 1.0);
            let dirs = random_mat(&mut rng, 4, 3, 1.0);
            let null = random_mat(&mut rng, 1, 3, 1.0);
            let weights = random_mat(&mut rng, 4, 6, 1.0);
            let mask: Vec<bool> = (0..4).map(|i| (i + trial) % 3 != 0).collect();
            let f = |tape: &mut Tape, x: Var| -> Var {
                let wv = tape.constant(w.clone());
                let bv = tape.constant(b.clone());
                let h = tape.matmul(x, wv).unwrap();
                let h = tape.add_bias(h, bv).unwrap();
                let h = tape.tanh(h);
                let kv = tape.constant(k.clone());
                let h = tape.add(h, kv).unwrap();
                let h = tape.project_rows(h, dirs.clone(), 1e-8).unwrap();
                let n = tape.row_normalize(h, 1e-8).unwrap();
                let nv = tape.constant(null.clone());
                let r = tape.replace_rows(n, nv, mask.clone()).unwrap();
                let c = tape.concat_cols(&[r, n]).unwrap();
                let logits = tape.matmul_t(n, kv).unwrap();
                let logits = tape.scale(logits, 3.0);
                let xe = tape.softmax_xent(logits, alloc::vec![0, 1, 2, 1], mask.clone()).unwrap();
                let ws = tape.weighted_sum(c, weights.clone()).unwrap();
                let mse = tape.mse(n, k.clone()).unwrap();
                let a = tape.add(xe, ws).unwrap();
                tape.add(a, mse).unwrap()
            };
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let l = f(&mut tape, x);
            let g = tape.backward(l).unwrap().get(x).unwrap().clone();
            assert_grad_matches(&x0, &g, 1e-5, |xm| {
                let mut t = Tape::new();
                let xv = t.constant(xm.clone());
                let l = f(&mut t, xv);
                t.scalar(l)
            });
        }
    }

    #[test]
    fn matmul_gradient_reaches_both_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random_mat(&mut rng, 3, 4, 1.0);
        let b0 = random_mat(&mut rng, 2, 4, 1.0);
        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.param(b0.clone());
        let c = tape.matmul_t(a, b).unwrap();
        let l = tape.sum_squares(c);
        let g = tape.backward(l).unwrap();
        assert_grad_matches(&b0, g.get(b).unwrap(), 1e-5, |bm| a0.matmul_t(bm).frobenius_sq());
        assert_grad_matches(&a0, g.get(a).unwrap(), 1e-5, |am| am.matmul_t(&b0).frobenius_sq());
    }
}
