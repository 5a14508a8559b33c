//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is append-only: every op pushes one node holding its forward
//! value, and inputs always have smaller ids. [`Tape::backward`] walks the
//! nodes once in reverse.

use serde::{Deserialize, Serialize};

use crate::attention::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::normalize::{log_col_normalize, log_row_normalize};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    ColLogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    MeanRows(NodeId),
    MaxPoolRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Embedding {
        table: NodeId,
        tokens: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Mat,
        label: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Mat, b: &Mat) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `A + 1bᵀ` for a `1×c` row node `b`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 {
            return Err(mismatch("add_row", va, vb));
        }
        let v = va.add_row_broadcast(vb.as_slice())?;
        Ok(self.push(Op::AddRow(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = crate::normalize::softmax_rows(self.value(a));
        self.push(Op::RowSoftmax(a), v)
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        log_row_normalize(&mut v);
        self.push(Op::RowLogSoftmax(a), v)
    }

    pub fn col_log_softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        log_col_normalize(&mut v);
        self.push(Op::ColLogSoftmax(a), v)
    }

    /// `k` log-domain row/column sweeps followed by `exp`; the same arithmetic
    /// as [`crate::normalize::sinkhorn`] with [`crate::SinkhornParams::fixed`].
    pub fn sinkhorn_unrolled(&mut self, s: NodeId, k: usize) -> Result<NodeId> {
        if !self.value(s).is_square() || k == 0 {
            return Err(Error::invalid("sinkhorn_unrolled needs square logits and k >= 1"));
        }
        let mut cur = s;
        for _ in 0..k {
            cur = self.row_log_softmax(cur);
            cur = self.col_log_softmax(cur);
        }
        Ok(self.exp(cur))
    }

    /// Per-row normalization with `1×d` gain and offset nodes.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> Result<NodeId> {
        let (vx, vg, vo) = (self.value(x), self.value(gain), self.value(offset));
        let d = vx.cols();
        if vg.shape() != (1, d) || vo.shape() != (1, d) {
            return Err(mismatch("layer_norm", vx, vg));
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = vx.clone();
        for i in 0..vx.rows() {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = (var + LAYER_NORM_EPS).sqrt().recip();
            inv_std.push(inv);
            for k in 0..d {
                let h = (row[k] - mean) * inv;
                xhat[(i, k)] = h;
                out[(i, k)] = h * vg[(0, k)] + vo[(0, k)];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    /// `1×d` mean over rows.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = Mat::row_vector(&self.value(a).col_means());
        self.push(Op::MeanRows(a), v)
    }

    /// `1×d` max over rows; ties go to the first row.
    pub fn max_pool_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::invalid("max_pool_rows of an empty matrix"));
        }
        let mut argmax = vec![0; va.cols()];
        let mut best = va.row(0).to_vec();
        for i in 1..va.rows() {
            for (j, &x) in va.row(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Op::MaxPoolRows { x: a, argmax }, Mat::row_vector(&best)))
    }

    /// Rows `tokens[i]` of `table`.
    pub fn embedding(&mut self, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = tokens.iter().find(|&&k| k >= t.rows()) {
            return Err(Error::OutOfRange(format!("token {bad} with vocabulary {}", t.rows())));
        }
        let v = Mat::from_rows(&tokens.iter().map(|&k| t.row(k)).collect::<Vec<_>>());
        Ok(self.push(
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            v,
        ))
    }

    /// `−log softmax(logits)[label]` for `1×C` logits.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rows() != 1 || label >= v.cols() {
            return Err(Error::invalid(format!(
                "cross entropy needs 1xC logits and label < C, got {:?} and {label}",
                v.shape()
            )));
        }
        let mut lp = v.clone();
        log_row_normalize(&mut lp);
        let loss = -lp[(0, label)];
        let probs = lp.map(f64::exp);
        Ok(self.push(Op::CrossEntropy { logits, probs, label }, Mat::filled(1, 1, loss)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<Mat> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Mat::hcat(&mats)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Mat::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Mat::ones(1, 1));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |k: NodeId| &self.nodes[k].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul(&val(*b).transpose()).expect("shapes checked"));
                accumulate(grads, *b, val(*a).transpose().matmul(g).expect("shapes checked"));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(val(*b)).expect("shapes checked"));
                accumulate(grads, *b, g.hadamard(val(*a)).expect("shapes checked"));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, Mat::row_vector(&g.col_sums()));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Relu(a) => {
                let x = val(*a);
                let gx = Mat::from_fn(g.rows(), g.cols(), |i, j| if x[(i, j)] > 0.0 { g[(i, j)] } else { 0.0 });
                accumulate(grads, *a, gx);
            }
            Op::Exp(a) => accumulate(grads, *a, g.hadamard(y).expect("shapes checked")),
            Op::RowSoftmax(a) => {
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                    for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
                        *v = y[(i, j)] * (*v - dot);
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::RowLogSoftmax(a) => {
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let s: f64 = g.row(i).iter().sum();
                    for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
                        *v -= y[(i, j)].exp() * s;
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::ColLogSoftmax(a) => {
                let s = g.col_sums();
                let gx = Mat::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] - y[(i, j)].exp() * s[j]);
                accumulate(grads, *a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let d = g.cols();
                let mut gx = Mat::zeros(g.rows(), d);
                for i in 0..g.rows() {
                    let gh: Vec<f64> = (0..d).map(|k| g[(i, k)] * gv[(0, k)]).collect();
                    let m1 = gh.iter().sum::<f64>() / d as f64;
                    let m2 = gh.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        gx[(i, k)] = inv_std[i] * (gh[k] - m1 - xhat[(i, k)] * m2);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, Mat::row_vector(&g.hadamard(xhat).expect("shapes checked").col_sums()));
                accumulate(grads, *offset, Mat::row_vector(&g.col_sums()));
            }
            Op::MeanRows(a) => {
                let n = val(*a).rows();
                accumulate(grads, *a, Mat::from_fn(n, g.cols(), |_, j| g[(0, j)] / n as f64));
            }
            Op::MaxPoolRows { x, argmax } => {
                let mut gx = Mat::zeros(val(*x).rows(), g.cols());
                for (j, &i) in argmax.iter().enumerate() {
                    gx[(i, j)] = g[(0, j)];
                }
                accumulate(grads, *x, gx);
            }
            Op::Embedding { table, tokens } => {
                let t = val(*table);
                let mut gt = Mat::zeros(t.rows(), t.cols());
                for (i, &k) in tokens.iter().enumerate() {
                    for (dst, src) in gt.row_mut(k).iter_mut().zip(g.row(i)) {
                        *dst += src;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::CrossEntropy { logits, probs, label } => {
                let mut gl = probs.scale(g[(0, 0)]);
                gl[(0, *label)] -= g[(0, 0)];
                accumulate(grads, *logits, gl);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    accumulate(grads, p, g.col_block(start, start + w));
                    start += w;
                }
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Mat::filled(r, c, g[(0, 0)]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id] {
        Some(acc) => acc
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zeros of `shape` if the loss does not depend on it.
    pub fn wrt(&self, id: NodeId, shape: (usize, usize)) -> Mat {
        self.get(id).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A trainable matrix with its accumulated gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
    m: Mat,
    v: Mat,
    step: u64,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Mat::zeros(r, c),
            m: Mat::zeros(r, c),
            v: Mat::zeros(r, c),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn add_grad(&mut self, g: &Mat) {
        assert_eq!(g.shape(), self.grad.shape(), "gradient shape");
        self.grad.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
    }
}

/// One bias-corrected Adam update of every parameter, then clears gradients.
pub fn adam_step(params: &mut [Param], cfg: &AdamConfig) {
    for p in params {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let value = p.value.as_mut_slice();
        let grad = p.grad.as_mut_slice();
        let m = p.m.as_mut_slice();
        let v = p.v.as_mut_slice();
        for k in 0..value.len() {
            let g = grad[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            value[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            grad[k] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::{sinkhorn, SinkhornParams};
    use crate::rng;

    /// Max over entries of |analytic − FD| divided by max(|FD|∞, 1e-6).
    fn fd_check(inputs: &[Mat], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
        let eval = |vals: &[Mat]| {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let out = build(&mut t, &ids);
            (t, ids, out)
        };
        let (tape, ids, out) = eval(inputs);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(ids[k], x.shape());
            let mut fd = Mat::zeros(x.rows(), x.cols());
            for e in 0..x.as_slice().len() {
                let mut plus = inputs.to_vec();
                plus[k].as_mut_slice()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].as_mut_slice()[e] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                fd.as_mut_slice()[e] = (tp.value(op)[(0, 0)] - tm.value(om)[(0, 0)]) / (2.0 * h);
            }
            worst = worst.max(analytic.max_abs_diff(&fd) / fd.max_abs().max(1e-6));
        }
        worst
    }

    /// Reduces a matrix node to a scalar with fixed random weights.
    fn weighted_sum(t: &mut Tape, x: NodeId, seed: u64) -> NodeId {
        let (r, c) = t.value(x).shape();
        let mut g = rng::seeded(seed);
        let w = t.leaf(rng::gaussian(&mut g, r, c, 1.0));
        let p = t.mul(x, w).unwrap();
        t.sum(p)
    }

    fn rand(seed: u64, r: usize, c: usize) -> Mat {
        rng::gaussian(&mut rng::seeded(seed), r, c, 1.0)
    }

    const TOL: f64 = 1e-4;

    #[test]
    fn matmul_identity_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(rand(1, 3, 3));
        let i = t.leaf(Mat::identity(3));
        let y = t.matmul(x, i).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Mat::ones(3, 3));
    }

    #[test]
    fn sum_of_leaf_and_dead_relu() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::filled(1, 1, -1.0));
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn softmax_jacobian_at_zero() {
        let n = 5;
        for k in 0..n {
            let mut t = Tape::new();
            let x = t.leaf(Mat::zeros(1, n));
            let y = t.row_softmax(x);
            let mut e = Mat::zeros(1, n);
            e[(0, k)] = 1.0;
            let w = t.leaf(e);
            let p = t.mul(y, w).unwrap();
            let s = t.sum(p);
            let g = t.backward(s).unwrap();
            let row = g.get(x).unwrap();
            for j in 0..n {
                let expect = if j == k { 1.0 / n as f64 } else { 0.0 } - 1.0 / (n * n) as f64;
                assert!((row[(0, j)] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn unrolled_sinkhorn_matches_plain() {
        let s = rand(2, 6, 6);
        let mut t = Tape::new();
        let x = t.leaf(s.clone());
        let p = t.sinkhorn_unrolled(x, 50).unwrap();
        let plain = sinkhorn(&s, &SinkhornParams::fixed(50)).unwrap().p;
        assert_eq!(t.value(p), &plain);
        let conv = sinkhorn(&s, &SinkhornParams::default()).unwrap();
        assert!(t.value(p).max_abs_diff(&conv.p) <= SinkhornParams::default().tol);
    }

    #[test]
    fn binary_op_gradients() {
        for seed in 0..10 {
            let a = rand(seed, 3, 4);
            let b = rand(seed + 100, 4, 2);
            let c = rand(seed + 200, 3, 4);
            let row = rand(seed + 300, 1, 4);
            assert!(fd_check(&[a.clone(), b], |t, x| {
                let y = t.matmul(x[0], x[1]).unwrap();
                weighted_sum(t, y, 7)
            }) <= TOL);
            assert!(fd_check(&[a.clone(), c.clone()], |t, x| {
                let y = t.add(x[0], x[1]).unwrap();
                weighted_sum(t, y, 8)
            }) <= TOL);
            assert!(fd_check(&[a.clone(), c], |t, x| {
                let y = t.mul(x[0], x[1]).unwrap();
                weighted_sum(t, y, 9)
            }) <= TOL);
            assert!(fd_check(&[a, row], |t, x| {
                let y = t.add_row(x[0], x[1]).unwrap();
                weighted_sum(t, y, 10)
            }) <= TOL);
        }
    }

    #[test]
    fn unary_op_gradients() {
        type Build = fn(&mut Tape, NodeId) -> NodeId;
        let ops: [(&str, Build); 10] = [
            ("scale", |t, x| t.scale(x, -1.7)),
            ("transpose", |t, x| t.transpose(x)),
            ("relu", |t, x| t.relu(x)),
            ("exp", |t, x| t.exp(x)),
            ("row_softmax", |t, x| t.row_softmax(x)),
            ("row_log_softmax", |t, x| t.row_log_softmax(x)),
            ("col_log_softmax", |t, x| t.col_log_softmax(x)),
            ("mean_rows", |t, x| t.mean_rows(x)),
            ("max_pool_rows", |t, x| t.max_pool_rows(x).unwrap()),
            ("sinkhorn_unrolled", |t, x| t.sinkhorn_unrolled(x, 5).unwrap()),
        ];
        for (name, op) in ops {
            for seed in 0..10 {
                let x = rand(seed, 4, 4);
                let err = fd_check(&[x], |t, ids| {
                    let y = op(t, ids[0]);
                    weighted_sum(t, y, seed + 50)
                });
                assert!(err <= TOL, "{name} seed {seed}: {err:e}");
            }
        }
    }

    #[test]
    fn layer_norm_gradient() {
        for seed in 0..10 {
            let x = rand(seed, 3, 5);
            let g = rand(seed + 1, 1, 5);
            let o = rand(seed + 2, 1, 5);
            let err = fd_check(&[x, g, o], |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                weighted_sum(t, y, seed + 3)
            });
            assert!(err <= TOL, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn layer_norm_matches_plain() {
        let x = rand(3, 4, 6);
        let mut t = Tape::new();
        let ix = t.leaf(x.clone());
        let g = t.leaf(Mat::ones(1, 6));
        let o = t.leaf(Mat::zeros(1, 6));
        let y = t.layer_norm(ix, g, o).unwrap();
        let plain = crate::attention::layer_norm_rows(&x, &crate::attention::LayerNormParams::identity(6));
        assert_eq!(t.value(y), &plain);
    }

    #[test]
    fn embedding_concat_and_cross_entropy_gradients() {
        for seed in 0..10 {
            let table = rand(seed, 5, 3);
            let err = fd_check(&[table], |t, ids| {
                let e = t.embedding(ids[0], &[0, 3, 3, 1]).unwrap();
                weighted_sum(t, e, seed)
            });
            assert!(err <= TOL);
            let (a, b) = (rand(seed, 2, 3), rand(seed + 1, 2, 2));
            let err = fd_check(&[a, b], |t, ids| {
                let c = t.concat_cols(&[ids[0], ids[1]]).unwrap();
                weighted_sum(t, c, seed)
            });
            assert!(err <= TOL);
            let logits = rand(seed, 1, 4);
            let err = fd_check(&[logits], |t, ids| t.cross_entropy_logits(ids[0], (seed % 4) as usize).unwrap());
            assert!(err <= TOL);
        }
    }

    #[test]
    fn cross_entropy_value() {
        let mut t = Tape::new();
        let l = t.leaf(Mat::zeros(1, 4));
        let c = t.cross_entropy_logits(l, 2).unwrap();
        assert!((t.value(c)[(0, 0)] - 4f64.ln()).abs() < 1e-15);
        assert!(t.cross_entropy_logits(l, 4).is_err());
    }

    #[test]
    fn shape_errors_at_build_time() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::zeros(2, 3));
        let b = t.leaf(Mat::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        assert!(t.add_row(a, b).is_err());
        assert!(t.sinkhorn_unrolled(a, 3).is_err());
        assert!(t.embedding(a, &[2]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut ps = vec![Param::new(rand(1, 2, 2))];
        let before = ps[0].value.clone();
        adam_step(&mut ps, &AdamConfig::new(1e-2));
        assert_eq!(ps[0].value, before);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut ps = vec![Param::new(Mat::zeros(1, 1))];
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..2000 {
            last = ps[0].value[(0, 0)];
            ps[0].add_grad(&Mat::filled(1, 1, 2.5));
            adam_step(&mut ps, &AdamConfig::new(lr));
        }
        let step = ps[0].value[(0, 0)] - last;
        assert!((step + lr).abs() < 1e-6 * lr * 1e3, "{step}");
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut ps = vec![Param::new(Mat::row_vector(&[1.0, -1.5]))];
        let loss = |v: &Mat| v[(0, 0)].powi(2) + 3.0 * v[(0, 1)].powi(2);
        for _ in 0..500 {
            let v = ps[0].value.clone();
            ps[0].add_grad(&Mat::row_vector(&[2.0 * v[(0, 0)], 6.0 * v[(0, 1)]]));
            adam_step(&mut ps, &AdamConfig::new(1e-2));
        }
        assert!(loss(&ps[0].value) < 1e-4, "{}", loss(&ps[0].value));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(rand(5, 4, 4));
            let p = t.sinkhorn_unrolled(x, 10).unwrap();
            let s = weighted_sum(&mut t, p, 3);
            t.backward(s).unwrap().wrt(x, (4, 4))
        };
        assert_eq!(build(), build());
    }
}
