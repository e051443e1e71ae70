//! Reverse-mode autodiff over a flat operation tape.
//!
//! Every differentiable quantity in the workbench (logits, telemetry
//! signals, losses) is built as nodes on one `Tape`, so the numbers used
//! for analysis and the numbers used for gradients come from the same
//! forward arithmetic. Values are row-major f64 matrices; scalars are 1×1.
//!
//! Node ids are indices into the tape, inputs always precede outputs, and
//! `backward` walks the tape once in reverse. Calling `backward` twice
//! accumulates unless `zero_grads` runs in between; the training step uses
//! exactly that to take one gradient for the embedding attack and a second
//! for the parameter update on the same recorded forward pass.

use crate::error::{CorvusError, Result};
use crate::linalg::{
    cholesky, logdet_from_cholesky, logsumexp, matmul, matmul_transa, matmul_transb,
    spd_inverse_from_cholesky, Mat,
};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    GatherRows { src: NodeId, idx: Vec<usize> },
    SliceRows { src: NodeId, start: usize },
    SliceCols { src: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    AddRowBroadcast { a: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    MatmulTransB { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    WeightedSum { a: NodeId, w: Mat },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu { x: NodeId },
    CausalSoftmax { x: NodeId },
    MeanEntropyRows { x: NodeId },
    LogDetCov { z: NodeId },
    MeanLogDiag { a: NodeId, start: usize, len: usize, delta: f64 },
    CrossEntropyShifted { logits: NodeId, targets: Vec<usize>, win_start: usize, win_end: usize },
    LinComb { parts: Vec<(NodeId, f64)> },
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    LayerNorm { mean: Vec<f64>, rstd: Vec<f64> },
    Entropy { probs: Mat, h: Vec<f64> },
    LogDet { cinv: Vec<f64> },
    Ce { probs: Mat },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
    grad: Option<Mat>,
    requires_grad: bool,
    aux: Aux,
}

/// Wengert list; build forward with the methods below, then call `backward`
/// on a scalar node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!((v.rows, v.cols), (1, 1), "scalar() on non-scalar node");
        v.data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool, aux: Aux) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, requires_grad, aux });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad, Aux::None)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.leaf(value, false)
    }

    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let s = self.value(src);
        let cols = s.cols;
        let mut out = Mat::zeros(idx.len(), cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(s.row(i));
        }
        let rg = self.requires_grad(src);
        self.push(Op::GatherRows { src, idx: idx.to_vec() }, out, rg, Aux::None)
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.value(src);
        let cols = s.cols;
        assert!(start + len <= s.rows);
        let mut out = Mat::zeros(len, cols);
        out.data.copy_from_slice(&s.data[start * cols..(start + len) * cols]);
        let rg = self.requires_grad(src);
        self.push(Op::SliceRows { src, start }, out, rg, Aux::None)
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.value(src);
        assert!(start + len <= s.cols);
        let mut out = Mat::zeros(s.rows, len);
        for i in 0..s.rows {
            out.row_mut(i).copy_from_slice(&s.row(i)[start..start + len]);
        }
        let rg = self.requires_grad(src);
        self.push(Op::SliceCols { src, start }, out, rg, Aux::None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows);
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols].copy_from_slice(v.row(i));
            }
            off += v.cols;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, out, rg, Aux::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let mut out = va.clone();
        for (o, &x) in out.data.iter_mut().zip(&vb.data) {
            *o += x;
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::Add { a, b }, out, rg, Aux::None)
    }

    /// a (m×n) plus a row vector b (1×n) added to every row.
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows, 1);
        assert_eq!(va.cols, vb.cols);
        let mut out = va.clone();
        for i in 0..out.rows {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&vb.data) {
                *o += x;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::AddRowBroadcast { a, b }, out, rg, Aux::None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.rows);
        let mut out = Mat::zeros(va.rows, vb.cols);
        matmul(&va.data, &vb.data, &mut out.data, va.rows, va.cols, vb.cols);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::Matmul { a, b }, out, rg, Aux::None)
    }

    /// a (m×k) · bᵀ where b is stored (n×k).
    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.cols);
        let mut out = Mat::zeros(va.rows, vb.rows);
        matmul_transb(&va.data, &vb.data, &mut out.data, va.rows, va.cols, vb.rows);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::MatmulTransB { a, b }, out, rg, Aux::None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for o in &mut out.data {
            *o *= c;
        }
        let rg = self.requires_grad(a);
        self.push(Op::Scale { a, c }, out, rg, Aux::None)
    }

    /// Scalar Σ_ij w_ij · a_ij; the test harness uses this to project any
    /// matrix output down to a checkable scalar.
    pub fn weighted_sum(&mut self, a: NodeId, w: Mat) -> NodeId {
        let va = self.value(a);
        assert_eq!((va.rows, va.cols), (w.rows, w.cols));
        let s: f64 = va.data.iter().zip(&w.data).map(|(x, y)| x * y).sum();
        let rg = self.requires_grad(a);
        self.push(Op::WeightedSum { a, w }, Mat::from_vec(1, 1, vec![s]), rg, Aux::None)
    }

    /// Per-row normalization with learned gain and bias (both 1×n).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols;
        assert_eq!((vg.rows, vg.cols), (1, n));
        assert_eq!((vb.rows, vb.cols), (1, n));
        let mut out = Mat::zeros(vx.rows, n);
        let mut mean = vec![0.0; vx.rows];
        let mut rstd = vec![0.0; vx.rows];
        for i in 0..vx.rows {
            let row = vx.row(i);
            let mu: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[i] = mu;
            rstd[i] = rs;
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] = vg.data[j] * (row[j] - mu) * rs + vb.data[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push(Op::LayerNorm { x, gain, bias }, out, rg, Aux::LayerNorm { mean, rstd })
    }

    /// Tanh-approximation GELU, elementwise. Smooth, so finite differences
    /// behave everywhere.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut out = vx.clone();
        for o in &mut out.data {
            let v = *o;
            *o = 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh());
        }
        let rg = self.requires_grad(x);
        self.push(Op::Gelu { x }, out, rg, Aux::None)
    }

    /// Row-wise softmax over a square score matrix where row i may only see
    /// columns j ≤ i; masked entries come out exactly 0.
    pub fn causal_softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rows, vx.cols, "causal softmax expects square scores");
        let t = vx.rows;
        let mut out = Mat::zeros(t, t);
        for i in 0..t {
            let row = vx.row(i);
            let lse = logsumexp(&row[..=i]);
            let orow = out.row_mut(i);
            for j in 0..=i {
                orow[j] = (row[j] - lse).exp();
            }
        }
        let rg = self.requires_grad(x);
        self.push(Op::CausalSoftmax { x }, out, rg, Aux::None)
    }

    /// Mean over rows of the entropy of softmax(row). Scalar output.
    pub fn mean_entropy_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (m, n) = (vx.rows, vx.cols);
        assert!(m > 0);
        let mut probs = Mat::zeros(m, n);
        let mut h = vec![0.0; m];
        let mut total = 0.0;
        for i in 0..m {
            let row = vx.row(i);
            let lse = logsumexp(row);
            let mut dot = 0.0;
            let prow = probs.row_mut(i);
            for j in 0..n {
                let p = (row[j] - lse).exp();
                prow[j] = p;
                dot += p * row[j];
            }
            h[i] = lse - dot;
            total += h[i];
        }
        let rg = self.requires_grad(x);
        self.push(
            Op::MeanEntropyRows { x },
            Mat::from_vec(1, 1, vec![total / m as f64]),
            rg,
            Aux::Entropy { probs, h },
        )
    }

    /// log det(ZᶜᵀZᶜ/m + η·I) where Zᶜ is `z` with column means removed.
    /// Scalar output. Fails if the regularized covariance is not numerically
    /// positive definite.
    pub fn log_det_cov(&mut self, z: NodeId, eta: f64) -> Result<NodeId> {
        let vz = self.value(z);
        let (m, d) = (vz.rows, vz.cols);
        assert!(m > 0 && d > 0);
        let zc = center_columns(vz);
        let mut c = vec![0.0; d * d];
        matmul_transa(&zc.data, &zc.data, &mut c, d, m, d);
        let inv_m = 1.0 / m as f64;
        for v in &mut c {
            *v *= inv_m;
        }
        for i in 0..d {
            c[i * d + i] += eta;
        }
        let l = cholesky(&c, d).map_err(|pivot| CorvusError::Numeric {
            layer: 0,
            detail: format!("regularized covariance not positive definite (pivot {pivot:.3e})"),
        })?;
        let logdet = logdet_from_cholesky(&l, d);
        let cinv = spd_inverse_from_cholesky(&l, d);
        let rg = self.requires_grad(z);
        Ok(self.push(
            Op::LogDetCov { z },
            Mat::from_vec(1, 1, vec![logdet]),
            rg,
            Aux::LogDet { cinv },
        ))
    }

    /// Mean of log(a_ii + δ) over rows start..start+len. Scalar output.
    pub fn mean_log_diag(&mut self, a: NodeId, start: usize, len: usize, delta: f64) -> NodeId {
        let va = self.value(a);
        assert!(len > 0 && start + len <= va.rows && start + len <= va.cols);
        let mut total = 0.0;
        for i in start..start + len {
            total += (va.get(i, i) + delta).ln();
        }
        let rg = self.requires_grad(a);
        self.push(
            Op::MeanLogDiag { a, start, len, delta },
            Mat::from_vec(1, 1, vec![total / len as f64]),
            rg,
            Aux::None,
        )
    }

    /// Mean over t in [win_start, win_end) of −log softmax(logits_{t−1})[targets_t].
    /// The shift means win_start must be ≥ 1. Scalar output.
    pub fn cross_entropy_shifted(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        win_start: usize,
        win_end: usize,
    ) -> NodeId {
        let vl = self.value(logits);
        let (t_len, v) = (vl.rows, vl.cols);
        assert!(win_start >= 1, "shifted cross entropy needs a predecessor row");
        assert!(win_start < win_end && win_end <= t_len);
        assert_eq!(targets.len(), t_len);
        let count = win_end - win_start;
        let mut probs = Mat::zeros(count, v);
        let mut total = 0.0;
        for (k, t) in (win_start..win_end).enumerate() {
            let row = vl.row(t - 1);
            let y = targets[t];
            assert!(y < v);
            let lse = logsumexp(row);
            total += lse - row[y];
            let prow = probs.row_mut(k);
            for j in 0..v {
                prow[j] = (row[j] - lse).exp();
            }
        }
        let rg = self.requires_grad(logits);
        self.push(
            Op::CrossEntropyShifted { logits, targets: targets.to_vec(), win_start, win_end },
            Mat::from_vec(1, 1, vec![total / count as f64]),
            rg,
            Aux::Ce { probs },
        )
    }

    /// Scalar Σ coeff_k · part_k over 1×1 nodes.
    pub fn lin_comb(&mut self, parts: &[(NodeId, f64)]) -> NodeId {
        let mut total = 0.0;
        for &(id, c) in parts {
            total += c * self.scalar(id);
        }
        let rg = parts.iter().any(|&(id, _)| self.requires_grad(id));
        self.push(
            Op::LinComb { parts: parts.to_vec() },
            Mat::from_vec(1, 1, vec![total]),
            rg,
            Aux::None,
        )
    }

    /// Reverse sweep from a scalar node. The seed on `from` is set to 1
    /// (replacing whatever was there); contributions below accumulate, so
    /// call `zero_grads` first when a fresh gradient is wanted.
    pub fn backward(&mut self, from: NodeId) {
        {
            let v = &self.nodes[from].value;
            assert_eq!((v.rows, v.cols), (1, 1), "backward starts from a scalar");
        }
        assert!(self.nodes[from].requires_grad, "backward from a node with no grad path");
        self.nodes[from].grad = Some(Mat::from_vec(1, 1, vec![1.0]));
        for i in (0..=from).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &Mat) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let v = &self.nodes[id].value;
        let shape = (v.rows, v.cols);
        let g = self.nodes[id]
            .grad
            .get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
        debug_assert_eq!((g.rows, g.cols), (delta.rows, delta.cols));
        for (a, &b) in g.data.iter_mut().zip(&delta.data) {
            *a += b;
        }
    }

    fn step_backward(&mut self, id: NodeId) {
        let op = self.nodes[id].op.clone();
        let up = self.nodes[id].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::GatherRows { src, idx } => {
                let s = &self.nodes[src].value;
                let mut d = Mat::zeros(s.rows, s.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, &uv) in d.row_mut(i).iter_mut().zip(up.row(k)) {
                        *dv += uv;
                    }
                }
                self.accumulate(src, &d);
            }
            Op::SliceRows { src, start } => {
                let s = &self.nodes[src].value;
                let mut d = Mat::zeros(s.rows, s.cols);
                let cols = s.cols;
                d.data[start * cols..start * cols + up.data.len()].copy_from_slice(&up.data);
                self.accumulate(src, &d);
            }
            Op::SliceCols { src, start } => {
                let s = &self.nodes[src].value;
                let mut d = Mat::zeros(s.rows, s.cols);
                for i in 0..up.rows {
                    d.row_mut(i)[start..start + up.cols].copy_from_slice(up.row(i));
                }
                self.accumulate(src, &d);
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in &parts {
                    let cols = self.nodes[p].value.cols;
                    let rows = self.nodes[p].value.rows;
                    let mut d = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        d.row_mut(i).copy_from_slice(&up.row(i)[off..off + cols]);
                    }
                    self.accumulate(p, &d);
                    off += cols;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, &up);
                self.accumulate(b, &up);
            }
            Op::AddRowBroadcast { a, b } => {
                self.accumulate(a, &up);
                let mut d = Mat::zeros(1, up.cols);
                for i in 0..up.rows {
                    for (dv, &uv) in d.data.iter_mut().zip(up.row(i)) {
                        *dv += uv;
                    }
                }
                self.accumulate(b, &d);
            }
            Op::Matmul { a, b } => {
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                if self.nodes[a].requires_grad {
                    let mut da = Mat::zeros(va.rows, va.cols);
                    matmul_transb(&up.data, &vb.data, &mut da.data, up.rows, up.cols, vb.rows);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = Mat::zeros(vb.rows, vb.cols);
                    matmul_transa(&va.data, &up.data, &mut db.data, va.cols, va.rows, up.cols);
                    self.accumulate(b, &db);
                }
            }
            Op::MatmulTransB { a, b } => {
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                if self.nodes[a].requires_grad {
                    let mut da = Mat::zeros(va.rows, va.cols);
                    matmul(&up.data, &vb.data, &mut da.data, up.rows, up.cols, vb.cols);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = Mat::zeros(vb.rows, vb.cols);
                    matmul_transa(&up.data, &va.data, &mut db.data, up.cols, up.rows, va.cols);
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let mut d = up.clone();
                for v in &mut d.data {
                    *v *= c;
                }
                self.accumulate(a, &d);
            }
            Op::WeightedSum { a, w } => {
                let u = up.data[0];
                let mut d = w.clone();
                for v in &mut d.data {
                    *v *= u;
                }
                self.accumulate(a, &d);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (mean, rstd) = match &self.nodes[id].aux {
                    Aux::LayerNorm { mean, rstd } => (mean.clone(), rstd.clone()),
                    _ => unreachable!(),
                };
                let vx = self.nodes[x].value.clone();
                let vg = self.nodes[gain].value.clone();
                let n = vx.cols;
                let mut dx = Mat::zeros(vx.rows, n);
                let mut dg = Mat::zeros(1, n);
                let mut db = Mat::zeros(1, n);
                for i in 0..vx.rows {
                    let row = vx.row(i);
                    let urow = up.row(i);
                    let (mu, rs) = (mean[i], rstd[i]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let xh = (row[j] - mu) * rs;
                        let dyh = urow[j] * vg.data[j];
                        m1 += dyh;
                        m2 += dyh * xh;
                        dg.data[j] += urow[j] * xh;
                        db.data[j] += urow[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    let drow = dx.row_mut(i);
                    for j in 0..n {
                        let xh = (row[j] - mu) * rs;
                        let dyh = urow[j] * vg.data[j];
                        drow[j] = rs * (dyh - m1 - xh * m2);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dg);
                self.accumulate(bias, &db);
            }
            Op::Gelu { x } => {
                let vx = self.nodes[x].value.clone();
                let mut d = Mat::zeros(vx.rows, vx.cols);
                for (dv, (&xv, &uv)) in d.data.iter_mut().zip(vx.data.iter().zip(&up.data)) {
                    let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                    let t = u.tanh();
                    let dd = 0.5 * (1.0 + t)
                        + 0.5 * xv * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                    *dv = uv * dd;
                }
                self.accumulate(x, &d);
            }
            Op::CausalSoftmax { x } => {
                let p = self.nodes[id].value.clone();
                let t = p.rows;
                let mut d = Mat::zeros(t, t);
                for i in 0..t {
                    let prow = p.row(i);
                    let urow = up.row(i);
                    let mut s = 0.0;
                    for j in 0..=i {
                        s += urow[j] * prow[j];
                    }
                    let drow = d.row_mut(i);
                    for j in 0..=i {
                        drow[j] = prow[j] * (urow[j] - s);
                    }
                }
                self.accumulate(x, &d);
            }
            Op::MeanEntropyRows { x } => {
                let (probs, h) = match &self.nodes[id].aux {
                    Aux::Entropy { probs, h } => (probs.clone(), h.clone()),
                    _ => unreachable!(),
                };
                let u = up.data[0] / probs.rows as f64;
                let mut d = Mat::zeros(probs.rows, probs.cols);
                for i in 0..probs.rows {
                    let prow = probs.row(i);
                    let drow = d.row_mut(i);
                    for j in 0..probs.cols {
                        let p = prow[j];
                        if p > 0.0 {
                            drow[j] = -u * p * (p.ln() + h[i]);
                        }
                    }
                }
                self.accumulate(x, &d);
            }
            Op::LogDetCov { z } => {
                let cinv = match &self.nodes[id].aux {
                    Aux::LogDet { cinv } => cinv.clone(),
                    _ => unreachable!(),
                };
                let vz = self.nodes[z].value.clone();
                let (m, dcols) = (vz.rows, vz.cols);
                let zc = center_columns(&vz);
                let mut g = vec![0.0; m * dcols];
                matmul(&zc.data, &cinv, &mut g, m, dcols, dcols);
                let scale = up.data[0] * 2.0 / m as f64;
                for v in &mut g {
                    *v *= scale;
                }
                // re-center the gradient to account for the column-mean
                // subtraction in the forward pass
                let mut colsum = vec![0.0; dcols];
                for i in 0..m {
                    for j in 0..dcols {
                        colsum[j] += g[i * dcols + j];
                    }
                }
                let inv_m = 1.0 / m as f64;
                let mut d = Mat::zeros(m, dcols);
                for i in 0..m {
                    for j in 0..dcols {
                        d.data[i * dcols + j] = g[i * dcols + j] - colsum[j] * inv_m;
                    }
                }
                self.accumulate(z, &d);
            }
            Op::MeanLogDiag { a, start, len, delta } => {
                let va = self.nodes[a].value.clone();
                let u = up.data[0] / len as f64;
                let mut d = Mat::zeros(va.rows, va.cols);
                for i in start..start + len {
                    d.set(i, i, u / (va.get(i, i) + delta));
                }
                self.accumulate(a, &d);
            }
            Op::CrossEntropyShifted { logits, targets, win_start, win_end } => {
                let probs = match &self.nodes[id].aux {
                    Aux::Ce { probs } => probs.clone(),
                    _ => unreachable!(),
                };
                let vl = self.nodes[logits].value.clone();
                let count = win_end - win_start;
                let u = up.data[0] / count as f64;
                let mut d = Mat::zeros(vl.rows, vl.cols);
                for (k, t) in (win_start..win_end).enumerate() {
                    let prow = probs.row(k);
                    let drow = d.row_mut(t - 1);
                    for j in 0..vl.cols {
                        drow[j] += u * prow[j];
                    }
                    drow[targets[t]] -= u;
                }
                self.accumulate(logits, &d);
            }
            Op::LinComb { parts } => {
                let u = up.data[0];
                for (pid, c) in parts {
                    self.accumulate(pid, &Mat::from_vec(1, 1, vec![u * c]));
                }
            }
        }
    }
}

fn center_columns(z: &Mat) -> Mat {
    let (m, d) = (z.rows, z.cols);
    let mut mu = vec![0.0; d];
    for i in 0..m {
        for (s, &v) in mu.iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    let inv_m = 1.0 / m as f64;
    for s in &mut mu {
        *s *= inv_m;
    }
    let mut out = Mat::zeros(m, d);
    for i in 0..m {
        for j in 0..d {
            out.data[i * d + j] = z.data[i * d + j] - mu[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_mat(rows: usize, cols: usize, tag: &str) -> Mat {
        let mut r = rng::stream(42, tag);
        let mut m = Mat::zeros(rows, cols);
        rng::fill_normal(&mut r, 1.0, &mut m.data);
        m
    }

    /// Central-difference check of d(scalar)/d(leaves) for an arbitrary
    /// graph builder. Rebuilds the tape from scratch for every probe.
    fn fd_check(leaves: &[Mat], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let h = 1e-5;
        let tol = 1e-5;
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let out = build(&mut tape, &ids);
        tape.backward(out);
        let analytic: Vec<Mat> = ids
            .iter()
            .map(|&id| tape.grad(id).cloned().unwrap_or_else(|| {
                let v = tape.value(id);
                Mat::zeros(v.rows, v.cols)
            }))
            .collect();

        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.data.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(k, m)| {
                            let mut m = m.clone();
                            if k == li {
                                m.data[e] += delta;
                            }
                            tape.leaf(m, true)
                        })
                        .collect();
                    let out = build(&mut tape, &ids);
                    tape.scalar(out)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[li].data[e];
                let denom = a.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (a - fd).abs() / denom <= tol,
                    "leaf {li} elem {e}: analytic {a:.9e} vs fd {fd:.9e}"
                );
            }
        }
    }

    #[test]
    fn fd_matmul_chain() {
        let a = random_mat(3, 4, "a");
        let b = random_mat(4, 2, "b");
        let w = random_mat(3, 2, "w");
        fd_check(&[a, b], |t, ids| {
            let m = t.matmul(ids[0], ids[1]);
            t.weighted_sum(m, w.clone())
        });
    }

    #[test]
    fn fd_matmul_transb() {
        let a = random_mat(3, 4, "a2");
        let b = random_mat(5, 4, "b2");
        let w = random_mat(3, 5, "w2");
        fd_check(&[a, b], |t, ids| {
            let m = t.matmul_transb(ids[0], ids[1]);
            t.weighted_sum(m, w.clone())
        });
    }

    #[test]
    fn fd_layer_norm() {
        let x = random_mat(4, 6, "ln_x");
        let g = random_mat(1, 6, "ln_g");
        let b = random_mat(1, 6, "ln_b");
        let w = random_mat(4, 6, "ln_w");
        fd_check(&[x, g, b], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            t.weighted_sum(y, w.clone())
        });
    }

    #[test]
    fn fd_gelu() {
        let x = random_mat(3, 5, "gelu_x");
        let w = random_mat(3, 5, "gelu_w");
        fd_check(&[x], |t, ids| {
            let y = t.gelu(ids[0]);
            t.weighted_sum(y, w.clone())
        });
    }

    #[test]
    fn fd_causal_softmax() {
        let x = random_mat(5, 5, "cs_x");
        let w = random_mat(5, 5, "cs_w");
        fd_check(&[x], |t, ids| {
            let y = t.causal_softmax(ids[0]);
            t.weighted_sum(y, w.clone())
        });
    }

    #[test]
    fn fd_mean_entropy() {
        let x = random_mat(4, 7, "ent_x");
        fd_check(&[x], |t, ids| t.mean_entropy_rows(ids[0]));
    }

    #[test]
    fn fd_log_det_cov() {
        let z = random_mat(6, 3, "ld_z");
        fd_check(&[z], |t, ids| t.log_det_cov(ids[0], 1e-3).unwrap());
    }

    #[test]
    fn fd_mean_log_diag_of_softmax() {
        let x = random_mat(5, 5, "mld_x");
        fd_check(&[x], |t, ids| {
            let p = t.causal_softmax(ids[0]);
            t.mean_log_diag(p, 2, 3, 1e-8)
        });
    }

    #[test]
    fn fd_cross_entropy_shifted() {
        let x = random_mat(5, 6, "ce_x");
        let targets = vec![1, 4, 0, 3, 5];
        fd_check(&[x], |t, ids| t.cross_entropy_shifted(ids[0], &targets, 2, 5));
    }

    #[test]
    fn fd_gather_and_slice() {
        let e = random_mat(7, 4, "emb");
        let w = random_mat(5, 2, "gw");
        fd_check(&[e], |t, ids| {
            // repeated index 3 checks scatter-add accumulation
            let g = t.gather_rows(ids[0], &[3, 1, 3, 6, 0]);
            let s = t.slice_cols(g, 1, 2);
            t.weighted_sum(s, w.clone())
        });
    }

    #[test]
    fn fd_broadcast_concat_lincomb() {
        let a = random_mat(3, 2, "bc_a");
        let b = random_mat(1, 2, "bc_b");
        let c = random_mat(3, 3, "bc_c");
        let w = random_mat(3, 5, "bc_w");
        let w2 = random_mat(3, 2, "bc_w2");
        fd_check(&[a, b, c], |t, ids| {
            let x = t.add_row_broadcast(ids[0], ids[1]);
            let cat = t.concat_cols(&[x, ids[2]]);
            let s1 = t.weighted_sum(cat, w.clone());
            let x2 = t.scale(ids[0], 0.7);
            let s2 = t.weighted_sum(x2, w2.clone());
            t.lin_comb(&[(s1, 1.5), (s2, -0.25)])
        });
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_holds() {
        let x = random_mat(6, 6, "massx");
        let mut t = Tape::new();
        let id = t.leaf(x, false);
        let p = t.causal_softmax(id);
        let v = t.value(p);
        for i in 0..6 {
            let s: f64 = v.row(i)[..=i].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in i + 1..6 {
                assert_eq!(v.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn log_det_cov_of_single_row_is_pure_regularizer() {
        // one row centers to zero, so the covariance is exactly η·I
        let mut t = Tape::new();
        let id = t.leaf(Mat::from_vec(1, 4, vec![3.0, -1.0, 2.5, 0.0]), false);
        let ld = t.log_det_cov(id, 1e-3).unwrap();
        let want = 4.0 * (1e-3f64).ln();
        assert!((t.scalar(ld) - want).abs() < 1e-12, "{}", t.scalar(ld));
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_vec(1, 1, vec![2.0]), true);
        let y = t.scale(x, 3.0);
        t.backward(y);
        assert_eq!(t.grad(x).unwrap().data[0], 3.0);
        t.backward(y);
        assert_eq!(t.grad(x).unwrap().data[0], 6.0);
        t.zero_grads();
        t.backward(y);
        assert_eq!(t.grad(x).unwrap().data[0], 3.0);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_vec(1, 2, vec![1.0, 2.0]), true);
        let c = t.constant(Mat::from_vec(1, 2, vec![5.0, 5.0]));
        let s = t.add(x, c);
        let out = t.weighted_sum(s, Mat::from_vec(1, 2, vec![1.0, 1.0]));
        t.backward(out);
        assert!(t.grad(c).is_none());
        assert!(t.grad(x).is_some());
    }
}
