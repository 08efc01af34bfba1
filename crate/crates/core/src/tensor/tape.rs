//! Single-use Wengert tape for reverse-mode differentiation.
//!
//! One tape records one training step and is dropped after `backward`; no
//! graph state survives across steps. Nodes are appended in topological
//! order, so the reverse sweep visits each node exactly once and the same
//! tape always produces bit-identical gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_ta, matmul_tb, Real, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Operation kinds recorded on the tape.
#[derive(Debug)]
pub enum Op {
    /// Leaf value; `param` marks it as a gradient target.
    Leaf { param: bool },
    /// A[n,k] · B[k,m]
    Matmul(Var, Var),
    /// A[n,k] · B[m,k]ᵀ — the natural form for row-major layer weights.
    MatmulTb(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Matrix plus a broadcast row vector.
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, Real),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Scalar mean over all entries.
    Mean(Var),
    /// Scalar sum over all entries.
    Sum(Var),
    /// Scalar Σ x².
    SumSq(Var),
    /// Column-wise mean: [n,m] → [1,m].
    MeanRows(Var),
    /// Row-wise concatenation of two matrices with equal column counts.
    ConcatRows(Var, Var),
    /// Contiguous row-major sub-range reinterpreted with a new shape.
    Slice { src: Var, offset: usize },
    /// Weighted binary cross-entropy on logits (numerically stable, fused).
    BceWithLogits {
        logits: Var,
        targets: Tensor,
        weights: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter Var, same shape as the parameter.
#[derive(Debug)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v.0)
    }

    /// Gradient for a parameter; an untouched parameter gets zeros.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.by_node
            .get(&v.0)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: false }, value, false)
    }

    /// Records a parameter: a gradient target for `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf { param: true }, value, true);
        self.params.push(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k, k2, m) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let out = Tensor::new(vec![n, m], matmul(va.data(), vb.data(), n, k, m))?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul(a, b), out, req))
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k, m, k2) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(shape_err("matmul_tb", va, vb));
        }
        let out = Tensor::new(vec![n, m], matmul_tb(va.data(), vb.data(), n, k, m))?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::MatmulTb(a, b), out, req))
    }

    fn zip_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(op, out, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// `a[n,m] + bias` where the bias has m entries (shape `[m]` or `[1,m]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let m = va.cols();
        if vb.numel() != m {
            return Err(shape_err("add_bias", va, vb));
        }
        let mut data = va.data().to_vec();
        super::add_bias_in_place(&mut data, vb.data());
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.req(a) || self.req(bias);
        Ok(self.push(Op::AddBias(a, bias), out, req))
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let req = self.req(a);
        self.push(op, out, req)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Real::tanh, Op::Tanh(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let n = va.numel().max(1) as Real;
        let s: Real = va.data().iter().sum();
        let req = self.req(a);
        self.push(Op::Mean(a), Tensor::scalar(s / n), req)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: Real = self.nodes[a.0].value.data().iter().sum();
        let req = self.req(a);
        self.push(Op::Sum(a), Tensor::scalar(s), req)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s: Real = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        let req = self.req(a);
        self.push(Op::SumSq(a), Tensor::scalar(s), req)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (n, m) = (va.rows(), va.cols());
        if n == 0 {
            return Err(Error::Contract("mean_rows: empty input".into()));
        }
        let mut data = vec![0.0; m];
        for row in va.data().chunks(m) {
            for (acc, x) in data.iter_mut().zip(row) {
                *acc += *x;
            }
        }
        for acc in data.iter_mut() {
            *acc /= n as Real;
        }
        let req = self.req(a);
        Ok(self.push(Op::MeanRows(a), Tensor::new(vec![1, m], data)?, req))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(shape_err("concat_rows", va, vb));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::new(vec![va.rows() + vb.rows(), va.cols()], data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::ConcatRows(a, b), out, req))
    }

    /// Contiguous sub-range of the flat storage, reinterpreted as `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let vs = &self.nodes[src.0].value;
        let len: usize = shape.iter().product();
        if offset + len > vs.numel() {
            return Err(Error::Contract(format!(
                "slice [{}..{}] out of bounds for {} elements",
                offset,
                offset + len,
                vs.numel()
            )));
        }
        let data = vs.data()[offset..offset + len].to_vec();
        let out = Tensor::new(shape.to_vec(), data)?;
        let req = self.req(src);
        Ok(self.push(Op::Slice { src, offset }, out, req))
    }

    /// Mean of per-element weighted BCE over logits. Targets and weights are
    /// plain tensors (never differentiated); weights are normalized by their
    /// sum inside the op.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor, weights: Tensor) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if vl.numel() != targets.numel() || vl.numel() != weights.numel() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: vl.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let wsum: Real = weights.data().iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Contract("bce_with_logits: weights sum to zero".into()));
        }
        let mut loss = 0.0;
        for ((&z, &y), &w) in vl.data().iter().zip(targets.data()).zip(weights.data()) {
            loss += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        }
        let req = self.req(logits);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            Tensor::scalar(loss / wsum),
            req,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter registered with [`Tape::param`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        lv.check_finite("backward loss")?;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut by_node = HashMap::new();
        for &pid in &self.params {
            if let Some(g) = grads[pid].take() {
                by_node.insert(pid, g);
            }
        }
        Ok(Gradients { by_node })
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.req(*a) {
                    let da = matmul_tb(g.data(), vb.data(), n, m, k);
                    Self::accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if self.req(*b) {
                    let db = matmul_ta(va.data(), g.data(), n, k, m);
                    Self::accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::MatmulTb(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, k, m) = (va.rows(), va.cols(), vb.rows());
                if self.req(*a) {
                    let da = matmul(g.data(), vb.data(), n, m, k);
                    Self::accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if self.req(*b) {
                    let db = matmul_ta(g.data(), va.data(), n, m, k);
                    Self::accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.req(*v) {
                        Self::accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.req(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.req(*b) {
                    let neg = Tensor {
                        shape: g.shape().to_vec(),
                        data: g.data().iter().map(|x| -x).collect(),
                    };
                    Self::accumulate(grads, *b, neg);
                }
            }
            Op::AddBias(a, bias) => {
                if self.req(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.req(*bias) {
                    let vb = &self.nodes[bias.0].value;
                    let m = vb.numel();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (acc, x) in db.iter_mut().zip(row) {
                            *acc += *x;
                        }
                    }
                    Self::accumulate(grads, *bias, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.req(*a) {
                    let da = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if self.req(*b) {
                    let db = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, c) => {
                if self.req(*a) {
                    let da = g.data().iter().map(|x| c * x).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                }
            }
            Op::Relu(a) => {
                if self.req(*a) {
                    let va = &self.nodes[a.0].value;
                    let da = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gx, &x)| if x > 0.0 { gx } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
            }
            Op::Sigmoid(a) => {
                if self.req(*a) {
                    let out = &node.value;
                    let da = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gx, &s)| gx * s * (1.0 - s))
                        .collect();
                    Self::accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
                }
            }
            Op::Tanh(a) => {
                if self.req(*a) {
                    let out = &node.value;
                    let da = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gx, &t)| gx * (1.0 - t * t))
                        .collect();
                    Self::accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
                }
            }
            Op::Mean(a) => {
                if self.req(*a) {
                    let va = &self.nodes[a.0].value;
                    let c = g.data()[0] / va.numel().max(1) as Real;
                    Self::accumulate(grads, *a, Tensor::filled(va.shape(), c));
                }
            }
            Op::Sum(a) => {
                if self.req(*a) {
                    let va = &self.nodes[a.0].value;
                    Self::accumulate(grads, *a, Tensor::filled(va.shape(), g.data()[0]));
                }
            }
            Op::SumSq(a) => {
                if self.req(*a) {
                    let va = &self.nodes[a.0].value;
                    let c = g.data()[0];
                    let da = va.data().iter().map(|&x| 2.0 * c * x).collect();
                    Self::accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
            }
            Op::MeanRows(a) => {
                if self.req(*a) {
                    let va = &self.nodes[a.0].value;
                    let (n, m) = (va.rows(), va.cols());
                    let mut da = vec![0.0; n * m];
                    for row in da.chunks_mut(m) {
                        for (x, gx) in row.iter_mut().zip(g.data()) {
                            *x = gx / n as Real;
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
            }
            Op::ConcatRows(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let split = va.numel();
                if self.req(*a) {
                    let da = g.data()[..split].to_vec();
                    Self::accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if self.req(*b) {
                    let db = g.data()[split..].to_vec();
                    Self::accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::Slice { src, offset } => {
                if self.req(*src) {
                    let vs = &self.nodes[src.0].value;
                    let mut dsrc = Tensor::zeros(vs.shape());
                    dsrc.data_mut()[*offset..*offset + g.numel()].copy_from_slice(g.data());
                    Self::accumulate(grads, *src, dsrc);
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                if self.req(*logits) {
                    let vl = &self.nodes[logits.0].value;
                    let wsum: Real = weights.data().iter().sum();
                    let c = g.data()[0] / wsum;
                    let dl = vl
                        .data()
                        .iter()
                        .zip(targets.data())
                        .zip(weights.data())
                        .map(|((&z, &y), &w)| c * w * (sigmoid(z) - y))
                        .collect();
                    Self::accumulate(grads, *logits, Tensor::new(vl.shape().to_vec(), dl)?);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_by_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn hadamard_annihilator() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = t.constant(Tensor::zeros(&[2, 2]));
        let h = t.hadamard(a, z).unwrap();
        assert_eq!(t.value(h).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_identity_tracks() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let id = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = t.matmul(a, id).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn sum_sq_gradient() {
        // d(w²)/dw = 2w
        let mut t = Tape::new();
        let w = t.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let loss = t.sum_sq(w);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn masked_out_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let mask = t.constant(Tensor::zeros(&[3]));
        let masked = t.hadamard(w, mask).unwrap();
        let loss = t.mean(masked);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(&[2, 2]));
        let y = t.scale(w, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let w = t.param(Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.05]).unwrap());
            let x = t.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, -0.5, 0.25, 0.0, 1.0]).unwrap());
            let h = t.matmul_tb(x, w).unwrap();
            let a = t.tanh(h);
            let loss = t.sum_sq(a);
            let grads = t.backward(loss).unwrap();
            grads.get(w).unwrap().data().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.param(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let c = t.concat_rows(a, b).unwrap();
        let s = t.slice(c, 1, &[2]).unwrap(); // picks [2.0, 3.0]
        let loss = t.sum_sq(s);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[6.0, 0.0]);
    }
}
