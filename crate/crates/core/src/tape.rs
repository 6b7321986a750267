//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to push gradients back to its inputs. Nodes are created in
//! topological order by construction, so one reverse sweep visits each node
//! exactly once. A tape can run backward once; a second call is rejected.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, shape_str, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// [B,m,k] x [B,k,n] batch matmul.
    Bmm(NodeId, NodeId),
    TransposeLast2(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Bias broadcast over the last axis.
    AddBias(NodeId, NodeId),
    /// b has shape a.shape[1..]; broadcast over the leading axis.
    AddBcast0(NodeId, NodeId),
    /// Tile the whole tensor along a new leading axis.
    TileAxis0(NodeId, usize),
    ScaleConst(NodeId, S),
    /// Multiply every element by a scalar node.
    ScaleByScalar(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// Gather rows of a 2D tensor; duplicates scatter-add on backward.
    GatherRows(NodeId, Vec<usize>),
    /// Concatenate two rank-3 tensors along axis 1.
    ConcatAxis1(NodeId, NodeId),
    /// L2-normalize along the last axis.
    RowL2Norm(NodeId),
    /// Mean over rows of -sum_j t_ij * log_softmax(x)_ij; targets carry no grad.
    CeSoft { logits: NodeId, targets: NodeId },
    SumAll(NodeId),
    /// y = sum_l coeffs[l] * blocks[l]; coeffs is a vector node of length |blocks|.
    DepthMix { coeffs: NodeId, blocks: Vec<NodeId> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    /// Saved per-row statistics (layer norm mean/rstd, row norms, softmax probs).
    aux: Vec<S>,
}

#[derive(Debug)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-wise softmax with per-row max subtraction, in place over `cols`-chunks.
pub fn softmax_rows_slice<S: Scalar>(data: &mut [S], cols: usize) {
    for row in data.chunks_mut(cols) {
        let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Row-wise softmax of a tensor over its last axis.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let cols = *x.shape().last().unwrap();
    let mut data = x.data().to_vec();
    softmax_rows_slice(&mut data, cols);
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
#[inline]
fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::one() + inner.fast_tanh())
}

#[inline]
fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.fast_tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, aux: Vec<S>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node { value, op, requires_grad, aux });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    // ── forward ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "{} x {}",
                    shape_str(self.value(a).shape()),
                    shape_str(self.value(b).shape())
                ),
            });
        }
        let data = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg, Vec::new()))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        match (&sa[..], &sb[..]) {
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => {
                let (bsz, m, k, n) = (*ba, *m, *k, *n);
                let mut data = vec![S::zero(); bsz * m * n];
                for i in 0..bsz {
                    tensor::matmul_acc(
                        &self.value(a).data()[i * m * k..(i + 1) * m * k],
                        &self.value(b).data()[i * k * n..(i + 1) * k * n],
                        &mut data[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                let value = Tensor::new(vec![bsz, m, n], data)?;
                let rg = self.rg(a) || self.rg(b);
                Ok(self.push(value, Op::Bmm(a, b), rg, Vec::new()))
            }
            _ => Err(Error::ShapeMismatch {
                op: "bmm",
                detail: format!("{} x {}", shape_str(&sa), shape_str(&sb)),
            }),
        }
    }

    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: shape_str(&shape),
            });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let mut data = Vec::with_capacity(self.value(a).numel());
        for i in 0..batch {
            data.extend(tensor::transpose(
                &self.value(a).data()[i * r * c..(i + 1) * r * c],
                r,
                c,
            ));
        }
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::TransposeLast2(a), rg, Vec::new()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg, Vec::new()))
    }

    pub fn permute(&mut self, a: NodeId, perm: Vec<usize>) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if perm.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "permute",
                detail: format!("perm {perm:?} vs shape {shape:?}"),
            });
        }
        let value = permute_tensor(self.value(a), &perm)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute(a, perm), rg, Vec::new()))
    }

    fn elementwise2(
        &mut self,
        a: NodeId,
        b: NodeId,
        opname: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: opname,
                detail: format!(
                    "{} vs {}",
                    shape_str(self.value(a).shape()),
                    shape_str(self.value(b).shape())
                ),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = *self.value(a).shape().last().unwrap();
        if self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!(
                    "{} + bias {}",
                    shape_str(self.value(a).shape()),
                    shape_str(self.value(bias).shape())
                ),
            });
        }
        let bdata = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, &y) in row.iter_mut().zip(&bdata) {
                *x = *x + y;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg, Vec::new()))
    }

    /// a: [B, rest...], b: [rest...]; broadcast-add b over the leading axis.
    pub fn add_bcast0(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() < 2 || sa[1..] != sb[..] {
            return Err(Error::ShapeMismatch {
                op: "add_bcast0",
                detail: format!("{} + {}", shape_str(&sa), shape_str(&sb)),
            });
        }
        let chunk = self.value(b).numel();
        let bdata = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for c in data.chunks_mut(chunk) {
            for (x, &y) in c.iter_mut().zip(&bdata) {
                *x = *x + y;
            }
        }
        let value = Tensor::new(sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddBcast0(a, b), rg, Vec::new()))
    }

    pub fn tile_axis0(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let mut shape = vec![times];
        shape.extend_from_slice(self.value(a).shape());
        let src = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&src);
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::TileAxis0(a, times), rg, Vec::new()))
    }

    pub fn scale_const(&mut self, a: NodeId, c: S) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::ScaleConst(a, c), rg, Vec::new())
    }

    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::Contract {
                op: "scale_by_scalar",
                detail: format!("scale node has shape {}", shape_str(self.value(s).shape())),
            });
        }
        let sv = self.value(s).scalar_value();
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::ScaleByScalar(a, s), rg, Vec::new()))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg, Vec::new())
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu_fwd);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg, Vec::new())
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxLast(a), rg, Vec::new())
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        if eps <= S::zero() {
            return Err(Error::Contract { op: "layer_norm", detail: format!("eps {eps} <= 0") });
        }
        let d = *self.value(x).shape().last().unwrap();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {} gamma {} beta {}",
                    shape_str(self.value(x).shape()),
                    shape_str(self.value(gamma).shape()),
                    shape_str(self.value(beta).shape())
                ),
            });
        }
        let rows = self.value(x).numel() / d;
        let nd = S::from_f64(d as f64);
        let mut data = Vec::with_capacity(rows * d);
        let mut aux = Vec::with_capacity(rows * 2);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().cloned().sum::<S>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nd;
            let rstd = S::one() / (var + eps).sqrt();
            aux.push(mean);
            aux.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * rstd * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, rg, aux))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {r} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(&self.value(a).data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, indices), rg, Vec::new()))
    }

    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        match (&sa[..], &sb[..]) {
            ([ba, ta, d], [bb, tb, d2]) if ba == bb && d == d2 => {
                let (bsz, ta, tb, d) = (*ba, *ta, *tb, *d);
                let mut data = Vec::with_capacity(bsz * (ta + tb) * d);
                for i in 0..bsz {
                    data.extend_from_slice(&self.value(a).data()[i * ta * d..(i + 1) * ta * d]);
                    data.extend_from_slice(&self.value(b).data()[i * tb * d..(i + 1) * tb * d]);
                }
                let value = Tensor::new(vec![bsz, ta + tb, d], data)?;
                let rg = self.rg(a) || self.rg(b);
                Ok(self.push(value, Op::ConcatAxis1(a, b), rg, Vec::new()))
            }
            _ => Err(Error::ShapeMismatch {
                op: "concat_axis1",
                detail: format!("{} ++ {}", shape_str(&sa), shape_str(&sb)),
            }),
        }
    }

    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let d = *self.value(a).shape().last().unwrap();
        let rows = self.value(a).numel() / d;
        let mut data = Vec::with_capacity(rows * d);
        let mut aux = Vec::with_capacity(rows);
        for row in self.value(a).data().chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm == S::zero() {
                return Err(Error::Contract {
                    op: "row_l2_normalize",
                    detail: format!("zero-norm row"),
                });
            }
            aux.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowL2Norm(a), rg, aux))
    }

    /// Mean over rows of -sum_j targets[i,j] * log_softmax(logits)[i,j].
    /// Each target row must sum to 1 within 1e-9.
    pub fn cross_entropy_soft(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2()?;
        if self.value(targets).shape() != [m, n] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_soft",
                detail: format!(
                    "logits {} vs targets {}",
                    shape_str(self.value(logits).shape()),
                    shape_str(self.value(targets).shape())
                ),
            });
        }
        for (i, row) in self.value(targets).data().chunks(n).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract {
                    op: "cross_entropy_soft",
                    detail: format!("target row {i} sums to {s}, expected 1"),
                });
            }
        }
        // log-softmax with max subtraction; save the probabilities for backward.
        let mut aux = Vec::with_capacity(m * n);
        let mut total = S::zero();
        let tdata = self.value(targets).data();
        for (i, row) in self.value(logits).data().chunks(n).enumerate() {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
            for (j, &v) in row.iter().enumerate() {
                aux.push((v - lse).exp());
                total = total - tdata[i * n + j] * (v - lse);
            }
        }
        let value = Tensor::scalar(total / S::from_f64(m as f64));
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CeSoft { logits, targets }, rg, aux))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().cloned().sum::<S>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg, Vec::new())
    }

    /// Linear combination of same-shape blocks with a coefficient vector node.
    pub fn depth_mix(&mut self, coeffs: NodeId, blocks: &[NodeId]) -> Result<NodeId> {
        if self.value(coeffs).numel() != blocks.len() {
            return Err(Error::ShapeMismatch {
                op: "depth_mix",
                detail: format!(
                    "{} coeffs vs {} blocks",
                    self.value(coeffs).numel(),
                    blocks.len()
                ),
            });
        }
        let shape = self.value(blocks[0]).shape().to_vec();
        for &b in blocks {
            if self.value(b).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "depth_mix",
                    detail: format!(
                        "{} vs {}",
                        shape_str(&shape),
                        shape_str(self.value(b).shape())
                    ),
                });
            }
        }
        let cs = self.value(coeffs).data().to_vec();
        let mut data = vec![S::zero(); self.value(blocks[0]).numel()];
        for (l, &b) in blocks.iter().enumerate() {
            let cl = cs[l];
            for (d, &v) in data.iter_mut().zip(self.value(b).data()) {
                *d = *d + cl * v;
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(coeffs) || blocks.iter().any(|&b| self.rg(b));
        Ok(self.push(value, Op::DepthMix { coeffs, blocks: blocks.to_vec() }, rg, Vec::new()))
    }

    // ── backward ─────────────────────────────────────────────────────────────

    fn accum(&mut self, id: NodeId, delta: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv = *gv + *dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Populate gradients of every `requires_grad` node reachable from `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: shape_str(self.value(root).shape()),
            });
        }
        self.grads[root.0] = Some(Tensor::scalar(S::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            // leaf grads stay resident for the caller; interior grads are
            // consumed here, so move them out instead of cloning
            let g = if matches!(op, Op::Leaf) {
                match self.grads[idx].clone() {
                    Some(g) => g,
                    None => continue,
                }
            } else {
                match self.grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(a).dims2().unwrap();
                    let n = self.value(b).shape()[1];
                    if self.rg(a) {
                        let mut da = vec![S::zero(); m * k];
                        tensor::matmul_nt_acc(g.data(), self.value(b).data(), &mut da, m, n, k);
                        self.accum(a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.rg(b) {
                        let mut db = vec![S::zero(); k * n];
                        tensor::matmul_tn_acc(self.value(a).data(), g.data(), &mut db, k, m, n);
                        self.accum(b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Bmm(a, b) => {
                    let sa = self.value(a).shape().to_vec();
                    let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                    let n = self.value(b).shape()[2];
                    if self.rg(a) {
                        let mut da = vec![S::zero(); bsz * m * k];
                        for i in 0..bsz {
                            tensor::matmul_nt_acc(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        self.accum(a, Tensor::new(vec![bsz, m, k], da)?);
                    }
                    if self.rg(b) {
                        let mut db = vec![S::zero(); bsz * k * n];
                        for i in 0..bsz {
                            tensor::matmul_tn_acc(
                                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                        self.accum(b, Tensor::new(vec![bsz, k, n], db)?);
                    }
                }
                Op::TransposeLast2(a) => {
                    let gs = g.shape().to_vec();
                    let (r, c) = (gs[gs.len() - 2], gs[gs.len() - 1]);
                    let batch: usize = gs[..gs.len() - 2].iter().product();
                    let mut data = Vec::with_capacity(g.numel());
                    for i in 0..batch {
                        data.extend(tensor::transpose(&g.data()[i * r * c..(i + 1) * r * c], r, c));
                    }
                    self.accum(a, Tensor::new(self.value(a).shape().to_vec(), data)?);
                }
                Op::Reshape(a) => {
                    let da = g.reshaped(self.value(a).shape().to_vec())?;
                    self.accum(a, da);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let da = permute_tensor(&g, &inv)?;
                    self.accum(a, da);
                }
                Op::Add(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let da: Vec<S> = g
                            .data()
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        self.accum(a, Tensor::new(g.shape().to_vec(), da)?);
                    }
                    if self.rg(b) {
                        let db: Vec<S> = g
                            .data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        self.accum(b, Tensor::new(g.shape().to_vec(), db)?);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.rg(bias) {
                        let d = self.value(bias).numel();
                        let mut db = vec![S::zero(); d];
                        for row in g.data().chunks(d) {
                            for (s, &v) in db.iter_mut().zip(row) {
                                *s = *s + v;
                            }
                        }
                        self.accum(bias, Tensor::new(vec![d], db)?);
                    }
                    if self.rg(a) {
                        self.accum(a, g);
                    }
                }
                Op::AddBcast0(a, b) => {
                    if self.rg(b) {
                        let chunk = self.value(b).numel();
                        let mut db = vec![S::zero(); chunk];
                        for c in g.data().chunks(chunk) {
                            for (s, &v) in db.iter_mut().zip(c) {
                                *s = *s + v;
                            }
                        }
                        self.accum(b, Tensor::new(self.value(b).shape().to_vec(), db)?);
                    }
                    if self.rg(a) {
                        self.accum(a, g);
                    }
                }
                Op::TileAxis0(a, times) => {
                    let chunk = self.value(a).numel();
                    let mut da = vec![S::zero(); chunk];
                    for t in 0..times {
                        for (s, &v) in da.iter_mut().zip(&g.data()[t * chunk..(t + 1) * chunk]) {
                            *s = *s + v;
                        }
                    }
                    self.accum(a, Tensor::new(self.value(a).shape().to_vec(), da)?);
                }
                Op::ScaleConst(a, c) => {
                    self.accum(a, g.map(|v| v * c));
                }
                Op::ScaleByScalar(a, s) => {
                    let sv = self.value(s).scalar_value();
                    if self.rg(a) {
                        self.accum(a, g.map(|v| v * sv));
                    }
                    if self.rg(s) {
                        let ds = g
                            .data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(&gv, &av)| gv * av)
                            .sum::<S>();
                        self.accum(s, Tensor::scalar(ds));
                    }
                }
                Op::Exp(a) => {
                    let da: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.nodes[idx].value.data())
                        .map(|(&gv, &yv)| gv * yv)
                        .collect();
                    self.accum(a, Tensor::new(g.shape().to_vec(), da)?);
                }
                Op::Gelu(a) => {
                    let da: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gv, &xv)| gv * gelu_bwd(xv))
                        .collect();
                    self.accum(a, Tensor::new(g.shape().to_vec(), da)?);
                }
                Op::SoftmaxLast(a) => {
                    let d = *g.shape().last().unwrap();
                    let y = &self.nodes[idx].value;
                    let mut da = Vec::with_capacity(g.numel());
                    for (grow, yrow) in g.data().chunks(d).zip(y.data().chunks(d)) {
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .map(|(&gv, &yv)| gv * yv)
                            .sum::<S>();
                        da.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                    }
                    self.accum(a, Tensor::new(g.shape().to_vec(), da)?);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let d = self.value(gamma).numel();
                    let rows = g.numel() / d;
                    let nd = S::from_f64(d as f64);
                    let gm = self.value(gamma).data().to_vec();
                    let aux = self.nodes[idx].aux.clone();
                    let xv = self.value(x).data().to_vec();
                    let mut dx = vec![S::zero(); rows * d];
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    for r in 0..rows {
                        let mean = aux[2 * r];
                        let rstd = aux[2 * r + 1];
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let xrow = &xv[r * d..(r + 1) * d];
                        // y_pre = (x - mean) * rstd
                        let mut sum_dyp = S::zero();
                        let mut sum_dyp_yp = S::zero();
                        for j in 0..d {
                            let yp = (xrow[j] - mean) * rstd;
                            let dyp = grow[j] * gm[j];
                            sum_dyp = sum_dyp + dyp;
                            sum_dyp_yp = sum_dyp_yp + dyp * yp;
                            dgamma[j] = dgamma[j] + grow[j] * yp;
                            dbeta[j] = dbeta[j] + grow[j];
                        }
                        let mean_dyp = sum_dyp / nd;
                        let mean_dyp_yp = sum_dyp_yp / nd;
                        for j in 0..d {
                            let yp = (xrow[j] - mean) * rstd;
                            let dyp = grow[j] * gm[j];
                            dx[r * d + j] = rstd * (dyp - mean_dyp - yp * mean_dyp_yp);
                        }
                    }
                    if self.rg(x) {
                        self.accum(x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
                    }
                    if self.rg(gamma) {
                        self.accum(gamma, Tensor::new(vec![d], dgamma)?);
                    }
                    if self.rg(beta) {
                        self.accum(beta, Tensor::new(vec![d], dbeta)?);
                    }
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = self.value(a).dims2().unwrap();
                    let mut da = vec![S::zero(); r * c];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            da[i * c + j] = da[i * c + j] + g.data()[k * c + j];
                        }
                    }
                    self.accum(a, Tensor::new(vec![r, c], da)?);
                }
                Op::ConcatAxis1(a, b) => {
                    let sa = self.value(a).shape().to_vec();
                    let sb = self.value(b).shape().to_vec();
                    let (bsz, ta, tb, d) = (sa[0], sa[1], sb[1], sa[2]);
                    let t = ta + tb;
                    if self.rg(a) {
                        let mut da = Vec::with_capacity(bsz * ta * d);
                        for i in 0..bsz {
                            da.extend_from_slice(&g.data()[i * t * d..i * t * d + ta * d]);
                        }
                        self.accum(a, Tensor::new(sa.clone(), da)?);
                    }
                    if self.rg(b) {
                        let mut db = Vec::with_capacity(bsz * tb * d);
                        for i in 0..bsz {
                            db.extend_from_slice(&g.data()[i * t * d + ta * d..(i + 1) * t * d]);
                        }
                        self.accum(b, Tensor::new(sb, db)?);
                    }
                }
                Op::RowL2Norm(a) => {
                    let d = *g.shape().last().unwrap();
                    let y = self.nodes[idx].value.data().to_vec();
                    let aux = self.nodes[idx].aux.clone();
                    let mut da = Vec::with_capacity(g.numel());
                    for (r, (grow, yrow)) in g.data().chunks(d).zip(y.chunks(d)).enumerate() {
                        let norm = aux[r];
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .map(|(&gv, &yv)| gv * yv)
                            .sum::<S>();
                        da.extend(
                            grow.iter().zip(yrow).map(|(&gv, &yv)| (gv - yv * dot) / norm),
                        );
                    }
                    self.accum(a, Tensor::new(g.shape().to_vec(), da)?);
                }
                Op::CeSoft { logits, targets } => {
                    let (m, n) = self.value(logits).dims2().unwrap();
                    let gs = g.scalar_value() / S::from_f64(m as f64);
                    let probs = self.nodes[idx].aux.clone();
                    let t = self.value(targets).data();
                    let da: Vec<S> = probs
                        .iter()
                        .zip(t)
                        .map(|(&p, &tv)| gs * (p - tv))
                        .collect();
                    self.accum(logits, Tensor::new(vec![m, n], da)?);
                }
                Op::SumAll(a) => {
                    let gs = g.scalar_value();
                    self.accum(a, Tensor::full(self.value(a).shape().to_vec(), gs));
                }
                Op::DepthMix { coeffs, blocks } => {
                    let cs = self.value(coeffs).data().to_vec();
                    let mut dc = vec![S::zero(); cs.len()];
                    for (l, &b) in blocks.iter().enumerate() {
                        if self.rg(b) {
                            let cl = cs[l];
                            self.accum(b, g.map(|v| v * cl));
                        }
                        if self.rg(coeffs) {
                            dc[l] = g
                                .data()
                                .iter()
                                .zip(self.value(b).data())
                                .map(|(&gv, &bv)| gv * bv)
                                .sum::<S>();
                        }
                    }
                    if self.rg(coeffs) {
                        self.accum(
                            coeffs,
                            Tensor::new(self.value(coeffs).shape().to_vec(), dc)?,
                        );
                    }
                }
            }
        }
        Ok(())
    }

    /// Error out if any value or populated gradient is non-finite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("{context}: value of node {i}"),
                });
            }
            if let Some(g) = &self.grads[i] {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        context: format!("{context}: grad of node {i}"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn permute_tensor<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    if n == 0 || perm.is_empty() {
        data.extend_from_slice(x.data());
        return Tensor::new(out_shape, data);
    }
    // Walk the output in row-major order with an odometer over the outer
    // dims, carrying the source offset incrementally; the innermost output
    // dim becomes one strided (often contiguous) copy per visit.
    let nd = perm.len();
    let steps: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[nd - 1];
    let inner_step = steps[nd - 1];
    let xd = x.data();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    'rows: loop {
        if inner_step == 1 {
            data.extend_from_slice(&xd[src..src + inner]);
        } else {
            let mut s = src;
            for _ in 0..inner {
                data.push(xd[s]);
                s += inner_step;
            }
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                break 'rows;
            }
            d -= 1;
            idx[d] += 1;
            src += steps[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= steps[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}
