//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes; node
//! ids therefore form a topological order (parents always precede children).
//! [`Tape::backward`] walks that list in reverse from a scalar root and
//! accumulates gradients, so a value consumed twice receives the sum of both
//! contributions. Tapes are cheap to create, confined to one thread, and
//! meant to be dropped after backward.
//!
//! Every op validates input shapes up front and rejects non-finite outputs,
//! naming the op that produced them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, expand_to, reduce_to_shape, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Affine,
    Matmul,
    Exp,
    Ln,
    Relu,
    Silu,
    Gelu,
    EluOne,
    Softmax,
    MaxReduce,
    SumReduce,
    MeanReduce,
    Reshape,
    Permute,
    BroadcastTo,
    Concat,
    Slice,
    GeScalar,
    Conv2d,
    BatchNorm,
    LayerNorm,
    SparseCrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Matmul => "matmul",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::Gelu => "gelu",
            OpKind::EluOne => "elu_plus_one",
            OpKind::Softmax => "softmax",
            OpKind::MaxReduce => "max_reduce",
            OpKind::SumReduce => "sum_reduce",
            OpKind::MeanReduce => "mean_reduce",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::GeScalar => "ge_scalar",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SparseCrossEntropy => "sparse_cross_entropy",
        }
    }
}

/// Receives (parent id, gradient contribution in the parent's shape).
type Acc<'a> = &'a mut dyn FnMut(usize, Vec<f64>);
type BackFn = Box<dyn Fn(&Tensor, Acc)>;

struct Node {
    kind: OpKind,
    value: Tensor,
    requires: bool,
    back: Option<BackFn>,
}

/// Gradients produced by one backward pass, indexed by the originating tape's
/// node ids. Nodes the root does not depend on have no entry; [`Gradients::get`]
/// returns `None` for them and callers may treat that as zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros in that variable's shape when the root does
    /// not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[v.0].value.shape()),
        }
    }

    /// Number of nodes that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

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
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked input: participates in differentiation.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(OpKind::Leaf, t.clone(), true, None)
    }

    /// Untracked input: gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_node(OpKind::Constant, t.clone(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// The primitive that produced `v`; useful in diagnostics.
    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].kind
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::ForeignVar { id: v.0, len: self.nodes.len() });
        }
        Ok(())
    }

    fn push_node(&mut self, kind: OpKind, value: Tensor, requires: bool, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { kind, value, requires, back });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, kind: OpKind, value: Tensor, requires: bool, back: BackFn) -> Result<Var> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let back = if requires { Some(back) } else { None };
        Ok(self.push_node(kind, value, requires, back))
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        fwd: fn(f64, f64) -> f64,
        dfa: fn(f64, f64) -> f64,
        dfb: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let out_shape = broadcast_shapes(ta.shape(), tb.shape()).map_err(|_| {
            Error::shape(kind.name(), format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()))
        })?;
        let ea = expand_to(&ta, &out_shape);
        let eb = expand_to(&tb, &out_shape);
        let data: Vec<f64> = ea.iter().zip(&eb).map(|(&x, &y)| fwd(x, y)).collect();
        let out = Tensor::from_parts(out_shape.clone(), data);
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        let (ra, rb) = (self.nodes[a.0].requires, self.nodes[b.0].requires);
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            if ra {
                let contrib: Vec<f64> =
                    g.iter().zip(ea.iter().zip(&eb)).map(|(&gi, (&x, &y))| gi * dfa(x, y)).collect();
                acc(a.0, reduce_to_shape(&contrib, &out_shape, &sa));
            }
            if rb {
                let contrib: Vec<f64> =
                    g.iter().zip(ea.iter().zip(&eb)).map(|(&gi, (&x, &y))| gi * dfb(x, y)).collect();
                acc(b.0, reduce_to_shape(&contrib, &out_shape, &sb));
            }
        });
        self.push_op(kind, out, requires, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// `scale * x + shift`, elementwise with constants.
    pub fn affine(&mut self, v: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let out = t.map(|x| scale * x + shift);
        let requires = self.nodes[v.0].requires;
        let back: BackFn = Box::new(move |grad, acc| {
            acc(v.0, grad.data().iter().map(|&g| g * scale).collect());
        });
        self.push_op(OpKind::Affine, out, requires, back)
    }

    // ---- elementwise unary ops ----

    fn unary(
        &mut self,
        kind: OpKind,
        v: Var,
        fwd: fn(f64) -> f64,
        // Derivative given (input, output).
        dfdx: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check(v)?;
        let tx = self.value(v).clone();
        let out = tx.map(fwd);
        let ty = out.clone();
        let requires = self.nodes[v.0].requires;
        let back: BackFn = Box::new(move |grad, acc| {
            let contrib: Vec<f64> = grad
                .data()
                .iter()
                .zip(tx.data().iter().zip(ty.data()))
                .map(|(&g, (&x, &y))| g * dfdx(x, y))
                .collect();
            acc(v.0, contrib);
        });
        self.push_op(kind, out, requires, back)
    }

    pub fn exp(&mut self, v: Var) -> Result<Var> {
        self.unary(OpKind::Exp, v, f64::exp, |_, y| y)
    }

    /// Natural log. Non-positive inputs produce non-finite values and are
    /// rejected by the finiteness contract.
    pub fn ln(&mut self, v: Var) -> Result<Var> {
        self.unary(OpKind::Ln, v, f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&mut self, v: Var) -> Result<Var> {
        self.unary(OpKind::Relu, v, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&mut self, v: Var) -> Result<Var> {
        self.unary(OpKind::Silu, v, |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, v: Var) -> Result<Var> {
        self.unary(OpKind::Gelu, v, gelu_value, gelu_derivative)
    }

    /// `ELU(x) + 1`: `x + 1` for positive x, `exp(x)` otherwise. Strictly
    /// positive and C1-smooth, used as the linear-attention kernel.
    pub fn elu_plus_one(&mut self, v: Var) -> Result<Var> {
        self.unary(
            OpKind::EluOne,
            v,
            |x| if x > 0.0 { x + 1.0 } else { x.exp() },
            |x, y| if x > 0.0 { 1.0 } else { y },
        )
    }

    /// 0/1 mask of `x >= threshold`. Piecewise constant, so no gradient flows
    /// through it.
    pub fn ge_scalar(&mut self, v: Var, threshold: f64) -> Result<Var> {
        self.check(v)?;
        let out = self.value(v).map(|x| if x >= threshold { 1.0 } else { 0.0 });
        Ok(self.push_node(OpKind::GeScalar, out, false, None))
    }

    // ---- matmul ----

    /// Matrix product supporting `(m,k)@(k,n)`, `(b,m,k)@(k,n)` (shared right
    /// operand) and `(b,m,k)@(b,k,n)` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        let mismatch = || {
            Error::shape("matmul", format!("incompatible shapes {:?} and {:?}", sa, sb))
        };
        let (batch, m, k, n, batched_b) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (1, sa[0], sa[1], sb[1], false)
            }
            (3, 2) => {
                if sa[2] != sb[0] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[1], false)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[2], true)
            }
            _ => return Err(mismatch()),
        };
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if batched_b { bi * k * n } else { 0 };
            gemm_nn(&ta.data()[a_off..a_off + m * k], &tb.data()[b_off..b_off + k * n], m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let out = Tensor::from_parts(out_shape, out);
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        let (ra, rb) = (self.nodes[a.0].requires, self.nodes[b.0].requires);
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            if ra {
                // dA[b] = dY[b] @ B[b]^T
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    let b_off = if batched_b { bi * k * n } else { 0 };
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &tb.data()[b_off..b_off + k * n],
                        m,
                        n,
                        k,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
                acc(a.0, da);
            }
            if rb {
                if batched_b {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        gemm_tn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    acc(b.0, db);
                } else {
                    // Shared right operand accumulates over the batch.
                    let mut db = vec![0.0; k * n];
                    for bi in 0..batch {
                        gemm_tn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db,
                        );
                    }
                    acc(b.0, db);
                }
            }
        });
        self.push_op(OpKind::Matmul, out, requires, back)
    }

    // ---- softmax and friends ----

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let shape = t.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("softmax", "rank-0 tensor".to_string()));
        }
        let d = *shape.last().unwrap();
        if d == 0 {
            return Err(Error::shape("softmax", "empty last axis".to_string()));
        }
        let lanes = t.numel() / d;
        let mut out = vec![0.0; t.numel()];
        for lane in 0..lanes {
            let row = &t.data()[lane * d..(lane + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in out[lane * d..(lane + 1) * d].iter_mut().zip(row) {
                let e = (x - m).exp();
                *o = e;
                sum += e;
            }
            for o in out[lane * d..(lane + 1) * d].iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::from_parts(shape, out);
        let ty = out.clone();
        let requires = self.nodes[v.0].requires;
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            let y = ty.data();
            let mut contrib = vec![0.0; y.len()];
            for lane in 0..lanes {
                let gs = &g[lane * d..(lane + 1) * d];
                let ys = &y[lane * d..(lane + 1) * d];
                let dot: f64 = gs.iter().zip(ys).map(|(&gi, &yi)| gi * yi).sum();
                for ((c, &gi), &yi) in contrib[lane * d..(lane + 1) * d].iter_mut().zip(gs).zip(ys) {
                    *c = yi * (gi - dot);
                }
            }
            acc(v.0, contrib);
        });
        self.push_op(OpKind::Softmax, out, requires, back)
    }

    // ---- reductions ----

    /// Shape after reducing `axes` (keeping them as size 1).
    fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
        let mut out = shape.to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::shape(
                    "reduce",
                    format!("axis {} out of range for shape {:?}", ax, shape),
                ));
            }
            out[ax] = 1;
        }
        Ok(out)
    }

    fn reduce_sum_impl(&mut self, kind: OpKind, v: Var, axes: &[usize], keep: bool, mean: bool) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let in_shape = t.shape().to_vec();
        let keep_shape = Self::reduced_shape(&in_shape, axes)?;
        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        if mean && count == 0 {
            return Err(Error::shape(kind.name(), "mean over zero elements".to_string()));
        }
        // Accumulate via the broadcast machinery run in reverse: every input
        // element maps to one output slot.
        let n_out: usize = keep_shape.iter().product();
        let mut out = vec![0.0; n_out];
        let strides = crate::tensor::broadcast_strides(&keep_shape, &in_shape);
        let rank = in_shape.len();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for &x in t.data() {
            out[off] += x;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < in_shape[ax] {
                    break;
                }
                off -= strides[ax] * in_shape[ax];
                idx[ax] = 0;
            }
        }
        if mean {
            let inv = 1.0 / count as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let final_shape = if keep {
            keep_shape.clone()
        } else {
            let drop: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if drop.is_empty() {
                vec![1]
            } else {
                drop
            }
        };
        let out = Tensor::from_parts(final_shape, out);
        let requires = self.nodes[v.0].requires;
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let back: BackFn = Box::new(move |grad, acc| {
            let g = Tensor::from_parts(keep_shape.clone(), grad.data().to_vec());
            let mut expanded = expand_to(&g, &in_shape);
            if scale != 1.0 {
                for e in expanded.iter_mut() {
                    *e *= scale;
                }
            }
            acc(v.0, expanded);
        });
        self.push_op(kind, out, requires, back)
    }

    pub fn sum_axes(&mut self, v: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce_sum_impl(OpKind::SumReduce, v, axes, keep, false)
    }

    pub fn mean_axes(&mut self, v: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce_sum_impl(OpKind::MeanReduce, v, axes, keep, true)
    }

    pub fn sum_all(&mut self, v: Var) -> Result<Var> {
        let rank = self.value(v).shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum_axes(v, &axes, false)
    }

    pub fn mean_all(&mut self, v: Var) -> Result<Var> {
        let rank = self.value(v).shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        self.mean_axes(v, &axes, false)
    }

    /// Max over one axis. Gradient routes to the first maximal element of
    /// each reduced lane.
    pub fn max_axis(&mut self, v: Var, axis: usize, keep: bool) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let in_shape = t.shape().to_vec();
        if axis >= in_shape.len() {
            return Err(Error::shape(
                "max_reduce",
                format!("axis {} out of range for shape {:?}", axis, in_shape),
            ));
        }
        let axis_len = in_shape[axis];
        if axis_len == 0 {
            return Err(Error::shape("max_reduce", "empty axis".to_string()));
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut winners = vec![0usize; outer * inner];
        let data = t.data();
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for i in 0..inner {
                    let x = data[base + i];
                    let slot = o * inner + i;
                    if x > out[slot] {
                        out[slot] = x;
                        winners[slot] = base + i;
                    }
                }
            }
        }
        let mut keep_shape = in_shape.clone();
        keep_shape[axis] = 1;
        let final_shape = if keep {
            keep_shape
        } else {
            let mut s = in_shape.clone();
            s.remove(axis);
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let n_in = t.numel();
        let out = Tensor::from_parts(final_shape, out);
        let requires = self.nodes[v.0].requires;
        let back: BackFn = Box::new(move |grad, acc| {
            let mut contrib = vec![0.0; n_in];
            for (slot, &w) in winners.iter().enumerate() {
                contrib[w] += grad.data()[slot];
            }
            acc(v.0, contrib);
        });
        self.push_op(OpKind::MaxReduce, out, requires, back)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let in_shape = t.shape().to_vec();
        let out = t.reshape(shape).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("reshape", detail),
            other => other,
        })?;
        let requires = self.nodes[v.0].requires;
        let back: BackFn = Box::new(move |grad, acc| {
            let _ = &in_shape;
            acc(v.0, grad.data().to_vec());
        });
        self.push_op(OpKind::Reshape, out, requires, back)
    }

    pub fn permute(&mut self, v: Var, axes: &[usize]) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let out = t.permute(axes)?;
        let requires = self.nodes[v.0].requires;
        // Inverse permutation sends gradients home.
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape = out.shape().to_vec();
        let back: BackFn = Box::new(move |grad, acc| {
            let g = Tensor::from_parts(out_shape.clone(), grad.data().to_vec());
            let back = g.permute(&inverse).expect("inverse permutation is valid");
            acc(v.0, back.data().to_vec());
        });
        self.push_op(OpKind::Permute, out, requires, back)
    }

    pub fn broadcast_to(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let joined = broadcast_shapes(t.shape(), shape)?;
        if joined != shape {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} does not broadcast to {:?}", t.shape(), shape),
            ));
        }
        let data = expand_to(&t, shape);
        let out = Tensor::from_parts(shape.to_vec(), data);
        let requires = self.nodes[v.0].requires;
        let in_shape = t.shape().to_vec();
        let out_shape = shape.to_vec();
        let back: BackFn = Box::new(move |grad, acc| {
            acc(v.0, reduce_to_shape(grad.data(), &out_shape, &in_shape));
        });
        self.push_op(OpKind::BroadcastTo, out, requires, back)
    }

    pub fn concat(&mut self, vs: &[Var], axis: usize) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        for &v in vs {
            self.check(v)?;
        }
        let first = self.value(vs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut axis_lens = Vec::with_capacity(vs.len());
        for &v in vs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("shape {:?} does not align with {:?} on axis {}", s, first, axis),
                ));
            }
            axis_lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = axis_lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut out = vec![0.0; outer * total_axis * inner];
        let tensors: Vec<Tensor> = vs.iter().map(|&v| self.value(v).clone()).collect();
        for o in 0..outer {
            let mut cursor = 0usize;
            for (t, &alen) in tensors.iter().zip(&axis_lens) {
                let src = &t.data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_base = (o * total_axis + cursor) * inner;
                out[dst_base..dst_base + alen * inner].copy_from_slice(src);
                cursor += alen;
            }
        }
        let out = Tensor::from_parts(out_shape, out);
        let ids: Vec<usize> = vs.iter().map(|v| v.0).collect();
        let reqs: Vec<bool> = vs.iter().map(|&v| self.nodes[v.0].requires).collect();
        let requires = reqs.iter().any(|&r| r);
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            let mut cursor = 0usize;
            for ((&id, &alen), &req) in ids.iter().zip(&axis_lens).zip(&reqs) {
                if req {
                    let mut part = vec![0.0; outer * alen * inner];
                    for o in 0..outer {
                        let src_base = (o * total_axis + cursor) * inner;
                        part[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&g[src_base..src_base + alen * inner]);
                    }
                    acc(id, part);
                }
                cursor += alen;
            }
        });
        self.push_op(OpKind::Concat, out, requires, back)
    }

    /// Contiguous range `[start, end)` along one axis.
    pub fn slice(&mut self, v: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(v)?;
        let t = self.value(v).clone();
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} on axis {} invalid for shape {:?}", start, end, axis, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let span = end - start;
        let mut out = vec![0.0; outer * span * inner];
        for o in 0..outer {
            let src = (o * alen + start) * inner;
            out[o * span * inner..(o + 1) * span * inner]
                .copy_from_slice(&t.data()[src..src + span * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = span;
        let out = Tensor::from_parts(out_shape, out);
        let requires = self.nodes[v.0].requires;
        let n_in = t.numel();
        let back: BackFn = Box::new(move |grad, acc| {
            let mut contrib = vec![0.0; n_in];
            let g = grad.data();
            for o in 0..outer {
                let dst = (o * alen + start) * inner;
                contrib[dst..dst + span * inner]
                    .copy_from_slice(&g[o * span * inner..(o + 1) * span * inner]);
            }
            acc(v.0, contrib);
        });
        self.push_op(OpKind::Slice, out, requires, back)
    }

    // ---- layer norm ----

    /// Layer normalization over the last axis with learned scale and shift.
    /// `gamma` and `beta` must have the last axis's length.
    pub fn layer_norm(&mut self, v: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(v)?;
        self.check(gamma)?;
        self.check(beta)?;
        let t = self.value(v).clone();
        let shape = t.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 tensor".to_string()))?;
        let tg = self.value(gamma).clone();
        let tb = self.value(beta).clone();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{}] for input {:?}",
                    tg.shape(),
                    tb.shape(),
                    d,
                    shape
                ),
            ));
        }
        let lanes = t.numel() / d;
        let mut out = vec![0.0; t.numel()];
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; lanes];
        for lane in 0..lanes {
            let row = &t.data()[lane * d..(lane + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[lane] = inv;
            for i in 0..d {
                let xh = (row[i] - mean) * inv;
                xhat[lane * d + i] = xh;
                out[lane * d + i] = tg.data()[i] * xh + tb.data()[i];
            }
        }
        let out = Tensor::from_parts(shape, out);
        let requires =
            self.nodes[v.0].requires || self.nodes[gamma.0].requires || self.nodes[beta.0].requires;
        let (rv, rg, rb) = (
            self.nodes[v.0].requires,
            self.nodes[gamma.0].requires,
            self.nodes[beta.0].requires,
        );
        let gdata = tg.data().to_vec();
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            if rg {
                let mut dgamma = vec![0.0; d];
                for lane in 0..lanes {
                    for i in 0..d {
                        dgamma[i] += g[lane * d + i] * xhat[lane * d + i];
                    }
                }
                acc(gamma.0, dgamma);
            }
            if rb {
                let mut dbeta = vec![0.0; d];
                for lane in 0..lanes {
                    for i in 0..d {
                        dbeta[i] += g[lane * d + i];
                    }
                }
                acc(beta.0, dbeta);
            }
            if rv {
                let mut dx = vec![0.0; lanes * d];
                for lane in 0..lanes {
                    let gs = &g[lane * d..(lane + 1) * d];
                    let xh = &xhat[lane * d..(lane + 1) * d];
                    // dL/dxhat_i = g_i * gamma_i; then the standard lane rule:
                    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for i in 0..d {
                        let dxh = gs[i] * gdata[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for i in 0..d {
                        let dxh = gs[i] * gdata[i];
                        dx[lane * d + i] = inv_std[lane] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
                acc(v.0, dx);
            }
        });
        self.push_op(OpKind::LayerNorm, out, requires, back)
    }

    // ---- batch norm (2d feature maps) ----

    /// Batch normalization over `(B, C, H, W)` using batch statistics.
    /// Returns the normalized output plus the per-channel batch mean and
    /// biased variance so callers can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        v: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        self.check(v)?;
        self.check(gamma)?;
        self.check(beta)?;
        let t = self.value(v).clone();
        let shape = t.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected (B,C,H,W), got {:?}", shape),
            ));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let tg = self.value(gamma).clone();
        let tb = self.value(beta).clone();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {:?} / beta {:?} must be [{}]", tg.shape(), tb.shape(), c),
            ));
        }
        let n = b * h * w;
        if n == 0 {
            return Err(Error::shape("batch_norm", "empty batch".to_string()));
        }
        let hw = h * w;
        let data = t.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let mut s = 0.0;
                for &x in &data[base..base + hw] {
                    s += x;
                }
                mean[ci] += s;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let m = mean[ci];
                let mut s = 0.0;
                for &x in &data[base..base + hw] {
                    s += (x - m) * (x - m);
                }
                var[ci] += s;
            }
        }
        for vv in var.iter_mut() {
            *vv /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, is, ga, be) = (mean[ci], inv_std[ci], tg.data()[ci], tb.data()[ci]);
                for i in 0..hw {
                    let xh = (data[base + i] - m) * is;
                    xhat[base + i] = xh;
                    out[base + i] = ga * xh + be;
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), out);
        let requires =
            self.nodes[v.0].requires || self.nodes[gamma.0].requires || self.nodes[beta.0].requires;
        let (rv, rg, rb) = (
            self.nodes[v.0].requires,
            self.nodes[gamma.0].requires,
            self.nodes[beta.0].requires,
        );
        let gdata = tg.data().to_vec();
        let inv_std_c = inv_std.clone();
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for i in 0..hw {
                        dgamma[ci] += g[base + i] * xhat[base + i];
                        dbeta[ci] += g[base + i];
                    }
                }
            }
            if rv {
                let mut dx = vec![0.0; g.len()];
                for ci in 0..c {
                    let (ga, is) = (gdata[ci], inv_std_c[ci]);
                    let mean_dxh = dbeta[ci] * ga / n as f64;
                    let mean_dxh_xh = dgamma[ci] * ga / n as f64;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            let dxh = g[base + i] * ga;
                            dx[base + i] = is * (dxh - mean_dxh - xhat[base + i] * mean_dxh_xh);
                        }
                    }
                }
                acc(v.0, dx);
            }
            if rg {
                acc(gamma.0, dgamma);
            }
            if rb {
                acc(beta.0, dbeta);
            }
        });
        let out_var = self.push_op(OpKind::BatchNorm, out, requires, back)?;
        Ok((out_var, Tensor::from_parts(vec![c], mean), Tensor::from_parts(vec![c], var)))
    }

    /// Batch normalization with fixed (running) statistics; a per-channel
    /// affine map.
    pub fn batch_norm_eval(
        &mut self,
        v: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        self.check(v)?;
        self.check(gamma)?;
        self.check(beta)?;
        let t = self.value(v).clone();
        let shape = t.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected (B,C,H,W), got {:?}", shape),
            ));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let tg = self.value(gamma).clone();
        let tb = self.value(beta).clone();
        if tg.shape() != [c] || tb.shape() != [c] || mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("per-channel params must be [{}]", c),
            ));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = var.data().iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();
        let data = t.data();
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, is, ga, be) = (mean.data()[ci], inv_std[ci], tg.data()[ci], tb.data()[ci]);
                for i in 0..hw {
                    let xh = (data[base + i] - m) * is;
                    xhat[base + i] = xh;
                    out[base + i] = ga * xh + be;
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        let requires =
            self.nodes[v.0].requires || self.nodes[gamma.0].requires || self.nodes[beta.0].requires;
        let (rv, rg, rb) = (
            self.nodes[v.0].requires,
            self.nodes[gamma.0].requires,
            self.nodes[beta.0].requires,
        );
        let gdata = tg.data().to_vec();
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            if rv {
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let k = gdata[ci] * inv_std[ci];
                        for i in 0..hw {
                            dx[base + i] = g[base + i] * k;
                        }
                    }
                }
                acc(v.0, dx);
            }
            if rg {
                let mut dgamma = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            dgamma[ci] += g[base + i] * xhat[base + i];
                        }
                    }
                }
                acc(gamma.0, dgamma);
            }
            if rb {
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            dbeta[ci] += g[base + i];
                        }
                    }
                }
                acc(beta.0, dbeta);
            }
        });
        self.push_op(OpKind::BatchNorm, out, requires, back)
    }

    // ---- convolution ----

    /// 2-d convolution on `(B, IC, H, W)` with weight `(OC, IC/groups, KH, KW)`,
    /// symmetric zero padding, square stride, and optional per-output-channel
    /// bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        if stride == 0 || groups == 0 {
            return Err(Error::Invalid("conv2d: stride and groups must be positive".to_string()));
        }
        let tx = self.value(x).clone();
        let tw = self.value(weight).clone();
        let xs = tx.shape().to_vec();
        let ws = tw.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected x (B,IC,H,W) and w (OC,ICg,KH,KW), got {:?} and {:?}", xs, ws),
            ));
        }
        let (b, ic, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, icg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ic != icg * groups || oc % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "channel mismatch: x has {} channels, weight {:?} with groups {}",
                    ic, ws, groups
                ),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * padding, w + 2 * padding),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let tb = match bias {
            Some(bv) => {
                let t = self.value(bv).clone();
                if t.shape() != [oc] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} must be [{}]", t.shape(), oc),
                    ));
                }
                Some(t)
            }
            None => None,
        };
        let ocg = oc / groups;
        let ck = icg * kh * kw;
        let ohw = oh * ow;
        let geom = ConvGeom { b, ic, h, w, icg, kh, kw, stride, padding, groups, oh, ow };
        let mut out = vec![0.0; b * oc * ohw];
        let mut col = vec![0.0; ic * kh * kw * ohw];
        for bi in 0..b {
            im2col(&tx.data()[bi * ic * h * w..(bi + 1) * ic * h * w], &geom, &mut col);
            for g in 0..groups {
                let w_slice = &tw.data()[g * ocg * ck..(g + 1) * ocg * ck];
                let col_slice = &col[g * icg * kh * kw * ohw..(g + 1) * icg * kh * kw * ohw];
                let out_slice = &mut out[(bi * oc + g * ocg) * ohw..(bi * oc + (g + 1) * ocg) * ohw];
                gemm_nn(w_slice, col_slice, ocg, ck, ohw, out_slice);
            }
            if let Some(tb) = &tb {
                for ci in 0..oc {
                    let add = tb.data()[ci];
                    for o in out[(bi * oc + ci) * ohw..(bi * oc + ci + 1) * ohw].iter_mut() {
                        *o += add;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![b, oc, oh, ow], out);
        let rx = self.nodes[x.0].requires;
        let rw = self.nodes[weight.0].requires;
        let rb = bias.map(|bv| self.nodes[bv.0].requires).unwrap_or(false);
        let requires = rx || rw || rb;
        let bias_id = bias.map(|bv| bv.0);
        let back: BackFn = Box::new(move |grad, acc| {
            let g = grad.data();
            let mut col = vec![0.0; geom.ic * geom.kh * geom.kw * ohw];
            let mut dw = if rw { vec![0.0; oc * ck] } else { Vec::new() };
            let mut dx = if rx { vec![0.0; geom.b * geom.ic * geom.h * geom.w] } else { Vec::new() };
            let mut dcol = if rx { vec![0.0; geom.ic * geom.kh * geom.kw * ohw] } else { Vec::new() };
            for bi in 0..geom.b {
                if rw || rx {
                    if rw {
                        im2col(
                            &tx.data()[bi * geom.ic * geom.h * geom.w..(bi + 1) * geom.ic * geom.h * geom.w],
                            &geom,
                            &mut col,
                        );
                    }
                    for gr in 0..geom.groups {
                        let gy = &g[(bi * oc + gr * ocg) * ohw..(bi * oc + (gr + 1) * ocg) * ohw];
                        if rw {
                            let col_slice =
                                &col[gr * geom.icg * geom.kh * geom.kw * ohw..(gr + 1) * geom.icg * geom.kh * geom.kw * ohw];
                            gemm_nt(gy, col_slice, ocg, ohw, ck, &mut dw[gr * ocg * ck..(gr + 1) * ocg * ck]);
                        }
                        if rx {
                            let w_slice = &tw.data()[gr * ocg * ck..(gr + 1) * ocg * ck];
                            let dcol_slice = &mut dcol
                                [gr * geom.icg * geom.kh * geom.kw * ohw..(gr + 1) * geom.icg * geom.kh * geom.kw * ohw];
                            for d in dcol_slice.iter_mut() {
                                *d = 0.0;
                            }
                            gemm_tn(w_slice, gy, ck, ocg, ohw, dcol_slice);
                        }
                    }
                    if rx {
                        col2im(
                            &dcol,
                            &geom,
                            &mut dx[bi * geom.ic * geom.h * geom.w..(bi + 1) * geom.ic * geom.h * geom.w],
                        );
                    }
                }
            }
            if rx {
                acc(x.0, dx);
            }
            if rw {
                acc(weight.0, dw);
            }
            if rb {
                let mut db = vec![0.0; oc];
                for bi in 0..geom.b {
                    for ci in 0..oc {
                        let base = (bi * oc + ci) * ohw;
                        for i in 0..ohw {
                            db[ci] += g[base + i];
                        }
                    }
                }
                acc(bias_id.unwrap(), db);
            }
        });
        self.push_op(OpKind::Conv2d, out, requires, back)
    }

    // ---- loss ----

    /// Mean sparse categorical cross-entropy from raw logits `(B, K)` via the
    /// log-sum-exp identity. Labels must lie in `0..K`.
    pub fn sparse_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let t = self.value(logits).clone();
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "sparse_cross_entropy",
                format!("expected (B,K) logits, got {:?}", shape),
            ));
        }
        let (b, k) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(Error::shape(
                "sparse_cross_entropy",
                format!("{} labels for batch of {}", labels.len(), b),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!(
                "sparse_cross_entropy: label {} out of range for {} classes",
                bad, k
            )));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &t.data()[bi * k..(bi + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &x) in probs[bi * k..(bi + 1) * k].iter_mut().zip(row) {
                let e = (x - m).exp();
                *p = e;
                sum += e;
            }
            for p in probs[bi * k..(bi + 1) * k].iter_mut() {
                *p /= sum;
            }
            let lse = m + sum.ln();
            loss += lse - row[labels[bi]];
        }
        loss /= b as f64;
        let out = Tensor::from_parts(vec![1], vec![loss]);
        let requires = self.nodes[logits.0].requires;
        let labels = labels.to_vec();
        let back: BackFn = Box::new(move |grad, acc| {
            let scale = grad.data()[0] / b as f64;
            let mut dl = vec![0.0; b * k];
            for bi in 0..b {
                for ki in 0..k {
                    let onehot = if labels[bi] == ki { 1.0 } else { 0.0 };
                    dl[bi * k + ki] = (probs[bi * k + ki] - onehot) * scale;
                }
            }
            acc(logits.0, dl);
        });
        self.push_op(OpKind::SparseCrossEntropy, out, requires, back)
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Returns per-node gradients; a root
    /// with no tracked ancestors yields an empty map.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot { shape: root_node.value.shape().to_vec() });
        }
        let mut results: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root_node.requires {
            return Ok(Gradients { grads: results });
        }
        let mut pending: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &self.nodes[id];
            let grad = Tensor::from_parts(node.value.shape().to_vec(), g);
            if let Some(back) = &node.back {
                let mut acc = |pid: usize, contrib: Vec<f64>| {
                    debug_assert_eq!(contrib.len(), self.nodes[pid].value.numel());
                    match &mut pending[pid] {
                        Some(existing) => {
                            for (e, c) in existing.iter_mut().zip(&contrib) {
                                *e += c;
                            }
                        }
                        None => pending[pid] = Some(contrib),
                    }
                };
                back(&grad, &mut acc);
            }
            results[id] = Some(grad);
        }
        // Tracked leaves that were reached but not visited above cannot
        // exist: leaves have no back fn yet still land in `results` when the
        // loop consumes their pending gradient. Nothing else to do.
        Ok(Gradients { grads: results })
    }
}

struct ConvGeom {
    b: usize,
    ic: usize,
    h: usize,
    w: usize,
    icg: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

/// Unrolls one sample `(IC, H, W)` into a `(IC*KH*KW, OH*OW)` matrix with
/// zero padding.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let ohw = g.oh * g.ow;
    debug_assert_eq!(col.len(), g.ic * g.kh * g.kw * ohw);
    for c in col.iter_mut() {
        *c = 0.0;
    }
    for ci in 0..g.ic {
        for khi in 0..g.kh {
            for kwi in 0..g.kw {
                let row = ((ci * g.kh + khi) * g.kw + kwi) * ohw;
                for ohi in 0..g.oh {
                    let ih = (ohi * g.stride + khi) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src_row = (ci * g.h + ih as usize) * g.w;
                    for owi in 0..g.ow {
                        let iw = (owi * g.stride + kwi) as isize - g.padding as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        col[row + ohi * g.ow + owi] = x[src_row + iw as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.ic {
        for khi in 0..g.kh {
            for kwi in 0..g.kw {
                let row = ((ci * g.kh + khi) * g.kw + kwi) * ohw;
                for ohi in 0..g.oh {
                    let ih = (ohi * g.stride + khi) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = (ci * g.h + ih as usize) * g.w;
                    for owi in 0..g.ow {
                        let iw = (owi * g.stride + kwi) as isize - g.padding as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        x[dst_row + iw as usize] += col[row + ohi * g.ow + owi];
                    }
                }
            }
        }
    }
}

/// `out += a @ b` for row-major `a (m,k)`, `b (k,n)`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` for row-major `a (m,k)`, `b (n,k)`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += a^T @ b` for row-major `a (k,m)`, `b (k,n)`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
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

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64, _y: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Central-difference gradient verification.
///
/// Computes the analytic gradient of the scalar-valued `f` at `point`, probes
/// every coordinate with a symmetric step, and returns the worst relative
/// error `|analytic - central| / (|analytic| + |central| + 1e-12)`. Fails if
/// `f` cannot be evaluated (or is non-finite) at any probe.
pub fn grad_check<F>(mut f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(&tape, x);
    drop(tape);

    let base = point.data().to_vec();
    let shape = point.shape().to_vec();
    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(shape.clone(), data)?;
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = f(&mut tape, x)?;
        tape.value(y).item()
    };
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        let central = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Arc is part of the public contract: tensors can be shared across threads
/// while tapes stay thread-local.
#[allow(dead_code)]
fn _assert_tensor_send_sync() {
    fn takes<T: Send + Sync>() {}
    takes::<Tensor>();
    let _ = Arc::new(0u8);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let prod = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_sample() {
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., -1., 0.5, 2., 0., 1., -2.]);
        let b = t(&[2, 3, 2], &[1., 0., 0., 1., 1., 1., 2., 1., 0., -1., 1., 0.]);
        let mut tape = Tape::new();
        let av = tape.constant(&a);
        let bv = tape.constant(&b);
        let out = tape.matmul(av, bv).unwrap();
        for bi in 0..2 {
            let mut tape2 = Tape::new();
            let a2 = tape2.constant(&t(&[2, 3], &a.data()[bi * 6..(bi + 1) * 6]));
            let b2 = tape2.constant(&t(&[3, 2], &b.data()[bi * 6..(bi + 1) * 6]));
            let o2 = tape2.matmul(a2, b2).unwrap();
            assert_eq!(&tape.value(out).data()[bi * 4..(bi + 1) * 4], tape2.value(o2).data());
        }
    }

    #[test]
    fn add_broadcasts_and_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[1, 3], &[10.0, 20.0, 30.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 3]);
        assert_eq!(tape.value(s).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let total = tape.sum_all(s).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn elementwise_square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_root_yields_empty_map() {
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::scalar(5.0));
        let grads = tape.backward(c).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0));
        let mut other = Tape::new();
        let _ = other.leaf(&Tensor::scalar(2.0));
        let bogus = Var(x.0 + 10);
        assert!(matches!(tape.backward(bogus), Err(Error::ForeignVar { .. })));
    }

    #[test]
    fn reuse_accumulates() {
        // y = x*x + x used twice more: gradient = 2x + 2 at x=3 -> 8.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let two_x = tape.add(x, x).unwrap();
        let y = tape.add(sq, two_x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.ln(x), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn exp_overflow_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[1e9]));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let p = tape.softmax(x).unwrap();
        for row in 0..2 {
            let s: f64 = tape.value(p).data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = tape.constant(&t(&[2, 3], &[101.0, 102.0, 103.0, 95.0, 100.0, 105.0]));
        let p2 = tape.softmax(shifted).unwrap();
        for i in 0..6 {
            assert!((tape.value(p).data()[i] - tape.value(p2).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn max_axis_routes_gradient_to_first_winner() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 5.0, 5.0, 7.0, 2.0, 7.0]));
        let m = tape.max_axis(x, 1, false).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
        let s = tape.sum_all(m).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]));
        let left = tape.slice(x, 1, 0, 2).unwrap();
        let right = tape.slice(x, 1, 2, 4).unwrap();
        let glued = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(glued).data(), tape.value(x).data());
        let s = tape.sum_all(glued).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |ix| (ix[2] * 3 + ix[3]) as f64);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let w = tape.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(xv, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        // Independent direct convolution over random-ish values.
        let x = Tensor::from_fn(&[2, 3, 5, 5], |ix| {
            ((ix[0] * 97 + ix[1] * 31 + ix[2] * 7 + ix[3] * 3) % 11) as f64 * 0.25 - 1.0
        });
        let w = Tensor::from_fn(&[4, 3, 3, 3], |ix| {
            ((ix[0] * 13 + ix[1] * 5 + ix[2] * 3 + ix[3]) % 7) as f64 * 0.5 - 1.5
        });
        let bias = t(&[4], &[0.1, -0.2, 0.3, 0.0]);
        let (stride, pad) = (2, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.constant(&w);
        let bv = tape.constant(&bias);
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad, 1).unwrap();
        let ys = tape.value(y);
        assert_eq!(ys.shape(), &[2, 4, 3, 3]);
        for b in 0..2 {
            for oc in 0..4 {
                for oh in 0..3 {
                    for ow in 0..3 {
                        let mut s = bias.data()[oc];
                        for ic in 0..3 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let ih = (oh * stride + kh) as isize - pad as isize;
                                    let iw = (ow * stride + kw) as isize - pad as isize;
                                    if ih < 0 || ih >= 5 || iw < 0 || iw >= 5 {
                                        continue;
                                    }
                                    s += x.at(&[b, ic, ih as usize, iw as usize])
                                        * w.at(&[oc, ic, kh, kw]);
                                }
                            }
                        }
                        assert!((ys.at(&[b, oc, oh, ow]) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_conv_uses_groups() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |ix| (ix[1] * 9 + ix[2] * 3 + ix[3]) as f64);
        // Each channel convolved with its own 1x1 kernel.
        let w = t(&[2, 1, 1, 1], &[2.0, 3.0]);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.constant(&w);
        let y = tape.conv2d(xv, wv, None, 1, 0, 2).unwrap();
        for i in 0..9 {
            assert_eq!(tape.value(y).data()[i], x.data()[i] * 2.0);
            assert_eq!(tape.value(y).data()[9 + i], x.data()[9 + i] * 3.0);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(&Tensor::zeros(&[2, 4, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 1, 1).is_err());
    }

    #[test]
    fn sparse_ce_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[2, 23]));
        let loss = tape.sparse_cross_entropy(logits, &[0, 12]).unwrap();
        assert!((tape.value(loss).item().unwrap() - (23f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sparse_ce_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 3]));
        assert!(tape.sparse_cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let point = t(&[5], &[0.3, -1.2, 0.7, 2.0, -0.5]);
        let err = grad_check(|tape, x| tape.sum_all(x), &point, 1e-4).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn grad_check_core_ops() {
        let point = t(&[2, 3], &[0.3, -1.2, 0.7, 1.1, -0.4, 0.2]);
        let cases: Vec<(&str, fn(&mut Tape, Var) -> Result<Var>)> = vec![
            ("exp_sum", |tape, x| {
                let e = tape.exp(x)?;
                tape.sum_all(e)
            }),
            ("softmax_pick", |tape, x| {
                let p = tape.softmax(x)?;
                let first = tape.slice(p, 1, 0, 1)?;
                tape.sum_all(first)
            }),
            ("silu_mean", |tape, x| {
                let s = tape.silu(x)?;
                tape.mean_all(s)
            }),
            ("gelu_mean", |tape, x| {
                let g = tape.gelu(x)?;
                tape.mean_all(g)
            }),
            ("elu1_mean", |tape, x| {
                let e = tape.elu_plus_one(x)?;
                tape.mean_all(e)
            }),
        ];
        for (name, f) in cases {
            let err = grad_check(f, &point, 1e-4).unwrap();
            assert!(err <= 1e-3, "{name}: relative error {err}");
        }
    }

    #[test]
    fn grad_check_layer_norm_and_matmul() {
        let point = t(&[2, 4], &[0.5, -0.3, 1.2, 0.1, -0.7, 0.9, 0.05, -1.1]);
        let err = grad_check(
            |tape, x| {
                let gamma = tape.constant(&t(&[4], &[1.0, 0.9, 1.1, 1.2]));
                let beta = tape.constant(&t(&[4], &[0.1, 0.0, -0.1, 0.2]));
                let n = tape.layer_norm(x, gamma, beta, 1e-5)?;
                let sq = tape.mul(n, n)?;
                tape.sum_all(sq)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "layer_norm: {err}");

        let err = grad_check(
            |tape, x| {
                let w = tape.constant(&t(&[4, 2], &[0.3, -0.2, 0.8, 0.5, -0.4, 0.1, 0.7, -0.9]));
                let y = tape.matmul(x, w)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "matmul: {err}");
    }

    #[test]
    fn backward_linearity() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g) within 1e-10.
        let point = t(&[3], &[0.4, -0.8, 1.3]);
        let (a, b) = (2.5, -1.25);
        let grad_of = |combine: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(&point);
            let y = combine(&mut tape, x).unwrap();
            let grads = tape.backward(y).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };
        // f = sum(x^2), g = sum(exp(x))
        let gf = grad_of(&|tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum_all(sq)
        });
        let gg = grad_of(&|tape, x| {
            let e = tape.exp(x)?;
            tape.sum_all(e)
        });
        let gc = grad_of(&|tape, x| {
            let sq = tape.mul(x, x)?;
            let f = tape.sum_all(sq)?;
            let e = tape.exp(x)?;
            let g = tape.sum_all(e)?;
            let fa = tape.affine(f, a, 0.0)?;
            let gb = tape.affine(g, b, 0.0)?;
            tape.add(fa, gb)
        });
        for i in 0..3 {
            let expect = a * gf[i] + b * gg[i];
            assert!((gc[i] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let x = Tensor::from_fn(&[2, 2, 2, 2], |ix| (ix[0] * 8 + ix[1] * 4 + ix[2] * 2 + ix[3]) as f64);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let gamma = tape.constant(&Tensor::ones(&[2]));
        let beta = tape.constant(&Tensor::zeros(&[2]));
        let (y, mean, var) = tape.batch_norm_train(xv, gamma, beta, 1e-5).unwrap();
        // Per-channel mean of the output is ~0 and variance ~1.
        let out = tape.value(y);
        for c in 0..2 {
            let mut vals = Vec::new();
            for b in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        vals.push(out.at(&[b, c, h, w]));
                    }
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert_eq!(mean.shape(), &[2]);
        assert_eq!(var.shape(), &[2]);
    }

    #[test]
    fn grad_check_batch_norm() {
        let point = Tensor::from_fn(&[2, 2, 2, 2], |ix| {
            ((ix[0] * 7 + ix[1] * 3 + ix[2] * 5 + ix[3]) % 5) as f64 * 0.3 - 0.6
        });
        let err = grad_check(
            |tape, x| {
                let gamma = tape.constant(&t(&[2], &[1.1, 0.9]));
                let beta = tape.constant(&t(&[2], &[0.05, -0.05]));
                let (y, _, _) = tape.batch_norm_train(x, gamma, beta, 1e-5)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "batch_norm: {err}");
    }

    #[test]
    fn grad_check_conv2d() {
        let point = Tensor::from_fn(&[1, 2, 4, 4], |ix| {
            ((ix[1] * 16 + ix[2] * 4 + ix[3]) % 7) as f64 * 0.3 - 0.9
        });
        let w = Tensor::from_fn(&[3, 2, 3, 3], |ix| {
            ((ix[0] * 18 + ix[1] * 9 + ix[2] * 3 + ix[3]) % 5) as f64 * 0.2 - 0.4
        });
        let err = grad_check(
            |tape, x| {
                let wv = tape.constant(&w);
                let y = tape.conv2d(x, wv, None, 1, 1, 1)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "conv2d wrt input: {err}");

        // And with respect to the weights.
        let x = point;
        let err = grad_check(
            |tape, wv| {
                let xv = tape.constant(&x);
                let y = tape.conv2d(xv, wv, None, 2, 1, 1)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &w,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "conv2d wrt weight: {err}");
    }

    #[test]
    fn grad_check_sparse_ce() {
        let point = t(&[3, 4], &[0.2, -0.5, 1.0, 0.3, -0.2, 0.8, -1.0, 0.1, 0.6, 0.6, 0.6, 0.7]);
        let err = grad_check(
            |tape, x| tape.sparse_cross_entropy(x, &[2, 1, 3]),
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "sparse_ce: {err}");
    }

    proptest! {
        #[test]
        fn reshape_permute_bijection(
            d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4,
            seed in 0u64..1000,
        ) {
            let shape = [d0, d1, d2];
            let n = d0 * d1 * d2;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 * 0.01 - 5.0).collect();
            let x = Tensor::new(shape.to_vec(), data).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let flat = tape.reshape(xv, &[n]).unwrap();
            let back = tape.reshape(flat, &shape).unwrap();
            prop_assert_eq!(tape.value(back).data(), x.data());
            let p = tape.permute(xv, &[2, 0, 1]).unwrap();
            let q = tape.permute(p, &[1, 2, 0]).unwrap();
            prop_assert_eq!(tape.value(q).data(), x.data());
        }

        #[test]
        fn broadcast_grad_counts_repetitions(rows in 1usize..5, cols in 1usize..5) {
            let x = Tensor::ones(&[rows, 1]);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let big = tape.broadcast_to(xv, &[rows, cols]).unwrap();
            let s = tape.sum_all(big).unwrap();
            let grads = tape.backward(s).unwrap();
            let g = grads.get(xv).unwrap();
            prop_assert!(g.data().iter().all(|&v| v == cols as f64));
        }
    }
}
