use crate::autodiff::kernels::{self, around_axis, Broadcast, ConvPlan, MatmulPlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Tape::l2_normalize`] guards small norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormGuard {
    /// `x / max(‖x‖, ε)`: unit norm whenever `‖x‖ > ε`.
    Clamp,
    /// `x / (‖x‖ + ε)`: smooth everywhere, norm strictly below 1.
    Shift,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    Matmul(Var, Var, MatmulPlan),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Conv1d(Var, Var, ConvPlan),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    L2Normalize { x: Var, eps: f64, guard: NormGuard },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    BlockTridiag { diag: Var, off: Var, frames: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Conv1d(..) => "conv1d",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::BlockTridiag { .. } => "block_tridiagonal",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Every operation is evaluated eagerly. A node is differentiable when any of
/// its operands is; `backward` walks differentiable nodes in reverse append
/// order and accumulates into the gradients of `requires_grad` leaves.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes, a proxy for forward cost.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.map(f);
        self.push(value, op, &[x])
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = Broadcast::new(name, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; plan.numel()];
        let (da, db) = (ta.data(), tb.data());
        plan.for_each(|o, i, j| out[o] = f(da[i], db[j]));
        Ok((Tensor::new(plan.out_shape.clone(), out)?, plan))
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, plan) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b, plan), &[a, b]))
    }

    /// Broadcasting `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, plan) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b, plan), &[a, b]))
    }

    /// Broadcasting elementwise `a ⊙ b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, plan) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b, plan), &[a, b]))
    }

    /// Broadcasting elementwise `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, plan) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b, plan), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `x · σ(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::silu, Op::Silu(x))
    }

    /// `ln(1 + eˣ)`
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    // ── contractions ────────────────────────────────────────────────

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
        let out = plan.forward(ta.data(), tb.data());
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(value, Op::Matmul(a, b, plan), &[a, b]))
    }

    /// Stride-1 cross-correlation along axis 1 of a `[B, T, C_in]` input.
    ///
    /// `w` is `[C_out, C_in, K]` for a dense kernel or `[C, K]` for a
    /// depthwise one. Padding is zeros.
    pub fn conv1d(&mut self, x: Var, w: Var, pad_left: usize, pad_right: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 {
            return Err(Error::shape("conv1d", xs, ws));
        }
        let (depthwise, c_out, kernel) = match ws.len() {
            3 if ws[1] == xs[2] => (false, ws[0], ws[2]),
            2 if ws[0] == xs[2] => (true, ws[0], ws[1]),
            _ => return Err(Error::shape("conv1d", xs, ws)),
        };
        let padded = xs[1] + pad_left + pad_right;
        if kernel == 0 || padded < kernel {
            return Err(Error::shape("conv1d", xs, ws));
        }
        let plan = ConvPlan {
            batch: xs[0],
            t_in: xs[1],
            t_out: padded - kernel + 1,
            c_in: xs[2],
            c_out,
            kernel,
            pad_left,
            depthwise,
        };
        let out = plan.forward(tx.data(), tw.data());
        let value = Tensor::new(vec![plan.batch, plan.t_out, plan.c_out], out)?;
        Ok(self.push(value, Op::Conv1d(x, w, plan), &[x, w]))
    }

    // ── structure ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let mut seen = vec![false; t.ndim()];
        if perm.len() != t.ndim()
            || perm
                .iter()
                .any(|&p| p >= t.ndim() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", t.shape(), perm));
        }
        let (shape, map) = kernels::permute_gather(t.shape(), perm);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.nodes[x.0].value.ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.ndim() || start + len > t.shape()[axis] {
            return Err(Error::shape("slice", t.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = around_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut s = self.shape(v).to_vec();
            if axis > s.len() {
                return Err(Error::shape("stack", &s, &[axis]));
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(v, &s)?);
        }
        self.concat(&expanded, axis)
    }

    /// Block-tridiagonal `[TJ, TJ]` matrix with `diag` on the diagonal
    /// blocks, `off` above and `offᵀ` below. Every other entry is `+0.0`.
    pub fn block_tridiagonal(&mut self, diag: Var, off: Var, frames: usize) -> Result<Var> {
        let (td, to) = (&self.nodes[diag.0].value, &self.nodes[off.0].value);
        let j = match td.shape() {
            [a, b] if a == b => *a,
            s => return Err(Error::shape("block_tridiagonal", s, to.shape())),
        };
        if to.shape() != [j, j] {
            return Err(Error::shape("block_tridiagonal", td.shape(), to.shape()));
        }
        if frames == 0 {
            return Err(Error::contract("block adjacency needs at least one frame"));
        }
        let n = frames * j;
        let mut data = vec![0.0; n * n];
        let (d, o) = (td.data(), to.data());
        for t in 0..frames {
            for r in 0..j {
                for c in 0..j {
                    data[(t * j + r) * n + t * j + c] = d[r * j + c];
                    if t + 1 < frames {
                        data[(t * j + r) * n + (t + 1) * j + c] = o[r * j + c];
                        data[((t + 1) * j + r) * n + t * j + c] = o[c * j + r];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, n], data)?;
        Ok(self.push(value, Op::BlockTridiag { diag, off, frames }, &[diag, off]))
    }

    // ── normalization and reductions ────────────────────────────────

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(op, s, &[axis]));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let op_name = if log { "log_softmax" } else { "softmax" };
        self.check_axis(op_name, x, axis)?;
        let t = &self.nodes[x.0].value;
        let (outer, len, inner) = around_axis(t.shape(), axis);
        if len == 0 {
            return Err(Error::domain(op_name, "softmax over an empty axis"));
        }
        let data = kernels::softmax_axis(t.data(), outer, len, inner, log);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(value, op, &[x]))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let t = &self.nodes[x.0].value;
        let (outer, len, inner) = around_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &t.data()[(o * len + l) * inner..][..inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Sum over `axis`, which is removed from the result.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, which is removed from the result.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Normalizes each slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64, guard: NormGuard) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::domain(
                "l2_normalize",
                format!("epsilon must be positive, got {eps}"),
            ));
        }
        let t = &self.nodes[x.0].value;
        let len = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", &[], &[]))?;
        let mut data = t.data().to_vec();
        if len > 0 {
            for row in data.chunks_mut(len) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = match guard {
                    NormGuard::Clamp => norm.max(eps),
                    NormGuard::Shift => norm + eps,
                };
                row.iter_mut().for_each(|v| *v /= denom);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize { x, eps, guard }, &[x]))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Accumulates `∂output/∂leaf` into every `requires_grad` leaf.
    ///
    /// Calling it twice without [`zero_grad`](Self::zero_grad) sums the
    /// gradients of both calls.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        if !out.requires_grad {
            return Err(Error::contract(
                "backward on a value that depends on no differentiable leaf",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                if node.requires_grad {
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let take = |grads: &mut [Option<Vec<f64>>], v: Var| -> Vec<f64> {
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()])
        };
        macro_rules! accumulate {
            ($v:expr, |$acc:ident| $body:block) => {{
                let v = $v;
                if wants(v) {
                    let mut $acc = take(grads, v);
                    $body
                    grads[v.0] = Some($acc);
                }
            }};
        }
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                accumulate!(*a, |ga| { plan.for_each(|o, ia, _| ga[ia] += g[o]) });
                accumulate!(*b, |gb| { plan.for_each(|o, _, ib| gb[ib] += sign * g[o]) });
            }
            Op::Mul(a, b, plan) => {
                let (da, db) = (val(*a), val(*b));
                accumulate!(*a, |ga| {
                    plan.for_each(|o, ia, ib| ga[ia] += g[o] * db[ib])
                });
                accumulate!(*b, |gb| {
                    plan.for_each(|o, ia, ib| gb[ib] += g[o] * da[ia])
                });
            }
            Op::Div(a, b, plan) => {
                let (da, db) = (val(*a), val(*b));
                accumulate!(*a, |ga| {
                    plan.for_each(|o, ia, ib| ga[ia] += g[o] / db[ib])
                });
                accumulate!(*b, |gb| {
                    plan.for_each(|o, ia, ib| gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib]))
                });
            }
            Op::Scale(x, c) => accumulate!(*x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
            }),
            Op::Matmul(a, b, plan) => {
                let (da, db) = (val(*a), val(*b));
                let mut ga = wants(*a).then(|| take(grads, *a));
                let mut gb = wants(*b).then(|| take(grads, *b));
                plan.backward(da, db, g, ga.as_deref_mut(), gb.as_deref_mut());
                if let Some(ga) = ga {
                    grads[a.0] = Some(ga);
                }
                if let Some(gb) = gb {
                    grads[b.0] = Some(gb);
                }
            }
            Op::Conv1d(x, w, plan) => {
                let (dx, dw) = (val(*x), val(*w));
                let mut gx = wants(*x).then(|| take(grads, *x));
                let mut gw = wants(*w).then(|| take(grads, *w));
                plan.backward(dx, dw, g, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gw) = gw {
                    grads[w.0] = Some(gw);
                }
            }
            Op::Permute(x, perm) => accumulate!(*x, |gx| {
                let (_, map) = kernels::permute_gather(self.nodes[x.0].value.shape(), perm);
                for (o, &src) in map.iter().enumerate() {
                    gx[src] += g[o];
                }
            }),
            Op::Reshape(x) => {
                accumulate!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, b)| *a += b) })
            }
            Op::Softmax { x, axis } => accumulate!(*x, |gx| {
                let (outer, len, inner) = around_axis(node.value.shape(), *axis);
                for o in 0..outer {
                    for n in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + n;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }),
            Op::LogSoftmax { x, axis } => accumulate!(*x, |gx| {
                let (outer, len, inner) = around_axis(node.value.shape(), *axis);
                for o in 0..outer {
                    for n in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + n;
                        let total: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] += g[at(l)] - y[at(l)].exp() * total;
                        }
                    }
                }
            }),
            Op::Sigmoid(x) => accumulate!(*x, |gx| {
                for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *a += gi * yi * (1.0 - yi);
                }
            }),
            Op::Silu(x) => accumulate!(*x, |gx| {
                for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *a += gi * kernels::silu_grad(xi);
                }
            }),
            Op::Softplus(x) => accumulate!(*x, |gx| {
                for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *a += gi * kernels::sigmoid(xi);
                }
            }),
            Op::Exp(x) => accumulate!(*x, |gx| {
                for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *a += gi * yi;
                }
            }),
            Op::Sum { x, axis } | Op::Mean { x, axis } => accumulate!(*x, |gx| {
                let (outer, len, inner) = around_axis(self.nodes[x.0].value.shape(), *axis);
                let w = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..][..inner];
                        for (d, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += w * gi;
                        }
                    }
                }
            }),
            Op::SumAll(x) | Op::MeanAll(x) => accumulate!(*x, |gx| {
                let n = gx.len() as f64;
                let w = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / n
                } else {
                    g[0]
                };
                gx.iter_mut().for_each(|a| *a += w);
            }),
            Op::L2Normalize { x, eps, guard } => accumulate!(*x, |gx| {
                let xs = val(*x);
                let len = *node.value.shape().last().unwrap();
                if len > 0 {
                    for r in 0..xs.len() / len {
                        let xr = &xs[r * len..][..len];
                        let gr = &g[r * len..][..len];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dst = &mut gx[r * len..][..len];
                        let (denom, radial) = match guard {
                            NormGuard::Clamp if norm > *eps => (norm, true),
                            NormGuard::Clamp => (*eps, false),
                            NormGuard::Shift => (norm + eps, norm > 0.0),
                        };
                        let dot: f64 = if radial {
                            xr.iter().zip(gr).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        };
                        // d(x/s)/dx = I/s - x xᵀ/(‖x‖ s²) with s = denom
                        let coef = if radial {
                            dot / (norm * denom * denom)
                        } else {
                            0.0
                        };
                        for l in 0..len {
                            dst[l] += gr[l] / denom - xr[l] * coef;
                        }
                    }
                }
            }),
            Op::Slice { x, axis, start } => accumulate!(*x, |gx| {
                let full_shape = self.nodes[x.0].value.shape();
                let (outer, full, inner) = around_axis(full_shape, *axis);
                let len = node.value.shape()[*axis];
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..][..len * inner];
                    for (d, &gi) in dst
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += gi;
                    }
                }
            }),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = around_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    accumulate!(v, |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            for (d, &gi) in gv[o * len * inner..][..len * inner].iter_mut().zip(src)
                            {
                                *d += gi;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::BlockTridiag { diag, off, frames } => {
                let j = self.nodes[diag.0].value.shape()[0];
                let n = frames * j;
                accumulate!(*diag, |gd| {
                    for t in 0..*frames {
                        for r in 0..j {
                            for c in 0..j {
                                gd[r * j + c] += g[(t * j + r) * n + t * j + c];
                            }
                        }
                    }
                });
                accumulate!(*off, |go| {
                    for t in 0..frames.saturating_sub(1) {
                        for r in 0..j {
                            for c in 0..j {
                                go[r * j + c] += g[(t * j + r) * n + (t + 1) * j + c]
                                    + g[((t + 1) * j + c) * n + t * j + r];
                            }
                        }
                    }
                });
            }
        }
    }

    /// Short description of each recorded operation, in append order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}
