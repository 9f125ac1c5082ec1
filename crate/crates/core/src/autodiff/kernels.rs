//! Forward kernels and vector-Jacobian products on flat row-major buffers.
//!
//! Nothing here knows about the tape; shapes are validated by the caller.

use crate::error::{Error, Result};
use crate::tensor::strides_of;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

// ── broadcasting ────────────────────────────────────────────────────

/// Index mapping for a numpy-style broadcast of two operands.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                out_shape: a.to_vec(),
                a_strides: strides_of(a),
                b_strides: strides_of(b),
                same: true,
            });
        }
        let nd = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1usize; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return Err(Error::shape(op, a, b));
            }
        }
        let bstr = |padded: &[usize]| {
            let s = strides_of(padded);
            padded
                .iter()
                .zip(s)
                .map(|(&d, st)| if d == 1 { 0 } else { st })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            a_strides: bstr(&pa),
            b_strides: bstr(&pb),
            out_shape: out,
            same: false,
        })
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_offset, b_offset)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let nd = self.out_shape.len();
        let mut idx = vec![0usize; nd];
        let (mut ao, mut bo) = (0usize, 0usize);
        for i in 0..n {
            f(i, ao, bo);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                ao += self.a_strides[ax];
                bo += self.b_strides[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                ao -= self.a_strides[ax] * idx[ax];
                bo -= self.b_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

// ── matrix products ─────────────────────────────────────────────────

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `ga[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn gemm_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            ga[i * k + p] += s;
        }
    }
}

/// `gb[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn gemm_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Batch layout of a (possibly broadcast) matrix product.
#[derive(Debug, Clone)]
pub struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (ab, am) = a.split_at(a.len() - 2);
        let (bb, bm) = b.split_at(b.len() - 2);
        if am[1] != bm[0] {
            return Err(Error::shape("matmul", a, b));
        }
        let batch_shape = match (ab.is_empty(), bb.is_empty()) {
            (true, _) => bb.to_vec(),
            (false, true) => ab.to_vec(),
            (false, false) if ab == bb => ab.to_vec(),
            _ => return Err(Error::shape("matmul", a, b)),
        };
        let mut out_shape = batch_shape.clone();
        out_shape.extend_from_slice(&[am[0], bm[1]]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            m: am[0],
            k: am[1],
            n: bm[1],
            a_batched: !ab.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; self.batch * m * n];
        for bi in 0..self.batch {
            let ao = if self.a_batched { bi * m * k } else { 0 };
            let bo = if self.b_batched { bi * k * n } else { 0 };
            gemm_acc(
                &a[ao..ao + m * k],
                &b[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        out
    }

    pub fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        g: &[f64],
        ga: Option<&mut [f64]>,
        gb: Option<&mut [f64]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(ga) = ga {
            for bi in 0..self.batch {
                let ao = if self.a_batched { bi * m * k } else { 0 };
                let bo = if self.b_batched { bi * k * n } else { 0 };
                gemm_grad_lhs(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &b[bo..bo + k * n],
                    &mut ga[ao..ao + m * k],
                    m,
                    k,
                    n,
                );
            }
        }
        if let Some(gb) = gb {
            for bi in 0..self.batch {
                let ao = if self.a_batched { bi * m * k } else { 0 };
                let bo = if self.b_batched { bi * k * n } else { 0 };
                gemm_grad_rhs(
                    &a[ao..ao + m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut gb[bo..bo + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

// ── axis decomposition ──────────────────────────────────────────────

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_axis(x: &[f64], outer: usize, len: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|l| (x[at(l)] - max).exp()).sum();
            if log {
                let lz = z.ln() + max;
                for l in 0..len {
                    y[at(l)] = x[at(l)] - lz;
                }
            } else {
                for l in 0..len {
                    y[at(l)] = (x[at(l)] - max).exp() / z;
                }
            }
        }
    }
    y
}

// ── 1-D convolution over the time axis ──────────────────────────────

/// Geometry of a stride-1, zero-padded cross-correlation on `[B, T, C]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct ConvPlan {
    pub batch: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad_left: usize,
    pub depthwise: bool,
}

impl ConvPlan {
    /// Maps an output time step and tap to the input time step, if inside the signal.
    #[inline]
    fn src(&self, t: usize, k: usize) -> Option<usize> {
        let s = t + k;
        if s < self.pad_left || s - self.pad_left >= self.t_in {
            None
        } else {
            Some(s - self.pad_left)
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.batch * self.t_out * self.c_out];
        for b in 0..self.batch {
            for t in 0..self.t_out {
                let yrow = &mut y[(b * self.t_out + t) * self.c_out..][..self.c_out];
                for k in 0..self.kernel {
                    let Some(s) = self.src(t, k) else { continue };
                    let xrow = &x[(b * self.t_in + s) * self.c_in..][..self.c_in];
                    if self.depthwise {
                        for c in 0..self.c_in {
                            yrow[c] += w[c * self.kernel + k] * xrow[c];
                        }
                    } else {
                        for (o, yv) in yrow.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for c in 0..self.c_in {
                                acc += w[(o * self.c_in + c) * self.kernel + k] * xrow[c];
                            }
                            *yv += acc;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        mut gx: Option<&mut [f64]>,
        mut gw: Option<&mut [f64]>,
    ) {
        for b in 0..self.batch {
            for t in 0..self.t_out {
                let grow = &g[(b * self.t_out + t) * self.c_out..][..self.c_out];
                for k in 0..self.kernel {
                    let Some(s) = self.src(t, k) else { continue };
                    let xo = (b * self.t_in + s) * self.c_in;
                    if self.depthwise {
                        for c in 0..self.c_in {
                            if let Some(gx) = gx.as_deref_mut() {
                                gx[xo + c] += w[c * self.kernel + k] * grow[c];
                            }
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[c * self.kernel + k] += x[xo + c] * grow[c];
                            }
                        }
                    } else {
                        for (o, &gv) in grow.iter().enumerate() {
                            for c in 0..self.c_in {
                                let wi = (o * self.c_in + c) * self.kernel + k;
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xo + c] += w[wi] * gv;
                                }
                                if let Some(gw) = gw.as_deref_mut() {
                                    gw[wi] += x[xo + c] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── permutation ─────────────────────────────────────────────────────

/// For each output element (row-major), the flat offset it reads from the input.
pub fn permute_gather(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_bias_over_rows() {
        let plan = Broadcast::new("add", &[2, 3], &[3]).unwrap();
        assert_eq!(plan.out_shape, vec![2, 3]);
        let mut pairs = vec![];
        plan.for_each(|o, a, b| pairs.push((o, a, b)));
        assert_eq!(pairs[4], (4, 4, 1));
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        assert!(Broadcast::new("add", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn broadcast_middle_axis() {
        let plan = Broadcast::new("mul", &[2, 1, 3], &[1, 4, 1]).unwrap();
        assert_eq!(plan.out_shape, vec![2, 4, 3]);
        let mut last = (0, 0, 0);
        plan.for_each(|o, a, b| last = (o, a, b));
        assert_eq!(last, (23, 5, 3));
    }

    #[test]
    fn softplus_stable_at_extremes() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }

    #[test]
    fn causal_conv_sees_only_past() {
        // kernel [0, 0, 1] with left pad 2 is the identity
        let plan = ConvPlan {
            batch: 1,
            t_in: 4,
            t_out: 4,
            c_in: 1,
            c_out: 1,
            kernel: 3,
            pad_left: 2,
            depthwise: true,
        };
        let y = plan.forward(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0]);
        assert_eq!(y, vec![1.0, 2.0, 3.0, 4.0]);
        let y = plan.forward(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0]);
        assert_eq!(y, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn permute_transposes_matrix() {
        let (shape, map) = permute_gather(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }
}
