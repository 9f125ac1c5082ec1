//! Scalar-loop references written directly from the defining formulas.
//! Nothing here calls into the library beyond reading tensor data.

#![allow(dead_code)]

use dynstg::params::ParamStore;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(name).expect("parameter").data()
}

/// Row-normalized `mask ⊙ softplus(f)`; an all-zero row becomes `e_i`.
pub fn dynamic_adjacency(f: &[f64], mask: &[f64], j: usize) -> Vec<f64> {
    let mut out = vec![0.0; j * j];
    for r in 0..j {
        let mut row: Vec<f64> = (0..j)
            .map(|c| mask[r * j + c] * softplus(f[r * j + c]))
            .collect();
        if mask[r * j..(r + 1) * j].iter().all(|&m| m == 0.0) {
            row[r] = 1.0;
        }
        let s: f64 = row.iter().sum();
        for c in 0..j {
            out[r * j + c] = row[c] / s;
        }
    }
    out
}

/// Entry `(p, q)` of the block-tridiagonal matrix, computed from block indices.
pub fn block_entry(a_tilde: &[f64], a_t: &[f64], j: usize, p: usize, q: usize) -> f64 {
    let (br, bc, r, c) = (p / j, q / j, p % j, q % j);
    if br == bc {
        a_tilde[r * j + c]
    } else if bc == br + 1 {
        a_t[r * j + c]
    } else if br == bc + 1 {
        a_t[c * j + r]
    } else {
        0.0
    }
}

/// Graph layer on `x` `[B, T, J, F]` given the spatial adjacency.
#[allow(clippy::too_many_arguments)]
pub fn graph_layer(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    a_tilde: &[f64],
    a_t: &[f64],
    tc_w: &[f64],
    tc_b: &[f64],
    w: &[f64],
    bias: &[f64],
    o: usize,
) -> Vec<f64> {
    let (b, t, j, f) = dims;
    let tj = t * j;
    let mut h = vec![0.0; b * tj * f];
    for bi in 0..b {
        for pr in 0..tj {
            for q in 0..tj {
                let a = block_entry(a_tilde, a_t, j, pr, q);
                if a == 0.0 {
                    continue;
                }
                for k in 0..f {
                    h[(bi * tj + pr) * f + k] += a * x[(bi * tj + q) * f + k];
                }
            }
        }
    }
    let idx = |bi: usize, ti: usize, ji: usize, k: usize| ((bi * t + ti) * j + ji) * f + k;
    let mut conv = vec![0.0; b * tj * f];
    for bi in 0..b {
        for ji in 0..j {
            for ti in 0..t {
                for co in 0..f {
                    let mut s = tc_b[co];
                    for ci in 0..f {
                        for k in 0..3 {
                            let src = ti as isize + k as isize - 1;
                            if src >= 0 && (src as usize) < t {
                                s += h[idx(bi, src as usize, ji, ci)] * tc_w[(co * f + ci) * 3 + k];
                            }
                        }
                    }
                    conv[idx(bi, ti, ji, co)] = s;
                }
            }
        }
    }
    let mut z = vec![0.0; b * tj * o];
    for row in 0..b * tj {
        for oc in 0..o {
            let mut s = bias[oc];
            for k in 0..f {
                s += conv[row * f + k] * w[k * o + oc];
            }
            z[row * o + oc] = s;
        }
    }
    z
}

/// `(exp(Δ a), Δ u b)` by four nested loops, each `[B, T, D, N]`.
pub fn discretize(
    delta_raw: &[f64],
    delta_bias: &[f64],
    a: &[f64],
    bsel: &[f64],
    u: &[f64],
    dims: (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let (bs, t, d, n) = dims;
    let mut da = vec![0.0; bs * t * d * n];
    let mut dbu = vec![0.0; bs * t * d * n];
    for bi in 0..bs {
        for ti in 0..t {
            for di in 0..d {
                let delta = softplus(delta_raw[(bi * t + ti) * d + di] + delta_bias[di]);
                for ni in 0..n {
                    let at = ((bi * t + ti) * d + di) * n + ni;
                    da[at] = (delta * a[di * n + ni]).exp();
                    dbu[at] = delta * u[(bi * t + ti) * d + di] * bsel[(bi * t + ti) * n + ni];
                }
            }
        }
    }
    (da, dbu)
}

/// Per-step recurrence with the state divided by `‖·‖ + ε` over each `D×N` slice.
pub fn scan(da: &[f64], dbu: &[f64], dims: (usize, usize, usize, usize), eps: f64) -> Vec<f64> {
    let (bs, t, d, n) = dims;
    let slice = d * n;
    let mut out = vec![0.0; bs * t * slice];
    for bi in 0..bs {
        let mut h = vec![0.0; slice];
        for ti in 0..t {
            let base = (bi * t + ti) * slice;
            for k in 0..slice {
                h[k] = da[base + k] * h[k] + dbu[base + k];
            }
            let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..slice {
                h[k] /= norm + eps;
                out[base + k] = h[k];
            }
        }
    }
    out
}

fn matmul(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = (0..inner).map(|k| x[r * inner + k] * w[k * cols + c]).sum();
        }
    }
    out
}

/// One state-space block on `x` `[B, T, D_in]` with widths `(D, N, D_out)`.
pub fn ssm_block(
    store: &ParamStore,
    prefix: &str,
    x: &[f64],
    (bs, t, din): (usize, usize, usize),
    (d, n, dout): (usize, usize, usize),
    eps: f64,
) -> Vec<f64> {
    let name = |s: &str| format!("{prefix}.{s}");
    let rows = bs * t;
    let split = matmul(x, rows, din, p(store, &name("w_split")), 2 * d);
    let w_conv = p(store, &name("w_conv"));
    let b_conv = p(store, &name("b_conv"));
    let mut xc = vec![0.0; rows * d];
    for bi in 0..bs {
        for ti in 0..t {
            for di in 0..d {
                let mut s = b_conv[di];
                for k in 0..3 {
                    let src = ti as isize + k as isize - 2;
                    if src >= 0 {
                        s += split[(bi * t + src as usize) * 2 * d + di] * w_conv[di * 3 + k];
                    }
                }
                xc[(bi * t + ti) * d + di] = silu(s);
            }
        }
    }
    let proj = matmul(&xc, rows, d, p(store, &name("w_proj")), d + 2 * n);
    let w = d + 2 * n;
    let mut delta_raw = vec![0.0; rows * d];
    let mut bsel = vec![0.0; rows * n];
    let mut csel = vec![0.0; rows * n];
    for r in 0..rows {
        for di in 0..d {
            delta_raw[r * d + di] = proj[r * w + di];
        }
        for ni in 0..n {
            bsel[r * n + ni] = proj[r * w + d + ni];
            csel[r * n + ni] = proj[r * w + d + n + ni];
        }
    }
    let a: Vec<f64> = p(store, &name("a_raw"))
        .iter()
        .map(|&v| -softplus(v))
        .collect();
    let dims = (bs, t, d, n);
    let (da, dbu) = discretize(
        &delta_raw,
        p(store, &name("delta_bias")),
        &a,
        &bsel,
        &xc,
        dims,
    );
    let h = scan(&da, &dbu, dims, eps);
    let d_skip = p(store, &name("d_skip"));
    let mut fused = vec![0.0; rows * d];
    for r in 0..rows {
        for di in 0..d {
            let read: f64 = (0..n)
                .map(|ni| h[(r * d + di) * n + ni] * csel[r * n + ni])
                .sum();
            let o = read + d_skip[di] * xc[r * d + di];
            fused[r * d + di] = o * silu(split[r * 2 * d + d + di]);
        }
    }
    let mut y = matmul(&fused, rows, d, p(store, &name("w_out")), dout);
    let b_out = p(store, &name("b_out"));
    for r in 0..rows {
        for c in 0..dout {
            y[r * dout + c] += b_out[c];
        }
    }
    y
}

pub struct ModelRef {
    pub joint_logits: Vec<f64>,
    pub seq_logits: Vec<f64>,
    pub joint_embeddings: Vec<f64>,
    pub region_embeddings: Vec<f64>,
}

/// The composed network: graph layer, residual blocks, per-joint head and pooling.
#[allow(clippy::too_many_arguments)]
pub fn model(
    store: &ParamStore,
    a_tilde: &[f64],
    x: &[f64],
    (b, t, j, c): (usize, usize, usize, usize),
    o: usize,
    n: usize,
    k: usize,
    blocks: usize,
    regions: usize,
    eps: f64,
) -> ModelRef {
    let h = graph_layer(
        x,
        (b, t, j, c),
        a_tilde,
        p(store, "graph.a_t"),
        p(store, "graph.tc_weight"),
        p(store, "graph.tc_bias"),
        p(store, "graph.w"),
        p(store, "graph.b"),
        o,
    );
    let hi = |bi: usize, ti: usize, ji: usize, oi: usize| h[((bi * t + ti) * j + ji) * o + oi];
    let mut joint_embeddings = vec![0.0; b * j * o];
    for bi in 0..b {
        for ji in 0..j {
            for oi in 0..o {
                joint_embeddings[(bi * j + ji) * o + oi] =
                    (0..t).map(|ti| hi(bi, ti, ji, oi)).sum::<f64>() / t as f64;
            }
        }
    }
    let w = t / regions;
    let mut region_embeddings = vec![0.0; b * regions * o];
    for bi in 0..b {
        for g in 0..regions {
            for oi in 0..o {
                let mut s = 0.0;
                for ti in g * w..(g + 1) * w {
                    s += (0..j).map(|ji| hi(bi, ti, ji, oi)).sum::<f64>() / j as f64;
                }
                region_embeddings[(bi * regions + g) * o + oi] = s / w as f64;
            }
        }
    }
    let d = j * o;
    let mut z = h.clone();
    for i in 0..blocks {
        let y = ssm_block(store, &format!("block{i}"), &z, (b, t, d), (d, n, d), eps);
        z.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
    }
    let mut logits = matmul(&z, b * t, d, p(store, "head.w"), j * k);
    let hb = p(store, "head.b");
    for r in 0..b * t {
        for q in 0..j * k {
            logits[r * j * k + q] += hb[q];
        }
    }
    let mut seq_logits = vec![0.0; b * k];
    for bi in 0..b {
        for ki in 0..k {
            let mut s = 0.0;
            for ti in 0..t {
                for ji in 0..j {
                    s += logits[((bi * t + ti) * j + ji) * k + ki];
                }
            }
            seq_logits[bi * k + ki] = s / (t * j) as f64;
        }
    }
    ModelRef {
        joint_logits: logits,
        seq_logits,
        joint_embeddings,
        region_embeddings,
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy of each `K`-row against its sequence's label.
pub fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let rows_per_seq = logits.len() / k / labels.len();
    let mut total = 0.0;
    for (r, row) in logits.chunks(k).enumerate() {
        total -= log_softmax(row)[labels[r / rows_per_seq]];
    }
    total / (logits.len() / k) as f64
}

/// Mean over rows of `Σ p log(p/q)` with `p = softmax(s)`, `q = softmax(t)`.
pub fn kl_rows(s: &[f64], t: &[f64], k: usize) -> f64 {
    let rows = s.len() / k;
    let mut total = 0.0;
    for r in 0..rows {
        let ls = log_softmax(&s[r * k..(r + 1) * k]);
        let lt = log_softmax(&t[r * k..(r + 1) * k]);
        total += (0..k).map(|i| ls[i].exp() * (ls[i] - lt[i])).sum::<f64>();
    }
    total / rows as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Relation logits `cos(a_i, b_q) / τ` for one sample.
fn relations(a: &[f64], b: &[f64], o: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for ai in a.chunks(o) {
        for bq in b.chunks(o) {
            out.push(cosine(ai, bq) / tau);
        }
    }
    out
}

/// Relation KL between `a_s⋅b_s` and `a_t⋅b_t`, averaged over samples and anchors.
/// `b_*` is per-sample when `shared` is false, otherwise one set for all.
#[allow(clippy::too_many_arguments)]
pub fn relation_kl(
    a_s: &[f64],
    b_s: &[f64],
    a_t: &[f64],
    b_t: &[f64],
    batch: usize,
    o: usize,
    shared: bool,
    tau: f64,
) -> f64 {
    let (pa, pb) = (
        a_s.len() / batch,
        if shared { b_s.len() } else { b_s.len() / batch },
    );
    let q = pb / o;
    let mut total = 0.0;
    for i in 0..batch {
        let sel = |v: &[f64], len: usize, sh: bool| -> Vec<f64> {
            if sh {
                v.to_vec()
            } else {
                v[i * len..(i + 1) * len].to_vec()
            }
        };
        let rs = relations(&sel(a_s, pa, false), &sel(b_s, pb, shared), o, tau);
        let rt = relations(&sel(a_t, pa, false), &sel(b_t, pb, shared), o, tau);
        total += kl_rows(&rs, &rt, q);
    }
    total / batch as f64
}
