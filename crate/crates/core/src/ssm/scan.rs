//! Discretization and the normalized selective scan.

use crate::autodiff::{NormGuard, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// State normalization slack.
pub const DEFAULT_STATE_EPSILON: f64 = 1e-6;

/// Default chunk length of [`scan_chunked`].
pub const DEFAULT_CHUNK: usize = 8;

/// Records `Δ = softplus(delta_raw + Δ*)`, `deltaA = exp(Δ ⊗ A)` and
/// `deltaBu = (Δ ⊙ u) ⊗ B`.
///
/// Shapes: `delta_raw`, `u` are `[B, T, D]`; `delta_bias` is `[D]`; `a` is
/// `[D, N]`; `b` is `[B, T, N]`. Both outputs are `[B, T, D, N]`.
pub fn discretize(
    tape: &mut Tape,
    delta_raw: Var,
    delta_bias: Var,
    a: Var,
    b: Var,
    u: Var,
) -> Result<(Var, Var)> {
    let ds = tape.shape(delta_raw).to_vec();
    let [bs, t, d] = ds[..] else {
        return Err(Error::shape("discretize", &ds, tape.shape(a)));
    };
    let a_shape = tape.shape(a).to_vec();
    let [ad, n] = a_shape[..] else {
        return Err(Error::shape("discretize", &ds, &a_shape));
    };
    if ad != d {
        return Err(Error::shape("discretize", &ds, &a_shape));
    }
    if tape.shape(b) != [bs, t, n] {
        return Err(Error::shape("discretize", tape.shape(b), &[bs, t, n]));
    }
    if tape.shape(u) != ds.as_slice() {
        return Err(Error::shape("discretize", tape.shape(u), &ds));
    }
    let shifted = tape.add(delta_raw, delta_bias)?;
    let delta = tape.softplus(shifted);

    let delta4 = tape.reshape(delta, &[bs, t, d, 1])?;
    let exponent = tape.mul(delta4, a)?;
    let delta_a = tape.exp(exponent);

    let du = tape.mul(delta, u)?;
    let du = tape.reshape(du, &[bs, t, d, 1])?;
    let b4 = tape.reshape(b, &[bs, t, 1, n])?;
    let delta_bu = tape.mul(du, b4)?;
    Ok((delta_a, delta_bu))
}

/// Value-only [`discretize`].
pub fn discretize_values(
    delta_raw: &Tensor,
    delta_bias: &Tensor,
    a: &Tensor,
    b: &Tensor,
    u: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = [delta_raw, delta_bias, a, b, u].map(|t| tape.constant(t.clone()));
    let (da, dbu) = discretize(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4])?;
    Ok((tape.value(da).clone(), tape.value(dbu).clone()))
}

fn scan_dims(delta_a: &[usize], delta_bu: &[usize], eps: f64) -> Result<[usize; 4]> {
    if !(eps > 0.0) {
        return Err(Error::contract(format!(
            "scan epsilon must be positive, got {eps}"
        )));
    }
    if delta_a != delta_bu || delta_a.len() != 4 {
        return Err(Error::shape("ssm_scan", delta_a, delta_bu));
    }
    Ok([delta_a[0], delta_a[1], delta_a[2], delta_a[3]])
}

/// Records the scan `h_t = deltaA_t ⊙ h_{t-1} + deltaBu_t`,
/// `h_t ← h_t / (‖h_t‖ + ε)` with `h_0 = 0`, the norm taken over each
/// batch element's `D × N` slice. Returns all states, `[B, T, D, N]`.
pub fn scan(tape: &mut Tape, delta_a: Var, delta_bu: Var, eps: f64) -> Result<Var> {
    let [bs, t, d, n] = scan_dims(tape.shape(delta_a), tape.shape(delta_bu), eps)?;
    let mut states = Vec::with_capacity(t);
    let mut h: Option<Var> = None;
    for step in 0..t {
        let bu = tape.slice(delta_bu, 1, step, 1)?;
        let pre = match h {
            None => bu,
            Some(prev) => {
                let decay = tape.slice(delta_a, 1, step, 1)?;
                let carried = tape.mul(decay, prev)?;
                tape.add(carried, bu)?
            }
        };
        let flat = tape.reshape(pre, &[bs, d * n])?;
        let normed = tape.l2_normalize(flat, eps, NormGuard::Shift)?;
        let next = tape.reshape(normed, &[bs, 1, d, n])?;
        states.push(next);
        h = Some(next);
    }
    if states.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[bs, 0, d, n])));
    }
    tape.concat(&states, 1)
}

/// Plain per-step reference scan over values.
pub fn scan_loop(delta_a: &Tensor, delta_bu: &Tensor, eps: f64) -> Result<Tensor> {
    let [bs, t, d, n] = scan_dims(delta_a.shape(), delta_bu.shape(), eps)?;
    let slice = d * n;
    let mut out = vec![0.0; bs * t * slice];
    let (da, dbu) = (delta_a.data(), delta_bu.data());
    for b in 0..bs {
        let mut h = vec![0.0; slice];
        for s in 0..t {
            let base = (b * t + s) * slice;
            for i in 0..slice {
                h[i] = da[base + i] * h[i] + dbu[base + i];
            }
            let denom = h.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            for i in 0..slice {
                h[i] /= denom;
                out[base + i] = h[i];
            }
        }
    }
    Tensor::new(vec![bs, t, d, n], out)
}

/// Scan with deferred normalization.
///
/// Within a chunk the state is carried unnormalized as `h = w / m`:
/// `w_t = a_t ⊙ w_{t-1} + m_{t-1} b_t` and `m_t = ‖w_t‖ + ε m_{t-1}`.
/// At each chunk boundary `w` is rescaled to `h` and `m` reset to one.
pub fn scan_chunked(delta_a: &Tensor, delta_bu: &Tensor, eps: f64, chunk: usize) -> Result<Tensor> {
    let [bs, t, d, n] = scan_dims(delta_a.shape(), delta_bu.shape(), eps)?;
    if chunk == 0 {
        return Err(Error::contract("scan chunk length must be positive"));
    }
    let slice = d * n;
    let mut out = vec![0.0; bs * t * slice];
    let (da, dbu) = (delta_a.data(), delta_bu.data());
    for b in 0..bs {
        let mut w = vec![0.0; slice];
        let mut m = 1.0;
        for start in (0..t).step_by(chunk) {
            for s in start..(start + chunk).min(t) {
                let base = (b * t + s) * slice;
                let mut sq = 0.0;
                for i in 0..slice {
                    w[i] = da[base + i] * w[i] + m * dbu[base + i];
                    sq += w[i] * w[i];
                }
                m = sq.sqrt() + eps * m;
                for i in 0..slice {
                    out[base + i] = w[i] / m;
                }
            }
            w.iter_mut().for_each(|v| *v /= m);
            m = 1.0;
        }
    }
    Tensor::new(vec![bs, t, d, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |i| {
            let s: usize = i.iter().enumerate().map(|(k, &v)| (k + 1) * v).sum();
            ((s as f64) * 0.37).sin() * scale
        })
    }

    #[test]
    fn frozen_state_limit() {
        let (da, dbu) = discretize_values(
            &Tensor::full(&[1, 2, 2], -800.0),
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2, 3], -1.0),
            &Tensor::ones(&[1, 2, 3]),
            &Tensor::ones(&[1, 2, 2]),
        )
        .unwrap();
        assert!(da.data().iter().all(|&v| v == 1.0));
        assert!(dbu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_decay_at_log_two_step() {
        let (da, _) = discretize_values(
            &Tensor::zeros(&[1, 1, 2]),
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2, 2], -1.0),
            &Tensor::ones(&[1, 1, 2]),
            &Tensor::ones(&[1, 1, 2]),
        )
        .unwrap();
        // softplus(0) = ln 2, so exp(-ln 2) = 0.5
        assert!(da.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn no_recurrence_normalizes_each_step() {
        let dbu = ramp(&[2, 3, 2, 2], 1.0);
        let h = scan_loop(&Tensor::zeros(&[2, 3, 2, 2]), &dbu, 1e-6).unwrap();
        for (hs, bs) in h.data().chunks(4).zip(dbu.data().chunks(4)) {
            let norm = bs.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (x, y) in hs.iter().zip(bs) {
                assert!((x - y / (norm + 1e-6)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let da = ramp(&[1, 4, 2, 3], 1.0).map(|v| v.abs());
        let z = Tensor::zeros(&[1, 4, 2, 3]);
        for h in [
            scan_loop(&da, &z, 1e-6).unwrap(),
            scan_chunked(&da, &z, 1e-6, 2).unwrap(),
        ] {
            assert!(h.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn chunked_matches_loop() {
        let da = ramp(&[2, 11, 3, 2], 1.0).map(|v| v.abs());
        let dbu = ramp(&[2, 11, 3, 2], 2.5).map(|v| v - 0.3);
        let reference = scan_loop(&da, &dbu, 1e-6).unwrap();
        for chunk in [1, 3, 8, 64] {
            let c = scan_chunked(&da, &dbu, 1e-6, chunk).unwrap();
            assert!(c.max_abs_diff(&reference) < 1e-10);
        }
    }

    #[test]
    fn tape_scan_matches_loop() {
        let da = ramp(&[2, 5, 2, 2], 1.0).map(|v| v.abs());
        let dbu = ramp(&[2, 5, 2, 2], 1.5);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(da.clone()), tape.constant(dbu.clone()));
        let h = scan(&mut tape, a, b, 1e-6).unwrap();
        assert!(
            tape.value(h)
                .max_abs_diff(&scan_loop(&da, &dbu, 1e-6).unwrap())
                < 1e-14
        );
    }

    #[test]
    fn non_positive_epsilon_is_contract_error() {
        let z = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(scan_loop(&z, &z, 0.0), Err(Error::Contract(_))));
        assert!(matches!(
            scan_chunked(&z, &z, -1.0, 4),
            Err(Error::Contract(_))
        ));
        let mut tape = Tape::new();
        let v = tape.constant(z);
        assert!(matches!(
            scan(&mut tape, v, v, 0.0),
            Err(Error::Contract(_))
        ));
    }
}
