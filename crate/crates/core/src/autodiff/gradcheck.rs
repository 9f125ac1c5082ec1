//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `2⁻¹⁷ ≈ 7.6e-6`
pub const DEFAULT_EPSILON: f64 = 1.0 / 131072.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step. The default is a power of two so that
    /// `θ ± ε` is exact for moderately sized `θ`.
    pub epsilon: f64,
    pub tolerance: f64,
    /// Above this many scalars in total, coordinates are sampled.
    pub full_check_limit: usize,
    pub sample_size: usize,
    pub seed: u64,
    /// Negative control: perturbs every analytic gradient before comparing.
    #[serde(default)]
    pub corrupt_analytic: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            tolerance: 1e-4,
            full_check_limit: 1000,
            sample_size: 256,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate, with both gradient estimates there.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub label: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when the loss was non-finite at some evaluation point.
    pub failure: Option<String>,
}

/// Relative error with denominator `max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn scalar_loss<F>(
    loss_fn: &F,
    params: &[Tensor],
    requires_grad: bool,
) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect();
    let loss = loss_fn(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    Ok((tape, vars, loss))
}

/// Picks which coordinates of each tensor to probe.
fn plan_coordinates(sizes: &[usize], cfg: &GradCheckConfig) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if total <= cfg.full_check_limit {
        return sizes.iter().map(|&n| (0..n).collect()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sizes
        .iter()
        .map(|&n| {
            let share = (cfg.sample_size * n).div_ceil(total);
            let k = share.max(4).min(n);
            let mut picked = sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect()
}

/// Compares tape gradients of `loss_fn` against `(f(θ+ε) − f(θ−ε)) / 2ε`.
pub fn grad_check<F>(
    label: &str,
    loss_fn: F,
    params: &[(String, Tensor)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&cfg.epsilon) {
        return Err(Error::contract(format!(
            "gradient-check epsilon must lie in [1e-8, 1e-4], got {}",
            cfg.epsilon
        )));
    }
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, vars, loss) = scalar_loss(&loss_fn, &values, true)?;
    let mut report = GradCheckReport {
        label: label.to_string(),
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        epsilon: cfg.epsilon,
        tolerance: cfg.tolerance,
        pass: true,
        failure: None,
    };
    if !tape.value(loss).is_finite() {
        report.pass = false;
        report.failure = Some("non-finite loss at the unperturbed point".into());
        return Ok(report);
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&values)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let sizes: Vec<usize> = values.iter().map(Tensor::numel).collect();
    let coords = plan_coordinates(&sizes, cfg);
    let mut probe = values.clone();
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: coords[pi].len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &ci in &coords[pi] {
            let orig = values[pi].data()[ci];
            let mut eval_at = |x: f64| -> Result<f64> {
                probe[pi].data_mut()[ci] = x;
                let (tape, _, l) = scalar_loss(&loss_fn, &probe, false)?;
                Ok(tape.value(l).data()[0])
            };
            let plus = eval_at(orig + cfg.epsilon)?;
            let minus = eval_at(orig - cfg.epsilon)?;
            probe[pi].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                report.pass = false;
                report.failure = Some(format!("non-finite loss when perturbing {name}[{ci}]"));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let mut a = analytic[pi].data()[ci];
            if cfg.corrupt_analytic {
                a = a * 1.5 + 1e-3;
            }
            let err = relative_error(a, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = ci;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    report.pass &= report.max_rel_error < cfg.tolerance;
    Ok(report)
}
