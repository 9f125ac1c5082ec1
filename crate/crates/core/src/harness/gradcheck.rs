use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, NormGuard, Tape, Var};
use crate::distill::{self, MemoryBank};
use crate::error::Result;
use crate::graph::{GraphKind, GraphLayer, SkeletonTopology};
use crate::harness::derive_seed;
use crate::model::{Model, ModelConfig};
use crate::params::{uniform, Bound, ParamStore};
use crate::ssm::{inverse_softplus, StgMambaBlock};
use crate::tensor::Tensor;

pub const PRIMITIVE_TRIALS: usize = 100;

/// `2⁻¹⁴`. Full-model losses sit near 1, so a smaller step drowns the
/// difference quotient in rounding.
pub const MODEL_EPSILON: f64 = 1.0 / 16384.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub corrupt_analytic: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: PRIMITIVE_TRIALS,
            tolerance: 1e-4,
            corrupt_analytic: false,
        }
    }
}

/// Worst trial of one primitive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimitiveSummary {
    pub op: String,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub primitives: Vec<PrimitiveSummary>,
    /// Layers, losses and both full models, with every parameter named.
    pub checks: Vec<GradCheckReport>,
    pub pass: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .primitives
            .iter()
            .filter(|p| p.failures > 0)
            .map(|p| {
                format!(
                    "{}: {} of {} trials, max rel {:.3e}",
                    p.op, p.failures, p.trials, p.max_rel_error
                )
            })
            .collect();
        for c in self.checks.iter().filter(|c| !c.pass) {
            let worst = c
                .params
                .iter()
                .filter(|p| p.max_rel_error > c.tolerance)
                .map(|p| format!("{} ({:.3e})", p.name, p.max_rel_error))
                .collect::<Vec<_>>()
                .join(", ");
            out.push(format!(
                "{}: {}{}",
                c.label,
                worst,
                c.failure.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

fn check_cfg(cfg: &SuiteConfig, epsilon: f64, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        epsilon,
        tolerance: cfg.tolerance,
        seed,
        corrupt_analytic: cfg.corrupt_analytic,
        ..Default::default()
    }
}

/// Runs `f` on named parameters through a [`Bound`] view.
fn check_named(
    label: &str,
    params: &[(String, Tensor)],
    cfg: &GradCheckConfig,
    f: impl Fn(&mut Tape, &Bound) -> Result<Var>,
) -> Result<GradCheckReport> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    grad_check(
        label,
        |tape, vars| {
            f(
                tape,
                &Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied())),
            )
        },
        params,
        cfg,
    )
}

/// `Σ w ⊙ y` with a fixed random `w`, so no coordinate's gradient cancels by symmetry.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum_all(p))
}

type PrimitiveFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Primitive {
    op: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    apply: PrimitiveFn,
}

fn u(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 2.0)
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..=2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn primitives() -> Vec<Primitive> {
    macro_rules! prim {
        ($op:expr, |$r:ident| $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            Primitive {
                op: $op,
                inputs: |$r| $inputs,
                apply: |$t, $v| $body,
            }
        };
    }
    vec![
        prim!("add", |r| vec![u(r, &[2, 3]), u(r, &[3])], |t, v| t
            .add(v[0], v[1])),
        prim!("sub", |r| vec![u(r, &[2, 3]), u(r, &[2, 1])], |t, v| t
            .sub(v[0], v[1])),
        prim!("mul", |r| vec![u(r, &[2, 3]), u(r, &[2, 3])], |t, v| t
            .mul(v[0], v[1])),
        prim!(
            "div",
            |r| vec![u(r, &[2, 3]), away_from_zero(r, &[2, 3])],
            |t, v| t.div(v[0], v[1])
        ),
        prim!(
            "scale",
            |r| vec![u(r, &[4])],
            |t, v| Ok(t.scale(v[0], -1.7))
        ),
        prim!("neg", |r| vec![u(r, &[4])], |t, v| Ok(t.neg(v[0]))),
        prim!("sigmoid", |r| vec![u(r, &[2, 3])], |t, v| Ok(
            t.sigmoid(v[0])
        )),
        prim!("silu", |r| vec![u(r, &[2, 3])], |t, v| Ok(t.silu(v[0]))),
        prim!("softplus", |r| vec![u(r, &[2, 3])], |t, v| Ok(
            t.softplus(v[0])
        )),
        prim!("exp", |r| vec![u(r, &[2, 3])], |t, v| Ok(t.exp(v[0]))),
        prim!(
            "matmul",
            |r| vec![u(r, &[2, 3, 4]), u(r, &[4, 2])],
            |t, v| t.matmul(v[0], v[1])
        ),
        prim!(
            "matmul_batched",
            |r| vec![u(r, &[2, 2, 3]), u(r, &[2, 3, 2])],
            |t, v| t.matmul(v[0], v[1])
        ),
        prim!(
            "conv1d",
            |r| vec![u(r, &[2, 5, 3]), u(r, &[2, 3, 3])],
            |t, v| t.conv1d(v[0], v[1], 1, 1)
        ),
        prim!(
            "conv1d_depthwise",
            |r| vec![u(r, &[2, 5, 3]), u(r, &[3, 3])],
            |t, v| t.conv1d(v[0], v[1], 2, 0)
        ),
        prim!("reshape", |r| vec![u(r, &[2, 6])], |t, v| t
            .reshape(v[0], &[3, 4])),
        prim!("permute", |r| vec![u(r, &[2, 3, 4])], |t, v| t
            .permute(v[0], &[2, 0, 1])),
        prim!("transpose", |r| vec![u(r, &[2, 3, 4])], |t, v| t
            .transpose(v[0])),
        prim!("slice", |r| vec![u(r, &[3, 5])], |t, v| t
            .slice(v[0], 1, 1, 3)),
        prim!("concat", |r| vec![u(r, &[2, 2]), u(r, &[2, 3])], |t, v| t
            .concat(&[v[0], v[1]], 1)),
        prim!("stack", |r| vec![u(r, &[2, 3]), u(r, &[2, 3])], |t, v| t
            .stack(&[v[0], v[1]], 1)),
        prim!(
            "block_tridiagonal",
            |r| vec![u(r, &[3, 3]), u(r, &[3, 3])],
            |t, v| t.block_tridiagonal(v[0], v[1], 3)
        ),
        prim!("softmax", |r| vec![u(r, &[3, 4])], |t, v| t
            .softmax(v[0], 1)),
        prim!("log_softmax", |r| vec![u(r, &[3, 4])], |t, v| t
            .log_softmax(v[0], 0)),
        prim!("sum", |r| vec![u(r, &[2, 3, 4])], |t, v| t.sum(v[0], 1)),
        prim!("mean", |r| vec![u(r, &[2, 3, 4])], |t, v| t.mean(v[0], 2)),
        prim!("sum_all", |r| vec![u(r, &[2, 3])], |t, v| Ok(
            t.sum_all(v[0])
        )),
        prim!("mean_all", |r| vec![u(r, &[2, 3])], |t, v| Ok(
            t.mean_all(v[0])
        )),
        prim!("l2_normalize_shift", |r| vec![u(r, &[3, 4])], |t, v| t
            .l2_normalize(v[0], 1e-6, NormGuard::Shift)),
        prim!("l2_normalize_clamp", |r| vec![u(r, &[3, 4])], |t, v| t
            .l2_normalize(v[0], 1e-6, NormGuard::Clamp)),
    ]
}

fn check_primitive(p: &Primitive, cfg: &SuiteConfig) -> Result<PrimitiveSummary> {
    let mut summary = PrimitiveSummary {
        op: p.op.to_string(),
        trials: cfg.trials,
        failures: 0,
        max_rel_error: 0.0,
    };
    for trial in 0..cfg.trials {
        let seed = derive_seed(cfg.seed, trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (p.inputs)(&mut rng);
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let y = (p.apply)(&mut tape, &vars)?;
            tape.shape(y).to_vec()
        };
        let w = u(&mut rng, &out_shape);
        let named: Vec<(String, Tensor)> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, x)| (format!("x{i}"), x))
            .collect();
        let report = grad_check(
            p.op,
            |tape, vars| {
                let y = (p.apply)(tape, vars)?;
                weighted_sum(tape, y, &w)
            },
            &named,
            &check_cfg(cfg, crate::autodiff::DEFAULT_EPSILON, seed),
        )?;
        summary.max_rel_error = summary.max_rel_error.max(report.max_rel_error);
        summary.failures += usize::from(!report.pass);
    }
    Ok(summary)
}

fn wave(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let s: f64 = i
            .iter()
            .enumerate()
            .map(|(k, &v)| (k as f64 + 1.3) * v as f64)
            .sum();
        (s * 0.41 + phase).sin()
    })
}

fn layer_checks(cfg: &SuiteConfig) -> Result<Vec<GradCheckReport>> {
    let gc = check_cfg(cfg, crate::autodiff::DEFAULT_EPSILON, cfg.seed);
    let mut out = Vec::new();
    for kind in [GraphKind::Dynamic, GraphKind::Static] {
        let layer = GraphLayer::new(kind, SkeletonTopology::lower_body(5), 3, 4, "graph");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 200));
        layer.init(&mut store, &mut rng);
        if kind == GraphKind::Dynamic {
            *store.get_mut("graph.f_base")? = uniform(&mut rng, &[5, 5], 1.0);
        }
        let x = u(&mut rng, &[2, 4, 5, 3]);
        let w = u(&mut rng, &[2, 4, 5, 4]);
        let label = match kind {
            GraphKind::Dynamic => "graph_layer_dynamic",
            GraphKind::Static => "graph_layer_static",
        };
        out.push(check_named(label, &store.to_named(), &gc, |tape, p| {
            let xv = tape.constant(x.clone());
            let z = layer.forward(tape, p, xv)?;
            let sq = tape.mul(z, z)?;
            weighted_sum(tape, sq, &w)
        })?);
    }

    let block = StgMambaBlock::new(4, 3, 2, 3, "block");
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 201));
    block.init(&mut store, &mut rng);
    let x = u(&mut rng, &[2, 6, 4]);
    let w = u(&mut rng, &[2, 6, 3]);
    out.push(check_named(
        "stg_mamba_block",
        &store.to_named(),
        &gc,
        |tape, p| {
            let xv = tape.constant(x.clone());
            let y = block.forward(tape, p, xv)?;
            let sq = tape.mul(y, y)?;
            weighted_sum(tape, sq, &w)
        },
    )?);

    let mut bank = MemoryBank::new(4, 5)?;
    bank.update(&wave(&[5, 4], 3.0))?;
    let (ft, rt, zt) = (
        wave(&[2, 3, 4], 2.0),
        wave(&[2, 2, 4], 1.4),
        wave(&[2, 2, 3, 2], 2.5),
    );
    let params = vec![
        ("f_s".to_string(), wave(&[2, 3, 4], 0.1)),
        ("r_s".to_string(), wave(&[2, 2, 4], 0.9)),
        ("z_s".to_string(), wave(&[2, 2, 3, 2], 0.5)),
    ];
    type LossFn = fn(&mut Tape, [Var; 3], [Var; 3], &MemoryBank) -> Result<Var>;
    let losses: [(&str, LossFn); 5] = [
        ("loss_task", |t, s, _, _| {
            distill::loss_task(t, s[2], &[1, 0])
        }),
        ("loss_align", |t, s, c, _| {
            distill::loss_align(t, s[2], c[2], 4.0)
        }),
        ("loss_intra", |t, s, c, _| {
            distill::loss_intra(t, s[0], c[0], 0.5)
        }),
        ("loss_memory", |t, s, c, b| {
            distill::loss_memory(t, s[0], b, c[0], 0.5)
        }),
        ("loss_region", |t, s, c, _| {
            distill::loss_region(t, s[0], s[1], c[0], c[1], 0.5)
        }),
    ];
    for (label, f) in losses {
        out.push(check_named(label, &params, &gc, |tape, p| {
            let s = [p.get("f_s")?, p.get("r_s")?, p.get("z_s")?];
            let c = [
                tape.constant(ft.clone()),
                tape.constant(rt.clone()),
                tape.constant(zt.clone()),
            ];
            f(tape, s, c, &bank)
        })?);
    }
    Ok(out)
}

/// Small full-model configuration used for end-to-end checks.
pub fn check_model_config(student: bool, seed: u64) -> ModelConfig {
    let topo = SkeletonTopology::lower_body(5);
    let mut cfg = if student {
        ModelConfig::student(topo, 3, 2, seed)
    } else {
        ModelConfig::teacher(topo, 3, 2, seed)
    };
    cfg.graph_out = 4;
    cfg.ssm_channels = 20;
    cfg.state_dim = 4;
    cfg
}

/// Moves a freshly initialized model to a generic point. At initialization
/// many gradient coordinates are within a few ulps of zero relative to the
/// loss, where no finite difference can resolve them.
pub fn condition_params(params: &mut ParamStore, rng: &mut impl Rng) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let t = params.get_mut(&name).expect("name from the store");
        if name.ends_with("delta_bias") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        } else if name.ends_with("a_raw") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = inverse_softplus(rng.random_range(0.3..1.5)));
        } else if ["w_proj", "w_out", "w_conv"]
            .iter()
            .any(|k| name.ends_with(k))
        {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        } else {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.25..0.25));
        }
    }
}

/// Gradient check of the sequence-level task loss through a whole model.
pub fn model_check(
    student: bool,
    seed: u64,
    corrupt_analytic: bool,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut model = Model::init(check_model_config(student, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    condition_params(&mut model.params, &mut rng);
    let x = u(&mut rng, &[2, 8, 5, 3]);
    let gc = GradCheckConfig {
        epsilon: MODEL_EPSILON,
        tolerance,
        seed,
        corrupt_analytic,
        ..Default::default()
    };
    let label = if student {
        "student_model"
    } else {
        "teacher_model"
    };
    check_named(label, &model.params.to_named(), &gc, |tape, p| {
        let xv = tape.constant(x.clone());
        let out = model.forward(tape, p, xv)?;
        let z = tape.reshape(out.seq_logits, &[2, 1, 1, 2])?;
        distill::loss_task(tape, z, &[0, 1])
    })
}

/// Every primitive over random trials, then layers, losses and both models.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let primitives = primitives()
        .iter()
        .map(|p| check_primitive(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = layer_checks(cfg)?;
    for student in [false, true] {
        checks.push(model_check(
            student,
            cfg.seed,
            cfg.corrupt_analytic,
            cfg.tolerance,
        )?);
    }
    let pass = primitives.iter().all(|p| p.failures == 0) && checks.iter().all(|c| c.pass);
    Ok(SuiteReport {
        primitives,
        checks,
        pass,
    })
}
