use dynstg::autodiff::{grad_check, GradCheckConfig, Tape, Var};
use dynstg::distill::{self, MemoryBank};
use dynstg::graph::{GraphKind, GraphLayer, SkeletonTopology};
use dynstg::harness::gradcheck;
use dynstg::model::Model;
use dynstg::params::Bound;
use dynstg::ssm::StgMambaBlock;
use dynstg::Tensor;

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

fn bound(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

fn check(
    label: &str,
    params: Vec<(String, Tensor)>,
    f: impl Fn(&mut Tape, &Bound) -> dynstg::Result<Var>,
) {
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let report = grad_check(
        label,
        |tape, vars| f(tape, &bound(&names, vars)),
        &params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    for p in &report.params {
        println!(
            "{label} {} max_rel={:.3e} at {} ({} vs {})",
            p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
        );
    }
    assert!(
        report.pass,
        "{label}: max rel error {:.3e}, {:?}",
        report.max_rel_error, report.failure
    );
}

fn squared_sum(tape: &mut Tape, y: Var) -> dynstg::Result<Var> {
    let w = tape.constant(wave(tape.shape(y), 0.3));
    let p = tape.mul(y, w)?;
    let sq = tape.mul(p, y)?;
    Ok(tape.sum_all(sq))
}

#[test]
fn graph_layers_gradient_check() {
    use rand::SeedableRng;
    for kind in [GraphKind::Dynamic, GraphKind::Static] {
        let layer = GraphLayer::new(kind, SkeletonTopology::lower_body(5), 3, 4, "g");
        let mut store = dynstg::params::ParamStore::new();
        layer.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        if kind == GraphKind::Dynamic {
            *store.get_mut("g.f_base").unwrap() = wave(&[5, 5], 1.0);
        }
        let x = wave(&[2, 4, 5, 3], 0.0);
        check(&format!("{kind:?}"), store.to_named(), |tape, p| {
            let xv = tape.constant(x.clone());
            let z = layer.forward(tape, p, xv)?;
            squared_sum(tape, z)
        });
    }
}

#[test]
fn ssm_block_gradient_check() {
    use rand::SeedableRng;
    let block = StgMambaBlock::new(4, 3, 2, 3, "s");
    let mut store = dynstg::params::ParamStore::new();
    block.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5));
    let x = wave(&[2, 6, 4], 0.7);
    check("ssm", store.to_named(), |tape, p| {
        let xv = tape.constant(x.clone());
        let y = block.forward(tape, p, xv)?;
        squared_sum(tape, y)
    });
}

#[test]
fn full_model_gradient_check() {
    for student in [false, true] {
        for seed in 0..3 {
            let report = gradcheck::model_check(student, seed, false, 1e-4).unwrap();
            let names: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
            let expected = Model::init(gradcheck::check_model_config(student, seed)).unwrap();
            assert_eq!(
                names,
                expected
                    .params
                    .names()
                    .map(String::as_str)
                    .collect::<Vec<_>>()
            );
            assert!(
                report.pass,
                "{}: max rel error {:.3e}",
                report.label, report.max_rel_error
            );
        }
    }
}

#[test]
fn corrupted_gradients_are_caught() {
    let report = gradcheck::model_check(true, 0, true, 1e-4).unwrap();
    assert!(!report.pass);
    assert!(report.params.iter().all(|p| p.max_rel_error > 1e-4));
}

#[test]
fn distillation_losses_gradient_check() {
    let fs = wave(&[2, 3, 4], 0.1);
    let rs = wave(&[2, 2, 4], 0.9);
    let zs = wave(&[2, 2, 3, 2], 0.5);
    let ft = wave(&[2, 3, 4], 2.0);
    let rt = wave(&[2, 2, 4], 1.4);
    let zt = wave(&[2, 2, 3, 2], 2.5);
    let mut bank = MemoryBank::new(4, 5).unwrap();
    bank.update(&wave(&[5, 4], 3.0)).unwrap();
    let params = vec![
        ("fs".to_string(), fs),
        ("rs".to_string(), rs),
        ("zs".to_string(), zs),
    ];
    check("cgrkd", params, |tape, p| {
        let (fs, rs, zs) = (p.get("fs")?, p.get("rs")?, p.get("zs")?);
        let (ft, rt, zt) = (
            tape.constant(ft.clone()),
            tape.constant(rt.clone()),
            tape.constant(zt.clone()),
        );
        let parts = [
            distill::loss_task(tape, zs, &[1, 0])?,
            distill::loss_align(tape, zs, zt, 4.0)?,
            distill::loss_intra(tape, fs, ft, 0.5)?,
            distill::loss_memory(tape, fs, &bank, ft, 0.5)?,
            distill::loss_region(tape, fs, rs, ft, rt, 0.5)?,
        ];
        let mut total = parts[0];
        for &part in &parts[1..] {
            total = tape.add(total, part)?;
        }
        Ok(total)
    });
}
