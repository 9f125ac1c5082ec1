//! Reverse-mode gradients of a small expression, checked by central
//! differences.

use dynstg::autodiff::{grad_check, GradCheckConfig, Tape};
use dynstg::Tensor;

fn main() -> dynstg::Result<()> {
    let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5])?;
    let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, -1.0])?;

    let mut tape = Tape::new();
    let (wv, xv) = (tape.param(w.clone()), tape.constant(x.clone()));
    let h = tape.matmul(wv, xv)?;
    let a = tape.silu(h);
    let loss = tape.sum_all(a);
    tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).data()[0]);
    println!("dloss/dw {:?}", tape.grad(wv).unwrap().data());

    let report = grad_check(
        "silu(w x)",
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(vars[0], xv)?;
            let a = tape.silu(h);
            Ok(tape.sum_all(a))
        },
        &[("w".into(), w)],
        &GradCheckConfig::default(),
    )?;
    println!(
        "max relative error {:.2e}, pass {}",
        report.max_rel_error, report.pass
    );
    Ok(())
}
