//! Shared gradient checker: central finite differences against the tape.

use sutrack::tape::{Tape, Var};
use sutrack::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

/// Guarded relative error: |a−b| / max(|a|, |b|, 1).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks d(scalar)/d(inputs) for the expression `build` makes, comparing
/// reverse-mode gradients against central differences on every input
/// element. Returns the worst relative error found.
pub fn fd_max_rel_err<F>(build: F, inputs: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars);
    assert_eq!(loss.value().numel(), 1, "gradient check needs a scalar");
    tape.backward(loss).expect("backward failed");
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("input received no gradient"))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        build(&tape, &vars).item()
    };

    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
        }
    }
    worst
}
