//! Central finite-difference gradient checking.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Uniform values in `[-scale, scale]`, deterministic in `seed`.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = stream_rng(seed, 0xC0FFEE, 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..=scale)).collect())
}

/// A scalar that depends on every entry of `y` with distinct weights:
/// mean squared distance to a fixed random target.
pub fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    let target: Arc<[f64]> = random_tensor(&[n], seed, 1.0).into_data().into();
    let weight: Arc<[f64]> = vec![1.0; n].into();
    tape.weighted_mse(y, target, weight, n as f64)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub(crate) fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic gradients of `build` with respect to every entry of
/// `params` against central differences with step `eps`.
pub fn check_gradients(params: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var, eps: f64) -> GradCheckReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work);
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let e = rel_error(a, numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (pi, ei);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}
