//! Central finite-difference verification of analytic gradients.
//!
//! The checker re-runs the graph builder for every perturbed element,
//! so builders must be pure functions of their inputs (fixed rng
//! seeds inside closures are fine; fresh entropy is not).

use ndarray::ArrayD;

use super::tensor::{Tape, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Relative error as |a - n| / max(|a|, |n|, 1), the scale-aware
/// comparison every gradient check in the crate uses.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Checks d loss / d inputs for a graph builder against central
/// differences. Returns the maximum relative error over every element
/// of every input.
pub fn check_gradients<F>(build: F, inputs: &[ArrayD<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[ArrayD<f64>]| -> Result<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    // Analytic pass.
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(tape.value(*v).raw_dim()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = probe[ii].as_slice_mut().unwrap()[idx];
            probe[ii].as_slice_mut().unwrap()[idx] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[ii].as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[ii].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ii].as_slice().unwrap()[idx];
            worst = worst.max(rel_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Central-difference gradient of a scalar function, element by
/// element; the oracle used where a full graph is unnecessary.
pub fn numeric_gradient<F>(mut f: F, x: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = ArrayD::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + step;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * step);
    }
    grad
}

/// Shared tolerance for all finite-difference suites.
pub const FD_TOL: f64 = 1e-4;

pub fn assert_close(err: f64) {
    assert!(err < FD_TOL, "max relative gradient error {err} >= {FD_TOL}");
}
