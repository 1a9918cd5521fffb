//! Finite-difference gradient checks in 64-bit arithmetic.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for the recorded backward rules.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, 1e-4)` over all entries.
///
/// The floor keeps entries whose true gradient is (near) zero from turning
/// rounding noise into a large ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub max_relative_error: f64,
}

/// Compares tape gradients of a scalar built by `build` against central
/// differences for every element of every input.
pub fn check_tape<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |which: usize, data: &[f64]| -> f64 {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    tape.leaf(&Tensor::new(t.shape().to_vec(), data.to_vec()).expect("shape"))
                } else {
                    tape.leaf(t)
                }
            })
            .collect();
        let out = build(&mut tape, &vars).expect("forward succeeded once already");
        tape.scalar(out)
    };
    let numeric: Vec<Vec<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| numeric_grad(|x| eval(i, x), t.data(), h))
        .collect();
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_relative_error,
    })
}
