//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values on fresh graphs whose
//! inputs are constants, so it never touches the backward code it checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients that are exactly
/// zero analytically compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar produced by `build` w.r.t. every input tensor.
pub fn max_relative_error<F>(inputs: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars)?;
    let analytic = g.grad(loss, &vars)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&g, &vars)?;
        g.scalar_value(loss)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
