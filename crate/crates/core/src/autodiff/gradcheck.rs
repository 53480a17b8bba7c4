//! Finite-difference gradient checking: central differences at steps `h` and
//! `h/2` combined by Richardson extrapolation, which cancels the `h²` error
//! term and allows a step large enough to keep rounding noise small.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every adjoint implemented on the tape.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// derivative is ~0 are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub max_rel_err: f64,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of `f` with central differences over every
/// coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut num = Tensor::zeros(input.rows(), input.cols());
        for k in 0..input.len() {
            let orig = input.data()[k];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[k] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[k] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[k] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let (coarse, fine) = (central(step)?, central(0.5 * step)?);
            let d = (4.0 * fine - coarse) / 3.0;
            num.data_mut()[k] = d;
            max_rel_err = max_rel_err.max(rel_err(analytic[i].data()[k], d));
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
    })
}
