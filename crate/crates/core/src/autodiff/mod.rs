//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Model
//! parameters live outside the tape and are re-registered as leaves for each
//! step, so a tape never outlives the step that built it.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, Tensor};

/// Rows with norm at or below this are rejected by normalization.
pub const NORM_EPS: f64 = 1e-12;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature running mean/variance tracked by a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Folds one batch in; `var` is the biased batch variance and is stored
    /// unbiased.
    pub(crate) fn update(&mut self, mean: &[f64], var: &[f64], batch: usize) {
        let correction = batch as f64 / (batch as f64 - 1.0);
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}
