use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{BatchStats, Tape, Var};
use crate::error::{invalid, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Eval,
}

/// Affine parameters and running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    /// Unit scale, zero shift, running mean 0 and variance 1.
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, features, 1.0),
            beta: Matrix::zeros(1, features),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.cols()
    }

    /// Normalizes `x` on the tape. In train mode the running statistics are
    /// updated from this batch.
    pub fn forward<'t>(&mut self, x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, mode: NormMode) -> Result<Var<'t>> {
        if x.shape().1 != self.features() {
            return Err(invalid(format!(
                "batch norm expects {} features, input has {}",
                self.features(),
                x.shape().1
            )));
        }
        match mode {
            NormMode::Train => {
                let (out, stats) = x.batch_norm_train(&gamma, &beta, self.eps)?;
                self.update_running(&stats);
                Ok(out)
            }
            NormMode::Eval => x.batch_norm_eval(&gamma, &beta, &self.running_mean, &self.running_var, self.eps),
        }
    }

    /// Folds one batch into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats) {
        // running variance tracks the unbiased estimate when it exists
        let correction = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for c in 0..self.features() {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * stats.mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * stats.var[c] * correction;
        }
    }
}

/// Matrix-level batch normalization (no gradient tracking).
pub fn batchnorm(x: &Matrix, state: &mut BatchNorm, mode: NormMode) -> Result<Matrix> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(state.gamma.clone());
    let b = tape.constant(state.beta.clone());
    let out = state.forward(xv, g, b, mode)?;
    let value = out.value();
    Ok((*value).clone())
}
