use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// Adam moment estimates for one design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: DMatrix<f64>,
    second: DMatrix<f64>,
    steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            first: DMatrix::zeros(rows, cols),
            second: DMatrix::zeros(rows, cols),
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Update the moments with `gradient` and return the bias-corrected
    /// direction `m_hat / (sqrt(v_hat) + eps)`, without the learning rate.
    pub fn direction(&mut self, gradient: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if gradient.shape() != self.first.shape() {
            return invalid(format!(
                "gradient shape {:?} does not match optimizer state {:?}",
                gradient.shape(),
                self.first.shape()
            ));
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at optimizer step {}", self.steps + 1)));
        }
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.first.zip_apply(gradient, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        self.second.zip_apply(gradient, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let eps = self.eps;
        Ok(self.first.zip_map(&self.second, |m, v| (m / c1) / ((v / c2).sqrt() + eps)))
    }
}

/// One Adam update of size `eta`.
pub fn adam_step(state: &mut AdamState, gradient: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    Ok(state.direction(gradient)? * eta)
}
