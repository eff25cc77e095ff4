//! Self-normalized importance weights, assembly of the maximum-likelihood
//! gradient, parameter optimizers, and the three training loops (short-run
//! LMC, Riemann/SNIS, persistent-stochastic support partitioning).

mod optimizer;
mod train;

pub use optimizer::{Optimizer, OptimizerKind};
pub use train::{
    riemann_grid_1d, train, EarlyStopConfig, MethodConfig, ParticleInit, SnapshotRecord,
    TraceRecord, TrainConfig, TrainOutput, TrainTrace,
};

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::model::{EnergyModel, ParamVector};
use crate::numeric::log_sum_exp;

/// Normalized self-importance weights over a point set, kept in both log and
/// linear form. Weights are nonnegative and sum to one (up to rounding).
#[derive(Debug, Clone)]
pub struct WeightVector {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightVector {
    /// Softmax of `-rho * energy`: `w_i = exp(-rho E_i) / sum_j exp(-rho E_j)`,
    /// evaluated through a log-sum-exp.
    pub fn from_energies(energies: &[f64], rho: f64) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::InvalidArgument(
                "weights need at least one point".into(),
            ));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite(
                "energies for importance weights (diverged or unevaluable points)".into(),
            ));
        }
        let scaled: Vec<f64> = energies.iter().map(|e| -rho * e).collect();
        let norm = log_sum_exp(&scaled);
        let log_weights: Vec<f64> = scaled.iter().map(|l| l - norm).collect();
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        Ok(WeightVector {
            log_weights,
            weights,
        })
    }

    /// Equal weights `1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "weights need at least one point".into(),
            ));
        }
        let w = 1.0 / n as f64;
        Ok(WeightVector {
            log_weights: vec![w.ln(); n],
            weights: vec![w; n],
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Eq-7 weights at the natural temperature (`rho = 1`).
pub fn snis_weights(model: &EnergyModel, points: ArrayView2<f64>) -> Result<WeightVector> {
    let energies = model.energy_batch(points)?;
    WeightVector::from_energies(&energies, 1.0)
}

/// `sum_i w_i x_i` over rows.
pub fn weighted_mean(points: ArrayView2<f64>, weights: &WeightVector) -> Result<Vec<f64>> {
    if points.nrows() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} points",
            weights.len(),
            points.nrows()
        )));
    }
    let mut mean = vec![0.0; points.ncols()];
    for (row, &w) in points.rows().into_iter().zip(weights.weights()) {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += w * v;
        }
    }
    Ok(mean)
}

/// Ascent-oriented maximum-likelihood gradient estimate:
/// `sum_i w_i grad_theta E(u_i) - (1/|B|) sum_j grad_theta E(x_j)`.
///
/// Both terms run through the same weighted accumulation, so when the
/// estimation points literally are the data batch the result is exactly
/// zero.
pub fn mle_gradient(
    model: &EnergyModel,
    weights: &WeightVector,
    points: ArrayView2<f64>,
    data_batch: ArrayView2<f64>,
) -> Result<ParamVector> {
    if weights.len() != points.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} estimation points",
            weights.len(),
            points.nrows()
        )));
    }
    if data_batch.nrows() == 0 {
        return Err(Error::InvalidArgument("empty data batch".into()));
    }
    let mut grad = model.grad_theta_weighted(points, weights.weights())?;
    let n_data = data_batch.nrows();
    let data_weights = vec![1.0 / n_data as f64; n_data];
    let data_term = model.grad_theta_weighted(data_batch, &data_weights)?;
    grad.axpy(-1.0, &data_term)?;
    Ok(grad)
}
