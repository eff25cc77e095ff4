//! Parameterized energy functions with exact analytic gradients.
//!
//! Three families share one interface: [`QuadraticEnergy`] (closed-form
//! Langevin stationary law, used as an oracle fixture), [`GridEnergy`]
//! (piecewise-linear in 1D, linear in its parameters, so it can represent any
//! tabulated energy exactly), and [`MlpEnergy`] (leaky-ReLU multilayer
//! perceptron with either a scalar head or a squared input-reconstruction
//! head).
//!
//! Models are immutable during evaluation; `energy`, `grad_x`, and
//! `grad_theta` are pure and safe to call from many threads. Energies are in
//! natural units: tempering by a ratio rho is applied by samplers and
//! estimators, never baked into the model.

mod mlp;
mod simple;

use std::sync::Arc;

pub use mlp::{MlpEnergy, MlpHead};
pub use simple::{GridEnergy, QuadraticEnergy};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::all_finite;

/// Named segments over a flat parameter vector, e.g. `w0, b0, w1, b1, ...`
/// for an MLP or `center` for a quadratic bowl. Optimizers only ever see the
/// flat vector; the layout exists so model code and diagnostics can address
/// slices by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<(String, usize, usize)>, // (name, offset, len)
    total: usize,
}

impl ParamLayout {
    pub fn new(segment_lens: &[(&str, usize)]) -> Self {
        let mut segments = Vec::with_capacity(segment_lens.len());
        let mut offset = 0;
        for (name, len) in segment_lens {
            segments.push((name.to_string(), offset, *len));
            offset += len;
        }
        ParamLayout {
            segments,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn segment(&self, name: &str) -> Option<(usize, usize)> {
        self.segments
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, o, l)| (*o, *l))
    }

    pub fn segments(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.segments.iter().map(|(n, o, l)| (n.as_str(), *o, *l))
    }
}

/// A flat real vector with a named segment layout.
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "layout holds {} parameters, got {} values",
                layout.total_len(),
                values.len()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .segment(name)
            .map(|(o, l)| &self.values[o..o + l])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::LayoutMismatch(
                "axpy between different layouts".into(),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }
}

/// Head selector plus hyperparameters; see the variants for the families.
#[derive(Debug, Clone)]
pub enum EnergyModel {
    Quadratic(QuadraticEnergy),
    Grid(GridEnergy),
    Mlp(MlpEnergy),
}

impl EnergyModel {
    pub fn input_dim(&self) -> usize {
        match self {
            EnergyModel::Quadratic(m) => m.dim(),
            EnergyModel::Grid(_) => 1,
            EnergyModel::Mlp(m) => m.input_dim(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if !all_finite(x) {
            return Err(Error::NonFinite("evaluation point".into()));
        }
        Ok(())
    }

    fn check_batch(&self, xs: &ArrayView2<f64>) -> Result<()> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: xs.ncols(),
            });
        }
        Ok(())
    }

    /// E_theta(x).
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(match self {
            EnergyModel::Quadratic(m) => m.energy(x),
            EnergyModel::Grid(m) => m.energy(x[0]),
            EnergyModel::Mlp(m) => m.energy(x),
        })
    }

    /// Gradient of the energy with respect to the input point.
    pub fn grad_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match self {
            EnergyModel::Quadratic(m) => m.grad_x(x),
            EnergyModel::Grid(m) => vec![m.grad_x(x[0])],
            EnergyModel::Mlp(m) => m.grad_x(x),
        })
    }

    /// Gradient of the energy with respect to the parameters.
    pub fn grad_theta(&self, x: &[f64]) -> Result<ParamVector> {
        self.check_dim(x)?;
        Ok(match self {
            EnergyModel::Quadratic(m) => m.grad_theta(x),
            EnergyModel::Grid(m) => m.grad_theta(x[0]),
            EnergyModel::Mlp(m) => m.grad_theta(x),
        })
    }

    /// Energies for a batch of points (rows).
    pub fn energy_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_batch(&xs)?;
        Ok(match self {
            EnergyModel::Quadratic(m) => xs.rows().into_iter().map(|r| m.energy_row(r)).collect(),
            EnergyModel::Grid(m) => xs.rows().into_iter().map(|r| m.energy(r[0])).collect(),
            EnergyModel::Mlp(m) => m.energy_batch(xs),
        })
    }

    /// Input gradients for a batch of points, one row per point.
    pub fn grad_x_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&xs)?;
        Ok(match self {
            EnergyModel::Quadratic(m) => {
                let mut g = xs.to_owned();
                for mut row in g.rows_mut() {
                    m.grad_x_row_in_place(&mut row);
                }
                g
            }
            EnergyModel::Grid(m) => {
                let mut g = Array2::zeros((xs.nrows(), 1));
                for (i, r) in xs.rows().into_iter().enumerate() {
                    g[(i, 0)] = m.grad_x(r[0]);
                }
                g
            }
            EnergyModel::Mlp(m) => m.grad_x_batch(xs),
        })
    }

    /// `sum_i weights[i] * grad_theta(x_i)` accumulated in a fixed chunk
    /// order. This is the workhorse of the MLE gradient: both the estimation
    /// term and the data term are weighted sums of per-point parameter
    /// gradients.
    pub fn grad_theta_weighted(&self, xs: ArrayView2<f64>, weights: &[f64]) -> Result<ParamVector> {
        self.check_batch(&xs)?;
        if weights.len() != xs.nrows() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} points",
                weights.len(),
                xs.nrows()
            )));
        }
        match self {
            EnergyModel::Quadratic(m) => {
                let mut acc = ParamVector::zeros(m.layout().clone());
                for (r, &w) in xs.rows().into_iter().zip(weights) {
                    m.grad_theta_row_add(r, w, acc.values_mut());
                }
                Ok(acc)
            }
            EnergyModel::Grid(m) => {
                let mut acc = ParamVector::zeros(m.layout().clone());
                for (r, &w) in xs.rows().into_iter().zip(weights) {
                    m.grad_theta_add(r[0], w, acc.values_mut());
                }
                Ok(acc)
            }
            EnergyModel::Mlp(m) => Ok(m.grad_theta_weighted(xs, weights)),
        }
    }

    pub fn layout(&self) -> Arc<ParamLayout> {
        match self {
            EnergyModel::Quadratic(m) => m.layout().clone(),
            EnergyModel::Grid(m) => m.layout().clone(),
            EnergyModel::Mlp(m) => m.layout().clone(),
        }
    }

    pub fn params(&self) -> ParamVector {
        match self {
            EnergyModel::Quadratic(m) => m.params(),
            EnergyModel::Grid(m) => m.params(),
            EnergyModel::Mlp(m) => m.params().clone(),
        }
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        match self {
            EnergyModel::Quadratic(m) => m.set_params(params),
            EnergyModel::Grid(m) => m.set_params(params),
            EnergyModel::Mlp(m) => m.set_params(params),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
enum Checkpoint {
    Mlp {
        hyperparams: mlp::MlpHyperparams,
        parameters: Vec<f64>,
    },
    Quadratic {
        hyperparams: simple::QuadraticHyperparams,
        parameters: Vec<f64>,
    },
    Grid {
        hyperparams: simple::GridHyperparams,
        parameters: Vec<f64>,
    },
}

impl EnergyModel {
    /// Serializes as `{family, hyperparams, parameters}`. Parameters are
    /// written in shortest-round-trip decimal, so reading the checkpoint back
    /// reproduces each f64 bit-exactly.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = match self {
            EnergyModel::Mlp(m) => Checkpoint::Mlp {
                hyperparams: m.hyperparams(),
                parameters: m.params().values().to_vec(),
            },
            EnergyModel::Quadratic(m) => Checkpoint::Quadratic {
                hyperparams: m.hyperparams(),
                parameters: m.params().values().to_vec(),
            },
            EnergyModel::Grid(m) => Checkpoint::Grid {
                hyperparams: m.hyperparams(),
                parameters: m.params().values().to_vec(),
            },
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        match ck {
            Checkpoint::Mlp {
                hyperparams,
                parameters,
            } => Ok(EnergyModel::Mlp(MlpEnergy::from_hyperparams(
                &hyperparams,
                parameters,
            )?)),
            Checkpoint::Quadratic {
                hyperparams,
                parameters,
            } => Ok(EnergyModel::Quadratic(QuadraticEnergy::new(
                parameters,
                hyperparams.scale,
            )?)),
            Checkpoint::Grid {
                hyperparams,
                parameters,
            } => Ok(EnergyModel::Grid(GridEnergy::new(
                hyperparams.lo,
                hyperparams.hi,
                parameters,
            )?)),
        }
    }

    pub fn write_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn read_checkpoint(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_json(&text)
    }
}

#[cfg(test)]
mod tests;
