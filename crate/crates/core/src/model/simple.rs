//! Analytic fixtures: an isotropic quadratic bowl and a 1D piecewise-linear
//! grid energy. The grid family is linear in its parameters, which makes it
//! exactly parameterizable: any tabulated energy is representable with zero
//! approximation error at the knots.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use super::{ParamLayout, ParamVector};
use crate::error::{Error, Result};
use crate::numeric::all_finite;

/// `E(x) = |x - center|^2 / (2 s^2)`. The center is the trainable parameter;
/// the scale is a hyperparameter.
#[derive(Debug, Clone)]
pub struct QuadraticEnergy {
    center: Vec<f64>,
    scale: f64,
    layout: Arc<ParamLayout>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuadraticHyperparams {
    pub scale: f64,
}

impl QuadraticEnergy {
    pub fn new(center: Vec<f64>, scale: f64) -> Result<Self> {
        if center.is_empty() || !all_finite(&center) {
            return Err(Error::InvalidArgument(
                "quadratic center must be nonempty and finite".into(),
            ));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quadratic scale must be positive, got {scale}"
            )));
        }
        let layout = Arc::new(ParamLayout::new(&[("center", center.len())]));
        Ok(QuadraticEnergy {
            center,
            scale,
            layout,
        })
    }

    /// Standard bowl centered at the origin.
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], scale)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let s2 = self.scale * self.scale;
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            / (2.0 * s2)
    }

    pub fn energy_row(&self, x: ArrayView1<f64>) -> f64 {
        let s2 = self.scale * self.scale;
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            / (2.0 * s2)
    }

    pub fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        let s2 = self.scale * self.scale;
        x.iter().zip(&self.center).map(|(a, c)| (a - c) / s2).collect()
    }

    /// Rewrites a copied input row into its gradient.
    pub fn grad_x_row_in_place(&self, row: &mut ArrayViewMut1<f64>) {
        let s2 = self.scale * self.scale;
        for (v, c) in row.iter_mut().zip(&self.center) {
            *v = (*v - c) / s2;
        }
    }

    pub fn grad_theta(&self, x: &[f64]) -> ParamVector {
        let s2 = self.scale * self.scale;
        let values = x
            .iter()
            .zip(&self.center)
            .map(|(a, c)| -(a - c) / s2)
            .collect();
        ParamVector {
            layout: self.layout.clone(),
            values,
        }
    }

    pub fn grad_theta_row_add(&self, x: ArrayView1<f64>, w: f64, acc: &mut [f64]) {
        let s2 = self.scale * self.scale;
        for ((a, c), g) in x.iter().zip(&self.center).zip(acc) {
            *g += w * -(a - c) / s2;
        }
    }

    pub fn params(&self) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.center.clone(),
        }
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.center.len() {
            return Err(Error::LayoutMismatch("quadratic center length".into()));
        }
        self.center.copy_from_slice(params.values());
        Ok(())
    }

    pub fn hyperparams(&self) -> QuadraticHyperparams {
        QuadraticHyperparams { scale: self.scale }
    }
}

/// Piecewise-linear energy on a uniform 1D knot grid over `[lo, hi]`.
///
/// The knot values are the parameters, so `grad_theta` is the hat-function
/// interpolation weight vector: one-hot exactly at a knot, a two-entry
/// convex pair between knots. Evaluation clamps the query into `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct GridEnergy {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridHyperparams {
    pub lo: f64,
    pub hi: f64,
}

impl GridEnergy {
    pub fn new(lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid domain [{lo}, {hi}] must be a finite interval"
            )));
        }
        if values.len() < 2 {
            return Err(Error::InvalidArgument(
                "grid energy needs at least 2 knots".into(),
            ));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("grid energy values".into()));
        }
        let layout = Arc::new(ParamLayout::new(&[("values", values.len())]));
        Ok(GridEnergy {
            lo,
            hi,
            values,
            layout,
        })
    }

    /// Tabulates `f` at `knots` uniformly spaced points.
    pub fn from_fn(lo: f64, hi: f64, knots: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if knots < 2 {
            return Err(Error::InvalidArgument(
                "grid energy needs at least 2 knots".into(),
            ));
        }
        let h = (hi - lo) / (knots - 1) as f64;
        let values = (0..knots).map(|k| f(lo + k as f64 * h)).collect();
        Self::new(lo, hi, values)
    }

    pub fn n_knots(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.values.len() - 1) as f64
    }

    pub fn knot(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.spacing()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Cell index and barycentric offset for a (clamped) query point.
    fn locate(&self, x: f64) -> (usize, f64) {
        let x = x.clamp(self.lo, self.hi);
        let u = (x - self.lo) / self.spacing();
        let k = (u.floor() as usize).min(self.values.len() - 2);
        (k, u - k as f64)
    }

    pub fn energy(&self, x: f64) -> f64 {
        let (k, t) = self.locate(x);
        (1.0 - t) * self.values[k] + t * self.values[k + 1]
    }

    /// Slope of the active cell; at an interior knot this is the right
    /// cell's slope, at the last knot the left cell's.
    pub fn grad_x(&self, x: f64) -> f64 {
        let (k, _) = self.locate(x);
        (self.values[k + 1] - self.values[k]) / self.spacing()
    }

    pub fn grad_theta(&self, x: f64) -> ParamVector {
        let mut values = vec![0.0; self.values.len()];
        let (k, t) = self.locate(x);
        values[k] = 1.0 - t;
        values[k + 1] = t;
        ParamVector {
            layout: self.layout.clone(),
            values,
        }
    }

    pub fn grad_theta_add(&self, x: f64, w: f64, acc: &mut [f64]) {
        let (k, t) = self.locate(x);
        acc[k] += w * (1.0 - t);
        acc[k + 1] += w * t;
    }

    pub fn params(&self) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.clone(),
        }
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.values.len() {
            return Err(Error::LayoutMismatch("grid value count".into()));
        }
        self.values.copy_from_slice(params.values());
        Ok(())
    }

    pub fn hyperparams(&self) -> GridHyperparams {
        GridHyperparams {
            lo: self.lo,
            hi: self.hi,
        }
    }
}
