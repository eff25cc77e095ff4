//! Leaky-ReLU multilayer perceptron energies with hand-rolled reverse-mode
//! gradients. Batched entry points run the forward/backward passes as dense
//! matrix products over fixed row chunks, so large batches use the fast GEMM
//! path while results stay independent of thread count.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ParamLayout, ParamVector};
use crate::error::{Error, Result};
use crate::numeric::{add_assign, par_chunk_map};

/// Output head of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpHead {
    /// Final layer has one unit; the energy is its raw output.
    Scalar,
    /// Final layer has as many units as the input; the energy is
    /// `|x - f(x)|^2`.
    SquaredReconstruction,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MlpHyperparams {
    pub widths: Vec<usize>,
    pub slope: f64,
    pub head: MlpHead,
}

/// MLP energy: `widths = [input, hidden..., output]`, leaky-ReLU activations
/// on hidden layers, linear final layer, then the head.
#[derive(Debug, Clone)]
pub struct MlpEnergy {
    widths: Vec<usize>,
    slope: f64,
    head: MlpHead,
    params: ParamVector,
}

impl MlpEnergy {
    /// Validates shapes and wraps the given flat parameters.
    pub fn with_params(
        widths: Vec<usize>,
        slope: f64,
        head: MlpHead,
        values: Vec<f64>,
    ) -> Result<Self> {
        let layout = Self::validate(&widths, slope, head)?;
        let params = ParamVector::from_values(layout, values)?;
        Ok(MlpEnergy {
            widths,
            slope,
            head,
            params,
        })
    }

    /// Fresh network with weights uniform in `[-a, a]`,
    /// `a = sqrt(6 / (fan_in + fan_out))`, and zero biases.
    pub fn init(
        widths: Vec<usize>,
        slope: f64,
        head: MlpHead,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let layout = Self::validate(&widths, slope, head)?;
        let mut values = vec![0.0; layout.total_len()];
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (off, len) = layout.segment(&format!("w{l}")).expect("weight segment");
            for v in &mut values[off..off + len] {
                *v = rng.random_range(-a..a);
            }
        }
        let params = ParamVector::from_values(layout, values)?;
        Ok(MlpEnergy {
            widths,
            slope,
            head,
            params,
        })
    }

    pub fn from_hyperparams(hp: &MlpHyperparams, values: Vec<f64>) -> Result<Self> {
        Self::with_params(hp.widths.clone(), hp.slope, hp.head, values)
    }

    fn validate(widths: &[usize], slope: f64, head: MlpHead) -> Result<Arc<ParamLayout>> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "mlp widths must be >= 2 positive entries, got {widths:?}"
            )));
        }
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope must lie in (0, 1), got {slope}"
            )));
        }
        match head {
            MlpHead::Scalar if *widths.last().unwrap() != 1 => {
                return Err(Error::InvalidArgument(
                    "scalar head requires output width 1".into(),
                ));
            }
            MlpHead::SquaredReconstruction if widths.last() != widths.first() => {
                return Err(Error::InvalidArgument(
                    "reconstruction head requires output width == input width".into(),
                ));
            }
            _ => {}
        }
        let mut segs: Vec<(String, usize)> = Vec::new();
        for l in 0..widths.len() - 1 {
            segs.push((format!("w{l}"), widths[l + 1] * widths[l]));
            segs.push((format!("b{l}"), widths[l + 1]));
        }
        let borrowed: Vec<(&str, usize)> = segs.iter().map(|(n, l)| (n.as_str(), *l)).collect();
        Ok(Arc::new(ParamLayout::new(&borrowed)))
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn head(&self) -> MlpHead {
        self.head
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        self.params.layout()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if !self.params.same_layout(params) {
            return Err(Error::LayoutMismatch("mlp parameters".into()));
        }
        self.params.values_mut().copy_from_slice(params.values());
        Ok(())
    }

    pub fn hyperparams(&self) -> MlpHyperparams {
        MlpHyperparams {
            widths: self.widths.clone(),
            slope: self.slope,
            head: self.head,
        }
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (off, len) = self.params.layout().segment(&format!("w{l}")).unwrap();
        ArrayView2::from_shape(
            (self.widths[l + 1], self.widths[l]),
            &self.params.values()[off..off + len],
        )
        .unwrap()
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (off, len) = self.params.layout().segment(&format!("b{l}")).unwrap();
        &self.params.values()[off..off + len]
    }

    fn leaky(&self, z: f64) -> f64 {
        if z >= 0.0 {
            z
        } else {
            self.slope * z
        }
    }

    // Convention at the kink: z == 0 takes the positive branch.
    fn leaky_deriv(&self, z: f64) -> f64 {
        if z >= 0.0 {
            1.0
        } else {
            self.slope
        }
    }

    /// Forward pass keeping post-activations (`acts[l]` feeds layer `l`) and
    /// pre-activations of hidden layers for the backward pass.
    fn forward(&self, xs: ArrayView2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let n_layers = self.n_layers();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
        let mut pres: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        acts.push(xs.to_owned());
        for l in 0..n_layers {
            let bias = Array1::from_vec(self.bias(l).to_vec());
            let mut z = acts[l].dot(&self.weight(l).t());
            z += &bias;
            if l < n_layers - 1 {
                let mut a = z.clone();
                a.mapv_inplace(|v| self.leaky(v));
                pres.push(z);
                acts.push(a);
            } else {
                pres.push(z.clone());
                acts.push(z);
            }
        }
        (acts, pres)
    }

    fn head_energy(&self, xs: ArrayView2<f64>, out: &Array2<f64>) -> Vec<f64> {
        match self.head {
            MlpHead::Scalar => out.column(0).to_vec(),
            MlpHead::SquaredReconstruction => xs
                .rows()
                .into_iter()
                .zip(out.rows())
                .map(|(x, f)| x.iter().zip(f.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect(),
        }
    }

    /// dE/d(out) per point; rows optionally scaled by a per-point weight.
    fn head_delta(
        &self,
        xs: ArrayView2<f64>,
        out: &Array2<f64>,
        weights: Option<&[f64]>,
    ) -> Array2<f64> {
        let mut delta = match self.head {
            MlpHead::Scalar => Array2::ones((xs.nrows(), 1)),
            MlpHead::SquaredReconstruction => {
                let mut d = out - &xs;
                d.mapv_inplace(|v| 2.0 * v);
                d
            }
        };
        if let Some(w) = weights {
            for (mut row, &wi) in delta.rows_mut().into_iter().zip(w) {
                row.mapv_inplace(|v| v * wi);
            }
        }
        delta
    }

    fn energy_chunk(&self, xs: ArrayView2<f64>) -> Vec<f64> {
        let (acts, _) = self.forward(xs);
        self.head_energy(xs, acts.last().unwrap())
    }

    pub fn energy_batch(&self, xs: ArrayView2<f64>) -> Vec<f64> {
        let chunks = par_chunk_map(xs.nrows(), |r| {
            self.energy_chunk(xs.slice(ndarray::s![r.start..r.end, ..]))
        });
        chunks.into_iter().flatten().collect()
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        self.energy_chunk(view)[0]
    }

    /// Backpropagates the head delta down to the input; returns d^0 W_0
    /// (plus the direct reconstruction term when applicable).
    fn grad_x_chunk(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let n_layers = self.n_layers();
        let (acts, pres) = self.forward(xs);
        let mut delta = self.head_delta(xs, acts.last().unwrap(), None);
        for l in (0..n_layers).rev() {
            if l < n_layers - 1 {
                // activation derivative of the hidden layer output feeding W_{l+1}
                delta.zip_mut_with(&pres[l], |d, &z| *d *= self.leaky_deriv(z));
            }
            if l == 0 {
                let mut g = delta.dot(&self.weight(0));
                if self.head == MlpHead::SquaredReconstruction {
                    let mut direct = &xs - acts.last().unwrap();
                    direct.mapv_inplace(|v| 2.0 * v);
                    g += &direct;
                }
                return g;
            }
            delta = delta.dot(&self.weight(l));
        }
        unreachable!("n_layers >= 1")
    }

    pub fn grad_x_batch(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let chunks = par_chunk_map(xs.nrows(), |r| {
            self.grad_x_chunk(xs.slice(ndarray::s![r.start..r.end, ..]))
        });
        let mut g = Array2::zeros((xs.nrows(), xs.ncols()));
        let mut row = 0;
        for c in chunks {
            let n = c.nrows();
            g.slice_mut(ndarray::s![row..row + n, ..]).assign(&c);
            row += n;
        }
        g
    }

    pub fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        self.grad_x_chunk(view).row(0).to_vec()
    }

    /// Weighted parameter-gradient sum over one row chunk, flattened in
    /// layout order.
    fn grad_theta_chunk(&self, xs: ArrayView2<f64>, weights: &[f64]) -> Vec<f64> {
        let n_layers = self.n_layers();
        let (acts, pres) = self.forward(xs);
        let mut flat = vec![0.0; self.params.len()];
        let mut delta = self.head_delta(xs, acts.last().unwrap(), Some(weights));
        for l in (0..n_layers).rev() {
            if l < n_layers - 1 {
                delta.zip_mut_with(&pres[l], |d, &z| *d *= self.leaky_deriv(z));
            }
            // dW_l = delta^T acts[l]; db_l = column sums of delta
            let dw = delta.t().dot(&acts[l]);
            let (woff, wlen) = self.params.layout().segment(&format!("w{l}")).unwrap();
            for (dst, src) in flat[woff..woff + wlen].iter_mut().zip(dw.iter()) {
                *dst = *src;
            }
            let db = delta.sum_axis(Axis(0));
            let (boff, blen) = self.params.layout().segment(&format!("b{l}")).unwrap();
            for (dst, src) in flat[boff..boff + blen].iter_mut().zip(db.iter()) {
                *dst = *src;
            }
            if l > 0 {
                delta = delta.dot(&self.weight(l));
            }
        }
        flat
    }

    pub fn grad_theta_weighted(&self, xs: ArrayView2<f64>, weights: &[f64]) -> ParamVector {
        let chunks = par_chunk_map(xs.nrows(), |r| {
            self.grad_theta_chunk(
                xs.slice(ndarray::s![r.start..r.end, ..]),
                &weights[r.start..r.end],
            )
        });
        let mut acc = ParamVector::zeros(self.params.layout().clone());
        for c in chunks {
            add_assign(acc.values_mut(), &c);
        }
        acc
    }

    pub fn grad_theta(&self, x: &[f64]) -> ParamVector {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let flat = self.grad_theta_chunk(view, &[1.0]);
        // gradients may carry non-finite entries; downstream consumers decide
        let mut g = ParamVector::zeros(self.params.layout().clone());
        g.values_mut().copy_from_slice(&flat);
        g
    }
}
