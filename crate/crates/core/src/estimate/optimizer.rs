use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::numeric::all_finite;

/// Optimizer selection. Updates are ascent-oriented: `theta += lr * step(g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain gradient ascent, no momentum.
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } = self
        {
            let in_unit = |v: f64| (0.0..1.0).contains(&v);
            if !in_unit(*beta1) || !in_unit(*beta2) || !(*epsilon > 0.0) {
                return Err(Error::invalid_config(
                    "optimizer",
                    "adam needs beta1, beta2 in [0, 1) and epsilon > 0",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Stateful optimizer. A gradient with any non-finite entry skips the whole
/// update and reports it, leaving the parameters and moments untouched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    adam: Option<AdamState>,
    skipped: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            adam: None,
            skipped: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of updates skipped because of non-finite gradients.
    pub fn skipped_updates(&self) -> usize {
        self.skipped
    }

    /// Applies one ascent step; returns whether the update was applied.
    pub fn step(
        &mut self,
        params: &mut ParamVector,
        gradient: &ParamVector,
        lr: f64,
    ) -> Result<bool> {
        if !params.same_layout(gradient) {
            return Err(Error::LayoutMismatch(
                "optimizer gradient vs parameters".into(),
            ));
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !all_finite(gradient.values()) {
            self.skipped += 1;
            return Ok(false);
        }
        match self.kind {
            OptimizerKind::Sgd => {
                params.axpy(lr, gradient)?;
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let n = params.len();
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                if state.m.len() != n {
                    return Err(Error::LayoutMismatch("adam state vs parameters".into()));
                }
                state.t += 1;
                let bc1 = 1.0 - beta1.powi(state.t as i32);
                let bc2 = 1.0 - beta2.powi(state.t as i32);
                for ((p, g), (m, v)) in params
                    .values_mut()
                    .iter_mut()
                    .zip(gradient.values())
                    .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p += lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamLayout, ParamVector};
    use std::sync::Arc;

    fn vector(values: Vec<f64>) -> ParamVector {
        let layout = Arc::new(ParamLayout::new(&[("p", values.len())]));
        ParamVector::from_values(layout, values).unwrap()
    }

    fn gradient_like(params: &ParamVector, values: Vec<f64>) -> ParamVector {
        let mut g = ParamVector::zeros(params.layout().clone());
        g.values_mut().copy_from_slice(&values);
        g
    }

    #[test]
    fn sgd_ascends_by_lr_times_gradient() {
        let mut p = vector(vec![0.0, 1.0, -2.0]);
        let g = gradient_like(&p, vec![1.0, 1.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        assert!(opt.step(&mut p, &g, 0.01).unwrap());
        assert_eq!(p.values(), &[0.01, 1.01, -1.99]);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_for_both_optimizers() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam_default()] {
            let mut p = vector(vec![0.3, -0.7]);
            let g = gradient_like(&p, vec![0.0, 0.0]);
            let mut opt = Optimizer::new(kind);
            opt.step(&mut p, &g, 0.1).unwrap();
            assert_eq!(p.values(), &[0.3, -0.7]);
        }
    }

    #[test]
    fn non_finite_gradient_skips_the_update_and_is_counted() {
        let mut p = vector(vec![0.5]);
        let g = gradient_like(&p, vec![f64::NAN]);
        let mut opt = Optimizer::new(OptimizerKind::adam_default());
        assert!(!opt.step(&mut p, &g, 0.1).unwrap());
        assert_eq!(p.values(), &[0.5]);
        assert_eq!(opt.skipped_updates(), 1);
    }

    /// Scalar reference Adam, written independently of the vectorized code.
    struct RefAdam {
        m: f64,
        v: f64,
        t: u64,
    }

    impl RefAdam {
        fn step(&mut self, theta: f64, g: f64, lr: f64) -> f64 {
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mh = self.m / (1.0 - b1.powi(self.t as i32));
            let vh = self.v / (1.0 - b2.powi(self.t as i32));
            theta + lr * mh / (vh.sqrt() + eps)
        }
    }

    #[test]
    fn adam_matches_scalar_reference_and_converges_on_a_quadratic() {
        // ascend f(theta) = -(theta - 0.0)^2 / 2, gradient -theta
        let mut p = vector(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam_default());
        let mut reference = RefAdam {
            m: 0.0,
            v: 0.0,
            t: 0,
        };
        let mut theta_ref = 1.0;
        let mut converged_at = None;
        for step in 0..5000 {
            let g = gradient_like(&p, vec![-p.values()[0]]);
            opt.step(&mut p, &g, 0.01).unwrap();
            theta_ref = reference.step(theta_ref, -theta_ref, 0.01);
            assert_eq!(p.values()[0].to_bits(), theta_ref.to_bits());
            if converged_at.is_none() && p.values()[0].abs() < 1e-3 {
                converged_at = Some(step);
            }
        }
        assert!(
            converged_at.is_some(),
            "no convergence in 5k steps, theta = {}",
            p.values()[0]
        );
    }
}
