//! Langevin Monte Carlo with decoupled step size and noise scale, short-run
//! truncation, and the replay-buffer initialization protocol.
//!
//! The update is `x' = x - (alpha/2) grad E(x) + sqrt(beta) eps` with
//! `eps ~ N(0, I)` per chain. With `alpha == beta` this is canonical LMC;
//! with a constant ratio `rho = alpha/beta` the chain targets the tempered
//! law `exp(-rho E) / Z(theta, rho)` in the long run. Chains carry their own
//! ChaCha streams, so batches can be advanced in parallel and still produce
//! results that are a pure function of `(model, config, seed)`.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{BoxDomain, Proposal};
use crate::error::{Error, Result};
use crate::model::EnergyModel;
use crate::numeric::all_finite;

/// Constant or per-step coefficient sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl Schedule {
    pub fn value(&self, t: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::PerStep(vs) => vs[t],
        }
    }

    fn check(&self, steps: usize, name: &str, allow_zero: bool) -> Result<()> {
        let ok = |v: f64| v.is_finite() && (v > 0.0 || (allow_zero && v == 0.0));
        match self {
            Schedule::Constant(v) if ok(*v) => Ok(()),
            Schedule::PerStep(vs) if vs.len() == steps && vs.iter().all(|v| ok(*v)) => Ok(()),
            Schedule::PerStep(vs) if vs.len() != steps => Err(Error::invalid_config(
                name,
                format!("schedule has {} entries for {} steps", vs.len(), steps),
            )),
            _ => Err(Error::invalid_config(
                name,
                if allow_zero {
                    "entries must be finite and >= 0"
                } else {
                    "entries must be finite and > 0"
                },
            )),
        }
    }
}

/// Short-run LMC configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmcConfig {
    /// Number of steps T.
    pub steps: usize,
    /// Gradient coefficient schedule (alpha).
    pub alpha: Schedule,
    /// Noise coefficient schedule (beta).
    pub beta: Schedule,
    /// Declared constant alpha/beta ratio; validated against the schedules
    /// when present so tempering analyses can rely on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Positions are clamped into this box after every step when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<BoxDomain>,
    /// Per-chain gradient L2 clipping (off by default).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl LmcConfig {
    pub fn constant(steps: usize, alpha: f64, beta: f64) -> Self {
        LmcConfig {
            steps,
            alpha: Schedule::Constant(alpha),
            beta: Schedule::Constant(beta),
            rho: None,
            clamp: None,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid_config("steps", "must be >= 1"));
        }
        self.alpha.check(self.steps, "alpha", false)?;
        self.beta.check(self.steps, "beta", true)?;
        if let Some(rho) = self.rho {
            for t in 0..self.steps {
                let b = self.beta.value(t);
                if b == 0.0 {
                    return Err(Error::invalid_config(
                        "rho",
                        "declared ratio needs beta > 0 at every step",
                    ));
                }
                if (self.alpha.value(t) / b - rho).abs() >= 1e-12 {
                    return Err(Error::invalid_config(
                        "rho",
                        format!("alpha_t/beta_t deviates from declared rho at step {t}"),
                    ));
                }
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid_config("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

/// A batch of chains: positions, the ChaCha stream id owned by each chain,
/// and divergence flags. Diverged chains stop moving and are excluded from
/// downstream estimates.
#[derive(Debug, Clone)]
pub struct ChainBatch {
    pub positions: Array2<f64>,
    pub stream_ids: Vec<u64>,
    pub diverged: Vec<bool>,
}

impl ChainBatch {
    pub fn new(positions: Array2<f64>) -> Self {
        let n = positions.nrows();
        ChainBatch {
            positions,
            stream_ids: (0..n as u64).collect(),
            diverged: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn diverged_count(&self) -> usize {
        self.diverged.iter().filter(|d| **d).count()
    }

    /// Rows of the non-diverged chains.
    pub fn live_positions(&self) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.len()).filter(|i| !self.diverged[*i]).collect();
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (dst, src) in rows.iter().enumerate() {
            out.row_mut(dst).assign(&self.positions.row(*src));
        }
        out
    }
}

/// One ChaCha stream per chain, all derived from the run seed.
pub fn chain_rngs(seed: u64, stream_ids: &[u64]) -> Vec<ChaCha8Rng> {
    stream_ids
        .iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(*id);
            rng
        })
        .collect()
}

/// One decoupled Langevin step on every live chain. Noise is drawn from each
/// chain's own stream even when `beta == 0`, so configs differing only in
/// beta share gradient trajectories.
pub fn lmc_step(
    model: &EnergyModel,
    batch: &mut ChainBatch,
    alpha: f64,
    beta: f64,
    rngs: &mut [ChaCha8Rng],
    clamp: Option<&BoxDomain>,
    grad_clip: Option<f64>,
) -> Result<()> {
    if !(alpha > 0.0) || beta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lmc step needs alpha > 0 and beta >= 0, got ({alpha}, {beta})"
        )));
    }
    if rngs.len() != batch.len() {
        return Err(Error::InvalidArgument(
            "one rng stream per chain required".into(),
        ));
    }
    let grads = model.grad_x_batch(batch.positions.view())?;
    let noise_scale = beta.sqrt();
    let dim = batch.dim();

    let mut rows: Vec<_> = batch.positions.rows_mut().into_iter().collect();
    let grad_rows: Vec<_> = grads.rows().into_iter().collect();
    rows.par_iter_mut()
        .zip(grad_rows)
        .zip(rngs.par_iter_mut())
        .zip(batch.diverged.par_iter_mut())
        .for_each(|(((row, grad), rng), diverged)| {
            // keep stream alignment: draw noise before any early exit
            let eps: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            if *diverged {
                return;
            }
            if !grad.iter().all(|g| g.is_finite()) {
                *diverged = true;
                return;
            }
            let clip_scale = match grad_clip {
                Some(max_norm) => {
                    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > max_norm {
                        max_norm / norm
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            for ((x, g), e) in row.iter_mut().zip(grad.iter()).zip(&eps) {
                *x += -0.5 * alpha * clip_scale * g + noise_scale * e;
            }
            if let Some(domain) = clamp {
                if let Some(slice) = row.as_slice_mut() {
                    domain.clamp_point(slice);
                }
            }
        });
    Ok(())
}

/// Output of a short-run pass: final batch plus per-chain displacement
/// diagnostics.
#[derive(Debug)]
pub struct SrlmcOutput {
    pub batch: ChainBatch,
    /// Euclidean distance from each chain's initialization to its final
    /// position.
    pub displacement: Vec<f64>,
    pub diverged_count: usize,
}

/// Composes `config.steps` decoupled LMC steps starting from `init`.
pub fn run_srlmc(
    model: &EnergyModel,
    init: ChainBatch,
    config: &LmcConfig,
    seed: u64,
) -> Result<SrlmcOutput> {
    config.validate()?;
    let start = init.positions.clone();
    let mut batch = init;
    let mut rngs = chain_rngs(seed, &batch.stream_ids);
    for t in 0..config.steps {
        lmc_step(
            model,
            &mut batch,
            config.alpha.value(t),
            config.beta.value(t),
            &mut rngs,
            config.clamp.as_ref(),
            config.grad_clip,
        )?;
    }
    let displacement = (0..batch.len())
        .map(|i| {
            start
                .row(i)
                .iter()
                .zip(batch.positions.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let diverged_count = batch.diverged_count();
    Ok(SrlmcOutput {
        batch,
        displacement,
        diverged_count,
    })
}

/// FIFO store of past short-run outputs, mixed with fresh proposal draws at
/// the reinitialization rate when chains are (re)started.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    reinit_rate: f64,
    store: VecDeque<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, reinit_rate: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid_config("buffer.capacity", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&reinit_rate) {
            return Err(Error::invalid_config(
                "buffer.reinit_rate",
                "must lie in [0, 1]",
            ));
        }
        Ok(ReplayBuffer {
            capacity,
            reinit_rate,
            store: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reinit_rate(&self) -> f64 {
        self.reinit_rate
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.store.iter()
    }

    /// Appends rows; evicts the oldest entries beyond capacity.
    pub fn push(&mut self, batch: ArrayView2<f64>) {
        for row in batch.rows() {
            if self.store.len() == self.capacity {
                self.store.pop_front();
            }
            self.store.push_back(row.to_vec());
        }
    }

    /// Each returned row is an independent proposal draw with probability
    /// `reinit_rate`, otherwise a uniformly chosen buffer entry. An empty
    /// buffer yields proposal draws only.
    pub fn draw_init(
        &self,
        proposal: &Proposal,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<ChainBatch> {
        if count == 0 {
            return Err(Error::InvalidArgument("draw_init needs count >= 1".into()));
        }
        proposal.validate()?;
        let dim = proposal.dim();
        let mut positions = Array2::zeros((count, dim));
        for mut row in positions.rows_mut() {
            let from_proposal = self.store.is_empty() || rng.random::<f64>() < self.reinit_rate;
            let p = if from_proposal {
                proposal.sample_one(rng)
            } else {
                let idx = rng.random_range(0..self.store.len());
                self.store[idx].clone()
            };
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            for (dst, src) in row.iter_mut().zip(&p) {
                *dst = *src;
            }
        }
        Ok(ChainBatch::new(positions))
    }

    /// Drops any stored entries with non-finite coordinates.
    pub fn retain_finite(&mut self) {
        self.store.retain(|p| all_finite(p));
    }
}
