use std::io::Write as IoWrite;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{mle_gradient, snis_weights, Optimizer, OptimizerKind, WeightVector};
use crate::dist::{quadrature_normalize, tv_distance, BoxDomain, DensityGrid, GaussianMixture,
    Proposal};
use crate::error::{Error, Result};
use crate::model::EnergyModel;
use crate::sampler::{run_srlmc, LmcConfig, ReplayBuffer};
use crate::usp::{psusp_round, select_estimation_points, ParticleSet, UspConfig};

/// How the persistent particle set is seeded.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParticleInit {
    /// Draws from an explicit proposal (clamped into the domain).
    Proposal { proposal: Proposal },
    /// Draws from the target itself.
    DataSamples,
}

/// Estimation-point source for the negative-phase term.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodConfig {
    /// Short-run LMC chains initialized through the replay-buffer protocol;
    /// the expectation uses equal weights over surviving chains.
    Srlmc {
        lmc: LmcConfig,
        buffer_capacity: usize,
        reinit_rate: f64,
        proposal: Proposal,
        /// Chain count; defaults to the batch size.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chains: Option<usize>,
    },
    /// Deterministic uniform grid (1D) or fresh i.i.d. uniform draws (2D+)
    /// over the domain, reweighted by self-normalized importance weights.
    Riemann { points: usize },
    /// Persistent stochastic support partitioning; the estimation subset is
    /// reweighted by self-normalized importance weights.
    Psusp {
        usp: UspConfig,
        particles: usize,
        epsilon: f64,
        init: ParticleInit,
    },
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Srlmc { .. } => "srlmc",
            MethodConfig::Riemann { .. } => "riemann",
            MethodConfig::Psusp { .. } => "psusp",
        }
    }
}

/// Stop when the windowed mean gradient norm stops moving.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EarlyStopConfig {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            window: 500,
            rel_tol: 1e-3,
        }
    }
}

fn default_snapshot_every() -> Option<usize> {
    Some(100)
}

/// Full training configuration shared by the three methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: MethodConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    /// Compact domain carrying the estimation points; chains are clamped to
    /// it through their own `LmcConfig.clamp`.
    pub domain: BoxDomain,
    /// Gaussian noise added to data batches (off unless set).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_noise_std: Option<f64>,
    /// Iterations between TV-to-target snapshots; `None` disables them.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStopConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid_config("learning_rate", "must be positive"));
        }
        self.optimizer.validate()?;
        if let Some(s) = self.data_noise_std {
            if !(s >= 0.0) {
                return Err(Error::invalid_config("data_noise_std", "must be >= 0"));
            }
        }
        if let Some(es) = &self.early_stop {
            if es.window == 0 || !(es.rel_tol > 0.0) {
                return Err(Error::invalid_config(
                    "early_stop",
                    "window must be >= 1 and rel_tol > 0",
                ));
            }
        }
        match &self.method {
            MethodConfig::Srlmc {
                lmc,
                buffer_capacity,
                reinit_rate,
                proposal,
                chains,
            } => {
                lmc.validate()?;
                if *buffer_capacity == 0 {
                    return Err(Error::invalid_config("method.buffer_capacity", "must be >= 1"));
                }
                if !(0.0..=1.0).contains(reinit_rate) {
                    return Err(Error::invalid_config(
                        "method.reinit_rate",
                        "must lie in [0, 1]",
                    ));
                }
                proposal.validate()?;
                if proposal.dim() != self.domain.dim() {
                    return Err(Error::invalid_config(
                        "method.proposal",
                        "dimension differs from the domain",
                    ));
                }
                if chains == &Some(0) {
                    return Err(Error::invalid_config("method.chains", "must be >= 1"));
                }
            }
            MethodConfig::Riemann { points } => {
                if *points == 0 {
                    return Err(Error::invalid_config("method.points", "must be >= 1"));
                }
            }
            MethodConfig::Psusp {
                usp,
                particles,
                epsilon,
                init,
            } => {
                if *particles == 0 {
                    return Err(Error::invalid_config("method.particles", "must be >= 1"));
                }
                if !(*epsilon > 0.0) {
                    return Err(Error::invalid_config("method.epsilon", "must be > 0"));
                }
                usp.validate(*particles)?;
                if let ParticleInit::Proposal { proposal } = init {
                    proposal.validate()?;
                    if proposal.dim() != self.domain.dim() {
                        return Err(Error::invalid_config(
                            "method.init.proposal",
                            "dimension differs from the domain",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRecord {
    pub iteration: usize,
    pub grad_norm: f64,
    pub diverged_chains: usize,
}

/// Periodic density-match snapshot.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotRecord {
    pub iteration: usize,
    pub tv_to_target: f64,
}

/// Gradient norms, divergence counts, and periodic TV snapshots collected
/// during training. CSVs carry only seed-deterministic columns; wall time is
/// reported separately so identical runs stay byte-identical.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<SnapshotRecord>,
    pub total_diverged: usize,
    pub skipped_updates: usize,
    pub usp_nonfinite_gradients: usize,
    pub early_stopped_at: Option<usize>,
    pub wall_time_s: f64,
}

impl TrainTrace {
    pub fn final_grad_norm(&self) -> Option<f64> {
        self.records.last().map(|r| r.grad_norm)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iteration,grad_norm,diverged_chains")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{}",
                r.iteration,
                crate::numeric::fmt_g17(r.grad_norm),
                r.diverged_chains
            )?;
        }
        Ok(())
    }

    pub fn write_snapshots_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iteration,tv_to_target")?;
        for s in &self.snapshots {
            writeln!(
                f,
                "{},{}",
                s.iteration,
                crate::numeric::fmt_g17(s.tv_to_target)
            )?;
        }
        Ok(())
    }
}

/// Trained model plus diagnostics and the method's persistent state.
#[derive(Debug)]
pub struct TrainOutput {
    pub model: EnergyModel,
    pub trace: TrainTrace,
    pub buffer: Option<ReplayBuffer>,
    pub particles: Option<ParticleSet>,
}

/// Midpoints of `n` uniform cells over a 1D domain.
pub fn riemann_grid_1d(domain: &BoxDomain, n: usize) -> Array2<f64> {
    let (lo, hi) = (domain.lo()[0], domain.hi()[0]);
    let h = (hi - lo) / n as f64;
    let mut pts = Array2::zeros((n, 1));
    for (k, mut row) in pts.rows_mut().into_iter().enumerate() {
        row[0] = lo + (k as f64 + 0.5) * h;
    }
    pts
}

fn snapshot_resolution(dim: usize) -> Vec<usize> {
    match dim {
        1 => vec![1024],
        _ => vec![128; dim],
    }
}

enum MethodState {
    Srlmc {
        lmc: LmcConfig,
        proposal: Proposal,
        chains: usize,
        buffer: ReplayBuffer,
    },
    Riemann {
        fixed_grid: Option<Array2<f64>>,
        points: usize,
    },
    Psusp {
        usp: UspConfig,
        particles: ParticleSet,
    },
}

/// Runs the configured training loop: per iteration, draw a data batch,
/// produce estimation points by the chosen method, assemble the ascent
/// gradient, and apply one optimizer step.
pub fn train(
    model: EnergyModel,
    target: &GaussianMixture,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let dim = config.domain.dim();
    if target.dim() != dim || model.input_dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: target.dim().max(model.input_dim()),
        });
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = model;
    let mut params = model.params();
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut trace = TrainTrace::default();

    // target grid for TV snapshots, built once
    let snap_res = snapshot_resolution(dim);
    let target_grid = match config.snapshot_every {
        Some(_) if dim <= 2 => Some(
            DensityGrid::from_log_fn(config.domain.clone(), &snap_res, |x| target.log_density(x))?
                .0,
        ),
        _ => None,
    };

    let mut state = match &config.method {
        MethodConfig::Srlmc {
            lmc,
            buffer_capacity,
            reinit_rate,
            proposal,
            chains,
        } => MethodState::Srlmc {
            lmc: lmc.clone(),
            proposal: proposal.clone(),
            chains: chains.unwrap_or(config.batch_size),
            buffer: ReplayBuffer::new(*buffer_capacity, *reinit_rate)?,
        },
        MethodConfig::Riemann { points } => MethodState::Riemann {
            fixed_grid: (dim == 1).then(|| riemann_grid_1d(&config.domain, *points)),
            points: *points,
        },
        MethodConfig::Psusp {
            usp,
            particles,
            epsilon,
            init,
        } => {
            let raw = match init {
                ParticleInit::Proposal { proposal } => proposal.sample_batch(*particles, &mut rng),
                ParticleInit::DataSamples => target.sample(*particles, &mut rng),
            };
            MethodState::Psusp {
                usp: usp.clone(),
                particles: ParticleSet::new_clamped(raw, *epsilon, config.domain.clone())?,
            }
        }
    };

    for iteration in 0..config.iterations {
        let mut data = target.sample(config.batch_size, &mut rng);
        if let Some(noise) = config.data_noise_std {
            if noise > 0.0 {
                for v in data.iter_mut() {
                    *v += noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }

        let mut diverged = 0usize;
        let (points, weights): (Array2<f64>, WeightVector) = match &mut state {
            MethodState::Srlmc {
                lmc,
                proposal,
                chains,
                buffer,
            } => {
                let init = buffer.draw_init(proposal, *chains, &mut rng)?;
                let chain_seed = rng.random::<u64>();
                let out = run_srlmc(&model, init, lmc, chain_seed)?;
                diverged = out.diverged_count;
                let live = out.batch.live_positions();
                if live.nrows() == 0 {
                    // every chain diverged: skip this update entirely
                    trace.records.push(TraceRecord {
                        iteration,
                        grad_norm: f64::NAN,
                        diverged_chains: diverged,
                    });
                    trace.total_diverged += diverged;
                    trace.skipped_updates += 1;
                    continue;
                }
                buffer.push(live.view());
                let n = live.nrows();
                (live, WeightVector::uniform(n)?)
            }
            MethodState::Riemann { fixed_grid, points } => {
                let pts = match fixed_grid {
                    Some(g) => g.clone(),
                    None => {
                        let mut p = Array2::zeros((*points, dim));
                        for mut row in p.rows_mut() {
                            let draw = config.domain.sample_uniform(&mut rng);
                            for (dst, src) in row.iter_mut().zip(&draw) {
                                *dst = *src;
                            }
                        }
                        p
                    }
                };
                let w = snis_weights(&model, pts.view())?;
                (pts, w)
            }
            MethodState::Psusp { usp, particles } => {
                let stats = psusp_round(&model, particles, usp, &mut rng)?;
                trace.usp_nonfinite_gradients += stats.nonfinite_gradients;
                let idx = select_estimation_points(particles, usp.estimation_size, &mut rng)?;
                let pts = particles.gather(&idx);
                let w = snis_weights(&model, pts.view())?;
                (pts, w)
            }
        };

        let gradient = mle_gradient(&model, &weights, points.view(), data.view())?;
        let grad_norm = gradient.l2_norm();
        let applied = optimizer.step(&mut params, &gradient, config.learning_rate)?;
        if applied {
            model.set_params(&params)?;
        } else {
            trace.skipped_updates += 1;
        }

        trace.records.push(TraceRecord {
            iteration,
            grad_norm,
            diverged_chains: diverged,
        });
        trace.total_diverged += diverged;

        if let (Some(every), Some(tg)) = (config.snapshot_every, target_grid.as_ref()) {
            if every > 0 && (iteration % every == every - 1 || iteration + 1 == config.iterations)
            {
                let (learned, _) = quadrature_normalize(&model, 1.0, &config.domain, &snap_res)?;
                trace.snapshots.push(SnapshotRecord {
                    iteration,
                    tv_to_target: tv_distance(&learned, tg)?,
                });
            }
        }

        if let Some(es) = &config.early_stop {
            let w = es.window;
            let done = iteration + 1;
            if done >= 2 * w && done % w == 0 {
                let mean = |records: &[TraceRecord]| {
                    records.iter().map(|r| r.grad_norm).sum::<f64>() / records.len() as f64
                };
                let cur = mean(&trace.records[done - w..done]);
                let prev = mean(&trace.records[done - 2 * w..done - w]);
                if prev.is_finite() && cur.is_finite() && (cur - prev).abs() < es.rel_tol * prev {
                    trace.early_stopped_at = Some(done);
                    break;
                }
            }
        }
    }

    trace.wall_time_s = started.elapsed().as_secs_f64();
    let (buffer, particles) = match state {
        MethodState::Srlmc { buffer, .. } => (Some(buffer), None),
        MethodState::Riemann { .. } => (None, None),
        MethodState::Psusp { particles, .. } => (None, Some(particles)),
    };
    Ok(TrainOutput {
        model,
        trace,
        buffer,
        particles,
    })
}
