//! Uniform support partitioning: alternating density-maximization and
//! repulsion phases over a particle set constrained to a box, plus the
//! persistent stochastic variant that updates random subsets against
//! read-only anchor subsets.
//!
//! The repulsion objective per particle is the ascent direction of
//! `sum_j min(|u_i - u_j|, eps)`: neighbors closer than `eps` contribute the
//! unit vector pointing away from them, neighbors at `eps` or farther
//! contribute nothing. Coincident pairs (distance below 1e-12) get a random
//! unit direction drawn from the repulsion stream; any deterministic choice
//! would bias the unfolding configuration.
//!
//! Within one repulsion iteration all gradients are evaluated against an
//! immutable snapshot and applied as a batch (Jacobi style), so results do
//! not depend on the order in which particles are visited.

use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::BoxDomain;
use crate::error::{Error, Result};
use crate::model::EnergyModel;
use crate::numeric::fmt_g17;

/// Partition points with their minimum-separation parameter and box domain.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    points: Array2<f64>,
    epsilon: f64,
    domain: BoxDomain,
}

impl ParticleSet {
    pub fn new(points: Array2<f64>, epsilon: f64, domain: BoxDomain) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::InvalidArgument("particle set needs n >= 1".into()));
        }
        if points.ncols() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: points.ncols(),
            });
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "separation epsilon must be positive, got {epsilon}"
            )));
        }
        for row in points.rows() {
            let r: Vec<f64> = row.to_vec();
            if !domain.contains(&r) {
                return Err(Error::InvalidArgument(
                    "particle outside the box domain".into(),
                ));
            }
        }
        Ok(ParticleSet {
            points,
            epsilon,
            domain,
        })
    }

    /// Clamps rows into the domain first; used when initializing from
    /// proposal draws that may overshoot the box.
    pub fn new_clamped(mut points: Array2<f64>, epsilon: f64, domain: BoxDomain) -> Result<Self> {
        for mut row in points.rows_mut() {
            if let Some(slice) = row.as_slice_mut() {
                domain.clamp_point(slice);
            }
        }
        Self::new(points, epsilon, domain)
    }

    /// Particle count (construction guarantees n >= 1).
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).to_vec()
    }

    /// Smallest pairwise distance (brute force; diagnostics on small n).
    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let d = dist(self.points.row(i), self.points.row(j));
                if d < best {
                    best = d;
                }
            }
        }
        best
    }

    /// Rows selected by index, packed densely.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).assign(&self.points.row(src));
        }
        out
    }

    /// Writes `id,x0[,x1],energy` rows; the energy column is diagnostic.
    pub fn write_csv(&self, model: &EnergyModel, path: &Path) -> Result<()> {
        let energies = model.energy_batch(self.points.view())?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let coords: Vec<String> = (0..self.dim()).map(|a| format!("x{a}")).collect();
        writeln!(f, "id,{},energy", coords.join(","))?;
        for (i, row) in self.points.rows().into_iter().enumerate() {
            let cs: Vec<String> = row.iter().map(|v| fmt_g17(*v)).collect();
            writeln!(f, "{i},{},{}", cs.join(","), fmt_g17(energies[i]))?;
        }
        Ok(())
    }

    /// Reads the export format back (energy column ignored) to resume a
    /// persistent run.
    pub fn read_csv(path: &Path, epsilon: f64, domain: BoxDomain) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty particle csv".into()))?;
        let cols = header.split(',').count();
        if cols < 3 {
            return Err(Error::InvalidArgument(
                "particle csv needs id, coords, energy columns".into(),
            ));
        }
        let dim = cols - 2;
        let mut flat = Vec::new();
        let mut n = 0;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::InvalidArgument(format!(
                    "particle csv row with {} fields, expected {cols}",
                    fields.len()
                )));
            }
            for field in &fields[1..1 + dim] {
                flat.push(field.parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("bad coordinate `{field}`: {e}"))
                })?);
            }
            n += 1;
        }
        let points = Array2::from_shape_vec((n, dim), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(points, epsilon, domain)
    }
}

/// Knobs for one persistent-stochastic round; sizes are validated against
/// the particle count at call time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UspConfig {
    /// Maximization PGA iterations per round (n_m).
    pub max_steps: usize,
    /// Repulsion PGA iterations per round (n_r).
    pub rep_steps: usize,
    /// Rounds per model update (N).
    pub rounds: usize,
    /// Updated subset size per round.
    pub lambda_size: usize,
    /// Read-only anchor subset size per round.
    pub gamma_size: usize,
    /// Points used for the gradient estimate (n_s).
    pub estimation_size: usize,
    /// Maximization step size.
    pub step_max: f64,
    /// Repulsion step size.
    pub step_rep: f64,
}

impl UspConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        // rounds == 0 is the identity pass; the PGA counts must be positive
        if self.max_steps == 0 || self.rep_steps == 0 {
            return Err(Error::invalid_config(
                "usp.max_steps/rep_steps",
                "PGA iteration counts must be >= 1",
            ));
        }
        if self.lambda_size == 0 || self.lambda_size > n {
            return Err(Error::invalid_config(
                "usp.lambda_size",
                format!("must lie in [1, {n}]"),
            ));
        }
        if self.estimation_size == 0 || self.estimation_size > n {
            return Err(Error::invalid_config(
                "usp.estimation_size",
                format!("must lie in [1, {n}]"),
            ));
        }
        if !(self.step_max > 0.0) || !(self.step_rep > 0.0) {
            return Err(Error::invalid_config(
                "usp.step_max/step_rep",
                "step sizes must be positive",
            ));
        }
        Ok(())
    }

    /// Defaults tied to the geometry: `step_max = 1e-3 * diam(domain)`,
    /// `step_rep = eps / 10`.
    pub fn default_steps(domain: &BoxDomain, epsilon: f64) -> (f64, f64) {
        (1e-3 * domain.diameter(), epsilon / 10.0)
    }
}

/// Counters for skipped updates inside USP phases.
#[derive(Debug, Default, Clone, Copy)]
pub struct UspStats {
    /// Particles left in place because their density gradient was
    /// non-finite.
    pub nonfinite_gradients: usize,
}

/// `count` projected gradient-descent iterations on the selected particles:
/// `u <- project(u - step * grad_x E(u))`. Log-density ascent never needs
/// the partition function because `grad log q = -grad E`.
pub fn maximization_step(
    model: &EnergyModel,
    particles: &mut ParticleSet,
    indices: &[usize],
    step: f64,
    count: usize,
) -> Result<UspStats> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("maximization step must be > 0".into()));
    }
    check_indices(indices, particles.len())?;
    let mut stats = UspStats::default();
    for _ in 0..count {
        let selected = particles.gather(indices);
        let grads = model.grad_x_batch(selected.view())?;
        for (slot, &i) in indices.iter().enumerate() {
            let g = grads.row(slot);
            if !g.iter().all(|v| v.is_finite()) {
                stats.nonfinite_gradients += 1;
                continue;
            }
            let mut row = particles.points.row_mut(i);
            for (x, gv) in row.iter_mut().zip(g.iter()) {
                *x -= step * gv;
            }
            if let Some(slice) = row.as_slice_mut() {
                particles.domain.clamp_point(slice);
            }
        }
    }
    Ok(stats)
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    if indices.iter().any(|&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "particle index out of range (n = {n})"
        )));
    }
    Ok(())
}

const COINCIDENT_DIST: f64 = 1e-12;

fn repulsion_contribution(
    points: &Array2<f64>,
    i: usize,
    j: usize,
    epsilon: f64,
    rng: &mut impl Rng,
    acc: &mut [f64],
) {
    let (a, b) = (points.row(i), points.row(j));
    let d = dist(a, b);
    if d >= epsilon {
        return;
    }
    if d < COINCIDENT_DIST {
        for (g, u) in acc.iter_mut().zip(random_unit(points.ncols(), rng)) {
            *g += u;
        }
    } else {
        for ((g, x), y) in acc.iter_mut().zip(a.iter()).zip(b.iter()) {
            *g += (x - y) / d;
        }
    }
}

/// Ascent direction of the separation objective at particle `i` against the
/// listed neighbors: unit vectors away from every neighbor strictly closer
/// than epsilon.
pub fn repulsion_gradient(
    particles: &ParticleSet,
    i: usize,
    neighbors: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_indices(neighbors, particles.len())?;
    check_indices(&[i], particles.len())?;
    let mut acc = vec![0.0; particles.dim()];
    for &j in neighbors {
        if j == i {
            continue;
        }
        repulsion_contribution(&particles.points, i, j, particles.epsilon(), rng, &mut acc);
    }
    Ok(acc)
}

/// Uniform-grid neighbor index over a member subset: cell side >= epsilon,
/// so all points within epsilon of a query live in the 3^d surrounding
/// cells. Candidate lists come back sorted, which pins the accumulation
/// order of the repulsion sum.
struct NeighborIndex {
    lo: Vec<f64>,
    inv_cell: Vec<f64>,
    cells_per_axis: Vec<usize>,
    cells: Vec<Vec<usize>>,
}

impl NeighborIndex {
    fn build(points: &Array2<f64>, members: &[usize], domain: &BoxDomain, epsilon: f64) -> Self {
        let dim = domain.dim();
        // keep the table near O(n) cells even for tiny epsilon
        let per_axis_cap = ((members.len().max(1) as f64).powf(1.0 / dim as f64).ceil() as usize
            + 1)
        .max(1);
        let mut cells_per_axis = Vec::with_capacity(dim);
        let mut inv_cell = Vec::with_capacity(dim);
        for a in 0..dim {
            let width = domain.hi()[a] - domain.lo()[a];
            let mut cells = (width / epsilon).floor() as usize;
            cells = cells.clamp(1, per_axis_cap);
            cells_per_axis.push(cells);
            inv_cell.push(cells as f64 / width);
        }
        let total: usize = cells_per_axis.iter().product();
        let mut cells = vec![Vec::new(); total];
        let idx = |p: ndarray::ArrayView1<f64>,
                   lo: &[f64],
                   inv: &[f64],
                   counts: &[usize]|
         -> usize {
            let mut flat = 0;
            for a in 0..counts.len() {
                let c = (((p[a] - lo[a]) * inv[a]).floor() as isize)
                    .clamp(0, counts[a] as isize - 1) as usize;
                flat = flat * counts[a] + c;
            }
            flat
        };
        for &m in members {
            let f = idx(points.row(m), domain.lo(), &inv_cell, &cells_per_axis);
            cells[f].push(m);
        }
        NeighborIndex {
            lo: domain.lo().to_vec(),
            inv_cell,
            cells_per_axis,
            cells,
        }
    }

    /// Member indices in the 3^d cells around `p`, ascending.
    fn candidates(&self, p: ndarray::ArrayView1<f64>, out: &mut Vec<usize>) {
        out.clear();
        let dim = self.cells_per_axis.len();
        let mut base = vec![0isize; dim];
        for a in 0..dim {
            base[a] = (((p[a] - self.lo[a]) * self.inv_cell[a]).floor() as isize)
                .clamp(0, self.cells_per_axis[a] as isize - 1);
        }
        // enumerate the 3^d neighborhood
        let mut offsets = vec![-1isize; dim];
        loop {
            let mut flat = 0usize;
            let mut valid = true;
            for a in 0..dim {
                let c = base[a] + offsets[a];
                if c < 0 || c >= self.cells_per_axis[a] as isize {
                    valid = false;
                    break;
                }
                flat = flat * self.cells_per_axis[a] + c as usize;
            }
            if valid {
                out.extend_from_slice(&self.cells[flat]);
            }
            // advance the offset odometer
            let mut a = 0;
            loop {
                if a == dim {
                    out.sort_unstable();
                    return;
                }
                offsets[a] += 1;
                if offsets[a] <= 1 {
                    break;
                }
                offsets[a] = -1;
                a += 1;
            }
        }
    }
}

/// `count` Jacobi-style repulsion iterations: particles in `lambda` move,
/// particles in `gamma` are read-only anchors, and every gradient is taken
/// against the snapshot of positions from the start of the iteration.
pub fn repulsion_step(
    particles: &mut ParticleSet,
    lambda: &[usize],
    gamma: &[usize],
    step: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("repulsion step must be > 0".into()));
    }
    check_indices(lambda, particles.len())?;
    check_indices(gamma, particles.len())?;
    let mut in_lambda = vec![false; particles.len()];
    for &i in lambda {
        in_lambda[i] = true;
    }
    if gamma.iter().any(|g| in_lambda[*g]) {
        return Err(Error::InvalidArgument(
            "lambda and gamma must be disjoint".into(),
        ));
    }
    let mut members: Vec<usize> = lambda.iter().chain(gamma).copied().collect();
    members.sort_unstable();
    let mut candidates = Vec::new();
    for _ in 0..count {
        let snapshot = particles.points.clone();
        let index = NeighborIndex::build(
            &snapshot,
            &members,
            &particles.domain,
            particles.epsilon(),
        );
        let mut updates = Array2::zeros((lambda.len(), particles.dim()));
        for (slot, &i) in lambda.iter().enumerate() {
            index.candidates(snapshot.row(i), &mut candidates);
            let mut acc = vec![0.0; particles.dim()];
            for &j in &candidates {
                if j == i {
                    continue;
                }
                repulsion_contribution(&snapshot, i, j, particles.epsilon(), rng, &mut acc);
            }
            for (dst, g) in updates.row_mut(slot).iter_mut().zip(&acc) {
                *dst = *g;
            }
        }
        for (slot, &i) in lambda.iter().enumerate() {
            let mut row = particles.points.row_mut(i);
            for (x, g) in row.iter_mut().zip(updates.row(slot)) {
                *x += step * g;
            }
            if let Some(slice) = row.as_slice_mut() {
                particles.domain.clamp_point(slice);
            }
        }
    }
    Ok(())
}

/// Uniform subset of size `count`, returned sorted.
pub fn sample_indices(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = rand::seq::index::sample(rng, n, count).into_vec();
    v.sort_unstable();
    v
}

/// Chooses the estimation subset for the importance-weighted gradient.
pub fn select_estimation_points(
    particles: &ParticleSet,
    n_s: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n_s == 0 || n_s > particles.len() {
        return Err(Error::InvalidArgument(format!(
            "estimation size {n_s} out of range for n = {}",
            particles.len()
        )));
    }
    Ok(sample_indices(particles.len(), n_s, rng))
}

/// One persistent-stochastic pass: `rounds` repetitions of sampling an
/// update subset, `max_steps` density-ascent iterations on it, sampling a
/// disjoint anchor subset, and `rep_steps` repulsion iterations.
pub fn psusp_round(
    model: &EnergyModel,
    particles: &mut ParticleSet,
    config: &UspConfig,
    rng: &mut impl Rng,
) -> Result<UspStats> {
    config.validate(particles.len())?;
    let n = particles.len();
    let mut stats = UspStats::default();
    for _ in 0..config.rounds {
        let lambda = sample_indices(n, config.lambda_size, rng);
        let s = maximization_step(model, particles, &lambda, config.step_max, config.max_steps)?;
        stats.nonfinite_gradients += s.nonfinite_gradients;
        let complement: Vec<usize> = {
            let mut in_lambda = vec![false; n];
            for &i in &lambda {
                in_lambda[i] = true;
            }
            (0..n).filter(|i| !in_lambda[*i]).collect()
        };
        let gamma_size = config.gamma_size.min(complement.len());
        let gamma: Vec<usize> = if gamma_size == 0 {
            Vec::new()
        } else {
            sample_indices(complement.len(), gamma_size, rng)
                .into_iter()
                .map(|k| complement[k])
                .collect()
        };
        repulsion_step(
            particles,
            &lambda,
            &gamma,
            config.step_rep,
            config.rep_steps,
            rng,
        )?;
    }
    Ok(stats)
}
