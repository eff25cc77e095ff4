//! Diagnostics and metrics: OOD detection scores (FPR at fixed TPR, area
//! under the precision-recall curve), thin-shell concentration of
//! high-dimensional i.i.d. vectors, and per-basin mass analysis of learned
//! densities.
//!
//! Score convention: `score = -E(x)`, higher means more in-distribution.
//! Thresholding uses `>=` on both classes, which matches the exhaustive
//! threshold-enumeration oracles used in the tests. The PR curve integrates
//! stepwise (precision at each achieved recall), never trapezoidally.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::DensityGrid;
use crate::error::{Error, Result};
use crate::numeric::all_finite;

/// In- and out-of-distribution score samples.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(Error::InvalidArgument(
                "score sets must both be nonempty".into(),
            ));
        }
        if !all_finite(&in_scores) || !all_finite(&out_scores) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(ScoreSet {
            in_scores,
            out_scores,
        })
    }
}

/// False-positive rate at the largest threshold achieving at least
/// `tpr_target` true-positive rate.
///
/// The threshold is the k-th largest in-score with `k = ceil(tpr * n_in)`:
/// any larger threshold admits fewer than `k` in-scores and misses the
/// target.
pub fn fpr_at_tpr(scores: &ScoreSet, tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tpr target must lie in (0, 1], got {tpr_target}"
        )));
    }
    let n_in = scores.in_scores.len();
    let k = (tpr_target * n_in as f64).ceil() as usize;
    let k = k.clamp(1, n_in);
    let mut sorted = scores.in_scores.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = sorted[k - 1];
    let fp = scores
        .out_scores
        .iter()
        .filter(|s| **s >= threshold)
        .count();
    Ok(fp as f64 / scores.out_scores.len() as f64)
}

/// Area under the precision-recall curve with the in-distribution class as
/// positive: `sum_k (R_k - R_{k-1}) * P_k` over distinct score thresholds in
/// descending order.
pub fn aupr(scores: &ScoreSet) -> Result<f64> {
    let mut thresholds: Vec<f64> = scores
        .in_scores
        .iter()
        .chain(&scores.out_scores)
        .copied()
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let n_in = scores.in_scores.len() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for tau in thresholds {
        let tp = scores.in_scores.iter().filter(|s| **s >= tau).count() as f64;
        let fp = scores.out_scores.iter().filter(|s| **s >= tau).count() as f64;
        let precision = tp / (tp + fp);
        let recall = tp / n_in;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Component law for the concentration check. All three have finite fourth
/// moments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ComponentLaw {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, stddev: f64 },
    Constant { value: f64 },
}

impl ComponentLaw {
    pub fn mean(&self) -> f64 {
        match self {
            ComponentLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            ComponentLaw::Gaussian { mean, .. } => *mean,
            ComponentLaw::Constant { value } => *value,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            ComponentLaw::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            ComponentLaw::Gaussian { stddev, .. } => stddev * stddev,
            ComponentLaw::Constant { .. } => 0.0,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            ComponentLaw::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            ComponentLaw::Gaussian { mean, stddev } => {
                mean + stddev * rng.sample::<f64, _>(StandardNormal)
            }
            ComponentLaw::Constant { value } => *value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ComponentLaw::Uniform { lo, hi } if !(lo < hi) => Err(Error::InvalidArgument(
                format!("uniform law needs lo < hi, got [{lo}, {hi}]"),
            )),
            ComponentLaw::Gaussian { stddev, .. } if !(*stddev > 0.0) => Err(
                Error::InvalidArgument("gaussian law needs stddev > 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Empirical probability that `|X|_2` of a d-dimensional i.i.d. vector lies
/// in the open shell `((1-eps) r, (1+eps) r)` with
/// `r = sqrt(d (sigma^2 + mu^2))`.
pub fn shell_concentration(
    dim: usize,
    count: usize,
    law: ComponentLaw,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if dim == 0 || count == 0 {
        return Err(Error::InvalidArgument(
            "shell check needs dim >= 1 and count >= 1".into(),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    law.validate()?;
    let r = ((law.variance() + law.mean() * law.mean()) * dim as f64).sqrt();
    let (lo, hi) = ((1.0 - eps) * r, (1.0 + eps) * r);
    let mut hits = 0usize;
    for _ in 0..count {
        let norm_sq: f64 = (0..dim)
            .map(|_| {
                let v = law.sample(rng);
                v * v
            })
            .sum();
        let norm = norm_sq.sqrt();
        if norm > lo && norm < hi {
            hits += 1;
        }
    }
    Ok(hits as f64 / count as f64)
}

/// A basin over the grid domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    /// Half-open slab `lo <= x_0 < hi` (1D watershed basins).
    Interval { lo: f64, hi: f64 },
    /// Voronoi cell: points whose nearest center (smallest index wins ties)
    /// is `index`.
    NearestCenter {
        centers: Vec<Vec<f64>>,
        index: usize,
    },
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Interval { lo, hi } => x[0] >= *lo && x[0] < *hi,
            Region::NearestCenter { centers, index } => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (k, c) in centers.iter().enumerate() {
                    let d: f64 = x
                        .iter()
                        .zip(c)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best == *index
            }
        }
    }

    pub fn label(&self, i: usize) -> String {
        match self {
            Region::Interval { lo, hi } => format!("interval[{lo}, {hi})"),
            Region::NearestCenter { index, .. } => format!("voronoi[{index}]"),
        }
    }
}

/// Integral of the density over each basin, computed cellwise. Rejects
/// basins that overlap on any grid cell.
pub fn mode_mass(density: &DensityGrid, basins: &[Region]) -> Result<Vec<f64>> {
    if basins.is_empty() {
        return Err(Error::InvalidArgument("no basins given".into()));
    }
    let mut masses = vec![0.0; basins.len()];
    for idx in 0..density.n_cells() {
        let c = density.cell_center(idx);
        let mut owner: Option<usize> = None;
        for (b, region) in basins.iter().enumerate() {
            if region.contains(&c) {
                if owner.is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "overlapping basins at cell center {c:?}"
                    )));
                }
                owner = Some(b);
            }
        }
        if let Some(b) = owner {
            masses[b] += density.values()[idx] * density.cell_volume();
        }
    }
    Ok(masses)
}

/// Per-basin comparison of a learned density against the target.
#[derive(Debug, Clone, Serialize)]
pub struct ModeMassEntry {
    pub basin: String,
    pub learned_mass: f64,
    pub target_mass: f64,
    pub mass_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub entries: Vec<ModeMassEntry>,
}

impl ModeReport {
    pub fn build(
        learned: &DensityGrid,
        target: &DensityGrid,
        basins: &[Region],
    ) -> Result<ModeReport> {
        let lm = mode_mass(learned, basins)?;
        let tm = mode_mass(target, basins)?;
        for masses in [&lm, &tm] {
            let total: f64 = masses.iter().sum();
            if total > 1.0 + 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "basin masses sum to {total} > 1"
                )));
            }
        }
        let entries = basins
            .iter()
            .enumerate()
            .map(|(i, b)| ModeMassEntry {
                basin: b.label(i),
                learned_mass: lm[i],
                target_mass: tm[i],
                mass_ratio: lm[i] / tm[i],
            })
            .collect();
        Ok(ModeReport { entries })
    }

    /// Largest learned basin mass over the smallest.
    pub fn max_min_learned_ratio(&self) -> f64 {
        let max = self
            .entries
            .iter()
            .map(|e| e.learned_mass)
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self
            .entries
            .iter()
            .map(|e| e.learned_mass)
            .fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// 1D watershed basins of a tabulated target density: intervals split at the
/// minimum between consecutive significant local maxima.
pub fn watershed_intervals_1d(target: &DensityGrid) -> Result<Vec<Region>> {
    if target.dim() != 1 {
        return Err(Error::InvalidArgument(
            "watershed basins need a 1D grid".into(),
        ));
    }
    let v = target.values();
    let n = v.len();
    let peak_floor = v.iter().copied().fold(0.0f64, f64::max) * 1e-6;
    let mut maxima = Vec::new();
    for i in 1..n - 1 {
        if v[i] > peak_floor && v[i] > v[i - 1] && v[i] >= v[i + 1] {
            maxima.push(i);
        }
    }
    if maxima.len() < 2 {
        return Ok(vec![Region::Interval {
            lo: target.domain().lo()[0],
            hi: target.domain().hi()[0],
        }]);
    }
    let mut splits = Vec::new();
    for w in maxima.windows(2) {
        let (a, b) = (w[0], w[1]);
        let argmin = (a..=b)
            .min_by(|i, j| v[*i].partial_cmp(&v[*j]).unwrap())
            .unwrap();
        splits.push(target.cell_center(argmin)[0]);
    }
    let mut bounds = vec![target.domain().lo()[0]];
    bounds.extend(splits);
    bounds.push(target.domain().hi()[0] + 1.0);
    Ok(bounds
        .windows(2)
        .map(|w| Region::Interval { lo: w[0], hi: w[1] })
        .collect())
}

/// Voronoi basins around the given centers (one region per center).
pub fn voronoi_regions(centers: &[Vec<f64>]) -> Vec<Region> {
    (0..centers.len())
        .map(|index| Region::NearestCenter {
            centers: centers.to_vec(),
            index,
        })
        .collect()
}

/// Row shape of the OOD metric report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub fpr95: f64,
    pub aupr: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn from_scores(dataset: &str, scores: &ScoreSet, seed: u64) -> Result<Self> {
        Ok(MetricReport {
            dataset: dataset.to_string(),
            fpr95: fpr_at_tpr(scores, 0.95)?,
            aupr: aupr(scores)?,
            n_in: scores.in_scores.len(),
            n_out: scores.out_scores.len(),
            seed,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{BoxDomain, GaussianMixture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores(in_s: &[f64], out_s: &[f64]) -> ScoreSet {
        ScoreSet::new(in_s.to_vec(), out_s.to_vec()).unwrap()
    }

    /// Exhaustive enumeration oracle: try every candidate threshold from the
    /// merged score set, keep the largest achieving the TPR target.
    fn fpr_oracle(s: &ScoreSet, tpr: f64) -> f64 {
        let mut cands: Vec<f64> = s.in_scores.iter().chain(&s.out_scores).copied().collect();
        cands.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut best: Option<f64> = None;
        for &tau in &cands {
            let tp = s.in_scores.iter().filter(|v| **v >= tau).count() as f64;
            if tp / s.in_scores.len() as f64 >= tpr {
                best = Some(best.map_or(tau, |b: f64| b.max(tau)));
            }
        }
        let tau = best.expect("tpr=1 is always achievable at the min score");
        s.out_scores.iter().filter(|v| **v >= tau).count() as f64 / s.out_scores.len() as f64
    }

    /// Stepwise PR-curve oracle over exhaustively enumerated thresholds.
    fn aupr_oracle(s: &ScoreSet) -> f64 {
        let mut cands: Vec<f64> = s.in_scores.iter().chain(&s.out_scores).copied().collect();
        cands.sort_by(|a, b| b.partial_cmp(a).unwrap());
        cands.dedup();
        let mut area = 0.0;
        let mut prev_r = 0.0;
        for &tau in &cands {
            let tp = s.in_scores.iter().filter(|v| **v >= tau).count() as f64;
            let fp = s.out_scores.iter().filter(|v| **v >= tau).count() as f64;
            let p = tp / (tp + fp);
            let r = tp / s.in_scores.len() as f64;
            area += (r - prev_r) * p;
            prev_r = r;
        }
        area
    }

    #[test]
    fn fpr_examples_from_hand_calculation() {
        // perfect separation
        let s = scores(&[3.0, 2.0, 1.0, 0.0], &[-5.0, -6.0]);
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.0);
        // identical lists: the fpr equals the achieved tpr, which the
        // ceil(0.95 n)-th largest threshold pins at >= 0.95
        let same: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let s = scores(&same, &same);
        let fpr = fpr_at_tpr(&s, 0.95).unwrap();
        assert_eq!(fpr, fpr_oracle(&s, 0.95));
        assert!(fpr >= 0.95);
        // threshold 0 admits out-score 2.5 only
        let s = scores(&[3.0, 2.0, 1.0, 0.0], &[2.5, -1.0]);
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.5);
    }

    #[test]
    fn aupr_examples() {
        let s = scores(&[5.0, 4.0], &[1.0, 0.5]);
        assert_eq!(aupr(&s).unwrap(), 1.0);
        let s = scores(&[2.0, 0.0], &[1.0]);
        assert_eq!(aupr(&s).unwrap(), aupr_oracle(&s));
        assert!((aupr(&s).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_enumeration_oracles_on_random_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n_in = rng.random_range(1..=8);
            let n_out = rng.random_range(1..=8);
            // mix a coarse integer lattice (ties) with continuous draws
            let draw = |rng: &mut ChaCha8Rng| {
                if rng.random::<f64>() < 0.5 {
                    rng.random_range(-3..=3) as f64
                } else {
                    rng.random_range(-3.0..3.0)
                }
            };
            let s = scores(
                &(0..n_in).map(|_| draw(&mut rng)).collect::<Vec<_>>(),
                &(0..n_out).map(|_| draw(&mut rng)).collect::<Vec<_>>(),
            );
            for tpr in [0.25, 0.5, 0.95, 1.0] {
                assert_eq!(fpr_at_tpr(&s, tpr).unwrap(), fpr_oracle(&s, tpr));
            }
            assert_eq!(aupr(&s).unwrap(), aupr_oracle(&s));
        }
    }

    #[test]
    fn fpr_is_monotone_in_the_tpr_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = scores(
            &(0..40).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
            &(0..40).map(|_| rng.random::<f64>() - 0.3).collect::<Vec<_>>(),
        );
        let mut prev = 0.0;
        for k in 1..=20 {
            let fpr = fpr_at_tpr(&s, k as f64 / 20.0).unwrap();
            assert!(fpr >= prev - 1e-15);
            prev = fpr;
        }
    }

    #[test]
    fn metrics_are_invariant_under_strictly_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let in_s: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out_s: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..1.0)).collect();
        let s = scores(&in_s, &out_s);
        let transform = |v: f64| v * v * v + 2.0 * v + 1.0; // strictly increasing
        let st = scores(
            &in_s.iter().map(|v| transform(*v)).collect::<Vec<_>>(),
            &out_s.iter().map(|v| transform(*v)).collect::<Vec<_>>(),
        );
        assert!((fpr_at_tpr(&s, 0.95).unwrap() - fpr_at_tpr(&st, 0.95).unwrap()).abs() < 1e-12);
        assert!((aupr(&s).unwrap() - aupr(&st).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aupr_approaches_prevalence_for_indistinguishable_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let in_s: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let out_s: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let s = scores(&in_s, &out_s);
        let v = aupr(&s).unwrap();
        assert!((v - 0.5).abs() < 0.02, "aupr {v}");
    }

    #[test]
    fn empty_score_lists_are_rejected() {
        assert!(ScoreSet::new(vec![], vec![1.0]).is_err());
        assert!(ScoreSet::new(vec![1.0], vec![]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![1.0]).is_err());
        let s = scores(&[1.0], &[0.0]);
        assert!(fpr_at_tpr(&s, 0.0).is_err());
        assert!(fpr_at_tpr(&s, 1.5).is_err());
    }

    #[test]
    fn constant_components_concentrate_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = shell_concentration(
            7,
            500,
            ComponentLaw::Constant { value: 0.5 },
            0.01,
            &mut rng,
        )
        .unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn concentration_grows_with_dimension_for_uniform_components() {
        let law = ComponentLaw::Uniform { lo: -1.0, hi: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p2 = shell_concentration(2, 10_000, law, 0.05, &mut rng).unwrap();
        let p1000 = shell_concentration(1000, 10_000, law, 0.05, &mut rng).unwrap();
        assert!(p2 < 0.5, "low dimension should not concentrate: {p2}");
        assert!(p1000 >= 0.99, "d=1000 should concentrate: {p1000}");
    }

    #[test]
    fn symmetric_target_splits_mass_evenly_across_watershed_basins() {
        let p = GaussianMixture::symmetric_pair_1d(0.5, 0.05).unwrap();
        let domain = BoxDomain::interval(-1.0, 1.0).unwrap();
        let (grid, _) = DensityGrid::from_log_fn(domain, &[2048], |x| p.log_density(x)).unwrap();
        let basins = watershed_intervals_1d(&grid).unwrap();
        assert_eq!(basins.len(), 2);
        let masses = mode_mass(&grid, &basins).unwrap();
        assert!((masses[0] - 0.5).abs() < 1e-6);
        assert!((masses[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn six_mode_ring_gets_one_sixth_per_voronoi_sector() {
        let p = GaussianMixture::ring_2d(6, 0.1).unwrap();
        let domain = BoxDomain::cube(-2.0, 2.0, 2).unwrap();
        let (grid, _) =
            DensityGrid::from_log_fn(domain, &[256, 256], |x| p.log_density(x)).unwrap();
        let basins = voronoi_regions(p.means());
        let masses = mode_mass(&grid, &basins).unwrap();
        for m in &masses {
            assert!((m - 1.0 / 6.0).abs() < 1e-3, "sector mass {m}");
        }
    }

    #[test]
    fn overlapping_basins_are_rejected() {
        let p = GaussianMixture::symmetric_pair_1d(0.5, 0.05).unwrap();
        let domain = BoxDomain::interval(-1.0, 1.0).unwrap();
        let (grid, _) = DensityGrid::from_log_fn(domain, &[128], |x| p.log_density(x)).unwrap();
        let basins = vec![
            Region::Interval { lo: -1.0, hi: 0.2 },
            Region::Interval { lo: 0.0, hi: 1.1 },
        ];
        assert!(mode_mass(&grid, &basins).is_err());
    }

    #[test]
    fn mode_report_ratio_on_a_lopsided_density() {
        let domain = BoxDomain::interval(-1.0, 1.0).unwrap();
        let p = GaussianMixture::symmetric_pair_1d(0.5, 0.05).unwrap();
        let (target, _) =
            DensityGrid::from_log_fn(domain.clone(), &[1024], |x| p.log_density(x)).unwrap();
        let q = GaussianMixture::new(
            vec![0.75, 0.25],
            vec![vec![-0.5], vec![0.5]],
            vec![0.05, 0.05],
        )
        .unwrap();
        let (learned, _) =
            DensityGrid::from_log_fn(domain, &[1024], |x| q.log_density(x)).unwrap();
        let basins = watershed_intervals_1d(&target).unwrap();
        let report = ModeReport::build(&learned, &target, &basins).unwrap();
        assert!((report.max_min_learned_ratio() - 3.0).abs() < 1e-3);
        assert!((report.entries[0].mass_ratio - 1.5).abs() < 1e-3);
    }
}
