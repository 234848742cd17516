//! Correlation-function estimators, clustering and moment diagnostics.
//!
//! Diagonal entries use factorial moments, `n_x (n_x − 1)`, so a Poisson
//! field calibrates to `ρ²` everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{Ensemble, Snapshot};
use crate::hierarchy::PairArray;
use crate::space::{ContinuumKernel, KernelSpace};
use crate::stats::RunningStats;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no snapshots supplied")]
    Empty,
    #[error("snapshot {replica} has {got} sites, expected {expected}")]
    ShapeMismatch {
        replica: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Distance-binned pair correlation on the continuum torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialPairCorrelation {
    pub edges: Vec<f64>,
    /// `k2(r)`: ordered pairs per unit volume per unit shell measure.
    pub k2: Vec<f64>,
    pub k2_stderr: Vec<f64>,
    /// `k2(r) / ρ²`.
    pub g: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub order: usize,
    pub time: f64,
    pub replicas: usize,
    pub k1: Vec<f64>,
    pub k1_stderr: Vec<f64>,
    pub k2: Option<PairArray>,
    pub k2_stderr: Option<PairArray>,
    /// Entries whose standard error is exactly zero despite several
    /// replicas (deterministic input).
    pub zero_stderr_entries: usize,
    pub radial: Option<RadialPairCorrelation>,
}

fn check_counts(n: usize, snapshots: &[Vec<u32>]) -> Result<(), EstimatorError> {
    if snapshots.is_empty() {
        return Err(EstimatorError::Empty);
    }
    for (replica, s) in snapshots.iter().enumerate() {
        if s.len() != n {
            return Err(EstimatorError::ShapeMismatch {
                replica,
                expected: n,
                got: s.len(),
            });
        }
    }
    Ok(())
}

fn zero_se(stderr: &[f64], replicas: usize) -> usize {
    if replicas < 2 {
        0
    } else {
        stderr.iter().filter(|s| **s == 0.0).count()
    }
}

/// `k̂1(x)`: replica mean of `n_x / m(x)`.
pub fn estimate_k1(
    space: &KernelSpace,
    snapshots: &[Vec<u32>],
    time: f64,
) -> Result<CorrelationEstimate, EstimatorError> {
    let n = space.len();
    check_counts(n, snapshots)?;
    let m = space.measure();
    let mut stats = vec![RunningStats::new(); n];
    for snap in snapshots {
        for x in 0..n {
            stats[x].push(snap[x] as f64 / m[x]);
        }
    }
    let k1: Vec<f64> = stats.iter().map(RunningStats::mean).collect();
    let k1_stderr: Vec<f64> = stats.iter().map(RunningStats::stderr).collect();
    Ok(CorrelationEstimate {
        order: 1,
        time,
        replicas: snapshots.len(),
        zero_stderr_entries: zero_se(&k1_stderr, snapshots.len()),
        k1,
        k1_stderr,
        k2: None,
        k2_stderr: None,
        radial: None,
    })
}

/// `k̂1` together with `k̂2(x, y)`: replica mean of `n_x n_y` off the
/// diagonal and `n_x (n_x − 1)` on it, divided by `m(x) m(y)`.
pub fn estimate_k2(
    space: &KernelSpace,
    snapshots: &[Vec<u32>],
    time: f64,
) -> Result<CorrelationEstimate, EstimatorError> {
    let mut est = estimate_k1(space, snapshots, time)?;
    let n = space.len();
    let m = space.measure();
    let r = snapshots.len() as f64;
    let mut sum = vec![0.0; n * n];
    let mut sum_sq = vec![0.0; n * n];
    for snap in snapshots {
        for x in 0..n {
            let nx = snap[x] as f64;
            if nx == 0.0 {
                continue;
            }
            for y in x..n {
                let v = if x == y {
                    nx * (nx - 1.0)
                } else {
                    nx * snap[y] as f64
                } / (m[x] * m[y]);
                sum[x * n + y] += v;
                sum_sq[x * n + y] += v * v;
            }
        }
    }
    let mut k2 = PairArray::constant(n, 0.0);
    let mut se = PairArray::constant(n, 0.0);
    for x in 0..n {
        for y in x..n {
            let mean = sum[x * n + y] / r;
            let var = if r > 1.0 {
                ((sum_sq[x * n + y] - r * mean * mean) / (r - 1.0)).max(0.0)
            } else {
                0.0
            };
            let s = (var / r).sqrt();
            for (i, j) in [(x, y), (y, x)] {
                k2.data[i * n + j] = mean;
                se.data[i * n + j] = s;
            }
        }
    }
    est.order = 2;
    est.zero_stderr_entries += zero_se(&se.data, snapshots.len());
    est.k2 = Some(k2);
    est.k2_stderr = Some(se);
    Ok(est)
}

/// Site-averaged correlation estimates, with errors from the spread of the
/// per-replica spatial averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialAverages {
    pub replicas: usize,
    pub k1: f64,
    pub k1_stderr: f64,
    /// Average of `n_x n_y / (m(x) m(y))` over ordered pairs `x ≠ y`.
    pub k2_off: f64,
    pub k2_off_stderr: f64,
    /// Average of `n_x (n_x − 1) / m(x)²`.
    pub k2_diag: f64,
    pub k2_diag_stderr: f64,
}

pub fn spatial_averages(space: &KernelSpace, snapshots: &[Vec<u32>]) -> Result<SpatialAverages, EstimatorError> {
    let n = space.len();
    check_counts(n, snapshots)?;
    if n < 2 {
        return Err(EstimatorError::InvalidParameter("need at least two sites".into()));
    }
    let m = space.measure();
    let (mut s1, mut off, mut diag) = (RunningStats::new(), RunningStats::new(), RunningStats::new());
    for snap in snapshots {
        let w: Vec<f64> = (0..n).map(|x| snap[x] as f64 / m[x]).collect();
        let total: f64 = w.iter().sum();
        let squares: f64 = w.iter().map(|v| v * v).sum();
        let factorial: f64 = (0..n)
            .map(|x| snap[x] as f64 * (snap[x] as f64 - 1.0) / (m[x] * m[x]))
            .sum();
        s1.push(total / n as f64);
        off.push((total * total - squares) / (n * (n - 1)) as f64);
        diag.push(factorial / n as f64);
    }
    Ok(SpatialAverages {
        replicas: snapshots.len(),
        k1: s1.mean(),
        k1_stderr: s1.stderr(),
        k2_off: off.mean(),
        k2_off_stderr: off.stderr(),
        k2_diag: diag.mean(),
        k2_diag_stderr: diag.stderr(),
    })
}

/// Count snapshots recorded at time `t` across an ensemble.
pub fn count_snapshots_at(ensemble: &Ensemble, t: f64) -> Vec<Vec<u32>> {
    ensemble
        .runs
        .iter()
        .filter_map(|run| {
            run.snapshots.iter().find_map(|(s, snap)| match snap {
                Snapshot::Counts(c) if (s - t).abs() <= 1e-12 * t.abs().max(1.0) => Some(c.clone()),
                _ => None,
            })
        })
        .collect()
}

/// Point snapshots recorded at time `t` across an ensemble.
pub fn point_snapshots_at(ensemble: &Ensemble, t: f64) -> Vec<Vec<[f64; 3]>> {
    ensemble
        .runs
        .iter()
        .filter_map(|run| {
            run.snapshots.iter().find_map(|(s, snap)| match snap {
                Snapshot::Points(p) if (s - t).abs() <= 1e-12 * t.abs().max(1.0) => Some(p.clone()),
                _ => None,
            })
        })
        .collect()
}

fn shell_measure(d: usize, r0: f64, r1: f64) -> f64 {
    match d {
        1 => 2.0 * (r1 - r0),
        2 => std::f64::consts::PI * (r1 * r1 - r0 * r0),
        _ => 4.0 / 3.0 * std::f64::consts::PI * (r1.powi(3) - r0.powi(3)),
    }
}

/// Cell list on the torus with cells at least `reach` wide.
struct CellList {
    per_dim: usize,
    width: f64,
    d: usize,
    cells: Vec<Vec<usize>>,
}

impl CellList {
    fn new(points: &[[f64; 3]], d: usize, side: f64, reach: f64) -> Self {
        let per_dim = ((side / reach).floor() as usize).max(1);
        let width = side / per_dim as f64;
        let mut cells = vec![Vec::new(); per_dim.pow(d as u32)];
        let mut list = Self {
            per_dim,
            width,
            d,
            cells: Vec::new(),
        };
        for (i, p) in points.iter().enumerate() {
            cells[list.cell_of(p)].push(i);
        }
        list.cells = cells;
        list
    }

    fn coord(&self, v: f64) -> usize {
        ((v / self.width) as usize).min(self.per_dim - 1)
    }

    fn cell_of(&self, p: &[f64; 3]) -> usize {
        (0..self.d).fold(0, |acc, i| acc * self.per_dim + self.coord(p[i]))
    }

    /// Distinct cells within one step of the cell containing `p`.
    fn neighbours(&self, p: &[f64; 3]) -> Vec<usize> {
        let per = self.per_dim as i64;
        let base: Vec<i64> = (0..self.d).map(|i| self.coord(p[i]) as i64).collect();
        let mut out = Vec::with_capacity(27);
        let span: Vec<i64> = if per >= 3 { vec![-1, 0, 1] } else { (0..per).collect() };
        let total = span.len().pow(self.d as u32);
        for combo in 0..total {
            let mut idx = 0i64;
            let mut c = combo;
            for &b in &base {
                let off = span[c % span.len()];
                c /= span.len();
                let v = if per >= 3 { (b + off).rem_euclid(per) } else { off };
                idx = idx * per + v;
            }
            out.push(idx as usize);
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Radial pair correlation from point snapshots, with ordered-pair counts
/// per replica binned by torus distance. Bin width defaults to a quarter
/// of the dispersal length scale; the range to four length scales (at
/// most half the torus side).
pub fn estimate_radial_pair_correlation(
    kernel: &ContinuumKernel,
    snapshots: &[Vec<[f64; 3]>],
    rho: f64,
    bin_width: Option<f64>,
    r_max: Option<f64>,
) -> Result<RadialPairCorrelation, EstimatorError> {
    if snapshots.is_empty() {
        return Err(EstimatorError::Empty);
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(EstimatorError::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    let scale = kernel.length_scale();
    let width = bin_width.unwrap_or(scale / 4.0);
    let reach = r_max
        .unwrap_or(4.0 * scale)
        .min(0.5 * kernel.side);
    if !(width > 0.0 && reach > 0.0 && width <= reach) {
        return Err(EstimatorError::InvalidParameter(format!(
            "bin width {width} and range {reach} must be positive with width ≤ range"
        )));
    }
    let bins = (reach / width).floor() as usize;
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let reach = edges[bins];
    let volume = kernel.volume();
    let mut stats = vec![RunningStats::new(); bins];
    let mut counts = vec![0.0f64; bins];
    for points in snapshots {
        counts.fill(0.0);
        let cells = CellList::new(points, kernel.d, kernel.side, reach);
        for p in points {
            for cell in cells.neighbours(p) {
                for &j in &cells.cells[cell] {
                    let q = &points[j];
                    if std::ptr::eq(p, q) {
                        continue;
                    }
                    let r = kernel.torus_distance(p, q);
                    if r < reach {
                        let b = ((r / width) as usize).min(bins - 1);
                        counts[b] += 1.0;
                    }
                }
            }
        }
        for (b, s) in stats.iter_mut().enumerate() {
            s.push(counts[b] / (volume * shell_measure(kernel.d, edges[b], edges[b + 1])));
        }
    }
    let k2: Vec<f64> = stats.iter().map(RunningStats::mean).collect();
    Ok(RadialPairCorrelation {
        g: k2.iter().map(|v| v / (rho * rho)).collect(),
        k2_stderr: stats.iter().map(RunningStats::stderr).collect(),
        k2,
        edges,
        rho,
    })
}

/// Wraps a radial estimate, with the density estimated per replica as
/// `count / volume`.
pub fn estimate_continuum_correlations(
    kernel: &ContinuumKernel,
    snapshots: &[Vec<[f64; 3]>],
    time: f64,
    bin_width: Option<f64>,
) -> Result<CorrelationEstimate, EstimatorError> {
    if snapshots.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let mut density = RunningStats::new();
    for s in snapshots {
        density.push(s.len() as f64 / kernel.volume());
    }
    let rho = density.mean();
    let radial = if rho > 0.0 {
        Some(estimate_radial_pair_correlation(kernel, snapshots, rho, bin_width, None)?)
    } else {
        None
    };
    let k1_stderr = vec![density.stderr()];
    Ok(CorrelationEstimate {
        order: 2,
        time,
        replicas: snapshots.len(),
        zero_stderr_entries: zero_se(&k1_stderr, snapshots.len()),
        k1: vec![rho],
        k1_stderr,
        k2: None,
        k2_stderr: None,
        radial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringPoint {
    pub time: f64,
    /// `max_x k̂2(x, x) / k̂1(x)²` and its delta-method standard error.
    pub max_ratio: Option<f64>,
    pub max_ratio_stderr: Option<f64>,
    pub argmax: Option<usize>,
    /// `mean_x k̂2(x, x) / mean_x k̂1(x)²`.
    pub mean_ratio: Option<f64>,
    /// Sites skipped because their density estimate is essentially zero.
    pub undefined_sites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringCurve {
    pub points: Vec<ClusteringPoint>,
    /// Whether the spatially averaged ratio is nondecreasing in time.
    pub rising: bool,
}

/// Densities at or below this are treated as zero.
pub const DENSITY_FLOOR: f64 = 1e-12;

pub fn clustering_diagnostic(estimates: &[CorrelationEstimate]) -> Result<ClusteringCurve, EstimatorError> {
    let mut points = Vec::with_capacity(estimates.len());
    for est in estimates {
        let (Some(k2), Some(se2)) = (&est.k2, &est.k2_stderr) else {
            return Err(EstimatorError::InvalidParameter("estimate carries no pair correlation".into()));
        };
        let n = est.k1.len();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut undefined = 0;
        let (mut diag, mut dens2, mut used) = (0.0, 0.0, 0usize);
        for x in 0..n {
            let k1 = est.k1[x];
            if k1 <= DENSITY_FLOOR {
                undefined += 1;
                continue;
            }
            let d = k2.get(x, x);
            let r = d / (k1 * k1);
            let rel2 = if d > 0.0 { se2.get(x, x) / d } else { 0.0 };
            let rel1 = 2.0 * est.k1_stderr[x] / k1;
            let se = r * (rel2 * rel2 + rel1 * rel1).sqrt();
            if best.is_none_or(|(_, b, _)| r > b) {
                best = Some((x, r, se));
            }
            diag += d;
            dens2 += k1 * k1;
            used += 1;
        }
        points.push(ClusteringPoint {
            time: est.time,
            max_ratio: best.map(|b| b.1),
            max_ratio_stderr: best.map(|b| b.2),
            argmax: best.map(|b| b.0),
            mean_ratio: (used > 0).then(|| diag / dens2),
            undefined_sites: undefined,
        });
    }
    let means: Vec<f64> = points.iter().filter_map(|p| p.mean_ratio).collect();
    Ok(ClusteringCurve {
        rising: means.len() == points.len() && means.windows(2).all(|w| w[1] >= w[0]),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub window: Vec<usize>,
    pub window_measure: f64,
    pub replicas: usize,
    pub j: usize,
    /// `m̂_n` for `n = 1..=n_max`: mean of `C(W, n)` for the window count `W`.
    pub m_hat: Vec<f64>,
    pub m_stderr: Vec<f64>,
    /// `(m̂_n)^{−1/n}`.
    pub inverse_roots: Vec<f64>,
    /// Partial sums of `Σ_n (m̂_{n+j})^{−1/n}` for `n = 1..=n_max − j`.
    pub partial_sums: Vec<f64>,
    /// `min_n n (m̂_n)^{−1/n}`: the largest `C̃` with `(m̂_n)^{−1/n} ≥ C̃/n`.
    pub c_tilde: f64,
    pub diagnostic: String,
    pub note: String,
}

/// Highest order the moment check accepts.
pub const MAX_MOMENT_ORDER: usize = 6;

/// `C(w, n)` in floating point.
fn binomial(w: u64, n: usize) -> f64 {
    let mut c = 1.0;
    for i in 0..n as u64 {
        if i >= w {
            return 0.0;
        }
        c *= (w - i) as f64 / (i + 1) as f64;
    }
    c
}

pub fn moment_growth_check(
    space: &KernelSpace,
    snapshots: &[Vec<u32>],
    window: &[usize],
    n_max: usize,
    j: usize,
) -> Result<MomentReport, EstimatorError> {
    let n = space.len();
    check_counts(n, snapshots)?;
    if n_max == 0 || n_max > MAX_MOMENT_ORDER {
        return Err(EstimatorError::InvalidParameter(format!(
            "n_max must lie in 1..={MAX_MOMENT_ORDER}, got {n_max}"
        )));
    }
    if j >= n_max {
        return Err(EstimatorError::InvalidParameter(format!("shift j = {j} must be below n_max = {n_max}")));
    }
    if window.is_empty() || window.iter().any(|&x| x >= n) {
        return Err(EstimatorError::InvalidParameter("window must be a nonempty set of sites".into()));
    }
    let mut stats = vec![RunningStats::new(); n_max];
    for snap in snapshots {
        let w: u64 = window.iter().map(|&x| snap[x] as u64).sum();
        for (k, s) in stats.iter_mut().enumerate() {
            s.push(binomial(w, k + 1));
        }
    }
    let m_hat: Vec<f64> = stats.iter().map(RunningStats::mean).collect();
    let inverse_roots: Vec<f64> = m_hat
        .iter()
        .enumerate()
        .map(|(k, m)| m.powf(-1.0 / (k + 1) as f64))
        .collect();
    let mut partial_sums = Vec::with_capacity(n_max - j);
    let mut acc = 0.0;
    for k in 1..=n_max - j {
        acc += m_hat[k + j - 1].powf(-1.0 / k as f64);
        partial_sums.push(acc);
    }
    let c_tilde = inverse_roots
        .iter()
        .enumerate()
        .map(|(k, r)| (k + 1) as f64 * r)
        .fold(f64::INFINITY, f64::min);
    let diagnostic = if m_hat.iter().all(|m| *m == 0.0) {
        "all moments vanish; the series diverges trivially".to_string()
    } else if c_tilde.is_finite() && c_tilde > 0.0 {
        format!("(m_n)^(-1/n) >= {c_tilde:.4}/n for n <= {n_max}; partial sums grow without a visible plateau")
    } else {
        "some empirical moments are zero; lower bound not informative".to_string()
    };
    Ok(MomentReport {
        window: window.to_vec(),
        window_measure: window.iter().map(|&x| space.measure()[x]).sum(),
        replicas: snapshots.len(),
        j,
        m_stderr: stats.iter().map(RunningStats::stderr).collect(),
        m_hat,
        inverse_roots,
        partial_sums,
        c_tilde,
        diagnostic,
        note: format!(
            "moments checked only up to order {n_max}; divergence of the full series is not established numerically"
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityFailure {
    pub label: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LenardReport {
    pub checked: usize,
    /// Most negative `value / stderr` among negative entries.
    pub worst_z: f64,
    pub failures: Vec<PositivityFailure>,
    pub passes: bool,
    pub note: String,
}

const LENARD_NOTE: &str =
    "entrywise nonnegativity only; positivity over all test functions is not checked";

fn positivity_report<'a>(entries: impl Iterator<Item = (String, f64, f64)> + 'a) -> LenardReport {
    let mut checked = 0;
    let mut worst_z: f64 = 0.0;
    let mut failures = Vec::new();
    for (label, value, stderr) in entries {
        checked += 1;
        if value < 0.0 && stderr > 0.0 {
            worst_z = worst_z.min(value / stderr);
        }
        let floor = if stderr > 0.0 { -3.0 * stderr } else { -1e-12 };
        if value < floor {
            failures.push(PositivityFailure { label, value, stderr });
        }
    }
    LenardReport {
        checked,
        worst_z,
        passes: failures.is_empty(),
        failures,
        note: LENARD_NOTE.to_string(),
    }
}

/// Every estimated entry must be at least `−3` standard errors.
pub fn lenard_positivity_spot_check(est: &CorrelationEstimate) -> LenardReport {
    let ones = est
        .k1
        .iter()
        .zip(&est.k1_stderr)
        .enumerate()
        .map(|(x, (v, s))| (format!("k1[{x}]"), *v, *s));
    let pairs = est
        .k2
        .iter()
        .zip(&est.k2_stderr)
        .flat_map(|(k2, se)| {
            let n = k2.n;
            (0..n * n).map(move |i| (format!("k2[{},{}]", i / n, i % n), k2.data[i], se.data[i]))
        });
    let radial = est.radial.iter().flat_map(|r| {
        r.k2.iter()
            .zip(&r.k2_stderr)
            .enumerate()
            .map(|(b, (v, s))| (format!("k2(r)[{b}]"), *v, *s))
    });
    positivity_report(ones.chain(pairs).chain(radial))
}

/// Exact arrays (for example from the hierarchy) must be nonnegative.
pub fn lenard_positivity_array(k: &PairArray) -> LenardReport {
    let n = k.n;
    positivity_report((0..n * n).map(|i| (format!("k2[{},{}]", i / n, i % n), k.data[i], 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{run_ensemble, RunParams};
    use crate::rng::stream;
    use crate::space::{build_continuum_kernel, build_lattice_kernel, BoundaryMode, Dispersal, LatticeSpec};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    fn ring(side: usize) -> KernelSpace {
        build_lattice_kernel(&LatticeSpec::new(1, side, BoundaryMode::Periodic)).unwrap()
    }

    fn poisson_snapshots(n: usize, rho: f64, replicas: usize, seed: u64) -> Vec<Vec<u32>> {
        let law = Poisson::new(rho).unwrap();
        (0..replicas)
            .map(|r| {
                let mut rng = stream(seed, "test", r as u64);
                (0..n).map(|_| law.sample(&mut rng) as u32).collect()
            })
            .collect()
    }

    #[test]
    fn k1_arithmetic() {
        let space = ring(2);
        let est = estimate_k1(&space, &[vec![0, 1], vec![2, 1]], 0.0).unwrap();
        assert_eq!(est.k1, vec![1.0, 1.0]);
        assert_eq!(est.k1_stderr, vec![1.0, 0.0]);
        assert_eq!(est.zero_stderr_entries, 1);
        assert!(estimate_k1(&space, &[], 0.0).is_err());
        assert!(estimate_k1(&space, &[vec![1]], 0.0).is_err());
    }

    #[test]
    fn k2_uses_factorial_diagonal() {
        let est = estimate_k2(&ring(2), &[vec![2, 0]], 0.0).unwrap();
        let k2 = est.k2.unwrap();
        assert_eq!(k2.get(0, 0), 2.0);
        assert_eq!(k2.get(0, 1), 0.0);
        let est = estimate_k2(&ring(2), &[vec![1, 3], vec![2, 1]], 0.0).unwrap();
        let k2 = est.k2.unwrap();
        assert_eq!(k2.get(0, 1), 2.5);
        assert_eq!(k2.get(1, 0), 2.5);
        assert_eq!(k2.get(1, 1), 3.0);
    }

    #[test]
    fn poisson_calibration() {
        let rho = 1.3;
        let space = ring(6);
        let snaps = poisson_snapshots(6, rho, 4000, 5);
        let est = estimate_k2(&space, &snaps, 0.0).unwrap();
        let k2 = est.k2.as_ref().unwrap();
        let se = est.k2_stderr.as_ref().unwrap();
        let mut outside = 0;
        for i in 0..36 {
            if (k2.data[i] - rho * rho).abs() > 3.0 * se.data[i] {
                outside += 1;
            }
        }
        assert!(outside <= 2, "{outside}");
        assert!(lenard_positivity_spot_check(&est).passes);
        assert!(k2.asymmetry() == 0.0);
    }

    #[test]
    fn spatial_averages_of_fixed_counts() {
        let avg = spatial_averages(&ring(2), &[vec![2, 0], vec![1, 1]]).unwrap();
        assert_eq!(avg.k1, 1.0);
        assert_eq!(avg.k2_off, 0.5);
        assert_eq!(avg.k2_diag, 0.5);
    }

    #[test]
    fn stderr_shrinks_like_root_two() {
        let space = ring(2);
        let snaps = poisson_snapshots(2, 2.0, 40_000, 9);
        let half = estimate_k1(&space, &snaps[..20_000], 0.0).unwrap();
        let full = estimate_k1(&space, &snaps, 0.0).unwrap();
        let ratio = half.k1_stderr[0] / full.k1_stderr[0];
        assert!((ratio - 2f64.sqrt()).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn clustering_of_poisson_is_flat() {
        let space = ring(8);
        let snaps = poisson_snapshots(8, 2.0, 3000, 3);
        let est = estimate_k2(&space, &snaps, 0.0).unwrap();
        let curve = clustering_diagnostic(&[est]).unwrap();
        let p = &curve.points[0];
        assert_abs_diff_eq!(p.mean_ratio.unwrap(), 1.0, epsilon = 0.05);
        let det = estimate_k2(&space, &[vec![1; 8], vec![1; 8]], 1.0).unwrap();
        assert_eq!(det.zero_stderr_entries, 8 + 64);
        let empty = estimate_k2(&space, &[vec![0; 8], vec![0; 8]], 1.0).unwrap();
        let curve = clustering_diagnostic(&[empty]).unwrap();
        assert_eq!(curve.points[0].undefined_sites, 8);
        assert!(curve.points[0].max_ratio.is_none());
    }

    #[test]
    fn poisson_window_moments() {
        let rho = 0.8;
        let space = ring(10);
        let snaps = poisson_snapshots(10, rho, 5000, 11);
        let window = [0, 1, 2, 3];
        let report = moment_growth_check(&space, &snaps, &window, 4, 1).unwrap();
        let mut fact = 1.0;
        for k in 1..=4 {
            fact *= k as f64;
            let expect = (rho * 4.0f64).powi(k as i32) / fact;
            let z = (report.m_hat[k - 1] - expect) / report.m_stderr[k - 1];
            assert!(z.abs() < 3.5, "n={k} z={z}");
        }
        assert!(report.partial_sums.windows(2).all(|w| w[1] >= w[0]));
        let empty = moment_growth_check(&space, &vec![vec![0; 10]; 3], &window, 3, 0).unwrap();
        assert!(empty.m_hat.iter().all(|m| *m == 0.0));
        assert!(moment_growth_check(&space, &snaps, &window, 7, 0).is_err());
    }

    #[test]
    fn negative_entries_fail_positivity() {
        let mut est = estimate_k1(&ring(2), &[vec![1, 1], vec![1, 1]], 0.0).unwrap();
        est.k1[1] = -1.0;
        est.k1_stderr[1] = 0.01;
        let report = lenard_positivity_spot_check(&est);
        assert!(!report.passes);
        assert_eq!(report.failures[0].label, "k1[1]");
        assert!(lenard_positivity_array(&PairArray::constant(3, 0.0)).passes);
    }

    #[test]
    fn radial_pairs_of_poisson_points() {
        let kernel = build_continuum_kernel(2, 16.0, Dispersal::Gaussian { sigma: 1.0 }).unwrap();
        let rho = 1.0;
        let snaps: Vec<Vec<[f64; 3]>> = (0..60)
            .map(|r| {
                let mut rng = stream(2, "pts", r);
                let count = Poisson::new(rho * 256.0).unwrap().sample(&mut rng) as usize;
                (0..count)
                    .map(|_| [rng.random::<f64>() * 16.0, rng.random::<f64>() * 16.0, 0.0])
                    .collect()
            })
            .collect();
        let radial = estimate_radial_pair_correlation(&kernel, &snaps, rho, None, None).unwrap();
        assert_eq!(radial.edges.len(), 17);
        let mean: f64 = radial.g[4..].iter().sum::<f64>() / (radial.g.len() - 4) as f64;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 0.05);
    }

    #[test]
    fn cell_list_matches_brute_force() {
        let kernel = build_continuum_kernel(3, 8.0, Dispersal::Uniform { radius: 0.5 }).unwrap();
        let mut rng = stream(4, "pts", 0);
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|_| [rng.random::<f64>() * 8.0, rng.random::<f64>() * 8.0, rng.random::<f64>() * 8.0])
            .collect();
        let radial = estimate_radial_pair_correlation(&kernel, std::slice::from_ref(&pts), 1.0, Some(0.25), Some(2.0)).unwrap();
        let mut brute = 0.0;
        for (i, p) in pts.iter().enumerate() {
            for (j, q) in pts.iter().enumerate() {
                if i != j && kernel.torus_distance(p, q) < 2.0 {
                    brute += 1.0;
                }
            }
        }
        let counted: f64 = radial
            .k2
            .iter()
            .enumerate()
            .map(|(b, v)| v * kernel.volume() * shell_measure(3, radial.edges[b], radial.edges[b + 1]))
            .sum();
        assert_abs_diff_eq!(counted, brute, epsilon = 1e-6);
    }

    #[test]
    fn snapshots_from_an_ensemble() {
        let space = ring(8);
        let params = RunParams::new(1.0, 1.0, 3).with_snapshots(vec![0.0, 1.0]);
        let ens = run_ensemble(&space, &params, 20).unwrap();
        let at0 = count_snapshots_at(&ens, 0.0);
        assert_eq!(at0.len(), 20);
        let est = estimate_k2(&space, &at0, 0.0).unwrap();
        assert_eq!(est.replicas, 20);
    }
}
