//! Continuous-time random walks driven by the kernel rows, and the
//! Monte Carlo estimates built on them: two-walker interaction integrals,
//! their tail classification, and heat-kernel decay.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, SimRng};
use crate::space::{Geometry, KernelSpace, Target};
use crate::stats::{DecayFit, DecayLaw, RunningStats};

#[derive(Debug, Error, PartialEq)]
pub enum WalkError {
    #[error("site {site} is outside the space of {len} sites")]
    InvalidSite { site: usize, len: usize },
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("times must be finite, nonnegative and strictly increasing")]
    UnsortedTimes,
    #[error("need at least {min} replicas, got {got}")]
    TooFewReplicas { got: usize, min: usize },
    #[error("need at least {min} horizons, got {got}")]
    TooFewHorizons { got: usize, min: usize },
    #[error("no probe {0} given")]
    EmptyProbeSet(&'static str),
}

/// How a simulated path ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PathEnd {
    /// Reached the horizon.
    Horizon,
    /// Jumped to the exterior of an absorbing window.
    Killed { time: f64 },
    /// Sits on a site with no outgoing rate.
    Stuck,
}

/// Piecewise-constant trajectory: the walk occupies `sites[i]` on
/// `[times[i], times[i + 1])`, with `times[0] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub start: usize,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub sites: Vec<usize>,
    pub end: PathEnd,
}

impl WalkPath {
    pub fn jumps(&self) -> usize {
        self.sites.len() - 1
    }

    /// Site occupied at time `t`, or `None` once killed.
    pub fn site_at(&self, t: f64) -> Option<usize> {
        if let PathEnd::Killed { time } = self.end {
            if t >= time {
                return None;
            }
        }
        let i = self.times.partition_point(|&s| s <= t);
        Some(self.sites[i.max(1) - 1])
    }

    /// End of the last occupied segment (kill time or horizon).
    pub fn alive_until(&self) -> f64 {
        match self.end {
            PathEnd::Killed { time } => time,
            _ => self.horizon,
        }
    }
}

/// A walker advanced lazily: `site` is held until `clock`.
#[derive(Debug, Clone)]
pub(crate) struct Walker {
    pub(crate) site: Option<usize>,
    pub(crate) clock: f64,
}

impl Walker {
    pub(crate) fn new<R: Rng + ?Sized>(space: &KernelSpace, x0: usize, rng: &mut R) -> Self {
        let mut w = Self {
            site: Some(x0),
            clock: 0.0,
        };
        w.schedule(space, rng);
        w
    }

    fn schedule<R: Rng + ?Sized>(&mut self, space: &KernelSpace, rng: &mut R) {
        match self.site {
            Some(x) if space.walk_rate(x) > 0.0 => {
                let e: f64 = Exp1.sample(rng);
                self.clock += e / space.walk_rate(x);
            }
            _ => self.clock = f64::INFINITY,
        }
    }

    /// Performs the jump scheduled at `clock`.
    pub(crate) fn jump<R: Rng + ?Sized>(&mut self, space: &KernelSpace, rng: &mut R) {
        let x = self.site.expect("dead walkers have no scheduled jump");
        match space.sample_walk_target(x, rng) {
            Some(Target::Site(y)) => {
                self.site = Some(y);
                self.schedule(space, rng);
            }
            _ => {
                self.site = None;
                self.clock = f64::INFINITY;
            }
        }
    }

    /// Performs every jump scheduled at or before `t`.
    pub(crate) fn advance_to<R: Rng + ?Sized>(&mut self, space: &KernelSpace, t: f64, rng: &mut R) {
        while self.clock <= t {
            self.jump(space, rng);
        }
    }
}

fn check_site(space: &KernelSpace, x: usize) -> Result<(), WalkError> {
    if x < space.len() {
        Ok(())
    } else {
        Err(WalkError::InvalidSite {
            site: x,
            len: space.len(),
        })
    }
}

fn check_times(times: &[f64], allow_zero: bool) -> Result<(), WalkError> {
    let ok = times.iter().all(|t| t.is_finite() && (*t > 0.0 || (allow_zero && *t == 0.0)))
        && times.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(WalkError::UnsortedTimes)
    }
}

fn walk_from_rng<R: Rng + ?Sized>(
    space: &KernelSpace,
    x0: usize,
    horizon: f64,
    rng: &mut R,
) -> WalkPath {
    let mut walker = Walker::new(space, x0, rng);
    let mut times = vec![0.0];
    let mut sites = vec![x0];
    while walker.clock <= horizon {
        let t = walker.clock;
        walker.jump(space, rng);
        match walker.site {
            Some(y) => {
                times.push(t);
                sites.push(y);
            }
            None => {
                return WalkPath {
                    start: x0,
                    horizon,
                    times,
                    sites,
                    end: PathEnd::Killed { time: t },
                }
            }
        }
    }
    let stuck = walker.clock.is_infinite();
    WalkPath {
        start: x0,
        horizon,
        times,
        sites,
        end: if stuck { PathEnd::Stuck } else { PathEnd::Horizon },
    }
}

/// Simulates the walk with generator `Σ_y (a + J)(x, y) m(y) (f(y) − f(x))`
/// from `x0` up to `horizon`.
pub fn simulate_jump_process(
    space: &KernelSpace,
    x0: usize,
    horizon: f64,
    seed: u64,
) -> Result<WalkPath, WalkError> {
    check_site(space, x0)?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(WalkError::InvalidHorizon(horizon));
    }
    let mut rng = stream(seed, "walk", 0);
    Ok(walk_from_rng(space, x0, horizon, &mut rng))
}

/// `∫_0^{T_j} a(X(t), Y(t)) dt` for two recorded paths, integrated exactly
/// over the constant segments.
pub fn pair_integral(space: &KernelSpace, x: &WalkPath, y: &WalkPath, horizons: &[f64]) -> Vec<f64> {
    let mut breaks: Vec<f64> = x.times.iter().chain(&y.times).copied().collect();
    breaks.extend_from_slice(horizons);
    breaks.push(x.alive_until());
    breaks.push(y.alive_until());
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut out = Vec::with_capacity(horizons.len());
    let mut acc = 0.0;
    let mut h = 0;
    for w in breaks.windows(2) {
        let (s, e) = (w[0], w[1]);
        while h < horizons.len() && horizons[h] <= s {
            out.push(acc);
            h += 1;
        }
        if h == horizons.len() {
            break;
        }
        if let (Some(a), Some(b)) = (x.site_at(s), y.site_at(s)) {
            acc += space.a(a, b) * (e - s);
        }
    }
    while out.len() < horizons.len() {
        out.push(acc);
    }
    out
}

/// Streams two independent walkers and records the interaction integral
/// at each horizon.
fn stream_pair_integral(
    space: &KernelSpace,
    (x0, y0): (usize, usize),
    horizons: &[f64],
    rx: &mut SimRng,
    ry: &mut SimRng,
) -> Vec<f64> {
    let mut wx = Walker::new(space, x0, rx);
    let mut wy = Walker::new(space, y0, ry);
    let mut t = 0.0;
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(horizons.len());
    for &end in horizons {
        loop {
            let next = wx.clock.min(wy.clock).min(end);
            if let (Some(a), Some(b)) = (wx.site, wy.site) {
                acc += space.a(a, b) * (next - t);
            }
            t = next;
            if next == end && wx.clock > end && wy.clock > end {
                break;
            }
            if wx.clock <= wy.clock {
                wx.jump(space, rx);
            } else {
                wy.jump(space, ry);
            }
        }
        out.push(acc);
    }
    out
}

/// Stationary distribution of the walk, when it has one inside the window.
///
/// Returns `None` when mass leaks to the exterior (the long-time integrand
/// then vanishes).
pub fn stationary_distribution(space: &KernelSpace) -> Option<(Vec<f64>, &'static str)> {
    if space.exterior_out().iter().any(|&e| e > 0.0) {
        return None;
    }
    let m = space.measure();
    let total: f64 = m.iter().sum();
    // The measure is invariant when inflow Σ_x m(x) q(x, y) = m(y) rate(y).
    let mut inflow = vec![0.0; space.len()];
    for (x, y, v) in space.weighted_kernel().triplets() {
        inflow[y] += m[x] * v;
    }
    if let Some(j) = space.jump() {
        for (x, y, v) in j.triplets() {
            inflow[y] += m[x] * v * m[y];
        }
    }
    let balanced = inflow
        .iter()
        .enumerate()
        .all(|(y, f)| (f / m[y] - space.walk_rate(y)).abs() <= 1e-12 * space.walk_rate(y).max(1.0));
    if balanced {
        return Some((m.iter().map(|v| v / total).collect(), "measure"));
    }
    // Power iteration of the lazy uniformized chain.
    let lambda = 2.0 * space.walk_rates().iter().copied().fold(0.0, f64::max);
    if lambda == 0.0 {
        return Some((m.iter().map(|v| v / total).collect(), "measure"));
    }
    let n = space.len();
    let mut pi: Vec<f64> = m.iter().map(|v| v / total).collect();
    let mut next = vec![0.0; n];
    for _ in 0..200_000 {
        for (y, slot) in next.iter_mut().enumerate() {
            *slot = pi[y] * (1.0 - space.walk_rate(y) / lambda);
        }
        for (x, y, v) in space.weighted_kernel().triplets() {
            next[y] += pi[x] * v / lambda;
        }
        if let Some(j) = space.jump() {
            for (x, y, v) in j.triplets() {
                next[y] += pi[x] * v * m[y] / lambda;
            }
        }
        let s: f64 = next.iter().sum();
        let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b / s).abs()).sum();
        for (p, v) in pi.iter_mut().zip(&next) {
            *p = v / s;
        }
        if diff < 1e-13 {
            break;
        }
    }
    Some((pi, "power_iteration"))
}

/// Long-time value `Σ π(x) π(y) a(x, y)` of the two-walker integrand.
pub fn stationary_floor(space: &KernelSpace) -> (f64, &'static str) {
    match stationary_distribution(space) {
        None => (0.0, "leaking"),
        Some((pi, method)) => {
            let f = space
                .kernel()
                .triplets()
                .map(|(x, y, v)| pi[x] * pi[y] * v)
                .sum();
            (f, method)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorMode {
    /// Subtract `T · Σ π π a` when the window has a stationary law.
    Auto,
    /// Report raw integrals only.
    Off,
}

/// Partial integrals for one probe pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIntegral {
    pub pair_id: usize,
    pub x: usize,
    pub y: usize,
    /// Raw `Î(T_j)`.
    pub i_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `Î(T_j) − floor · T_j`.
    pub corrected: Vec<f64>,
    pub corrected_stderr: Vec<f64>,
    /// Corrected increments over `[T_{j−1}, T_j]` (with `T_{−1} = 0`) and
    /// their paired standard errors.
    pub increments: Vec<f64>,
    pub increment_stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransienceReport {
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    pub pairs: Vec<PairIntegral>,
    /// Stationary value of the integrand subtracted per unit time.
    pub floor: f64,
    pub floor_method: String,
    /// Corrected partial integrals maximized over the probe pairs.
    pub max_over_pairs: Vec<f64>,
    pub max_stderr: Vec<f64>,
    /// Horizon beyond which truncation bias is expected on trees.
    pub horizon_cap: Option<f64>,
    pub horizons_beyond_cap: bool,
    pub probe_note: String,
}

impl TransienceReport {
    /// Builds a report from given partial-integral sequences (no floor),
    /// treating the increment errors as independent.
    pub fn from_sequences(horizons: &[f64], sequences: &[(Vec<f64>, Vec<f64>)]) -> Self {
        let pairs: Vec<PairIntegral> = sequences
            .iter()
            .enumerate()
            .map(|(id, (values, se))| {
                let mut increments = Vec::with_capacity(values.len());
                let mut increment_stderr = Vec::with_capacity(values.len());
                for j in 0..values.len() {
                    let (prev, prev_se) = if j == 0 { (0.0, 0.0) } else { (values[j - 1], se[j - 1]) };
                    increments.push(values[j] - prev);
                    increment_stderr.push((se[j].powi(2) + prev_se.powi(2)).sqrt());
                }
                PairIntegral {
                    pair_id: id,
                    x: 0,
                    y: 0,
                    i_hat: values.clone(),
                    stderr: se.clone(),
                    corrected: values.clone(),
                    corrected_stderr: se.clone(),
                    increments,
                    increment_stderr,
                }
            })
            .collect();
        let (max_over_pairs, max_stderr) = max_over(&pairs, horizons.len());
        Self {
            horizons: horizons.to_vec(),
            replicas: 0,
            seed: 0,
            pairs,
            floor: 0.0,
            floor_method: "none".into(),
            max_over_pairs,
            max_stderr,
            horizon_cap: None,
            horizons_beyond_cap: false,
            probe_note: "constructed sequences".into(),
        }
    }
}

fn max_over(pairs: &[PairIntegral], m: usize) -> (Vec<f64>, Vec<f64>) {
    (0..m)
        .map(|j| {
            pairs
                .iter()
                .map(|p| (p.corrected[j], p.corrected_stderr[j]))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap_or((0.0, 0.0))
        })
        .unzip()
}

fn probe_note(space: &KernelSpace, pairs: usize) -> String {
    let symmetric = match space.geometry() {
        Geometry::Lattice { periodic: true, .. } if space.metadata().get("model").map(String::as_str) == Some("lattice") => {
            " (translation invariance of the torus covers all pairs with the same displacement)"
        }
        Geometry::Tree { .. } => " (tree automorphisms cover interior pairs at the same distance)",
        _ => "",
    };
    format!("supremum over {pairs} probe pair(s){symmetric}")
}

/// Horizon beyond which absorbing leaves bias tree estimates:
/// `depth / (2 · drift)` with drift `(k − 2)/k`.
pub fn tree_horizon_cap(space: &KernelSpace) -> Option<f64> {
    match space.geometry() {
        Geometry::Tree { k, depth, .. } => {
            let drift = (*k as f64 - 2.0) / *k as f64;
            Some(*depth as f64 / (2.0 * drift))
        }
        _ => None,
    }
}

/// Minimum replica count accepted by [`estimate_transience_integral`].
pub const MIN_TRANSIENCE_REPLICAS: usize = 100;

/// Monte Carlo estimate of `∫_0^T E_{x,y} a(X(t), Y(t)) dt` for independent
/// walkers started at each probe pair, with the stationary floor removed.
pub fn estimate_transience_integral(
    space: &KernelSpace,
    probe_pairs: &[(usize, usize)],
    horizons: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<TransienceReport, WalkError> {
    estimate_transience_integral_with(space, probe_pairs, horizons, replicas, seed, FloorMode::Auto)
}

pub fn estimate_transience_integral_with(
    space: &KernelSpace,
    probe_pairs: &[(usize, usize)],
    horizons: &[f64],
    replicas: usize,
    seed: u64,
    floor_mode: FloorMode,
) -> Result<TransienceReport, WalkError> {
    if probe_pairs.is_empty() {
        return Err(WalkError::EmptyProbeSet("pairs"));
    }
    for &(x, y) in probe_pairs {
        check_site(space, x)?;
        check_site(space, y)?;
    }
    if horizons.is_empty() {
        return Err(WalkError::TooFewHorizons { got: 0, min: 1 });
    }
    check_times(horizons, false)?;
    if replicas < MIN_TRANSIENCE_REPLICAS {
        return Err(WalkError::TooFewReplicas {
            got: replicas,
            min: MIN_TRANSIENCE_REPLICAS,
        });
    }
    let (floor, floor_method) = match floor_mode {
        FloorMode::Auto => stationary_floor(space),
        FloorMode::Off => (0.0, "off"),
    };
    let m = horizons.len();
    let pairs = probe_pairs
        .iter()
        .enumerate()
        .map(|(id, &(x, y))| {
            let purpose_x = format!("transience/{id}/x");
            let purpose_y = format!("transience/{id}/y");
            let samples: Vec<Vec<f64>> = (0..replicas)
                .into_par_iter()
                .map(|r| {
                    let mut rx = stream(seed, &purpose_x, r as u64);
                    let mut ry = stream(seed, &purpose_y, r as u64);
                    stream_pair_integral(space, (x, y), horizons, &mut rx, &mut ry)
                })
                .collect();
            let mut raw = vec![RunningStats::new(); m];
            let mut inc = vec![RunningStats::new(); m];
            for s in &samples {
                for j in 0..m {
                    raw[j].push(s[j]);
                    let prev = if j == 0 { 0.0 } else { s[j - 1] };
                    let dt = horizons[j] - if j == 0 { 0.0 } else { horizons[j - 1] };
                    inc[j].push(s[j] - prev - floor * dt);
                }
            }
            PairIntegral {
                pair_id: id,
                x,
                y,
                i_hat: raw.iter().map(RunningStats::mean).collect(),
                stderr: raw.iter().map(RunningStats::stderr).collect(),
                corrected: raw
                    .iter()
                    .zip(horizons)
                    .map(|(s, t)| s.mean() - floor * t)
                    .collect(),
                corrected_stderr: raw.iter().map(RunningStats::stderr).collect(),
                increments: inc.iter().map(RunningStats::mean).collect(),
                increment_stderr: inc.iter().map(RunningStats::stderr).collect(),
            }
        })
        .collect::<Vec<_>>();
    let (max_over_pairs, max_stderr) = max_over(&pairs, m);
    let horizon_cap = tree_horizon_cap(space);
    Ok(TransienceReport {
        horizons: horizons.to_vec(),
        replicas,
        seed,
        horizons_beyond_cap: horizon_cap.is_some_and(|c| horizons[m - 1] > c),
        probe_note: probe_note(space, probe_pairs.len()),
        pairs,
        floor,
        floor_method: floor_method.into(),
        max_over_pairs,
        max_stderr,
        horizon_cap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailClass {
    TransientExponential,
    TransientPolynomial,
    /// Plateau detected but too few resolved increments to fit a law.
    TransientUnresolved,
    Recurrent,
    Inconclusive,
}

impl TailClass {
    pub fn is_transient(self) -> bool {
        matches!(
            self,
            Self::TransientExponential | Self::TransientPolynomial | Self::TransientUnresolved
        )
    }
}

impl std::fmt::Display for TailClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TransientExponential => "transient-exponential",
            Self::TransientPolynomial => "transient-polynomial",
            Self::TransientUnresolved => "transient-unresolved",
            Self::Recurrent => "recurrent",
            Self::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailThresholds {
    /// The last doubling must add less than this share of the integral.
    pub plateau_rel: f64,
    /// Number of standard errors used for separation.
    pub z: f64,
    /// Growth of `t · dÎ/dt` between the last two windows that still counts
    /// as divergent.
    pub growth_ratio: f64,
}

impl Default for TailThresholds {
    fn default() -> Self {
        Self {
            plateau_rel: 0.02,
            z: 2.0,
            growth_ratio: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub pair_id: usize,
    pub class: TailClass,
    /// Share of the integral added by the last window.
    pub last_relative_increment: f64,
    /// Fit of the increment rate `dÎ/dt` against time.
    pub fit: Option<DecayFit>,
    /// Plateau plus extrapolated tail, for transient pairs.
    pub q_hat: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailClassification {
    pub class: TailClass,
    pub q_hat: Option<f64>,
    /// Fitted decay rate κ of the dominant pair (exponential tails).
    pub kappa: Option<f64>,
    /// Fitted exponent γ of the dominant pair (polynomial tails).
    pub gamma: Option<f64>,
    /// Residual sum of squares of the selected fit.
    pub goodness: Option<f64>,
    pub thresholds: TailThresholds,
    pub pairs: Vec<PairVerdict>,
}

pub fn classify_tail(report: &TransienceReport) -> Result<TailClassification, WalkError> {
    classify_tail_with(report, TailThresholds::default())
}

fn window_points(horizons: &[f64]) -> (Vec<f64>, Vec<f64>) {
    horizons
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            if j == 0 {
                (t / 2.0, t)
            } else {
                let s = horizons[j - 1];
                ((s * t).sqrt(), t - s)
            }
        })
        .unzip()
}

fn classify_pair(p: &PairIntegral, horizons: &[f64], th: TailThresholds) -> PairVerdict {
    let m = horizons.len();
    let (mid, width) = window_points(horizons);
    let d = &p.increments;
    let s = &p.increment_stderr;
    let c_last = p.corrected[m - 1];
    let rate: Vec<f64> = d.iter().zip(&width).map(|(d, w)| d / w).collect();
    let last_rel = if c_last != 0.0 { d[m - 1] / c_last } else { f64::INFINITY };

    let significant = |j: usize| d[j] > th.z * s[j];
    let plateau = c_last > 0.0 && d[m - 1] + th.z * s[m - 1] < th.plateau_rel * c_last;
    let growing = significant(m - 1)
        && significant(m - 2)
        && mid[m - 1] * rate[m - 1] >= th.growth_ratio * mid[m - 2] * rate[m - 2];

    if plateau {
        let mut idx: Vec<usize> = (0..m).filter(|&j| significant(j)).collect();
        if idx.len() < 3 {
            idx = (0..m).filter(|&j| d[j] > 0.0).collect();
        }
        let t: Vec<f64> = idx.iter().map(|&j| mid[j]).collect();
        let g: Vec<f64> = idx.iter().map(|&j| rate[j]).collect();
        let fit = DecayFit::fit(&t, &g);
        let t_end = horizons[m - 1];
        let (class, tail) = match &fit {
            Some(f) if f.law == DecayLaw::Exponential && f.rate > 0.0 => (
                TailClass::TransientExponential,
                (f.exponential.intercept - f.rate * t_end).exp() / f.rate,
            ),
            Some(f) if f.law == DecayLaw::Polynomial && f.exponent > 1.0 => (
                TailClass::TransientPolynomial,
                f.polynomial.intercept.exp() * t_end.powf(1.0 - f.exponent) / (f.exponent - 1.0),
            ),
            Some(f) if f.law == DecayLaw::Polynomial => (TailClass::TransientPolynomial, 0.0),
            _ => (TailClass::TransientUnresolved, 0.0),
        };
        let reason = format!(
            "last window adds {:.3e} ± {:.1e} of {:.4}; plateau",
            d[m - 1],
            s[m - 1],
            c_last
        );
        return PairVerdict {
            pair_id: p.pair_id,
            class,
            last_relative_increment: last_rel,
            fit,
            q_hat: Some(c_last + tail),
            reason,
        };
    }
    let (class, reason) = if growing {
        (
            TailClass::Recurrent,
            format!(
                "last two windows grow significantly; t·dÎ/dt {:.4} -> {:.4}",
                mid[m - 2] * rate[m - 2],
                mid[m - 1] * rate[m - 1]
            ),
        )
    } else {
        (
            TailClass::Inconclusive,
            format!(
                "last window adds {:.3e} ± {:.1e} of {:.4}: neither a plateau nor sustained growth",
                d[m - 1],
                s[m - 1],
                c_last
            ),
        )
    };
    PairVerdict {
        pair_id: p.pair_id,
        class,
        last_relative_increment: last_rel,
        fit: None,
        q_hat: None,
        reason,
    }
}

/// Decides between a plateau (transient), sustained growth (recurrent) and
/// neither (inconclusive) from the corrected increments of every pair.
pub fn classify_tail_with(
    report: &TransienceReport,
    thresholds: TailThresholds,
) -> Result<TailClassification, WalkError> {
    let m = report.horizons.len();
    if m < 4 {
        return Err(WalkError::TooFewHorizons { got: m, min: 4 });
    }
    let verdicts: Vec<PairVerdict> = report
        .pairs
        .iter()
        .map(|p| classify_pair(p, &report.horizons, thresholds))
        .collect();
    let class = if verdicts.iter().any(|v| v.class == TailClass::Recurrent) {
        TailClass::Recurrent
    } else if !verdicts.is_empty() && verdicts.iter().all(|v| v.class.is_transient()) {
        report
            .pairs
            .iter()
            .zip(&verdicts)
            .max_by(|a, b| a.0.corrected[m - 1].total_cmp(&b.0.corrected[m - 1]))
            .map(|(_, v)| v.class)
            .unwrap_or(TailClass::Inconclusive)
    } else {
        TailClass::Inconclusive
    };
    let dominant = report
        .pairs
        .iter()
        .zip(&verdicts)
        .max_by(|a, b| a.0.corrected[m - 1].total_cmp(&b.0.corrected[m - 1]))
        .map(|(_, v)| v);
    let fit = dominant.and_then(|v| v.fit);
    let q_hat = if class.is_transient() {
        verdicts
            .iter()
            .filter_map(|v| v.q_hat)
            .fold(None, |acc: Option<f64>, q| Some(acc.map_or(q, |a| a.max(q))))
    } else {
        None
    };
    Ok(TailClassification {
        class,
        q_hat,
        kappa: fit.map(|f| f.rate),
        gamma: fit.map(|f| f.exponent),
        goodness: fit.map(|f| match f.law {
            DecayLaw::Exponential => f.exponential.sse,
            DecayLaw::Polynomial => f.polynomial.sse,
        }),
        thresholds,
        pairs: verdicts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupCurve {
    pub times: Vec<f64>,
    /// `max_{x, y} Ê_x a(X(t), y)` over the probe sites and targets.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub argmax: Vec<(usize, usize)>,
    pub fit: Option<DecayFit>,
    pub probe_note: String,
}

/// Monte Carlo curve of `sup_x E_x a(X(t), y)`, maximized over the probe
/// starting points and the targets `y`.
pub fn estimate_sup_condition(
    space: &KernelSpace,
    probe_x: &[usize],
    y_targets: &[usize],
    times: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<SupCurve, WalkError> {
    if probe_x.is_empty() {
        return Err(WalkError::EmptyProbeSet("starting sites"));
    }
    if y_targets.is_empty() {
        return Err(WalkError::EmptyProbeSet("targets"));
    }
    for &x in probe_x.iter().chain(y_targets) {
        check_site(space, x)?;
    }
    check_times(times, true)?;
    if replicas < 2 {
        return Err(WalkError::TooFewReplicas { got: replicas, min: 2 });
    }
    let nt = times.len();
    let per_x: Vec<Vec<Vec<RunningStats>>> = probe_x
        .iter()
        .map(|&x| {
            let purpose = format!("sup/{x}");
            let samples: Vec<Vec<Option<usize>>> = (0..replicas)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream(seed, &purpose, r as u64);
                    let mut w = Walker::new(space, x, &mut rng);
                    times
                        .iter()
                        .map(|&t| {
                            w.advance_to(space, t, &mut rng);
                            w.site
                        })
                        .collect()
                })
                .collect();
            let mut stats = vec![vec![RunningStats::new(); y_targets.len()]; nt];
            for s in &samples {
                for (j, site) in s.iter().enumerate() {
                    for (k, &y) in y_targets.iter().enumerate() {
                        stats[j][k].push(site.map_or(0.0, |z| space.a(z, y)));
                    }
                }
            }
            stats
        })
        .collect();
    let mut values = Vec::with_capacity(nt);
    let mut stderr = Vec::with_capacity(nt);
    let mut argmax = Vec::with_capacity(nt);
    for j in 0..nt {
        let mut best = (f64::NEG_INFINITY, 0.0, (0, 0));
        for (i, &x) in probe_x.iter().enumerate() {
            for (k, &y) in y_targets.iter().enumerate() {
                let s = &per_x[i][j][k];
                if s.mean() > best.0 {
                    best = (s.mean(), s.stderr(), (x, y));
                }
            }
        }
        values.push(best.0);
        stderr.push(best.1);
        argmax.push(best.2);
    }
    let fit = DecayFit::fit(times, &values);
    Ok(SupCurve {
        times: times.to_vec(),
        values,
        stderr,
        argmax,
        fit,
        probe_note: format!(
            "supremum over {} starting site(s) and {} target(s)",
            probe_x.len(),
            y_targets.len()
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelEstimate {
    pub site: usize,
    pub times: Vec<f64>,
    pub replicas: usize,
    /// Return frequency `p̂(x, x, t)`.
    pub p_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    /// No returns observed: the error is replaced by the one-sided bound
    /// `3/R` and the point is excluded from the fit.
    pub widened: Vec<bool>,
    /// Fraction of walkers still inside the window, `Σ_y p̂(x, y, t)`.
    pub survival: Vec<f64>,
    pub fit: Option<DecayFit>,
}

/// Return probabilities of the walk started at `x`, with competing
/// exponential and polynomial fits of `log p̂` over the points with `t > 0`.
pub fn heat_kernel_probe(
    space: &KernelSpace,
    x: usize,
    times: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<HeatKernelEstimate, WalkError> {
    check_site(space, x)?;
    check_times(times, true)?;
    if replicas < 1 {
        return Err(WalkError::TooFewReplicas { got: replicas, min: 1 });
    }
    let nt = times.len();
    const CHUNK: usize = 4096;
    let chunks = replicas.div_ceil(CHUNK);
    let (hits, alive) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut hits = vec![0u64; nt];
            let mut alive = vec![0u64; nt];
            for r in c * CHUNK..((c + 1) * CHUNK).min(replicas) {
                let mut rng = stream(seed, "heat", r as u64);
                let mut w = Walker::new(space, x, &mut rng);
                for (j, &t) in times.iter().enumerate() {
                    w.advance_to(space, t, &mut rng);
                    match w.site {
                        Some(s) => {
                            alive[j] += 1;
                            hits[j] += u64::from(s == x);
                        }
                        None => break,
                    }
                }
            }
            (hits, alive)
        })
        .reduce(
            || (vec![0; nt], vec![0; nt]),
            |(mut h, mut a), (h2, a2)| {
                h.iter_mut().zip(h2).for_each(|(u, v)| *u += v);
                a.iter_mut().zip(a2).for_each(|(u, v)| *u += v);
                (h, a)
            },
        );
    let r = replicas as f64;
    let p_hat: Vec<f64> = hits.iter().map(|&h| h as f64 / r).collect();
    let widened: Vec<bool> = hits.iter().map(|&h| h == 0).collect();
    let stderr = p_hat
        .iter()
        .zip(&widened)
        .map(|(&p, &w)| if w { 3.0 / r } else { (p * (1.0 - p) / r).sqrt() })
        .collect();
    let survival = alive.iter().map(|&a| a as f64 / r).collect();
    let fit = DecayFit::fit(times, &p_hat);
    Ok(HeatKernelEstimate {
        site: x,
        times: times.to_vec(),
        replicas,
        p_hat,
        stderr,
        widened,
        survival,
        fit,
    })
}

/// Monte Carlo `E_{x,y} a(X(t), Y(t))` for independent walkers from every
/// pair of sites, at each time. Indexed `[time][x * N + y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExpectations {
    pub n: usize,
    pub times: Vec<f64>,
    pub replicas: usize,
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

pub fn estimate_pair_expectations(
    space: &KernelSpace,
    times: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<PairExpectations, WalkError> {
    check_times(times, true)?;
    if replicas < 2 {
        return Err(WalkError::TooFewReplicas { got: replicas, min: 2 });
    }
    let n = space.len();
    let nt = times.len();
    let per_pair: Vec<(Vec<f64>, Vec<f64>)> = (0..n * n)
        .into_par_iter()
        .map(|pair| {
            let (x, y) = (pair / n, pair % n);
            let mut stats = vec![RunningStats::new(); nt];
            for r in 0..replicas {
                let index = (pair * replicas + r) as u64;
                let mut rx = stream(seed, "pair/x", index);
                let mut ry = stream(seed, "pair/y", index);
                let mut wx = Walker::new(space, x, &mut rx);
                let mut wy = Walker::new(space, y, &mut ry);
                for (j, &t) in times.iter().enumerate() {
                    wx.advance_to(space, t, &mut rx);
                    wy.advance_to(space, t, &mut ry);
                    let v = match (wx.site, wy.site) {
                        (Some(a), Some(b)) => space.a(a, b),
                        _ => 0.0,
                    };
                    stats[j].push(v);
                }
            }
            (
                stats.iter().map(RunningStats::mean).collect(),
                stats.iter().map(RunningStats::stderr).collect(),
            )
        })
        .collect();
    let mut mean = vec![vec![0.0; n * n]; nt];
    let mut stderr = vec![vec![0.0; n * n]; nt];
    for (pair, (m, s)) in per_pair.into_iter().enumerate() {
        for j in 0..nt {
            mean[j][pair] = m[j];
            stderr[j][pair] = s[j];
        }
    }
    Ok(PairExpectations {
        n,
        times: times.to_vec(),
        replicas,
        mean,
        stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{
        build_lattice_kernel, build_tree_kernel, scale_kernel, BoundaryMode, LatticeSpec,
    };
    use approx::assert_abs_diff_eq;

    fn ring(side: usize) -> KernelSpace {
        build_lattice_kernel(&LatticeSpec::new(1, side, BoundaryMode::Periodic)).unwrap()
    }

    #[test]
    fn two_ring_alternates() {
        let path = simulate_jump_process(&ring(2), 0, 50.0, 1).unwrap();
        assert!(path.jumps() > 20);
        for (i, s) in path.sites.iter().enumerate() {
            assert_eq!(*s, i % 2);
        }
        assert!(path.times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(path.end, PathEnd::Horizon);
    }

    #[test]
    fn holding_rate_matches_row_mass() {
        let space = ring(2);
        let doubled = scale_kernel(&space, 2.0).unwrap();
        let jumps = |s: &KernelSpace| simulate_jump_process(s, 0, 20_000.0, 3).unwrap().jumps() as f64;
        assert!((jumps(&space) / 20_000.0 - 1.0).abs() < 0.03);
        assert!((jumps(&doubled) / 20_000.0 - 2.0).abs() < 0.06);
    }

    #[test]
    fn tree_walk_is_killed_at_leaves() {
        let tree = build_tree_kernel(3, 2, BoundaryMode::Absorbing).unwrap();
        let path = simulate_jump_process(&tree, 0, 1e6, 9).unwrap();
        assert!(matches!(path.end, PathEnd::Killed { .. }));
        assert_eq!(path.site_at(path.alive_until()), None);
    }

    #[test]
    fn paths_are_deterministic() {
        let tree = build_tree_kernel(3, 5, BoundaryMode::Absorbing).unwrap();
        let a = simulate_jump_process(&tree, 0, 30.0, 77).unwrap();
        let b = simulate_jump_process(&tree, 0, 30.0, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate_jump_process(&tree, 0, 30.0, 78).unwrap());
    }

    #[test]
    fn pair_integral_of_hand_built_paths() {
        let space = ring(4);
        let x = WalkPath {
            start: 0,
            horizon: 3.0,
            times: vec![0.0, 1.0],
            sites: vec![0, 1],
            end: PathEnd::Horizon,
        };
        let y = WalkPath {
            start: 1,
            horizon: 3.0,
            times: vec![0.0, 0.5, 2.0],
            sites: vec![1, 2, 3],
            end: PathEnd::Horizon,
        };
        // a = 1/2 on [0, 0.5) (0,1), 0 on [0.5, 1) (0,2),
        // 1/2 on [1, 2) (1,2), 0 on [2, 3) (1,3).
        let got = pair_integral(&space, &x, &y, &[0.5, 1.5, 3.0]);
        assert_eq!(got, vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn streamed_integral_matches_recorded_paths() {
        let tree = build_tree_kernel(3, 4, BoundaryMode::Absorbing).unwrap();
        let horizons = [1.0, 2.0, 4.0, 8.0];
        for r in 0..50 {
            let mut rx = stream(5, "x", r);
            let mut ry = stream(5, "y", r);
            let px = walk_from_rng(&tree, 0, 8.0, &mut stream(5, "x", r));
            let py = walk_from_rng(&tree, 1, 8.0, &mut stream(5, "y", r));
            let streamed = stream_pair_integral(&tree, (0, 1), &horizons, &mut rx, &mut ry);
            let recorded = pair_integral(&tree, &px, &py, &horizons);
            for (a, b) in streamed.iter().zip(&recorded) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stationary_floor_of_torus_is_uniform() {
        let (f, method) = stationary_floor(&ring(8));
        assert_eq!(method, "measure");
        assert_abs_diff_eq!(f, 1.0 / 8.0, epsilon = 1e-15);
        let tree = build_tree_kernel(3, 3, BoundaryMode::Absorbing).unwrap();
        assert_eq!(stationary_floor(&tree).0, 0.0);
    }

    #[test]
    fn power_iteration_finds_degree_weighted_law() {
        use crate::space::{build_percolation_kernel, PercolationSpec};
        let (space, _) = build_percolation_kernel(&PercolationSpec::new(2, 6, 0.8, 4)).unwrap();
        let (pi, method) = stationary_distribution(&space).unwrap();
        let degrees: Vec<f64> = (0..space.len()).map(|x| space.kernel().row_cols(x).len() as f64).collect();
        let total: f64 = degrees.iter().sum();
        if method == "power_iteration" {
            for (p, d) in pi.iter().zip(&degrees) {
                assert_abs_diff_eq!(*p, d / total, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn classify_constructed_sequences() {
        let h = [10.0, 20.0, 40.0, 80.0];
        let tiny = vec![1e-5; 4];
        let plateau = TransienceReport::from_sequences(&h, &[(vec![1.0, 1.05, 1.051, 1.0511], tiny.clone())]);
        assert!(classify_tail(&plateau).unwrap().class.is_transient());

        let sqrt: Vec<f64> = h.iter().map(|t: &f64| t.sqrt()).collect();
        let growing = TransienceReport::from_sequences(&h, &[(sqrt, vec![0.01; 4])]);
        assert_eq!(classify_tail(&growing).unwrap().class, TailClass::Recurrent);

        let noisy = TransienceReport::from_sequences(&h, &[(vec![1.0, 1.1, 1.15, 1.2], vec![0.05; 4])]);
        let verdict = classify_tail(&noisy).unwrap();
        assert_eq!(verdict.class, TailClass::Inconclusive);
        assert!(verdict.q_hat.is_none());

        assert!(classify_tail(&TransienceReport::from_sequences(&h[..3], &[(vec![1.0; 3], tiny)])).is_err());
    }

    #[test]
    fn exponential_tail_is_extrapolated() {
        let h = [2.0, 4.0, 8.0, 16.0, 32.0];
        let values: Vec<f64> = h.iter().map(|t: &f64| 1.0 - (-0.5 * t).exp()).collect();
        let report = TransienceReport::from_sequences(&h, &[(values, vec![1e-9; 5])]);
        let verdict = classify_tail(&report).unwrap();
        assert_eq!(verdict.class, TailClass::TransientExponential);
        assert!(verdict.kappa.unwrap() > 0.0);
        assert!((verdict.q_hat.unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sup_condition_at_time_zero_is_kernel_entry() {
        let tree = build_tree_kernel(3, 4, BoundaryMode::Absorbing).unwrap();
        let curve = estimate_sup_condition(&tree, &[0, 1, 2], &[0], &[0.0, 1.0], 10, 3).unwrap();
        assert_abs_diff_eq!(curve.values[0], 1.0 / 3.0);
        assert_eq!(curve.stderr[0], 0.0);
    }

    #[test]
    fn heat_kernel_at_time_zero_is_one() {
        let est = heat_kernel_probe(&ring(16), 3, &[0.0, 1.0, 200.0], 2000, 1).unwrap();
        assert_eq!(est.p_hat[0], 1.0);
        assert!(est.survival.iter().all(|&s| s == 1.0));
        assert!((est.p_hat[2] - 1.0 / 16.0).abs() < 0.025);
    }

    #[test]
    fn two_state_pair_expectation_matches_closed_form() {
        // On the 2-ring, X(t) ≠ Y(t) with probability (1 + e^{-4t})/2 when
        // started apart, and a = 1 exactly when they differ.
        let est = estimate_pair_expectations(&ring(2), &[0.5], 20_000, 2).unwrap();
        let exact = 0.5 * (1.0 + (-2.0f64).exp());
        let (m, s) = (est.mean[0][1], est.stderr[0][1]);
        assert!((m - exact).abs() < 4.0 * s, "{m} vs {exact} ± {s}");
    }
}
