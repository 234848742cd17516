//! Event-driven simulation of the contact process.
//!
//! Every particle dies at rate one; a particle at `x` places offspring at
//! `y` with rate `a(y, x) m(y)` and, when a jump kernel is present, migrates
//! to `y` with rate `J(y, x) m(y)`. Sites hold integer occupation numbers, so
//! offspring may land on occupied sites. On the continuum torus a particle
//! breeds at rate one (times the birth scale) with offspring displaced by the
//! dispersal law.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, SimRng};
use crate::space::{
    scale_kernel, ContinuumKernel, KernelSpace, Model, ModelSpec, SpaceError, Target,
};
use crate::stats::RunningStats;

/// Events between recomputations of the cached rate aggregates.
pub const AUDIT_INTERVAL: u64 = 10_000;
/// Default per-replica event budget.
pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("initial intensity must be positive and finite, got {0}")]
    InvalidIntensity(f64),
    #[error("horizon must be finite and nonnegative, got {0}")]
    InvalidHorizon(f64),
    #[error("observation times must be sorted, nonnegative and within the horizon")]
    InvalidSchedule,
    #[error("need at least one replica")]
    NoReplicas,
    #[error("configuration is empty: the process has been absorbed")]
    Absorbed,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Location {
    Site(usize),
    Point([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Birth,
    Death,
    Jump,
    /// Offspring placed outside an absorbing window and discarded.
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    /// Affected site or point (the new location for births and jumps).
    pub location: Option<Location>,
    /// Parent (births, losses) or origin (jumps).
    pub parent: Option<Location>,
}

/// Particle configuration on a discrete space.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    counts: Vec<u32>,
    /// Site of every particle, in no particular order.
    particles: Vec<usize>,
    birth_aggregate: f64,
    jump_aggregate: f64,
    pub time: f64,
    pub leaked: u64,
}

impl Configuration {
    pub fn from_counts(space: &KernelSpace, counts: Vec<u32>) -> Self {
        assert_eq!(counts.len(), space.len(), "one count per site");
        let particles = counts
            .iter()
            .enumerate()
            .flat_map(|(x, &c)| std::iter::repeat_n(x, c as usize))
            .collect();
        let mut config = Self {
            counts,
            particles,
            birth_aggregate: 0.0,
            jump_aggregate: 0.0,
            time: 0.0,
            leaked: 0,
        };
        config.resync(space);
        config
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Cached `Σ_x n_x β(x)`.
    pub fn birth_aggregate(&self) -> f64 {
        self.birth_aggregate
    }

    fn recomputed(&self, space: &KernelSpace) -> (f64, f64) {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .fold((0.0, 0.0), |(b, j), (x, &c)| {
                (
                    b + f64::from(c) * space.offspring_rate(x),
                    j + f64::from(c) * space.emigration_rate(x),
                )
            })
    }

    /// Recomputes the cached aggregates and returns the drift found.
    pub fn resync(&mut self, space: &KernelSpace) -> f64 {
        let (b, j) = self.recomputed(space);
        let drift = (b - self.birth_aggregate).abs() + (j - self.jump_aggregate).abs();
        self.birth_aggregate = b;
        self.jump_aggregate = j;
        drift
    }

    fn add(&mut self, space: &KernelSpace, x: usize) {
        self.counts[x] += 1;
        self.particles.push(x);
        self.birth_aggregate += space.offspring_rate(x);
        self.jump_aggregate += space.emigration_rate(x);
    }

    fn remove_at(&mut self, space: &KernelSpace, i: usize) -> usize {
        let x = self.particles.swap_remove(i);
        self.counts[x] -= 1;
        self.birth_aggregate -= space.offspring_rate(x);
        self.jump_aggregate -= space.emigration_rate(x);
        if self.particles.is_empty() {
            self.birth_aggregate = 0.0;
            self.jump_aggregate = 0.0;
        }
        x
    }
}

/// Point configuration on the continuum torus.
#[derive(Debug, Clone, PartialEq)]
pub struct PointConfiguration {
    pub points: Vec<[f64; 3]>,
    pub time: f64,
}

/// Occupation state recorded at a snapshot time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Snapshot {
    Counts(Vec<u32>),
    Points(Vec<[f64; 3]>),
}

/// A state space the contact process can run on.
pub trait ContactModel: Sync {
    type State: Clone + Send;

    fn init_poisson_with(&self, rho: f64, rng: &mut SimRng) -> Self::State;
    fn total_event_rate(&self, state: &Self::State) -> f64;
    /// Applies one event, chosen according to the current rates.
    fn apply_event(&self, state: &mut Self::State, rng: &mut SimRng) -> EventRecord;
    fn count(&self, state: &Self::State) -> usize;
    fn leaked(&self, state: &Self::State) -> u64;
    fn time(&self, state: &Self::State) -> f64;
    fn set_time(&self, state: &mut Self::State, t: f64);
    fn snapshot(&self, state: &Self::State) -> Snapshot;
    /// Recomputes cached rates; returns the relative drift observed.
    fn audit(&self, state: &mut Self::State) -> f64;
    /// Total measure (site measure or torus volume) for densities.
    fn volume(&self) -> f64;
}

impl ContactModel for KernelSpace {
    type State = Configuration;

    fn init_poisson_with(&self, rho: f64, rng: &mut SimRng) -> Configuration {
        let counts = self
            .measure()
            .iter()
            .map(|&m| {
                let poisson = Poisson::new(rho * m).expect("positive Poisson mean");
                poisson.sample(rng) as u32
            })
            .collect();
        Configuration::from_counts(self, counts)
    }

    fn total_event_rate(&self, c: &Configuration) -> f64 {
        c.total() as f64 + c.birth_aggregate + c.jump_aggregate
    }

    fn apply_event(&self, c: &mut Configuration, rng: &mut SimRng) -> EventRecord {
        let n = c.total();
        let deaths = n as f64;
        let u = rng.random::<f64>() * (deaths + c.birth_aggregate + c.jump_aggregate);
        let time = c.time;
        if u < deaths {
            let x = c.remove_at(self, rng.random_range(0..n));
            return EventRecord {
                time,
                kind: EventKind::Death,
                location: Some(Location::Site(x)),
                parent: None,
            };
        }
        let is_birth = u < deaths + c.birth_aggregate || c.jump_aggregate <= 0.0;
        if is_birth {
            let bmax = self.max_offspring_rate();
            let i = pick_weighted(&c.particles, |x| self.offspring_rate(x) / bmax, rng);
            let x = c.particles[i];
            match self.sample_offspring(x, rng) {
                Some(Target::Site(y)) => {
                    c.add(self, y);
                    EventRecord {
                        time,
                        kind: EventKind::Birth,
                        location: Some(Location::Site(y)),
                        parent: Some(Location::Site(x)),
                    }
                }
                _ => {
                    c.leaked += 1;
                    EventRecord {
                        time,
                        kind: EventKind::Lost,
                        location: None,
                        parent: Some(Location::Site(x)),
                    }
                }
            }
        } else {
            let emax = self.max_emigration_rate();
            let i = pick_weighted(&c.particles, |x| self.emigration_rate(x) / emax, rng);
            let x = c.remove_at(self, i);
            let y = match self.sample_emigration(x, rng) {
                Some(Target::Site(y)) => y,
                _ => x,
            };
            c.add(self, y);
            EventRecord {
                time,
                kind: EventKind::Jump,
                location: Some(Location::Site(y)),
                parent: Some(Location::Site(x)),
            }
        }
    }

    fn count(&self, c: &Configuration) -> usize {
        c.total()
    }

    fn leaked(&self, c: &Configuration) -> u64 {
        c.leaked
    }

    fn time(&self, c: &Configuration) -> f64 {
        c.time
    }

    fn set_time(&self, c: &mut Configuration, t: f64) {
        c.time = t;
    }

    fn snapshot(&self, c: &Configuration) -> Snapshot {
        Snapshot::Counts(c.counts.clone())
    }

    fn audit(&self, c: &mut Configuration) -> f64 {
        let scale = c.birth_aggregate.abs().max(1.0);
        c.resync(self) / scale
    }

    fn volume(&self) -> f64 {
        self.total_measure()
    }
}

/// Index of a particle chosen with probability proportional to
/// `accept(site) ∈ [0, 1]`, by rejection from the uniform choice.
fn pick_weighted(particles: &[usize], accept: impl Fn(usize) -> f64, rng: &mut SimRng) -> usize {
    loop {
        let i = rng.random_range(0..particles.len());
        let p = accept(particles[i]);
        if p >= 1.0 || rng.random::<f64>() < p {
            return i;
        }
    }
}

impl ContactModel for ContinuumKernel {
    type State = PointConfiguration;

    fn init_poisson_with(&self, rho: f64, rng: &mut SimRng) -> PointConfiguration {
        let n = Poisson::new(rho * self.volume())
            .expect("positive Poisson mean")
            .sample(rng) as usize;
        let points = (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for c in p.iter_mut().take(self.d) {
                    *c = rng.random::<f64>() * self.side;
                }
                p
            })
            .collect();
        PointConfiguration { points, time: 0.0 }
    }

    fn total_event_rate(&self, s: &PointConfiguration) -> f64 {
        s.points.len() as f64 * (1.0 + self.birth_scale)
    }

    fn apply_event(&self, s: &mut PointConfiguration, rng: &mut SimRng) -> EventRecord {
        let n = s.points.len();
        let i = rng.random_range(0..n);
        let time = s.time;
        if rng.random::<f64>() * (1.0 + self.birth_scale) < 1.0 {
            let p = s.points.swap_remove(i);
            return EventRecord {
                time,
                kind: EventKind::Death,
                location: Some(Location::Point(p)),
                parent: None,
            };
        }
        let parent = s.points[i];
        let mut shift = [0.0; 3];
        self.sample_displacement(rng, &mut shift);
        let mut child = [0.0; 3];
        for k in 0..self.d {
            child[k] = parent[k] + shift[k];
        }
        self.wrap(&mut child);
        s.points.push(child);
        EventRecord {
            time,
            kind: EventKind::Birth,
            location: Some(Location::Point(child)),
            parent: Some(Location::Point(parent)),
        }
    }

    fn count(&self, s: &PointConfiguration) -> usize {
        s.points.len()
    }

    fn leaked(&self, _: &PointConfiguration) -> u64 {
        0
    }

    fn time(&self, s: &PointConfiguration) -> f64 {
        s.time
    }

    fn set_time(&self, s: &mut PointConfiguration, t: f64) {
        s.time = t;
    }

    fn snapshot(&self, s: &PointConfiguration) -> Snapshot {
        Snapshot::Points(s.points.clone())
    }

    fn audit(&self, _: &mut PointConfiguration) -> f64 {
        0.0
    }

    fn volume(&self) -> f64 {
        ContinuumKernel::volume(self)
    }
}

/// Independent Poisson occupation numbers with mean `ρ m(x)`.
pub fn init_poisson(space: &KernelSpace, rho: f64, seed: u64) -> Result<Configuration, ContactError> {
    check_rho(rho)?;
    Ok(space.init_poisson_with(rho, &mut stream(seed, "poisson", 0)))
}

/// `Σ_x n_x (1 + β(x) + e(x))`: deaths, births and migrations.
pub fn total_event_rate<M: ContactModel>(model: &M, state: &M::State) -> f64 {
    model.total_event_rate(state)
}

/// Advances the clock by an exponential waiting time and applies one event.
pub fn step_event<M: ContactModel>(
    model: &M,
    state: &mut M::State,
    rng: &mut SimRng,
) -> Result<EventRecord, ContactError> {
    let rate = model.total_event_rate(state);
    if model.count(state) == 0 || rate <= 0.0 {
        return Err(ContactError::Absorbed);
    }
    let wait: f64 = Exp1.sample(rng);
    let t = model.time(state) + wait / rate;
    model.set_time(state, t);
    Ok(model.apply_event(state, rng))
}

fn check_rho(rho: f64) -> Result<(), ContactError> {
    if rho.is_finite() && rho > 0.0 {
        Ok(())
    } else {
        Err(ContactError::InvalidIntensity(rho))
    }
}

fn default_event_cap() -> u64 {
    DEFAULT_EVENT_CAP
}

/// Dynamic parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    /// Initial Poisson intensity per unit measure.
    pub rho: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Times at which counts are recorded.
    pub observe_times: Vec<f64>,
    /// Times at which full occupation snapshots are kept.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_event_cap")]
    pub event_cap: u64,
    /// Keep the full event log (tests and small runs only).
    #[serde(default)]
    pub record_events: bool,
}

impl RunParams {
    pub fn new(rho: f64, horizon: f64, seed: u64) -> Self {
        Self {
            rho,
            horizon,
            seed,
            observe_times: vec![0.0, horizon],
            snapshot_times: Vec::new(),
            event_cap: DEFAULT_EVENT_CAP,
            record_events: false,
        }
    }

    /// Observes at `0, step, 2·step, …` up to the horizon.
    pub fn observe_every(mut self, step: f64) -> Self {
        let k = (self.horizon / step + 1e-9).floor() as usize;
        self.observe_times = (0..=k).map(|i| (i as f64 * step).min(self.horizon)).collect();
        self.observe_times.dedup();
        self
    }

    pub fn with_snapshots(mut self, times: Vec<f64>) -> Self {
        self.snapshot_times = times;
        self
    }

    fn validate(&self) -> Result<(), ContactError> {
        check_rho(self.rho)?;
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(ContactError::InvalidHorizon(self.horizon));
        }
        for times in [&self.observe_times, &self.snapshot_times] {
            let ok = times.iter().all(|t| (0.0..=self.horizon).contains(t))
                && times.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                return Err(ContactError::InvalidSchedule);
            }
        }
        Ok(())
    }
}

/// Everything needed to reproduce an ensemble bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelSpec,
    /// Multiplies the birth kernel; 1 is critical.
    pub scale: f64,
    /// Rate of the symmetric migration kernel added to the dynamics.
    pub jump_rate: f64,
    pub replicas: usize,
    pub params: RunParams,
}

/// Built model ready for simulation.
#[derive(Debug, Clone)]
pub enum BuiltModel {
    Discrete(KernelSpace),
    Continuum(ContinuumKernel),
}

impl RunManifest {
    pub fn build(&self) -> Result<BuiltModel, ContactError> {
        let model = self.model.build(self.params.seed)?;
        Ok(match model {
            Model::Discrete { space, .. } => {
                let mut space = if self.scale != 1.0 {
                    scale_kernel(&space, self.scale)?
                } else {
                    space
                };
                if self.jump_rate > 0.0 {
                    space = space.with_proportional_jumps(self.jump_rate)?;
                }
                BuiltModel::Discrete(space)
            }
            Model::Continuum(k) => BuiltModel::Continuum(k.with_birth_scale(self.scale)?),
        })
    }

    pub fn run(&self) -> Result<Ensemble, ContactError> {
        match self.build()? {
            BuiltModel::Discrete(space) => run_ensemble(&space, &self.params, self.replicas),
            BuiltModel::Continuum(k) => run_ensemble(&k, &self.params, self.replicas),
        }
    }
}

/// Result of a single replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub replica: usize,
    /// Observation times actually reached (shorter than scheduled when
    /// truncated).
    pub times: Vec<f64>,
    pub counts: Vec<u64>,
    pub leaks: Vec<u64>,
    pub snapshots: Vec<(f64, Snapshot)>,
    pub events: u64,
    pub truncated: bool,
    pub absorbed_at: Option<f64>,
    /// Largest relative drift found by the periodic rate audits.
    pub audit_max_drift: f64,
    pub event_log: Option<Vec<EventRecord>>,
}

/// Simulates one replica to the horizon, absorption, or the event cap.
pub fn run_contact<M: ContactModel>(
    model: &M,
    params: &RunParams,
    replica: usize,
) -> Result<RunOutput, ContactError> {
    params.validate()?;
    let mut rng = stream(params.seed, "contact", replica as u64);
    let state = model.init_poisson_with(params.rho, &mut rng);
    Ok(run_from(model, params, state, &mut rng, replica))
}

/// Runs from a given initial state with a caller-provided stream.
pub fn run_from<M: ContactModel>(
    model: &M,
    params: &RunParams,
    mut state: M::State,
    rng: &mut SimRng,
    replica: usize,
) -> RunOutput {
    let mut out = RunOutput {
        replica,
        times: Vec::with_capacity(params.observe_times.len()),
        counts: Vec::with_capacity(params.observe_times.len()),
        leaks: Vec::with_capacity(params.observe_times.len()),
        snapshots: Vec::new(),
        events: 0,
        truncated: false,
        absorbed_at: None,
        audit_max_drift: 0.0,
        event_log: params.record_events.then(Vec::new),
    };
    let (mut oi, mut si) = (0, 0);
    loop {
        let rate = model.total_event_rate(&state);
        let t_next = if model.count(&state) > 0 && rate > 0.0 {
            let wait: f64 = Exp1.sample(rng);
            model.time(&state) + wait / rate
        } else {
            if out.absorbed_at.is_none() && model.count(&state) == 0 {
                out.absorbed_at = Some(model.time(&state));
            }
            f64::INFINITY
        };
        while oi < params.observe_times.len() && params.observe_times[oi] < t_next {
            out.times.push(params.observe_times[oi]);
            out.counts.push(model.count(&state) as u64);
            out.leaks.push(model.leaked(&state));
            oi += 1;
        }
        while si < params.snapshot_times.len() && params.snapshot_times[si] < t_next {
            out.snapshots
                .push((params.snapshot_times[si], model.snapshot(&state)));
            si += 1;
        }
        if t_next > params.horizon {
            break;
        }
        if out.events >= params.event_cap {
            out.truncated = true;
            break;
        }
        model.set_time(&mut state, t_next);
        let record = model.apply_event(&mut state, rng);
        out.events += 1;
        if let Some(log) = out.event_log.as_mut() {
            log.push(record);
        }
        if out.events % AUDIT_INTERVAL == 0 {
            out.audit_max_drift = out.audit_max_drift.max(model.audit(&mut state));
        }
    }
    out
}

/// Replica runs plus mean and standard error of the particle density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub seed: u64,
    pub volume: f64,
    pub times: Vec<f64>,
    /// Mean particle count per unit measure.
    pub density: Vec<f64>,
    pub density_stderr: Vec<f64>,
    pub mean_leaks: Vec<f64>,
    /// Replicas contributing at each time (fewer after truncation).
    pub contributing: Vec<usize>,
    pub truncated_replicas: Vec<usize>,
    pub runs: Vec<RunOutput>,
}

/// Runs `replicas` independent replicas, replica `r` on stream `r` of the
/// master seed.
pub fn run_ensemble<M: ContactModel>(
    model: &M,
    params: &RunParams,
    replicas: usize,
) -> Result<Ensemble, ContactError> {
    params.validate()?;
    if replicas == 0 {
        return Err(ContactError::NoReplicas);
    }
    let runs: Vec<RunOutput> = (0..replicas)
        .into_par_iter()
        .map(|r| run_contact(model, params, r))
        .collect::<Result<_, _>>()?;
    Ok(summarize(model.volume(), params, runs))
}

fn summarize(volume: f64, params: &RunParams, runs: Vec<RunOutput>) -> Ensemble {
    let times = params.observe_times.clone();
    let mut density = Vec::with_capacity(times.len());
    let mut density_stderr = Vec::with_capacity(times.len());
    let mut mean_leaks = Vec::with_capacity(times.len());
    let mut contributing = Vec::with_capacity(times.len());
    for j in 0..times.len() {
        let mut d = RunningStats::new();
        let mut l = RunningStats::new();
        for run in runs.iter().filter(|r| r.counts.len() > j) {
            d.push(run.counts[j] as f64 / volume);
            l.push(run.leaks[j] as f64);
        }
        density.push(d.mean());
        density_stderr.push(d.stderr());
        mean_leaks.push(l.mean());
        contributing.push(d.count() as usize);
    }
    Ensemble {
        seed: params.seed,
        volume,
        times,
        density,
        density_stderr,
        mean_leaks,
        contributing,
        truncated_replicas: runs.iter().filter(|r| r.truncated).map(|r| r.replica).collect(),
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{
        build_continuum_kernel, build_lattice_kernel, build_tree_kernel, BoundaryMode,
        Dispersal, LatticeSpec,
    };
    use approx::assert_abs_diff_eq;

    fn ring(side: usize) -> KernelSpace {
        build_lattice_kernel(&LatticeSpec::new(1, side, BoundaryMode::Periodic)).unwrap()
    }

    #[test]
    fn poisson_totals_have_the_right_mean() {
        let space = ring(32);
        let totals: Vec<f64> = (0..1000)
            .map(|s| init_poisson(&space, 2.0, s).unwrap().total() as f64)
            .collect();
        let (m, se) = crate::stats::mean_stderr(&totals);
        assert!((m - 64.0).abs() < 3.0 * se, "{m} ± {se}");
        assert!(init_poisson(&space, 1e-9, 1).unwrap().is_empty());
        assert!(init_poisson(&space, 0.0, 1).is_err());
    }

    #[test]
    fn continuum_poisson_mean() {
        let k = build_continuum_kernel(1, 10.0, Dispersal::Uniform { radius: 1.0 }).unwrap();
        let mean = (0..500)
            .map(|s| k.init_poisson_with(3.0, &mut stream(s, "init", 0)).points.len() as f64)
            .sum::<f64>()
            / 500.0;
        assert!((mean - 30.0).abs() < 3.0 * (30.0f64 / 500.0).sqrt());
    }

    #[test]
    fn event_rates_follow_column_sums() {
        let tree = build_tree_kernel(3, 4, BoundaryMode::Absorbing).unwrap();
        let mut counts = vec![0; tree.len()];
        counts[0] = 2;
        counts[3] = 1;
        let c = Configuration::from_counts(&tree, counts);
        assert_abs_diff_eq!(total_event_rate(&tree, &c), 6.0, epsilon = 1e-12);

        let space = ring(2);
        let c = Configuration::from_counts(&space, vec![2, 0]);
        assert_abs_diff_eq!(total_event_rate(&space, &c), 4.0);
        let empty = Configuration::from_counts(&space, vec![0, 0]);
        assert_eq!(total_event_rate(&space, &empty), 0.0);
    }

    #[test]
    fn two_ring_single_particle_branches_evenly() {
        let space = ring(2);
        let mut rng = stream(4, "test", 0);
        let trials = 20_000;
        let mut births = 0;
        for _ in 0..trials {
            let mut c = Configuration::from_counts(&space, vec![1, 0]);
            let e = step_event(&space, &mut c, &mut rng).unwrap();
            if e.kind == EventKind::Birth {
                assert_eq!(e.location, Some(Location::Site(1)));
                assert_eq!(c.counts(), &[1, 1]);
                births += 1;
            } else {
                assert!(c.is_empty());
            }
        }
        let p = births as f64 / trials as f64;
        assert!((p - 0.5).abs() < 4.0 * (0.25f64 / trials as f64).sqrt());
    }

    #[test]
    fn empty_configuration_is_absorbing() {
        let space = ring(4);
        let mut c = Configuration::from_counts(&space, vec![0; 4]);
        assert!(matches!(
            step_event(&space, &mut c, &mut stream(0, "t", 0)),
            Err(ContactError::Absorbed)
        ));
        let params = RunParams::new(1e-3, 5.0, 2).observe_every(1.0);
        let out = run_contact(&space, &params, 0).unwrap();
        assert!(out.counts.iter().all(|&c| c == 0));
        assert_eq!(out.events, 0);
        assert_eq!(out.absorbed_at, Some(0.0));
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let space = ring(8);
        let mut params = RunParams::new(2.0, 0.0, 5);
        params.observe_times = vec![0.0];
        params.snapshot_times = vec![0.0];
        let out = run_contact(&space, &params, 0).unwrap();
        let init = space.init_poisson_with(2.0, &mut stream(5, "contact", 0));
        assert_eq!(out.events, 0);
        assert_eq!(out.counts, vec![init.total() as u64]);
        assert_eq!(out.snapshots[0].1, Snapshot::Counts(init.counts().to_vec()));
    }

    #[test]
    fn event_log_is_ordered_and_replayable() {
        let tree = build_tree_kernel(3, 3, BoundaryMode::Absorbing).unwrap();
        let mut params = RunParams::new(1.0, 5.0, 8);
        params.record_events = true;
        let a = run_contact(&tree, &params, 3).unwrap();
        let log = a.event_log.as_ref().unwrap();
        assert!(log.windows(2).all(|w| w[0].time < w[1].time));
        assert!(log.iter().any(|e| e.kind == EventKind::Lost));
        assert_eq!(a.leaks.last().copied(), Some(log.iter().filter(|e| e.kind == EventKind::Lost).count() as u64));
        assert_eq!(a, run_contact(&tree, &params, 3).unwrap());
    }

    #[test]
    fn event_cap_truncates() {
        let space = scale_kernel(&ring(16), 3.0).unwrap();
        let mut params = RunParams::new(2.0, 50.0, 1).observe_every(5.0);
        params.event_cap = 1000;
        let out = run_contact(&space, &params, 0).unwrap();
        assert!(out.truncated);
        assert_eq!(out.events, 1000);
        assert!(out.times.len() < params.observe_times.len());
        let ens = run_ensemble(&space, &params, 3).unwrap();
        assert_eq!(ens.truncated_replicas, vec![0, 1, 2]);
    }

    #[test]
    fn audits_find_no_drift() {
        let space = ring(64).with_proportional_jumps(0.5).unwrap();
        let params = RunParams::new(5.0, 20.0, 3);
        let out = run_contact(&space, &params, 0).unwrap();
        assert!(out.events > 2 * AUDIT_INTERVAL);
        assert!(out.audit_max_drift < 1e-9, "{}", out.audit_max_drift);
    }

    #[test]
    fn ensembles_are_deterministic_and_consistent() {
        let space = ring(16);
        let params = RunParams::new(1.0, 4.0, 11).observe_every(1.0);
        let a = run_ensemble(&space, &params, 3).unwrap();
        let b = run_ensemble(&space, &params, 3).unwrap();
        assert_eq!(a, b);
        let mean_of_runs: f64 =
            a.runs.iter().map(|r| r.counts[2] as f64 / 16.0).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(a.density[2], mean_of_runs, epsilon = 1e-12);
    }

    #[test]
    fn subcritical_ring_decays_like_the_mean_equation() {
        let space = scale_kernel(&ring(32), 0.9).unwrap();
        let params = RunParams::new(1.0, 10.0, 21).observe_every(5.0);
        let ens = run_ensemble(&space, &params, 400).unwrap();
        for (j, t) in ens.times.iter().enumerate() {
            let exact = (-0.1 * t).exp();
            let z = (ens.density[j] - exact) / ens.density_stderr[j].max(1e-12);
            assert!(j == 0 || z.abs() < 4.0, "t={t}: z={z}");
        }
    }

    #[test]
    fn continuum_with_lattice_offsets_matches_ring_means() {
        let atomic = Dispersal::Atomic {
            offsets: vec![vec![1.0], vec![-1.0]],
            weights: vec![0.5, 0.5],
        };
        let k = build_continuum_kernel(1, 32.0, atomic)
            .unwrap()
            .with_birth_scale(0.9)
            .unwrap();
        let space = scale_kernel(&ring(32), 0.9).unwrap();
        let params = RunParams::new(1.0, 8.0, 5).observe_every(4.0);
        let c = run_ensemble(&k, &params, 300).unwrap();
        let d = run_ensemble(&space, &params, 300).unwrap();
        for j in 1..c.times.len() {
            let se = (c.density_stderr[j].powi(2) + d.density_stderr[j].powi(2)).sqrt();
            assert!((c.density[j] - d.density[j]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn manifest_round_trips_and_runs() {
        let manifest = RunManifest {
            model: ModelSpec::Tree {
                k: 3,
                depth: 3,
                boundary: BoundaryMode::Reflecting,
            },
            scale: 1.0,
            jump_rate: 0.0,
            replicas: 2,
            params: RunParams::new(1.0, 2.0, 4),
        };
        let json = serde_json::to_string(&manifest).unwrap();
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.run().unwrap(), manifest.run().unwrap());
    }
}
