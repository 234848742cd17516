//! Finite truncations of the state spaces a contact process runs on.
//!
//! A [`KernelSpace`] holds a finite site set with measure weights `m(x)`
//! and the birth kernel `a(x, y)`, where the first argument is the location
//! of the offspring: a particle at `x` produces offspring at `y` with rate
//! `a(y, x) m(y)`, and the associated jump walk moves from `x` to `y` with
//! rate `a(x, y) m(y)`. Mass that the untruncated kernel would send outside
//! the window is tracked separately as exterior mass, so boundary leakage
//! is explicit rather than silently renormalized.

mod builders;
mod continuum;
mod environment;
mod spec;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alias::{AliasError, AliasTable};
use crate::sparse::CsrMatrix;

pub use builders::{
    build_lattice_kernel, build_tree_kernel, LatticeSpec, Perturbation, PerturbationEntry,
};
pub use continuum::{build_continuum_kernel, ContinuumKernel, Dispersal};
pub use environment::{
    build_conductance_kernel, build_percolation_kernel, Environment, PercolationSpec,
};
pub use spec::{Model, ModelSpec};

/// Tolerance used when a builder asserts that kernel rows are stochastic.
pub const CRITICALITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("negative rate {value} at a({x}, {y})")]
    NegativeRate { x: usize, y: String, value: f64 },
    #[error("kernel row {site} sums to {row_sum}, expected 1")]
    NotCritical { site: usize, row_sum: f64 },
    #[error(
        "environment rejected: largest cluster covers {largest_fraction:.4} of the box, \
         need at least {required:.4}"
    )]
    EnvironmentRejected { largest_fraction: f64, required: f64 },
    #[error("bond probability {p} is below the configured guard {guard}")]
    BelowPercolationGuard { p: f64, guard: f64 },
    #[error("power-law exponent alpha={alpha} outside the admissible range {range} for d={d}")]
    PowerLawRange {
        d: usize,
        alpha: f64,
        range: &'static str,
    },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("jump kernel exceeds the rate bound: {which} sum {value} > {bound}")]
    JumpBound {
        which: &'static str,
        value: f64,
        bound: f64,
    },
    #[error(transparent)]
    Alias(#[from] AliasError),
    #[error("kernel file: {0}")]
    KernelFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Torus wrap; no leakage.
    Periodic,
    /// Mass leaving the window is lost (walkers killed, births discarded).
    Absorbing,
    /// Mass leaving the window is returned as self-birth at the boundary
    /// site, which keeps rows and columns stochastic.
    Reflecting,
}

impl std::fmt::Display for BoundaryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Periodic => "periodic",
            Self::Absorbing => "absorbing",
            Self::Reflecting => "reflecting",
        })
    }
}

impl std::str::FromStr for BoundaryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic" => Ok(Self::Periodic),
            "absorbing" => Ok(Self::Absorbing),
            "reflecting" => Ok(Self::Reflecting),
            other => Err(format!("unknown boundary mode `{other}`")),
        }
    }
}

/// Site labelling, kept for geometric queries (distances, coordinates).
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Lattice {
        d: usize,
        side: usize,
        periodic: bool,
        /// Linear index in the `side^d` box of every site.
        box_index: Vec<usize>,
    },
    Tree {
        k: usize,
        depth: usize,
        parent: Vec<Option<usize>>,
        level: Vec<usize>,
    },
    Generic,
}

impl Geometry {
    /// Box coordinates of a lattice site.
    pub fn lattice_coords(&self, site: usize) -> Option<Vec<usize>> {
        match self {
            Self::Lattice {
                d, side, box_index, ..
            } => Some(unravel(box_index[site], *d, *side)),
            _ => None,
        }
    }
}

pub(crate) fn unravel(mut index: usize, d: usize, side: usize) -> Vec<usize> {
    let mut c = vec![0; d];
    for slot in c.iter_mut() {
        *slot = index % side;
        index /= side;
    }
    c
}

pub(crate) fn ravel(coords: &[usize], side: usize) -> usize {
    coords.iter().rev().fold(0, |acc, &c| acc * side + c)
}

/// Outcome of sampling a kernel row or column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Site(usize),
    Exterior,
}

#[derive(Debug, Clone)]
struct TargetSampler {
    targets: Vec<Target>,
    table: AliasTable,
}

impl TargetSampler {
    fn build(entries: Vec<(Target, f64)>) -> Result<Option<Self>, AliasError> {
        let entries: Vec<_> = entries.into_iter().filter(|(_, w)| *w > 0.0).collect();
        if entries.is_empty() {
            return Ok(None);
        }
        let weights: Vec<f64> = entries.iter().map(|(_, w)| *w).collect();
        Ok(Some(Self {
            table: AliasTable::new(&weights)?,
            targets: entries.into_iter().map(|(t, _)| t).collect(),
        }))
    }

    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Target {
        self.targets[self.table.sample(rng)]
    }
}

/// Raw ingredients of a [`KernelSpace`].
#[derive(Debug, Clone)]
pub struct KernelParts {
    pub measure: Vec<f64>,
    pub kernel: CsrMatrix,
    /// `Σ_{y outside} a(x, y) m(y)` per site.
    pub exterior_out: Vec<f64>,
    /// `Σ_{y outside} a(y, x) m(y)` per site.
    pub exterior_in: Vec<f64>,
    /// Sites whose untruncated kernel support lies inside the window.
    /// Defaults to "no exterior mass".
    pub interior: Option<Vec<bool>>,
    pub boundary: BoundaryMode,
    pub geometry: Geometry,
    pub metadata: BTreeMap<String, String>,
}

impl KernelParts {
    /// Parts for a kernel with no exterior mass and unit measure.
    pub fn closed(kernel: CsrMatrix, boundary: BoundaryMode) -> Self {
        let n = kernel.dim();
        Self {
            measure: vec![1.0; n],
            kernel,
            exterior_out: vec![0.0; n],
            exterior_in: vec![0.0; n],
            interior: None,
            boundary,
            geometry: Geometry::Generic,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct Derived {
    weighted: CsrMatrix,
    row_mass: Vec<f64>,
    offspring_rate: Vec<f64>,
    emigration_rate: Vec<f64>,
    max_offspring_rate: f64,
    max_emigration_rate: f64,
    walk_rate: Vec<f64>,
    walk: Vec<Option<TargetSampler>>,
    offspring: Vec<Option<TargetSampler>>,
    emigration: Vec<Option<TargetSampler>>,
}

/// Finite state space with measure, birth kernel and optional jump kernel.
///
/// Immutable after construction; all samplers are precomputed so the
/// simulators can share one instance across threads.
#[derive(Debug, Clone)]
pub struct KernelSpace {
    measure: Vec<f64>,
    kernel: CsrMatrix,
    exterior_out: Vec<f64>,
    exterior_in: Vec<f64>,
    interior: Vec<bool>,
    boundary: BoundaryMode,
    jump: Option<CsrMatrix>,
    geometry: Geometry,
    metadata: BTreeMap<String, String>,
    derived: Derived,
}

impl KernelSpace {
    pub fn new(parts: KernelParts) -> Result<Self, SpaceError> {
        Self::assemble(parts, None)
    }

    fn assemble(parts: KernelParts, jump: Option<CsrMatrix>) -> Result<Self, SpaceError> {
        let n = parts.kernel.dim();
        let invalid = |msg: String| Err(SpaceError::InvalidKernel(msg));
        if n == 0 {
            return invalid("empty site set".into());
        }
        if parts.measure.len() != n || parts.exterior_out.len() != n || parts.exterior_in.len() != n
        {
            return invalid(format!("per-site vectors must have length {n}"));
        }
        if let Some(i) = parts.measure.iter().position(|m| !(m.is_finite() && *m > 0.0)) {
            return invalid(format!("measure at site {i} must be positive and finite"));
        }
        for (x, y, v) in parts.kernel.triplets() {
            if !v.is_finite() || v < 0.0 {
                return Err(SpaceError::NegativeRate {
                    x,
                    y: y.to_string(),
                    value: v,
                });
            }
        }
        for (name, ext) in [("exterior_out", &parts.exterior_out), ("exterior_in", &parts.exterior_in)] {
            if let Some(i) = ext.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return invalid(format!("{name} at site {i} must be nonnegative"));
            }
        }
        if let Some(j) = &jump {
            if j.dim() != n {
                return invalid("jump kernel dimension mismatch".into());
            }
            if let Some((x, y, v)) = j.triplets().find(|(_, _, v)| !v.is_finite() || *v < 0.0) {
                return invalid(format!("jump rate J({x}, {y}) = {v} must be nonnegative"));
            }
        }
        let interior = match parts.interior {
            Some(flags) if flags.len() == n => flags,
            Some(_) => return invalid("interior flags length mismatch".into()),
            None => parts.exterior_out.iter().map(|&e| e == 0.0).collect(),
        };
        let derived = derive(&parts.measure, &parts.kernel, &parts.exterior_out, &parts.exterior_in, jump.as_ref())?;
        Ok(Self {
            measure: parts.measure,
            kernel: parts.kernel,
            exterior_out: parts.exterior_out,
            exterior_in: parts.exterior_in,
            interior,
            boundary: parts.boundary,
            jump,
            geometry: parts.geometry,
            metadata: parts.metadata,
            derived,
        })
    }

    fn to_parts(&self) -> KernelParts {
        KernelParts {
            measure: self.measure.clone(),
            kernel: self.kernel.clone(),
            exterior_out: self.exterior_out.clone(),
            exterior_in: self.exterior_in.clone(),
            interior: Some(self.interior.clone()),
            boundary: self.boundary,
            geometry: self.geometry.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Adds a jump (migration) kernel `J(x, y)`. Both the emigration and
    /// immigration totals must stay below `bound`.
    pub fn with_jump_kernel(&self, jump: CsrMatrix, bound: f64) -> Result<Self, SpaceError> {
        let rows = jump.weighted_row_sums(&self.measure);
        let cols = jump.weighted_col_sums(&self.measure);
        for (which, sums) in [("row", &rows), ("column", &cols)] {
            let worst = sums.iter().copied().fold(0.0, f64::max);
            if worst >= bound {
                return Err(SpaceError::JumpBound {
                    which,
                    value: worst,
                    bound,
                });
            }
        }
        let mut parts = self.to_parts();
        parts
            .metadata
            .insert("jump_bound".into(), bound.to_string());
        Self::assemble(parts, Some(jump))
    }

    /// Jump kernel `J = rate · (a + aᵀ)/2`. Being symmetric, it leaves the
    /// criticality balance of every row unchanged.
    pub fn with_proportional_jumps(&self, rate: f64) -> Result<Self, SpaceError> {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(SpaceError::InvalidParameter {
                name: "jump_rate",
                reason: format!("must be finite and nonnegative, got {rate}"),
            });
        }
        let n = self.len();
        let jump = CsrMatrix::from_triplets(
            n,
            self.kernel
                .triplets()
                .flat_map(|(x, y, v)| [(x, y, 0.5 * rate * v), (y, x, 0.5 * rate * v)]),
        );
        let bound = 1.0 + 2.0 * rate * self.kernel.max_value() * n as f64;
        let mut out = self.with_jump_kernel(jump, bound)?;
        out.metadata.insert("jump_rate".into(), rate.to_string());
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.measure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measure.is_empty()
    }

    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    pub fn total_measure(&self) -> f64 {
        self.measure.iter().sum()
    }

    pub fn kernel(&self) -> &CsrMatrix {
        &self.kernel
    }

    /// Kernel with the measure folded in: entries `a(x, y) m(y)`.
    pub fn weighted_kernel(&self) -> &CsrMatrix {
        &self.derived.weighted
    }

    pub fn a(&self, x: usize, y: usize) -> f64 {
        self.kernel.get(x, y)
    }

    pub fn jump(&self) -> Option<&CsrMatrix> {
        self.jump.as_ref()
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn exterior_out(&self) -> &[f64] {
        &self.exterior_out
    }

    pub fn exterior_in(&self) -> &[f64] {
        &self.exterior_in
    }

    pub fn has_exterior(&self) -> bool {
        self.exterior_out.iter().chain(&self.exterior_in).any(|&e| e > 0.0)
    }

    pub fn is_interior(&self, x: usize) -> bool {
        self.interior[x]
    }

    pub fn interior_sites(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&x| self.interior[x])
    }

    /// `Σ_y a(x, y) m(y)` inside the window.
    pub fn row_mass(&self) -> &[f64] {
        &self.derived.row_mass
    }

    pub fn max_row_mass(&self) -> f64 {
        self.derived.row_mass.iter().copied().fold(0.0, f64::max)
    }

    /// Offspring rate `β(x) = Σ_y a(y, x) m(y)` of a particle at `x`,
    /// including offspring placed outside the window.
    pub fn offspring_rate(&self, x: usize) -> f64 {
        self.derived.offspring_rate[x]
    }

    pub fn offspring_rates(&self) -> &[f64] {
        &self.derived.offspring_rate
    }

    pub fn max_offspring_rate(&self) -> f64 {
        self.derived.max_offspring_rate
    }

    pub fn max_emigration_rate(&self) -> f64 {
        self.derived.max_emigration_rate
    }

    /// Emigration rate `Σ_y J(y, x) m(y)` of a particle at `x`.
    pub fn emigration_rate(&self, x: usize) -> f64 {
        self.derived.emigration_rate[x]
    }

    pub fn emigration_rates(&self) -> &[f64] {
        &self.derived.emigration_rate
    }

    /// Total jump rate of the walk at `x`: `Σ_y (a + J)(x, y) m(y)` plus the
    /// exterior (killing) mass.
    pub fn walk_rate(&self, x: usize) -> f64 {
        self.derived.walk_rate[x]
    }

    pub fn walk_rates(&self) -> &[f64] {
        &self.derived.walk_rate
    }

    /// Next site of the walk leaving `x`; `None` if `x` has no outgoing mass.
    #[inline]
    pub fn sample_walk_target<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Option<Target> {
        self.derived.walk[x].as_ref().map(|s| s.sample(rng))
    }

    /// Offspring location for a parent at `x`.
    #[inline]
    pub fn sample_offspring<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Option<Target> {
        self.derived.offspring[x].as_ref().map(|s| s.sample(rng))
    }

    /// Destination of a particle migrating away from `x`.
    #[inline]
    pub fn sample_emigration<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Option<Target> {
        self.derived.emigration[x].as_ref().map(|s| s.sample(rng))
    }

    /// Graph distance (number of kernel steps, either direction) between
    /// two sites.
    pub fn hop_distances(&self, from: usize) -> Vec<Option<usize>> {
        let n = self.len();
        let mut dist = vec![None; n];
        let mut queue = std::collections::VecDeque::new();
        dist[from] = Some(0);
        queue.push_back(from);
        let transpose = self.kernel.transpose();
        while let Some(x) = queue.pop_front() {
            let dx = dist[x].unwrap_or(0);
            for &y in self.kernel.row_cols(x).iter().chain(transpose.row_cols(x)) {
                if dist[y].is_none() {
                    dist[y] = Some(dx + 1);
                    queue.push_back(y);
                }
            }
        }
        dist
    }

    /// A pair of sites at (approximately) maximal hop distance, found by a
    /// double breadth-first sweep.
    pub fn farthest_pair(&self) -> (usize, usize) {
        let far = |from: usize| {
            self.hop_distances(from)
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.map(|d| (d, i)))
                .max_by_key(|&(d, i)| (d, std::cmp::Reverse(i)))
                .map(|(_, i)| i)
                .unwrap_or(from)
        };
        let a = far(0);
        (a, far(a))
    }

    /// Lattice site closest to the box centre, the root of a tree, or site 0.
    pub fn center_site(&self) -> usize {
        match &self.geometry {
            Geometry::Lattice { d, side, box_index, .. } => {
                let mid = (*side / 2) as i64;
                (0..self.len())
                    .min_by_key(|&s| {
                        unravel(box_index[s], *d, *side)
                            .iter()
                            .map(|&c| (c as i64 - mid).abs())
                            .sum::<i64>()
                    })
                    .unwrap_or(0)
            }
            _ => 0,
        }
    }
}

fn derive(
    measure: &[f64],
    kernel: &CsrMatrix,
    exterior_out: &[f64],
    exterior_in: &[f64],
    jump: Option<&CsrMatrix>,
) -> Result<Derived, SpaceError> {
    let n = measure.len();
    let weighted = kernel.with_column_weights(measure);
    let transpose = kernel.transpose();
    let row_mass = kernel.weighted_row_sums(measure);
    let jump_t = jump.map(CsrMatrix::transpose);

    let mut walk = Vec::with_capacity(n);
    let mut offspring = Vec::with_capacity(n);
    let mut emigration = Vec::with_capacity(n);
    let mut walk_rate = Vec::with_capacity(n);
    let mut offspring_rate = Vec::with_capacity(n);
    let mut emigration_rate = Vec::with_capacity(n);

    for x in 0..n {
        let mut w: Vec<(Target, f64)> = kernel
            .row(x)
            .map(|(y, v)| (Target::Site(y), v * measure[y]))
            .collect();
        if let Some(j) = jump {
            w.extend(j.row(x).map(|(y, v)| (Target::Site(y), v * measure[y])));
        }
        w.push((Target::Exterior, exterior_out[x]));
        walk_rate.push(w.iter().map(|(_, v)| v).sum());
        walk.push(TargetSampler::build(w)?);

        let mut o: Vec<(Target, f64)> = transpose
            .row(x)
            .map(|(y, v)| (Target::Site(y), v * measure[y]))
            .collect();
        o.push((Target::Exterior, exterior_in[x]));
        offspring_rate.push(o.iter().map(|(_, v)| v).sum());
        offspring.push(TargetSampler::build(o)?);

        match &jump_t {
            Some(jt) => {
                let e: Vec<(Target, f64)> = jt
                    .row(x)
                    .map(|(y, v)| (Target::Site(y), v * measure[y]))
                    .collect();
                emigration_rate.push(e.iter().map(|(_, v)| v).sum());
                emigration.push(TargetSampler::build(e)?);
            }
            None => {
                emigration_rate.push(0.0);
                emigration.push(None);
            }
        }
    }
    Ok(Derived {
        weighted,
        row_mass,
        max_offspring_rate: offspring_rate.iter().copied().fold(0.0, f64::max),
        max_emigration_rate: emigration_rate.iter().copied().fold(0.0, f64::max),
        offspring_rate,
        emigration_rate,
        walk_rate,
        walk,
        offspring,
        emigration,
    })
}

/// Which sites [`verify_criticality_in`] inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticalityScope {
    Interior,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityReport {
    pub tolerance: f64,
    pub max_deviation: f64,
    pub worst_site: Option<usize>,
    /// Sites whose deviation exceeds the tolerance.
    pub offending: Vec<usize>,
    pub checked_sites: usize,
    pub excluded_boundary_sites: usize,
    pub passes: bool,
}

/// Deviation of `Σ_y (a(x,y) + J(x,y) − J(y,x)) m(y)` from one over the
/// interior sites.
pub fn verify_criticality(space: &KernelSpace, tol: f64) -> CriticalityReport {
    verify_criticality_in(space, tol, CriticalityScope::Interior)
}

pub fn verify_criticality_in(
    space: &KernelSpace,
    tol: f64,
    scope: CriticalityScope,
) -> CriticalityReport {
    let balance: Vec<f64> = match space.jump() {
        Some(j) => {
            let out = j.weighted_row_sums(space.measure());
            let inflow = j.weighted_col_sums(space.measure());
            space
                .row_mass()
                .iter()
                .zip(out.iter().zip(&inflow))
                .map(|(r, (o, i))| r + o - i)
                .collect()
        }
        None => space.row_mass().to_vec(),
    };
    let mut max_deviation: f64 = 0.0;
    let mut worst_site = None;
    let mut offending = Vec::new();
    let mut checked = 0;
    for (x, b) in balance.iter().enumerate() {
        if scope == CriticalityScope::Interior && !space.is_interior(x) {
            continue;
        }
        checked += 1;
        let dev = (b - 1.0).abs();
        if worst_site.is_none() || dev > max_deviation {
            max_deviation = dev;
            worst_site = Some(x);
        }
        if dev > tol {
            offending.push(x);
        }
    }
    CriticalityReport {
        tolerance: tol,
        max_deviation,
        worst_site,
        passes: offending.is_empty(),
        offending,
        checked_sites: checked,
        excluded_boundary_sites: space.len() - checked,
    }
}

/// Multiplies the birth kernel (including its exterior mass) by `factor`.
pub fn scale_kernel(space: &KernelSpace, factor: f64) -> Result<KernelSpace, SpaceError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(SpaceError::InvalidParameter {
            name: "factor",
            reason: format!("must be positive and finite, got {factor}"),
        });
    }
    let mut parts = space.to_parts();
    parts.kernel = space.kernel.scaled(factor);
    parts.exterior_out.iter_mut().for_each(|v| *v *= factor);
    parts.exterior_in.iter_mut().for_each(|v| *v *= factor);
    let previous: f64 = parts
        .metadata
        .get("scale")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    parts
        .metadata
        .insert("scale".into(), (previous * factor).to_string());
    KernelSpace::assemble(parts, space.jump.clone())
}
