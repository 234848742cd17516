//! Lattice and regular-tree kernels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    ravel, unravel, BoundaryMode, Geometry, KernelParts, KernelSpace, SpaceError,
    CRITICALITY_TOL,
};
use crate::sparse::CsrMatrix;

/// One entry `V(u, x)` of a finite-range perturbation of the nearest-neighbour
/// kernel: `a(x, x + u)` is shifted by `delta` at the site `origin + site`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationEntry {
    /// Site displacement from the centre of the box.
    pub site: Vec<i64>,
    pub offset: Vec<i64>,
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Range `R`: every entry must satisfy `|site|∞ ≤ R` and `|offset|∞ ≤ R`.
    pub radius: usize,
    pub entries: Vec<PerturbationEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    pub d: usize,
    pub side: usize,
    pub boundary: BoundaryMode,
    pub perturbation: Perturbation,
    /// Mass `a(x, x)` kept at the site; the remainder is split evenly among
    /// the `2d` neighbours.
    pub self_weight: f64,
}

impl LatticeSpec {
    pub fn new(d: usize, side: usize, boundary: BoundaryMode) -> Self {
        Self {
            d,
            side,
            boundary,
            perturbation: Perturbation::default(),
            self_weight: 0.0,
        }
    }

    pub fn with_perturbation(mut self, perturbation: Perturbation) -> Self {
        self.perturbation = perturbation;
        self
    }
}

fn invalid(name: &'static str, reason: impl Into<String>) -> SpaceError {
    SpaceError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Where a displacement from a lattice site lands inside the box.
enum Landing {
    Site(usize),
    Outside,
}

fn land(coords: &[usize], offset: &[i64], side: usize, periodic: bool) -> Landing {
    let s = side as i64;
    let mut out = Vec::with_capacity(coords.len());
    for (&c, &u) in coords.iter().zip(offset) {
        let v = c as i64 + u;
        if periodic {
            out.push(v.rem_euclid(s) as usize);
        } else if (0..s).contains(&v) {
            out.push(v as usize);
        } else {
            return Landing::Outside;
        }
    }
    Landing::Site(ravel(&out, side))
}

/// Nearest-neighbour kernel on a `side^d` box, optionally perturbed near the
/// centre by a finite-range `V(u, x)`.
///
/// Rows of the untruncated kernel must sum to one within `1e-9`, and every
/// resulting rate must be nonnegative.
pub fn build_lattice_kernel(spec: &LatticeSpec) -> Result<KernelSpace, SpaceError> {
    let LatticeSpec {
        d,
        side,
        boundary,
        ref perturbation,
        self_weight,
    } = *spec;
    if !(1..=3).contains(&d) {
        return Err(invalid("d", format!("must be 1, 2 or 3, got {d}")));
    }
    if side < 2 {
        return Err(invalid("side", format!("must be at least 2, got {side}")));
    }
    if !(0.0..1.0).contains(&self_weight) {
        return Err(invalid("self_weight", format!("must lie in [0, 1), got {self_weight}")));
    }
    let n = side
        .checked_pow(d as u32)
        .filter(|&n| n <= 1 << 26)
        .ok_or_else(|| invalid("side", "box too large"))?;
    let origin = vec![side / 2; d];
    let radius = perturbation.radius as i64;
    for e in &perturbation.entries {
        if e.site.len() != d || e.offset.len() != d {
            return Err(invalid("perturbation", format!("entries must have {d} coordinates")));
        }
        let norm = |v: &[i64]| v.iter().map(|c| c.abs()).max().unwrap_or(0);
        if norm(&e.site) > radius || norm(&e.offset) > radius {
            return Err(invalid(
                "perturbation",
                format!("entry {:?}/{:?} exceeds radius {radius}", e.site, e.offset),
            ));
        }
        if !e.delta.is_finite() {
            return Err(invalid("perturbation", "delta must be finite"));
        }
        if boundary != BoundaryMode::Periodic {
            let reach = norm(&e.site) + norm(&e.offset);
            if origin[0] as i64 - reach < 1 || origin[0] as i64 + reach > side as i64 - 2 {
                return Err(invalid(
                    "perturbation",
                    "perturbed sites and their targets must stay strictly inside the box",
                ));
            }
        }
    }
    let periodic = boundary == BoundaryMode::Periodic;
    let hop = (1.0 - self_weight) / (2 * d) as f64;
    let mut triplets = Vec::with_capacity(n * (2 * d + 1));
    let mut exterior_out = vec![0.0; n];
    let mut interior = vec![true; n];

    for x in 0..n {
        let coords = unravel(x, d, side);
        let mut moves: Vec<(Vec<i64>, f64)> = Vec::with_capacity(2 * d + 1);
        if self_weight > 0.0 {
            moves.push((vec![0; d], self_weight));
        }
        for i in 0..d {
            for sign in [1, -1] {
                let mut u = vec![0; d];
                u[i] = sign;
                moves.push((u, hop));
            }
        }
        let rel: Vec<i64> = coords
            .iter()
            .zip(&origin)
            .map(|(&c, &o)| c as i64 - o as i64)
            .collect();
        for e in perturbation.entries.iter().filter(|e| e.site == rel) {
            moves.push((e.offset.clone(), e.delta));
        }

        let mut row: BTreeMap<usize, f64> = BTreeMap::new();
        let mut outside = 0.0;
        for (u, w) in moves {
            match land(&coords, &u, side, periodic) {
                Landing::Site(y) => *row.entry(y).or_default() += w,
                Landing::Outside => {
                    interior[x] = false;
                    match boundary {
                        BoundaryMode::Reflecting => *row.entry(x).or_default() += w,
                        _ => outside += w,
                    }
                }
            }
        }
        let mut total = outside;
        for (y, v) in row {
            if v < -1e-12 {
                return Err(SpaceError::NegativeRate {
                    x,
                    y: y.to_string(),
                    value: v,
                });
            }
            total += v;
            if v.abs() > 1e-15 {
                triplets.push((x, y, v));
            }
        }
        if outside < -1e-12 {
            return Err(SpaceError::NegativeRate {
                x,
                y: "exterior".into(),
                value: outside,
            });
        }
        if (total - 1.0).abs() > CRITICALITY_TOL {
            return Err(SpaceError::NotCritical {
                site: x,
                row_sum: total,
            });
        }
        exterior_out[x] = outside.max(0.0);
    }
    // Perturbations stay away from the boundary, so the inflow from outside
    // is that of the homogeneous kernel, which is symmetric.
    let exterior_in = exterior_out.clone();
    let mut metadata = BTreeMap::new();
    metadata.insert("model".into(), "lattice".into());
    metadata.insert("d".into(), d.to_string());
    metadata.insert("side".into(), side.to_string());
    metadata.insert("boundary".into(), boundary.to_string());
    metadata.insert(
        "perturbation_entries".into(),
        perturbation.entries.len().to_string(),
    );
    KernelSpace::new(KernelParts {
        measure: vec![1.0; n],
        kernel: CsrMatrix::from_triplets(n, triplets),
        exterior_out,
        exterior_in,
        interior: Some(interior),
        boundary,
        geometry: Geometry::Lattice {
            d,
            side,
            periodic,
            box_index: (0..n).collect(),
        },
        metadata,
    })
}

/// Number of vertices of the regular tree of degree `k` truncated at
/// `depth` generations from the root.
pub fn tree_size(k: usize, depth: usize) -> usize {
    let mut total = 1;
    let mut level = k;
    for _ in 0..depth {
        total += level;
        level *= k - 1;
    }
    total
}

/// Uniform nearest-neighbour kernel `a = 1/k` on the `k`-regular tree
/// truncated at `depth`. Vertices are numbered breadth-first from the root.
///
/// The missing `k − 1` children of each leaf are either exterior mass
/// (absorbing) or returned as a self-loop (reflecting).
pub fn build_tree_kernel(
    k: usize,
    depth: usize,
    boundary: BoundaryMode,
) -> Result<KernelSpace, SpaceError> {
    if k < 3 {
        return Err(invalid("k", format!("tree degree must be at least 3, got {k}")));
    }
    if depth < 1 {
        return Err(invalid("depth", "must be at least 1"));
    }
    if boundary == BoundaryMode::Periodic {
        return Err(invalid("boundary", "trees support absorbing or reflecting boundaries"));
    }
    let n = tree_size(k, depth);
    if n > 1 << 24 {
        return Err(invalid("depth", "tree too large"));
    }
    let mut parent = vec![None; n];
    let mut level = vec![0; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut next = 1;
    for v in 0..n {
        if level[v] == depth {
            continue;
        }
        let count = if v == 0 { k } else { k - 1 };
        for _ in 0..count {
            parent[next] = Some(v);
            level[next] = level[v] + 1;
            children[v].push(next);
            next += 1;
        }
    }
    debug_assert_eq!(next, n);

    let w = 1.0 / k as f64;
    let missing = (k - 1) as f64 * w;
    let mut triplets = Vec::with_capacity(n * k);
    let mut exterior = vec![0.0; n];
    for v in 0..n {
        if let Some(p) = parent[v] {
            triplets.push((v, p, w));
        }
        triplets.extend(children[v].iter().map(|&c| (v, c, w)));
        if level[v] == depth {
            match boundary {
                BoundaryMode::Reflecting => triplets.push((v, v, missing)),
                _ => exterior[v] = missing,
            }
        }
    }
    let interior = level.iter().map(|&l| l < depth).collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("model".into(), "tree".into());
    metadata.insert("k".into(), k.to_string());
    metadata.insert("depth".into(), depth.to_string());
    metadata.insert("boundary".into(), boundary.to_string());
    KernelSpace::new(KernelParts {
        measure: vec![1.0; n],
        kernel: CsrMatrix::from_triplets(n, triplets),
        exterior_out: exterior.clone(),
        exterior_in: exterior,
        interior: Some(interior),
        boundary,
        geometry: Geometry::Tree {
            k,
            depth,
            parent,
            level,
        },
        metadata,
    })
}
