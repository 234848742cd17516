//! Kernels built from random environments: i.i.d. conductances and bond
//! percolation clusters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    ravel, unravel, BoundaryMode, Geometry, KernelParts, KernelSpace, SpaceError,
};
use crate::rng::stream;
use crate::sparse::CsrMatrix;
use crate::union_find::UnionFind;

/// Sampled environment, kept so runs can be audited and reproduced.
///
/// Bonds are indexed `site * d + direction`, pointing from a box site to its
/// `+e_direction` neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub d: usize,
    pub side: usize,
    pub c: Option<f64>,
    pub p: Option<f64>,
    pub conductances: Vec<f64>,
    pub open_bonds: Vec<bool>,
    /// Component label of every box site (smallest site index in the
    /// component).
    pub cluster_labels: Vec<usize>,
}

fn invalid(name: &'static str, reason: impl Into<String>) -> SpaceError {
    SpaceError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn check_box(d: usize, side: usize) -> Result<usize, SpaceError> {
    if !(1..=3).contains(&d) {
        return Err(invalid("d", format!("must be 1, 2 or 3, got {d}")));
    }
    if side < 3 {
        return Err(invalid("side", format!("must be at least 3, got {side}")));
    }
    side.checked_pow(d as u32)
        .filter(|&n| n <= 1 << 24)
        .ok_or_else(|| invalid("side", "box too large"))
}

/// `+e_dir` neighbour of `x`, or `None` at an open edge.
fn neighbour(x: usize, dir: usize, d: usize, side: usize, periodic: bool) -> Option<usize> {
    let mut c = unravel(x, d, side);
    if c[dir] + 1 == side {
        if !periodic {
            return None;
        }
        c[dir] = 0;
    } else {
        c[dir] += 1;
    }
    Some(ravel(&c, side))
}

/// Random walk among i.i.d. conductances `μ ~ U[1/c, c]` on the periodic
/// box: `a(x, y) = μ_xy / μ_x` with `μ_x = Σ_y μ_xy`. Rows are stochastic;
/// `c = 1` recovers the simple random walk.
pub fn build_conductance_kernel(
    d: usize,
    side: usize,
    c: f64,
    seed: u64,
) -> Result<(KernelSpace, Environment), SpaceError> {
    let n = check_box(d, side)?;
    if !(c.is_finite() && c >= 1.0) {
        return Err(invalid("c", format!("must be finite and at least 1, got {c}")));
    }
    let mut rng = stream(seed, "conductance", 0);
    let conductances: Vec<f64> = (0..n * d)
        .map(|_| if c == 1.0 { 1.0 } else { rng.random_range(1.0 / c..=c) })
        .collect();
    let mut total = vec![0.0; n];
    let mut edges = Vec::with_capacity(n * d);
    for x in 0..n {
        for dir in 0..d {
            let y = neighbour(x, dir, d, side, true).expect("periodic box");
            let mu = conductances[x * d + dir];
            total[x] += mu;
            total[y] += mu;
            edges.push((x, y, mu));
        }
    }
    let triplets = edges
        .iter()
        .flat_map(|&(x, y, mu)| [(x, y, mu / total[x]), (y, x, mu / total[y])]);
    let kernel = CsrMatrix::from_triplets(n, triplets);
    let mut metadata = BTreeMap::new();
    metadata.insert("model".into(), "conductance".into());
    metadata.insert("d".into(), d.to_string());
    metadata.insert("side".into(), side.to_string());
    metadata.insert("c".into(), c.to_string());
    metadata.insert("environment_seed".into(), seed.to_string());
    let mut parts = KernelParts::closed(kernel, BoundaryMode::Periodic);
    parts.geometry = Geometry::Lattice {
        d,
        side,
        periodic: true,
        box_index: (0..n).collect(),
    };
    parts.metadata = metadata;
    let env = Environment {
        seed,
        d,
        side,
        c: Some(c),
        p: None,
        conductances,
        open_bonds: vec![true; n * d],
        cluster_labels: vec![0; n],
    };
    Ok((KernelSpace::new(parts)?, env))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PercolationSpec {
    pub d: usize,
    pub side: usize,
    pub p: f64,
    pub seed: u64,
    /// Wrap bonds across the box faces.
    pub periodic: bool,
    /// Smallest admissible share of box sites in the largest cluster.
    pub min_cluster_fraction: f64,
    /// Bond probabilities below this are refused even if a large cluster
    /// happens to form.
    pub p_guard: f64,
}

impl PercolationSpec {
    pub fn new(d: usize, side: usize, p: f64, seed: u64) -> Self {
        Self {
            d,
            side,
            p,
            seed,
            periodic: false,
            min_cluster_fraction: 0.25,
            p_guard: 0.5,
        }
    }
}

/// Simple random walk on the largest open cluster of bond percolation:
/// `a(x, y) = 1/deg(x)` over open bonds. Sites are the cluster, numbered in
/// increasing box order.
pub fn build_percolation_kernel(
    spec: &PercolationSpec,
) -> Result<(KernelSpace, Environment), SpaceError> {
    let PercolationSpec {
        d,
        side,
        p,
        seed,
        periodic,
        min_cluster_fraction,
        p_guard,
    } = *spec;
    let n = check_box(d, side)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("p", format!("must lie in [0, 1], got {p}")));
    }
    if !(0.0..=1.0).contains(&min_cluster_fraction) {
        return Err(invalid("min_cluster_fraction", "must lie in [0, 1]"));
    }
    let mut rng = stream(seed, "percolation", 0);
    let mut open_bonds = vec![false; n * d];
    let mut uf = UnionFind::new(n);
    for x in 0..n {
        for dir in 0..d {
            let open = rng.random::<f64>() < p;
            if let Some(y) = neighbour(x, dir, d, side, periodic) {
                if open {
                    open_bonds[x * d + dir] = true;
                    uf.union(x, y);
                }
            }
        }
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut cluster_labels = vec![0; n];
    for x in 0..n {
        let r = uf.find(x);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = x;
        }
        cluster_labels[x] = label_of_root[r];
    }
    let mut sizes = vec![0usize; n];
    for &l in &cluster_labels {
        sizes[l] += 1;
    }
    let (largest_label, largest) = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(l, &s)| (s, std::cmp::Reverse(l)))
        .map(|(l, &s)| (l, s))
        .unwrap_or((0, 0));
    let fraction = largest as f64 / n as f64;
    if largest < 2 || fraction < min_cluster_fraction {
        return Err(SpaceError::EnvironmentRejected {
            largest_fraction: fraction,
            required: min_cluster_fraction,
        });
    }
    if p < p_guard {
        return Err(SpaceError::BelowPercolationGuard { p, guard: p_guard });
    }

    let box_index: Vec<usize> = (0..n).filter(|&x| cluster_labels[x] == largest_label).collect();
    let mut local = vec![usize::MAX; n];
    for (i, &x) in box_index.iter().enumerate() {
        local[x] = i;
    }
    let m = box_index.len();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &x in &box_index {
        for dir in 0..d {
            if open_bonds[x * d + dir] {
                let y = neighbour(x, dir, d, side, periodic).expect("open bond has an end");
                adjacency[local[x]].push(local[y]);
                adjacency[local[y]].push(local[x]);
            }
        }
    }
    let triplets = adjacency.iter().enumerate().flat_map(|(i, nbrs)| {
        let w = 1.0 / nbrs.len() as f64;
        nbrs.iter().map(move |&j| (i, j, w))
    });
    let kernel = CsrMatrix::from_triplets(m, triplets);
    let boundary = if periodic {
        BoundaryMode::Periodic
    } else {
        BoundaryMode::Absorbing
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("model".into(), "percolation".into());
    metadata.insert("d".into(), d.to_string());
    metadata.insert("side".into(), side.to_string());
    metadata.insert("p".into(), p.to_string());
    metadata.insert("environment_seed".into(), seed.to_string());
    metadata.insert("cluster_fraction".into(), fraction.to_string());
    let mut parts = KernelParts::closed(kernel, boundary);
    parts.geometry = Geometry::Lattice {
        d,
        side,
        periodic,
        box_index,
    };
    parts.metadata = metadata;
    let env = Environment {
        seed,
        d,
        side,
        c: None,
        p: Some(p),
        conductances: vec![1.0; n * d],
        open_bonds,
        cluster_labels,
    };
    Ok((KernelSpace::new(parts)?, env))
}
