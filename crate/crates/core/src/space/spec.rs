//! Serializable description of a model, resolved into a built space.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    build_conductance_kernel, build_continuum_kernel, build_lattice_kernel,
    build_percolation_kernel, build_tree_kernel, BoundaryMode, ContinuumKernel, Dispersal,
    Environment, KernelSpace, LatticeSpec, PercolationSpec, Perturbation, SpaceError,
};
use crate::rng::derive_seed;

fn periodic() -> BoundaryMode {
    BoundaryMode::Periodic
}

fn absorbing() -> BoundaryMode {
    BoundaryMode::Absorbing
}

fn default_min_cluster_fraction() -> f64 {
    0.25
}

fn default_p_guard() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Lattice {
        d: usize,
        side: usize,
        #[serde(default = "periodic")]
        boundary: BoundaryMode,
        #[serde(default)]
        self_weight: f64,
        #[serde(default)]
        perturbation: Perturbation,
    },
    Tree {
        k: usize,
        depth: usize,
        #[serde(default = "absorbing")]
        boundary: BoundaryMode,
    },
    Conductance {
        d: usize,
        side: usize,
        c: f64,
        /// Environment seed; derived from the master seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Percolation {
        d: usize,
        side: usize,
        p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default)]
        periodic: bool,
        #[serde(default = "default_min_cluster_fraction")]
        min_cluster_fraction: f64,
        #[serde(default = "default_p_guard")]
        p_guard: f64,
    },
    Continuum {
        d: usize,
        side: f64,
        dispersal: Dispersal,
    },
    KernelFile {
        path: PathBuf,
    },
}

/// A built model.
#[derive(Debug, Clone)]
pub enum Model {
    Discrete {
        space: KernelSpace,
        environment: Option<Environment>,
    },
    Continuum(ContinuumKernel),
}

impl Model {
    pub fn discrete(&self) -> Option<&KernelSpace> {
        match self {
            Self::Discrete { space, .. } => Some(space),
            Self::Continuum(_) => None,
        }
    }

    pub fn continuum(&self) -> Option<&ContinuumKernel> {
        match self {
            Self::Continuum(k) => Some(k),
            Self::Discrete { .. } => None,
        }
    }
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Lattice { .. } => "lattice",
            Self::Tree { .. } => "tree",
            Self::Conductance { .. } => "conductance",
            Self::Percolation { .. } => "percolation",
            Self::Continuum { .. } => "continuum",
            Self::KernelFile { .. } => "kernel_file",
        }
    }

    /// Fills in environment seeds derived from `master`, so the spec can be
    /// echoed and rerun verbatim.
    pub fn resolve_seeds(&mut self, master: u64) {
        match self {
            Self::Conductance { seed, .. } | Self::Percolation { seed, .. } => {
                seed.get_or_insert_with(|| derive_seed(master, "environment"));
            }
            _ => {}
        }
    }

    pub fn build(&self, master: u64) -> Result<Model, SpaceError> {
        let env_seed = |seed: &Option<u64>| seed.unwrap_or_else(|| derive_seed(master, "environment"));
        Ok(match self {
            Self::Lattice {
                d,
                side,
                boundary,
                self_weight,
                perturbation,
            } => {
                let spec = LatticeSpec {
                    d: *d,
                    side: *side,
                    boundary: *boundary,
                    perturbation: perturbation.clone(),
                    self_weight: *self_weight,
                };
                Model::Discrete {
                    space: build_lattice_kernel(&spec)?,
                    environment: None,
                }
            }
            Self::Tree { k, depth, boundary } => Model::Discrete {
                space: build_tree_kernel(*k, *depth, *boundary)?,
                environment: None,
            },
            Self::Conductance { d, side, c, seed } => {
                let (space, env) = build_conductance_kernel(*d, *side, *c, env_seed(seed))?;
                Model::Discrete {
                    space,
                    environment: Some(env),
                }
            }
            Self::Percolation {
                d,
                side,
                p,
                seed,
                periodic,
                min_cluster_fraction,
                p_guard,
            } => {
                let spec = PercolationSpec {
                    d: *d,
                    side: *side,
                    p: *p,
                    seed: env_seed(seed),
                    periodic: *periodic,
                    min_cluster_fraction: *min_cluster_fraction,
                    p_guard: *p_guard,
                };
                let (space, env) = build_percolation_kernel(&spec)?;
                Model::Discrete {
                    space,
                    environment: Some(env),
                }
            }
            Self::Continuum { d, side, dispersal } => {
                Model::Continuum(build_continuum_kernel(*d, *side, dispersal.clone())?)
            }
            Self::KernelFile { path } => Model::Discrete {
                space: crate::kernel_io::read_kernel_file(path)
                    .map_err(|e| SpaceError::KernelFile(e.to_string()))?,
                environment: None,
            },
        })
    }
}
