//! Experiment configuration: TOML in, fully resolved TOML out.

use std::path::{Path, PathBuf};

use contact_core::space::{build_continuum_kernel, ModelSpec, SpaceError};
use contact_core::walk::{FloorMode, TailThresholds};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A configuration problem, located by its key path.
#[derive(Debug, Clone, Error, Serialize)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub model: ModelSpec,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub hierarchy: HierarchyConfig,
    #[serde(default)]
    pub transience: TransienceConfig,
    #[serde(default)]
    pub heatkernel: HeatKernelConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub estimators: EstimatorConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub rho: f64,
    pub horizon: f64,
    pub replicas: usize,
    /// Birth kernel multiplier; 1 is critical.
    pub scale: f64,
    /// Rate of the symmetric migration component.
    pub jump_rate: f64,
    /// Spacing of count observations; `horizon / 20` when absent.
    pub observe_step: Option<f64>,
    /// Occupation snapshot times; `[0, horizon]` when absent.
    pub snapshot_times: Option<Vec<f64>>,
    /// Also write every snapshot to `snapshots.jsonl`.
    pub snapshot_jsonl: bool,
    pub event_cap: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            horizon: 10.0,
            replicas: 100,
            scale: 1.0,
            jump_rate: 0.0,
            observe_step: None,
            snapshot_times: None,
            snapshot_jsonl: false,
            event_cap: contact_core::contact::DEFAULT_EVENT_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExteriorMode {
    Bath,
    Killing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Evolution horizon; the dynamics horizon when absent.
    pub horizon: Option<f64>,
    pub exterior: ExteriorMode,
    /// Bound on the step-halving error estimate.
    pub tol: f64,
    /// Compute the stationary pair correlation; on when the space has an
    /// exterior, when absent.
    pub stationary: Option<bool>,
    pub stationary_tol: f64,
    pub t_max: f64,
    /// Pair arrays are skipped above this many sites.
    pub max_pair_sites: usize,
    /// Pair arrays are written to CSV up to this many sites.
    pub pair_csv_max_sites: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            exterior: ExteriorMode::Bath,
            tol: 1e-8,
            stationary: None,
            stationary_tol: 1e-4,
            t_max: 4096.0,
            max_pair_sites: 2048,
            pair_csv_max_sites: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransienceConfig {
    pub horizons: Vec<f64>,
    pub replicas: usize,
    /// Probe pairs; the centre site with itself and a neighbour when absent.
    pub pairs: Option<Vec<[usize; 2]>>,
    pub floor: FloorMode,
    pub plateau_rel: f64,
    pub z: f64,
    pub growth_ratio: f64,
}

impl Default for TransienceConfig {
    fn default() -> Self {
        let t = TailThresholds::default();
        Self {
            horizons: vec![5.0, 10.0, 20.0, 40.0, 80.0, 160.0],
            replicas: 2000,
            pairs: None,
            floor: FloorMode::Auto,
            plateau_rel: t.plateau_rel,
            z: t.z,
            growth_ratio: t.growth_ratio,
        }
    }
}

impl TransienceConfig {
    pub fn thresholds(&self) -> TailThresholds {
        TailThresholds {
            plateau_rel: self.plateau_rel,
            z: self.z,
            growth_ratio: self.growth_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatKernelConfig {
    /// Probe site; the centre site when absent.
    pub site: Option<usize>,
    pub times: Vec<f64>,
    pub replicas: usize,
}

impl Default for HeatKernelConfig {
    fn default() -> Self {
        Self {
            site: None,
            times: vec![2.0, 3.0, 4.0, 6.0, 8.0, 11.0, 15.0, 20.0, 25.0, 30.0],
            replicas: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub criticality_tol: f64,
    pub positivity_trials: usize,
    pub positivity_times: Vec<f64>,
    /// Pair positivity is skipped above this many sites.
    pub pair_positivity_max_sites: usize,
    pub duality_times: Vec<f64>,
    pub duality_replicas: usize,
    pub duality_max_sites: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            criticality_tol: 1e-9,
            positivity_trials: 100,
            positivity_times: vec![0.5, 1.0, 2.0, 5.0],
            pair_positivity_max_sites: 400,
            duality_times: vec![0.5, 1.0, 2.0],
            duality_replicas: 10_000,
            duality_max_sites: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Window for the moment check; the first `min(N, 8)` sites when absent.
    pub window: Option<Vec<usize>>,
    pub n_max: usize,
    pub j: usize,
    /// Radial bin width for continuum models; a quarter of the dispersal
    /// scale when absent.
    pub bin_width: Option<f64>,
    /// Pair correlations are estimated up to this many sites.
    pub max_pair_sites: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: None,
            n_max: 4,
            j: 1,
            bin_width: None,
            max_pair_sites: 256,
        }
    }
}

/// Parses and validates configuration text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_string() } else { path };
        ConfigError::new(path, e.into_inner().message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be positive and finite, got {v}")))
    }
}

fn increasing(path: &str, v: &[f64], allow_zero: bool) -> Result<(), ConfigError> {
    let ok = v.iter().all(|t| t.is_finite() && (*t > 0.0 || (allow_zero && *t == 0.0)))
        && v.windows(2).all(|w| w[0] < w[1]);
    if ok && !v.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::new(path, "must be a nonempty increasing list of positive times"))
    }
}

fn space_error_path(e: &SpaceError) -> String {
    match e {
        SpaceError::PowerLawRange { .. } => "model.dispersal.alpha".into(),
        SpaceError::InvalidParameter { name, .. } => format!("model.{name}"),
        _ => "model".into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dynamics;
        if !(d.rho.is_finite() && d.rho >= 0.0) {
            return Err(ConfigError::new("dynamics.rho", format!("must be nonnegative, got {}", d.rho)));
        }
        positive("dynamics.horizon", d.horizon)?;
        positive("dynamics.scale", d.scale)?;
        if !(d.jump_rate.is_finite() && d.jump_rate >= 0.0) {
            return Err(ConfigError::new("dynamics.jump_rate", "must be nonnegative"));
        }
        if d.replicas == 0 {
            return Err(ConfigError::new("dynamics.replicas", "must be at least 1"));
        }
        if let Some(step) = d.observe_step {
            positive("dynamics.observe_step", step)?;
        }
        if let Some(times) = &d.snapshot_times {
            increasing("dynamics.snapshot_times", times, true)?;
            if times.last().is_some_and(|t| *t > d.horizon) {
                return Err(ConfigError::new("dynamics.snapshot_times", "times must not exceed the horizon"));
            }
        }
        if self.threads == Some(0) {
            return Err(ConfigError::new("threads", "must be at least 1"));
        }
        let h = &self.hierarchy;
        if let Some(t) = h.horizon {
            positive("hierarchy.horizon", t)?;
        }
        positive("hierarchy.tol", h.tol)?;
        positive("hierarchy.stationary_tol", h.stationary_tol)?;
        positive("hierarchy.t_max", h.t_max)?;
        let t = &self.transience;
        increasing("transience.horizons", &t.horizons, false)?;
        if t.horizons.len() < 4 {
            return Err(ConfigError::new("transience.horizons", "at least 4 horizons are needed for tail classification"));
        }
        if t.replicas < contact_core::walk::MIN_TRANSIENCE_REPLICAS {
            return Err(ConfigError::new(
                "transience.replicas",
                format!("must be at least {}", contact_core::walk::MIN_TRANSIENCE_REPLICAS),
            ));
        }
        positive("transience.plateau_rel", t.plateau_rel)?;
        positive("transience.z", t.z)?;
        positive("transience.growth_ratio", t.growth_ratio)?;
        let hk = &self.heatkernel;
        increasing("heatkernel.times", &hk.times, false)?;
        if hk.replicas == 0 {
            return Err(ConfigError::new("heatkernel.replicas", "must be at least 1"));
        }
        let v = &self.validate;
        positive("validate.criticality_tol", v.criticality_tol)?;
        if v.positivity_trials < 10 {
            return Err(ConfigError::new("validate.positivity_trials", "must be at least 10"));
        }
        increasing("validate.positivity_times", &v.positivity_times, false)?;
        increasing("validate.duality_times", &v.duality_times, false)?;
        if v.duality_replicas < 2 {
            return Err(ConfigError::new("validate.duality_replicas", "must be at least 2"));
        }
        let e = &self.estimators;
        if e.n_max == 0 || e.n_max > contact_core::estimators::MAX_MOMENT_ORDER {
            return Err(ConfigError::new(
                "estimators.n_max",
                format!("must lie in 1..={}", contact_core::estimators::MAX_MOMENT_ORDER),
            ));
        }
        if e.j >= e.n_max {
            return Err(ConfigError::new("estimators.j", "must be below n_max"));
        }
        if let Some(w) = e.bin_width {
            positive("estimators.bin_width", w)?;
        }
        if let ModelSpec::Continuum { d, side, dispersal } = &self.model {
            build_continuum_kernel(*d, *side, dispersal.clone())
                .map_err(|e| ConfigError::new(space_error_path(&e), e.to_string()))?;
        }
        Ok(())
    }

    /// Fills every defaulted field that depends on other fields, so the
    /// echo reproduces the run verbatim.
    pub fn resolve(&mut self) {
        self.model.resolve_seeds(self.seed);
        let d = &mut self.dynamics;
        d.observe_step.get_or_insert(d.horizon / 20.0);
        d.snapshot_times.get_or_insert_with(|| vec![0.0, d.horizon]);
        self.hierarchy.horizon.get_or_insert(d.horizon);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
