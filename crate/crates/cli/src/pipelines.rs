//! The analysis pipelines behind each subcommand.

use contact_core::contact::{Ensemble, RunManifest, RunParams, Snapshot};
use contact_core::estimators::{
    clustering_diagnostic, count_snapshots_at, estimate_continuum_correlations, estimate_k1,
    estimate_k2, lenard_positivity_array, lenard_positivity_spot_check, moment_growth_check,
    point_snapshots_at, CorrelationEstimate, MomentReport,
};
use contact_core::hierarchy::{
    apply_l_hat_with, check_semigroup_positivity, duality_check, evolve_correlations,
    stationary_pair, CorrelationState, EvolveOptions, Exterior, HierarchyError,
    PositivityReport,
};
use contact_core::space::{
    scale_kernel, verify_criticality_in, ContinuumKernel, CriticalityReport, CriticalityScope,
    KernelSpace, Model, SpaceError,
};
use contact_core::walk::{
    classify_tail_with, estimate_pair_expectations, estimate_transience_integral_with,
    heat_kernel_probe, HeatKernelEstimate, TailClass, TailClassification, TransienceReport,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{ExperimentConfig, ExteriorMode};
use crate::output::{num, Artifacts, Check, ModuleReport};
use crate::CliError;

/// Model built from a configuration, with dynamics scaling applied.
pub enum Built {
    Discrete(KernelSpace),
    Continuum(ContinuumKernel),
}

fn space_error(e: SpaceError) -> CliError {
    match e {
        SpaceError::EnvironmentRejected { .. } | SpaceError::KernelFile(_) => CliError::Runtime {
            module: "space",
            message: e.to_string(),
        },
        other => CliError::Config(crate::config::ConfigError::new("model", other.to_string())),
    }
}

fn runtime(module: &'static str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime {
        module,
        message: e.to_string(),
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Built, CliError> {
    let d = &cfg.dynamics;
    Ok(match cfg.model.build(cfg.seed).map_err(space_error)? {
        Model::Discrete { space, .. } => {
            let mut space = if d.scale != 1.0 {
                scale_kernel(&space, d.scale).map_err(space_error)?
            } else {
                space
            };
            if d.jump_rate > 0.0 {
                space = space.with_proportional_jumps(d.jump_rate).map_err(space_error)?;
            }
            Built::Discrete(space)
        }
        Model::Continuum(k) => Built::Continuum(k.with_birth_scale(d.scale).map_err(space_error)?),
    })
}

fn require_discrete<'a>(built: &'a Built, command: &str) -> Result<&'a KernelSpace, CliError> {
    match built {
        Built::Discrete(s) => Ok(s),
        Built::Continuum(_) => Err(CliError::Usage(format!("`{command}` needs a discrete model"))),
    }
}

/// Fills in defaults that depend on the built space.
pub fn resolve_for_space(cfg: &mut ExperimentConfig, built: &Built) {
    let Built::Discrete(space) = built else {
        return;
    };
    let centre = space.center_site();
    if cfg.transience.pairs.is_none() {
        let neighbour = space
            .kernel()
            .row(centre)
            .map(|(y, _)| y)
            .find(|&y| y != centre)
            .unwrap_or(centre);
        cfg.transience.pairs = Some(vec![[centre, centre], [centre, neighbour]]);
    }
    cfg.heatkernel.site.get_or_insert(centre);
    cfg.estimators
        .window
        .get_or_insert_with(|| (0..space.len().min(8)).collect());
    cfg.hierarchy.stationary.get_or_insert(space.has_exterior());
}

fn expected_density(rho: f64, scale: f64, t: f64) -> f64 {
    rho * ((scale - 1.0) * t).exp()
}

#[derive(Debug, Serialize)]
pub struct SimulateDetails {
    pub model: String,
    pub volume: f64,
    pub replicas: usize,
    pub final_time: f64,
    pub final_density: f64,
    pub final_stderr: f64,
    pub expected_density: Option<f64>,
    pub truncated_replicas: Vec<usize>,
    pub moments: Option<MomentReport>,
    pub pair_note: Option<String>,
}

fn run_ensemble(cfg: &ExperimentConfig) -> Result<Ensemble, CliError> {
    let d = &cfg.dynamics;
    let mut params = RunParams::new(d.rho, d.horizon, cfg.seed)
        .observe_every(d.observe_step.unwrap_or(d.horizon / 20.0))
        .with_snapshots(d.snapshot_times.clone().unwrap_or_else(|| vec![0.0, d.horizon]));
    params.event_cap = d.event_cap;
    let manifest = RunManifest {
        model: cfg.model.clone(),
        scale: d.scale,
        jump_rate: d.jump_rate,
        replicas: d.replicas,
        params,
    };
    manifest.run().map_err(|e| runtime("contact", e))
}

/// Discrete snapshots list occupied sites; continuum snapshots list points.
fn snapshot_lines(ens: &Ensemble) -> impl Iterator<Item = serde_json::Value> + '_ {
    ens.runs.iter().flat_map(|run| {
        run.snapshots.iter().flat_map(move |(t, snap)| {
            let lines: Vec<serde_json::Value> = match snap {
                Snapshot::Counts(c) => c
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| **n > 0)
                    .map(|(site, n)| json!({"time": t, "replica": run.replica, "site": site, "occupation": n}))
                    .collect(),
                Snapshot::Points(p) => p
                    .iter()
                    .map(|x| json!({"time": t, "replica": run.replica, "point": x}))
                    .collect(),
            };
            lines
        })
    })
}

pub fn simulate(cfg: &ExperimentConfig, built: &Built, out: &mut Artifacts) -> Result<ModuleReport<SimulateDetails>, CliError> {
    let ens = run_ensemble(cfg)?;
    out.csv(
        "timeseries.csv",
        &["t", "replica", "total_count", "leak_count"],
        ens.runs.iter().flat_map(|run| {
            (0..run.times.len()).map(move |j| {
                vec![num(run.times[j]), run.replica.to_string(), run.counts[j].to_string(), run.leaks[j].to_string()]
            })
        }),
    )?;
    out.csv(
        "density.csv",
        &["t", "density", "stderr", "replicas"],
        (0..ens.times.len()).map(|j| {
            vec![num(ens.times[j]), num(ens.density[j]), num(ens.density_stderr[j]), ens.contributing[j].to_string()]
        }),
    )?;
    let d = &cfg.dynamics;
    if d.snapshot_jsonl {
        out.jsonl("snapshots.jsonl", snapshot_lines(&ens))?;
    }
    let last = ens.times.len() - 1;
    let (final_density, final_se) = (ens.density[last], ens.density_stderr[last]);
    let closed = match built {
        Built::Discrete(s) => !s.has_exterior(),
        Built::Continuum(_) => true,
    };
    let expected = closed.then(|| expected_density(d.rho, d.scale, ens.times[last]));
    let mut checks = Vec::new();
    if let Some(e) = expected {
        let z = if final_se > 0.0 { (final_density - e) / final_se } else { 0.0 };
        checks.push(Check::new(
            "density",
            z.abs() <= 3.0,
            format!("density {final_density:.5} ± {final_se:.5} vs {e:.5} at t={} (z={z:.2})", ens.times[last]),
        ));
    }
    checks.push(Check::new(
        "no_truncation",
        ens.truncated_replicas.is_empty(),
        format!("{} replicas hit the event cap", ens.truncated_replicas.len()),
    ));
    let snap_times = d.snapshot_times.clone().unwrap_or_default();
    let mut moments = None;
    let mut pair_note = None;
    match built {
        Built::Discrete(space) => {
            let pairs = space.len() <= cfg.estimators.max_pair_sites;
            if !pairs {
                pair_note = Some(format!(
                    "pair correlations skipped: {} sites exceed estimators.max_pair_sites = {}",
                    space.len(),
                    cfg.estimators.max_pair_sites
                ));
            }
            let mut estimates: Vec<CorrelationEstimate> = Vec::new();
            for &t in &snap_times {
                let snaps = count_snapshots_at(&ens, t);
                if snaps.is_empty() {
                    continue;
                }
                let est = if pairs { estimate_k2(space, &snaps, t) } else { estimate_k1(space, &snaps, t) }
                    .map_err(|e| runtime("estimators", e))?;
                estimates.push(est);
            }
            out.csv(
                "k1.csv",
                &["t", "x", "k1", "stderr"],
                estimates.iter().flat_map(|e| {
                    (0..e.k1.len()).map(move |x| vec![num(e.time), x.to_string(), num(e.k1[x]), num(e.k1_stderr[x])])
                }),
            )?;
            if pairs {
                out.csv(
                    "k2.csv",
                    &["t", "x", "y", "k2", "stderr"],
                    estimates.iter().flat_map(|e| {
                        let k2 = e.k2.as_ref().expect("pairs estimated");
                        let se = e.k2_stderr.as_ref().expect("pairs estimated");
                        (0..k2.n * k2.n).map(move |i| {
                            vec![num(e.time), (i / k2.n).to_string(), (i % k2.n).to_string(), num(k2.data[i]), num(se.data[i])]
                        })
                    }),
                )?;
                let curve = clustering_diagnostic(&estimates).map_err(|e| runtime("estimators", e))?;
                let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
                out.csv(
                    "clustering.csv",
                    &["t", "clustering_ratio", "stderr", "mean_ratio"],
                    curve.points.iter().map(|p| vec![num(p.time), opt(p.max_ratio), opt(p.max_ratio_stderr), opt(p.mean_ratio)]),
                )?;
            }
            let lenard = estimates.iter().all(|e| lenard_positivity_spot_check(e).passes);
            checks.push(Check::new("lenard_positivity", lenard, "estimated entries ≥ −3 stderr"));
            if let Some(&t) = snap_times.last() {
                let snaps = count_snapshots_at(&ens, t);
                let window = cfg.estimators.window.clone().unwrap_or_default();
                if !snaps.is_empty() {
                    let m = moment_growth_check(space, &snaps, &window, cfg.estimators.n_max, cfg.estimators.j)
                        .map_err(|e| runtime("estimators", e))?;
                    out.csv(
                        "moments.csv",
                        &["n", "m_hat", "stderr", "partial_sum"],
                        (0..m.m_hat.len()).map(|k| {
                            vec![
                                (k + 1).to_string(),
                                num(m.m_hat[k]),
                                num(m.m_stderr[k]),
                                m.partial_sums.get(k).map(|v| num(*v)).unwrap_or_default(),
                            ]
                        }),
                    )?;
                    moments = Some(m);
                }
            }
        }
        Built::Continuum(kernel) => {
            let mut rows = Vec::new();
            let mut lenard = true;
            for &t in &snap_times {
                let snaps = point_snapshots_at(&ens, t);
                if snaps.is_empty() {
                    continue;
                }
                let est = estimate_continuum_correlations(kernel, &snaps, t, cfg.estimators.bin_width)
                    .map_err(|e| runtime("estimators", e))?;
                lenard &= lenard_positivity_spot_check(&est).passes;
                if let Some(r) = &est.radial {
                    for b in 0..r.k2.len() {
                        rows.push(vec![num(t), num(r.edges[b]), num(r.edges[b + 1]), num(r.k2[b]), num(r.k2_stderr[b]), num(r.g[b])]);
                    }
                }
            }
            out.csv("pair_correlation.csv", &["t", "r_lo", "r_hi", "k2", "stderr", "g"], rows)?;
            checks.push(Check::new("lenard_positivity", lenard, "binned pair correlation ≥ −3 stderr"));
        }
    }
    Ok(ModuleReport::new(
        "simulate",
        checks,
        SimulateDetails {
            model: cfg.model.kind().to_string(),
            volume: ens.volume,
            replicas: ens.runs.len(),
            final_time: ens.times[last],
            final_density,
            final_stderr: final_se,
            expected_density: expected,
            truncated_replicas: ens.truncated_replicas.clone(),
            moments,
            pair_note,
        },
    ))
}

/// Summary of a stationary pair computation, as consumed by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarySummary {
    pub converged: bool,
    pub rho: f64,
    pub t_star: Option<f64>,
    pub residual: Option<f64>,
    pub relative_residual: Option<f64>,
    pub min_k2: Option<f64>,
    pub far_ratio: Option<f64>,
    pub sup_k1: f64,
    pub sup_k2: Option<f64>,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct HierarchyDetails {
    pub horizon: f64,
    pub dt: f64,
    pub error_estimate: Option<f64>,
    pub k1_max_deviation: f64,
    pub k2_min: Option<f64>,
    pub k2_max: Option<f64>,
    pub jump_note: Option<String>,
    pub stationary: Option<StationarySummary>,
    pub stationary_note: Option<String>,
}

fn exterior(cfg: &ExperimentConfig) -> Exterior {
    match cfg.hierarchy.exterior {
        ExteriorMode::Bath => Exterior::Bath { rho: cfg.dynamics.rho },
        ExteriorMode::Killing => Exterior::Killing,
    }
}

pub fn hierarchy(cfg: &ExperimentConfig, built: &Built, out: &mut Artifacts) -> Result<ModuleReport<HierarchyDetails>, CliError> {
    let space = require_discrete(built, "hierarchy")?;
    let h = &cfg.hierarchy;
    let rho = cfg.dynamics.rho;
    let n = space.len();
    let pairs = n <= h.max_pair_sites;
    let horizon = h.horizon.unwrap_or(cfg.dynamics.horizon);
    let options = EvolveOptions {
        tol: h.tol,
        exterior: exterior(cfg),
        ..EvolveOptions::default()
    };
    let evo = evolve_correlations(space, &CorrelationState::poisson(space, rho, pairs), horizon, &options)
        .map_err(|e| runtime("hierarchy", e))?;
    let state = &evo.state;
    out.csv("hierarchy_k1.csv", &["x", "k1"], state.k1.iter().enumerate().map(|(x, v)| vec![x.to_string(), num(*v)]))?;
    if let Some(k2) = state.k2.as_ref().filter(|_| n <= h.pair_csv_max_sites) {
        out.csv(
            "hierarchy_k2.csv",
            &["x", "y", "k2"],
            (0..n * n).map(|i| vec![(i / n).to_string(), (i % n).to_string(), num(k2.data[i])]),
        )?;
    }
    let k1_dev = state.k1.iter().fold(0.0f64, |m, v| m.max((v - expected_density(rho, 1.0, 0.0)).abs()));
    let mut checks = vec![Check::new(
        "step_halving",
        evo.error_estimate.is_some_and(|e| e <= h.tol),
        format!("error estimate {:?} with dt = {}", evo.error_estimate, evo.dt),
    )];
    if let Some(k2) = &state.k2 {
        checks.push(Check::new("k2_nonnegative", k2.min() >= -1e-12, format!("min k2 = {}", k2.min())));
    }
    let mut stationary = None;
    let mut stationary_note = None;
    let prior_class = std::fs::read_to_string(out.path("transience_report.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["details"]["classification"]["class"].as_str().map(str::to_string));
    if h.stationary != Some(true) {
        stationary_note = Some("stationary pair not requested".into());
    } else if !pairs {
        stationary_note = Some(format!("stationary pair skipped: {n} sites exceed hierarchy.max_pair_sites"));
    } else if prior_class.as_deref() == Some("recurrent") {
        stationary_note = Some("stationary pair skipped: the walk was classified recurrent, so the pair integral diverges".into());
    } else {
        let summary = match stationary_pair(space, rho, h.t_max, h.stationary_tol) {
            Ok(st) => {
                out.csv("decay.csv", &["t", "sup_norm"], st.decay_curve.iter().map(|(t, v)| vec![num(*t), num(*v)]))?;
                if n <= h.pair_csv_max_sites {
                    out.csv(
                        "stationary_k2.csv",
                        &["x", "y", "k2"],
                        (0..n * n).map(|i| vec![(i / n).to_string(), (i % n).to_string(), num(st.k2.data[i])]),
                    )?;
                }
                checks.push(Check::new(
                    "stationary_residual",
                    st.relative_residual() <= 1e-3,
                    format!("‖L̂₂k2 + f2‖ / ‖f2‖ = {:.3e}", st.relative_residual()),
                ));
                checks.push(Check::new("stationary_positive", lenard_positivity_array(&st.k2).passes, format!("min k2 = {}", st.min_k2)));
                checks.push(Check::new(
                    "stationary_far_field",
                    (st.far_ratio - 1.0).abs() <= 0.05,
                    format!("k2/ρ² = {:.4} at pair {:?}", st.far_ratio, st.far_pair),
                ));
                StationarySummary {
                    converged: true,
                    rho,
                    t_star: Some(st.t_star),
                    residual: Some(st.residual),
                    relative_residual: Some(st.relative_residual()),
                    min_k2: Some(st.min_k2),
                    far_ratio: Some(st.far_ratio),
                    sup_k1: rho,
                    sup_k2: Some(st.k2.max()),
                    message: format!("converged at T* = {}", st.t_star),
                }
            }
            Err(HierarchyError::NonConvergence { curve, last_increment, .. }) => {
                out.csv("decay.csv", &["t", "sup_norm"], curve.iter().map(|(t, v)| vec![num(*t), num(*v)]))?;
                let message = format!("no convergence by T = {}: doubling increment {last_increment:.3e}", h.t_max);
                checks.push(Check::new("stationary_converged", false, message.clone()));
                StationarySummary {
                    converged: false,
                    rho,
                    t_star: None,
                    residual: None,
                    relative_residual: None,
                    min_k2: None,
                    far_ratio: None,
                    sup_k1: rho,
                    sup_k2: None,
                    message,
                }
            }
            Err(e) => return Err(runtime("hierarchy", e)),
        };
        stationary = Some(summary);
    }
    Ok(ModuleReport::new(
        "hierarchy",
        checks,
        HierarchyDetails {
            horizon,
            dt: evo.dt,
            error_estimate: evo.error_estimate,
            k1_max_deviation: k1_dev,
            k2_min: state.k2.as_ref().map(|k| k.min()),
            k2_max: state.k2.as_ref().map(|k| k.max()),
            jump_note: space
                .jump()
                .map(|_| "the jump component is not part of the correlation equations".to_string()),
            stationary,
            stationary_note,
        },
    ))
}

#[derive(Debug, Serialize)]
pub struct TransienceDetails {
    pub report: TransienceReport,
    pub classification: TailClassification,
    pub q_hat: Option<f64>,
    pub stationary_note: String,
}

pub fn transience(cfg: &ExperimentConfig, built: &Built, out: &mut Artifacts) -> Result<ModuleReport<TransienceDetails>, CliError> {
    let space = require_discrete(built, "transience")?;
    let t = &cfg.transience;
    let pairs: Vec<(usize, usize)> = t.pairs.clone().unwrap_or_default().iter().map(|p| (p[0], p[1])).collect();
    let report = estimate_transience_integral_with(space, &pairs, &t.horizons, t.replicas, cfg.seed, t.floor)
        .map_err(|e| runtime("walk", e))?;
    out.csv(
        "transience.csv",
        &["pair_id", "T", "I_hat", "stderr", "corrected", "corrected_stderr"],
        report.pairs.iter().flat_map(|p| {
            let horizons = &report.horizons;
            (0..horizons.len()).map(move |j| {
                vec![
                    p.pair_id.to_string(),
                    num(horizons[j]),
                    num(p.i_hat[j]),
                    num(p.stderr[j]),
                    num(p.corrected[j]),
                    num(p.corrected_stderr[j]),
                ]
            })
        }),
    )?;
    let classification = classify_tail_with(&report, t.thresholds()).map_err(|e| runtime("walk", e))?;
    let transient = classification.class.is_transient();
    let stationary_note = if transient {
        "transient: the stationary pair integral is finite; run `hierarchy` on a window to construct it".to_string()
    } else if classification.class == TailClass::Recurrent {
        "recurrent: partial integrals keep growing, stationary_pair skipped".to_string()
    } else {
        "classification inconclusive: stationary_pair skipped".to_string()
    };
    let checks = vec![Check::new(
        "transient",
        transient,
        match classification.q_hat {
            Some(q) => format!("classified {} with Q_hat = {q:.5}", classification.class),
            None => format!("classified {}", classification.class),
        },
    )];
    Ok(ModuleReport::new(
        "transience",
        checks,
        TransienceDetails {
            q_hat: classification.q_hat,
            report,
            classification,
            stationary_note,
        },
    ))
}

pub fn heatkernel(cfg: &ExperimentConfig, built: &Built, out: &mut Artifacts) -> Result<ModuleReport<HeatKernelEstimate>, CliError> {
    let space = require_discrete(built, "heatkernel")?;
    let hk = &cfg.heatkernel;
    let site = hk.site.unwrap_or_else(|| space.center_site());
    let est = heat_kernel_probe(space, site, &hk.times, hk.replicas, cfg.seed).map_err(|e| runtime("walk", e))?;
    out.csv(
        "heatkernel.csv",
        &["t", "p_hat", "stderr", "survival"],
        (0..est.times.len()).map(|j| vec![num(est.times[j]), num(est.p_hat[j]), num(est.stderr[j]), num(est.survival[j])]),
    )?;
    let checks = vec![Check::new(
        "decay_fit",
        est.fit.is_some(),
        match &est.fit {
            Some(f) => format!("{:?} decay, exponent {:.3}, rate {:.4}", f.law, f.exponent, f.rate),
            None => "too few resolved points to fit".to_string(),
        },
    )];
    Ok(ModuleReport::new("heatkernel", checks, est))
}

#[derive(Debug, Serialize)]
pub struct DualitySummary {
    pub times: Vec<f64>,
    pub replicas: usize,
    pub max_abs_z: Vec<f64>,
    pub max_abs_z_overall: f64,
    pub entries: usize,
    pub exceed_3: usize,
    pub unresolved: usize,
    pub familywise_threshold: f64,
    pub applicable: bool,
}

#[derive(Debug, Serialize)]
pub struct ValidateDetails {
    pub criticality: Option<CriticalityReport>,
    pub constants_residual: Vec<(usize, f64)>,
    pub positivity: Vec<PositivityReport>,
    pub duality: Option<DualitySummary>,
    pub normalization: Option<f64>,
    pub notes: Vec<String>,
}

/// `|z|` level exceeded with probability 0.001 by the largest of `m`
/// independent standard normal entries.
pub fn familywise_threshold(m: usize) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - 0.0005 / m.max(1) as f64)
}

pub fn validate(cfg: &ExperimentConfig, built: &Built, out: &mut Artifacts) -> Result<ModuleReport<ValidateDetails>, CliError> {
    let v = &cfg.validate;
    let mut checks = Vec::new();
    let mut details = ValidateDetails {
        criticality: None,
        constants_residual: Vec::new(),
        positivity: Vec::new(),
        duality: None,
        normalization: None,
        notes: Vec::new(),
    };
    let space = match built {
        Built::Continuum(kernel) => {
            let integral = kernel.normalization_integral();
            checks.push(Check::new(
                "normalization",
                (integral - 1.0).abs() <= 1e-3,
                format!("∫a = {integral:.6}, birth scale {}", kernel.birth_scale),
            ));
            details.normalization = Some(integral);
            details.notes.push("continuum models only check the kernel normalization".into());
            return Ok(ModuleReport::new("validate", checks, details));
        }
        Built::Discrete(s) => s,
    };
    let n = space.len();
    let crit = verify_criticality_in(space, v.criticality_tol, CriticalityScope::Interior);
    checks.push(Check::new(
        "criticality",
        crit.passes,
        format!("max deviation {:.3e} over {} interior sites", crit.max_deviation, crit.checked_sites),
    ));
    details.criticality = Some(crit);
    let bath = Exterior::Bath { rho: 1.0 };
    let orders: Vec<usize> = if n <= v.pair_positivity_max_sites { vec![1, 2] } else { vec![1] };
    if orders.len() == 1 {
        details
            .notes
            .push(format!("order-2 checks skipped: {n} sites exceed validate.pair_positivity_max_sites"));
    }
    for &order in &orders {
        let ones = vec![1.0; n.pow(order as u32)];
        let r = apply_l_hat_with(space, order, &ones, bath).map_err(|e| runtime("hierarchy", e))?;
        let sup = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        checks.push(Check::new(
            &format!("constants_order_{order}"),
            sup <= 1e-12,
            format!("‖L̂*_{order} 1‖ = {sup:.3e} (exterior held at the constant)"),
        ));
        details.constants_residual.push((order, sup));
        let pos = check_semigroup_positivity(space, order, v.positivity_trials, &v.positivity_times, cfg.seed)
            .map_err(|e| runtime("hierarchy", e))?;
        checks.push(Check::new(
            &format!("positivity_order_{order}"),
            pos.passes,
            format!("min entry {:.3e} over {} trials", pos.min_by_time.iter().copied().fold(f64::INFINITY, f64::min), pos.trials),
        ));
        details.positivity.push(pos);
    }
    if n <= v.duality_max_sites {
        let walk = estimate_pair_expectations(space, &v.duality_times, v.duality_replicas, cfg.seed)
            .map_err(|e| runtime("walk", e))?;
        let dual = duality_check(space, &walk).map_err(|e| runtime("hierarchy", e))?;
        out.csv(
            "duality.csv",
            &["t", "x", "y", "semigroup", "monte_carlo", "stderr"],
            (0..dual.times.len()).flat_map(|j| {
                let (exact, walk) = (&dual.exact, &walk);
                (0..n * n).map(move |i| {
                    vec![
                        num(walk.times[j]),
                        (i / n).to_string(),
                        (i % n).to_string(),
                        num(exact[j][i]),
                        num(walk.mean[j][i]),
                        num(walk.stderr[j][i]),
                    ]
                })
            }),
        )?;
        let threshold = familywise_threshold(dual.entries);
        if dual.applicable {
            checks.push(Check::new(
                "duality",
                dual.max_abs_z_overall <= threshold,
                format!(
                    "max |z| = {:.2} over {} entries (family-wise 0.1% level {threshold:.2}); {} entries beyond 3, {} unresolved",
                    dual.max_abs_z_overall, dual.entries, dual.exceed_3, dual.unresolved
                ),
            ));
        } else {
            details
                .notes
                .push("duality not applicable: walk rates differ from one or a jump kernel is present".into());
        }
        details.duality = Some(DualitySummary {
            times: dual.times.clone(),
            replicas: walk.replicas,
            max_abs_z: dual.max_abs_z.clone(),
            max_abs_z_overall: dual.max_abs_z_overall,
            entries: dual.entries,
            exceed_3: dual.exceed_3,
            unresolved: dual.unresolved,
            familywise_threshold: threshold,
            applicable: dual.applicable,
        });
    } else {
        details
            .notes
            .push(format!("duality skipped: {n} sites exceed validate.duality_max_sites"));
    }
    Ok(ModuleReport::new("validate", checks, details))
}
