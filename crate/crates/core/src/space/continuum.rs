//! Translation-invariant dispersal on the torus `[0, L)^d`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SpaceError;

/// Dispersal law `a(u)` on `R^d`, normalized to total mass one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dispersal {
    /// Uniform on the ball of the given radius.
    Uniform { radius: f64 },
    /// Centred Gaussian with per-coordinate standard deviation `sigma`.
    Gaussian { sigma: f64 },
    /// `a(u) = C (1 + |u|/scale)^{-(d+alpha)}`.
    PowerLaw { alpha: f64, scale: f64 },
    /// Point masses at fixed offsets (a lattice kernel embedded in `R^d`).
    Atomic {
        offsets: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

fn invalid(name: &'static str, reason: impl Into<String>) -> SpaceError {
    SpaceError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Surface area of the unit sphere in `R^d`.
fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    }
}

/// Volume of the unit ball in `R^d`.
fn ball_volume(d: usize) -> f64 {
    sphere_area(d) / d as f64
}

/// `B(d, α) = Γ(d)Γ(α)/Γ(d+α)` for integer `d`.
fn beta_int(d: usize, alpha: f64) -> f64 {
    let factorial: f64 = (1..d).map(|i| i as f64).product();
    factorial / (0..d).map(|i| alpha + i as f64).product::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuumKernel {
    pub d: usize,
    /// Torus side `L`.
    pub side: f64,
    pub dispersal: Dispersal,
    /// Multiplies the birth rate; 1 is critical.
    pub birth_scale: f64,
    #[serde(skip)]
    atoms: Option<crate::alias::AliasTable>,
}

/// Validates a dispersal law on the torus `[0, side)^d`.
pub fn build_continuum_kernel(
    d: usize,
    side: f64,
    dispersal: Dispersal,
) -> Result<ContinuumKernel, SpaceError> {
    if !(1..=3).contains(&d) {
        return Err(invalid("d", format!("must be 1, 2 or 3, got {d}")));
    }
    if !(side.is_finite() && side > 0.0) {
        return Err(invalid("side", format!("must be positive, got {side}")));
    }
    let positive = |name, v: f64| {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(invalid(name, format!("must be positive, got {v}")))
        }
    };
    let mut atoms = None;
    match &dispersal {
        Dispersal::Uniform { radius } => positive("radius", *radius)?,
        Dispersal::Gaussian { sigma } => positive("sigma", *sigma)?,
        Dispersal::PowerLaw { alpha, scale } => {
            positive("scale", *scale)?;
            let (ok, range) = match d {
                1 => (*alpha > 0.0 && *alpha < 1.0, "0 < alpha < 1"),
                2 => (*alpha > 0.0 && *alpha < 2.0, "0 < alpha < 2"),
                _ => (*alpha > 2.0, "alpha > 2 (finite second moment)"),
            };
            if !ok || !alpha.is_finite() {
                return Err(SpaceError::PowerLawRange {
                    d,
                    alpha: *alpha,
                    range,
                });
            }
        }
        Dispersal::Atomic { offsets, weights } => {
            if offsets.len() != weights.len() || offsets.is_empty() {
                return Err(invalid("offsets", "need one weight per offset"));
            }
            if offsets.iter().any(|o| o.len() != d || o.iter().any(|c| !c.is_finite())) {
                return Err(invalid("offsets", format!("offsets must have {d} finite coordinates")));
            }
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(invalid("weights", format!("must sum to 1, got {total}")));
            }
            atoms = Some(crate::alias::AliasTable::new(weights)?);
        }
    }
    let kernel = ContinuumKernel {
        d,
        side,
        dispersal,
        birth_scale: 1.0,
        atoms,
    };
    let scale = kernel.length_scale();
    if side < 4.0 * scale {
        return Err(invalid(
            "side",
            format!("torus side {side} must be at least 4 dispersal lengths ({scale})"),
        ));
    }
    Ok(kernel)
}

impl ContinuumKernel {
    pub fn with_birth_scale(mut self, factor: f64) -> Result<Self, SpaceError> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(invalid("factor", format!("must be positive, got {factor}")));
        }
        self.birth_scale *= factor;
        Ok(self)
    }

    /// Rebuilds derived samplers after deserialization.
    pub fn rebuild(self) -> Result<Self, SpaceError> {
        let scale = self.birth_scale;
        build_continuum_kernel(self.d, self.side, self.dispersal)?.with_birth_scale(scale)
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.d as i32)
    }

    /// Typical displacement length.
    pub fn length_scale(&self) -> f64 {
        match &self.dispersal {
            Dispersal::Uniform { radius } => *radius,
            Dispersal::Gaussian { sigma } => *sigma,
            Dispersal::PowerLaw { scale, .. } => *scale,
            Dispersal::Atomic { offsets, .. } => offsets
                .iter()
                .map(|o| o.iter().map(|c| c * c).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
                .max(1.0),
        }
    }

    /// Density `a(u)` on `R^d`; `None` for atomic laws.
    pub fn density(&self, u: &[f64]) -> Option<f64> {
        let r = u.iter().map(|c| c * c).sum::<f64>().sqrt();
        self.radial_density(r)
    }

    /// Density as a function of `|u|`.
    pub fn radial_density(&self, r: f64) -> Option<f64> {
        let d = self.d;
        Some(match &self.dispersal {
            Dispersal::Uniform { radius } => {
                if r <= *radius {
                    1.0 / (ball_volume(d) * radius.powi(d as i32))
                } else {
                    0.0
                }
            }
            Dispersal::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                (2.0 * PI * s2).powf(-(d as f64) / 2.0) * (-r * r / (2.0 * s2)).exp()
            }
            Dispersal::PowerLaw { alpha, scale } => {
                let c = 1.0 / (sphere_area(d) * scale.powi(d as i32) * beta_int(d, *alpha));
                c * (1.0 + r / scale).powf(-(d as f64 + alpha))
            }
            Dispersal::Atomic { .. } => return None,
        })
    }

    /// `∫ a(u) du` by one-dimensional radial quadrature.
    pub fn normalization_integral(&self) -> f64 {
        let d = self.d;
        let area = sphere_area(d);
        match &self.dispersal {
            Dispersal::Atomic { weights, .. } => weights.iter().sum(),
            Dispersal::PowerLaw { alpha, scale } => {
                // r = s·u/(1−u) and then v = (1−u)^α turn the radial integral
                // into (s^d/α) ∫_0^1 (1 − v^{1/α})^{d−1} dv, which is bounded.
                let c = 1.0 / (area * scale.powi(d as i32) * beta_int(d, *alpha));
                let integral = simpson(0.0, 1.0, 20_000, |v| {
                    let one_minus_u = v.powf(1.0 / alpha);
                    (1.0 - one_minus_u).powi(d as i32 - 1) / alpha
                });
                c * area * scale.powi(d as i32) * integral
            }
            _ => {
                let rmax = match &self.dispersal {
                    Dispersal::Uniform { radius } => *radius,
                    _ => 12.0 * self.length_scale(),
                };
                simpson(0.0, rmax, 20_000, |r| {
                    area * r.powi(d as i32 - 1) * self.radial_density(r).unwrap_or(0.0)
                })
            }
        }
    }

    /// Writes a dispersal displacement into `out[..d]`.
    pub fn sample_displacement<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64; 3]) {
        let d = self.d;
        *out = [0.0; 3];
        match &self.dispersal {
            Dispersal::Gaussian { sigma } => {
                for slot in out.iter_mut().take(d) {
                    let z: f64 = StandardNormal.sample(rng);
                    *slot = sigma * z;
                }
            }
            Dispersal::Uniform { radius } => {
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                unit_vector(rng, d, out);
                out.iter_mut().take(d).for_each(|c| *c *= r);
            }
            Dispersal::PowerLaw { alpha, scale } => {
                // |u|/scale is beta-prime(d, α) distributed.
                let g1 = Gamma::new(d as f64, 1.0).expect("valid shape").sample(rng);
                let g2 = Gamma::new(*alpha, 1.0).expect("valid shape").sample(rng);
                let r = scale * g1 / g2;
                unit_vector(rng, d, out);
                out.iter_mut().take(d).for_each(|c| *c *= r);
            }
            Dispersal::Atomic { offsets, .. } => {
                let table = self.atoms.as_ref().expect("atomic kernel built via builder");
                let o = &offsets[table.sample(rng)];
                out[..d].copy_from_slice(o);
            }
        }
    }

    /// Maps a point onto the torus.
    #[inline]
    pub fn wrap(&self, p: &mut [f64; 3]) {
        for c in p.iter_mut().take(self.d) {
            *c = c.rem_euclid(self.side);
            if *c >= self.side {
                *c = 0.0;
            }
        }
    }

    /// Minimum-image distance on the torus.
    pub fn torus_distance(&self, p: &[f64; 3], q: &[f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.d {
            let mut dx = (p[i] - q[i]).abs();
            if dx > 0.5 * self.side {
                dx = self.side - dx;
            }
            s += dx * dx;
        }
        s.sqrt()
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, d: usize, out: &mut [f64; 3]) {
    if d == 1 {
        out[0] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        return;
    }
    loop {
        let mut norm = 0.0;
        for slot in out.iter_mut().take(d) {
            let z: f64 = StandardNormal.sample(rng);
            *slot = z;
            norm += z * z;
        }
        if norm > 1e-300 {
            let norm = norm.sqrt();
            out.iter_mut().take(d).for_each(|c| *c /= norm);
            return;
        }
    }
}

fn simpson(a: f64, b: f64, intervals: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}
