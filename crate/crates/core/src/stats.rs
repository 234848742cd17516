//! Small statistics helpers shared by the estimators.

use serde::{Deserialize, Serialize};

/// Streaming mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let mut s = RunningStats::new();
    values.iter().for_each(|&v| s.push(v));
    (s.mean(), s.stderr())
}

/// Ordinary least-squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Residual sum of squares.
    pub sse: f64,
    pub points: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    Some(LineFit {
        intercept,
        slope,
        sse,
        points: n,
    })
}

/// Which decay law fits a positive curve better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayLaw {
    Exponential,
    Polynomial,
}

/// Competing fits of `log y` against `c − κ t` and `c − γ log t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub law: DecayLaw,
    /// κ of the exponential fit.
    pub rate: f64,
    /// γ of the polynomial fit.
    pub exponent: f64,
    pub exponential: LineFit,
    pub polynomial: LineFit,
}

impl DecayFit {
    /// Fits both laws to points with `t > 0` and `y > 0`; `None` when fewer
    /// than two such points exist.
    pub fn fit(t: &[f64], y: &[f64]) -> Option<Self> {
        let (lt, ly): (Vec<f64>, Vec<f64>) = t
            .iter()
            .zip(y)
            .filter(|(t, y)| **t > 0.0 && **y > 0.0)
            .map(|(t, y)| (*t, y.ln()))
            .unzip();
        let exponential = fit_line(&lt, &ly)?;
        let log_t: Vec<f64> = lt.iter().map(|t| t.ln()).collect();
        let polynomial = fit_line(&log_t, &ly)?;
        let law = if polynomial.sse < exponential.sse {
            DecayLaw::Polynomial
        } else {
            DecayLaw::Exponential
        };
        Some(Self {
            law,
            rate: -exponential.slope,
            exponent: -polynomial.slope,
            exponential,
            polynomial,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn running_stats_arithmetic() {
        let (m, se) = mean_stderr(&[0.0, 2.0]);
        assert_eq!(m, 1.0);
        assert_relative_eq!(se, 1.0);
    }

    #[test]
    fn decay_fit_picks_generating_law() {
        let t: Vec<f64> = (1..8).map(|i| f64::from(i) * 2.0).collect();
        let exp: Vec<f64> = t.iter().map(|t| 3.0 * (-0.4 * t).exp()).collect();
        let pow: Vec<f64> = t.iter().map(|t| 3.0 * t.powf(-1.5)).collect();
        let fe = DecayFit::fit(&t, &exp).unwrap();
        assert_eq!(fe.law, DecayLaw::Exponential);
        assert_relative_eq!(fe.rate, 0.4, epsilon = 1e-12);
        let fp = DecayFit::fit(&t, &pow).unwrap();
        assert_eq!(fp.law, DecayLaw::Polynomial);
        assert_relative_eq!(fp.exponent, 1.5, epsilon = 1e-12);
    }
}
