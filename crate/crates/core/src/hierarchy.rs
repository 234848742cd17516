//! First two orders of the correlation-function hierarchy.
//!
//! `L̂*_n k = −n k + Σ_i A_i k`, where `A_i` applies the weighted kernel
//! `(A g)(x) = Σ_y a(x, y) m(y) g(y)` in the `i`-th argument. The pair
//! equation is driven by `f2(x1, x2) = k1(x2) a(x1, x2) + k1(x1) a(x2, x1)`.
//! Pair arrays are stored densely (`N × N`, row-major) and the Kronecker
//! sum is applied as `A K + K Aᵀ` without forming the `N² × N²` operator.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::space::KernelSpace;
use crate::sparse::CsrMatrix;
use crate::walk::PairExpectations;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("order must be 1 or 2, got {0}")]
    InvalidOrder(usize),
    #[error("array has {got} entries, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
    #[error("step {dt} exceeds the stability bound {bound}")]
    StepTooLarge { dt: f64, bound: f64 },
    #[error("step-halving error {estimate:.3e} above tolerance {tol:.1e} after {refinements} refinements")]
    Tolerance {
        estimate: f64,
        tol: f64,
        refinements: usize,
    },
    #[error(
        "no convergence by T = {t_max}: last doubling increment {last_increment:.3e}, \
         source norm at T is {last_norm:.3e}"
    )]
    NonConvergence {
        t_max: f64,
        last_increment: f64,
        last_norm: f64,
        /// `(t, ‖e^{tL̂*₂} f2‖_sup)`.
        curve: Vec<(f64, f64)>,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Square array `k(x, y)` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairArray {
    pub n: usize,
    pub data: Vec<f64>,
}

impl PairArray {
    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..n * n).map(|i| f(i / n, i % n)).collect();
        Self { n, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.n + y]
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.data)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for x in 0..n {
            for y in x + 1..n {
                worst = worst.max((self.get(x, y) - self.get(y, x)).abs());
            }
        }
        worst
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// What lies outside a window with exterior kernel mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Exterior {
    /// Correlations vanish outside (walkers are killed).
    Killing,
    /// The exterior is held at the Poisson state: `k1 = ρ`, `k2 = ρ²`.
    Bath { rho: f64 },
}

fn check_order(n: usize) -> Result<(), HierarchyError> {
    if n == 1 || n == 2 {
        Ok(())
    } else {
        Err(HierarchyError::InvalidOrder(n))
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), HierarchyError> {
    if expected == got {
        Ok(())
    } else {
        Err(HierarchyError::ShapeMismatch { expected, got })
    }
}

/// `out = A K + K Aᵀ` for an `N × N` array `K`. When `K` is symmetric the
/// second term is the transpose of the first.
fn kron_sum_apply(a: &CsrMatrix, k: &[f64], out: &mut [f64], symmetric: bool) {
    let n = a.dim();
    out.par_chunks_mut(n).enumerate().for_each(|(x, row)| {
        row.fill(0.0);
        for (z, w) in a.row(x) {
            let src = &k[z * n..(z + 1) * n];
            row.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
        }
        if !symmetric {
            let kx = &k[x * n..(x + 1) * n];
            for (y, o) in row.iter_mut().enumerate() {
                *o += a.row(y).map(|(z, w)| w * kx[z]).sum::<f64>();
            }
        }
    });
    if symmetric {
        for x in 0..n {
            out[x * n + x] *= 2.0;
            for y in x + 1..n {
                let s = out[x * n + y] + out[y * n + x];
                out[x * n + y] = s;
                out[y * n + x] = s;
            }
        }
    }
}

/// Adds the exterior contribution of a bath to `L̂*_n k`.
fn add_bath(space: &KernelSpace, n: usize, exterior: Exterior, out: &mut [f64]) {
    let Exterior::Bath { rho } = exterior else {
        return;
    };
    let ext = space.exterior_out();
    if !space.has_exterior() {
        return;
    }
    if n == 1 {
        out.iter_mut().zip(ext).for_each(|(o, e)| *o += e * rho);
    } else {
        let sites = space.len();
        let r2 = rho * rho;
        out.par_chunks_mut(sites).enumerate().for_each(|(x, row)| {
            for (y, o) in row.iter_mut().enumerate() {
                *o += (ext[x] + ext[y]) * r2;
            }
        });
    }
}

fn l_hat_into(
    space: &KernelSpace,
    n: usize,
    k: &[f64],
    out: &mut [f64],
    exterior: Exterior,
    symmetric: bool,
) {
    let a = space.weighted_kernel();
    if n == 1 {
        a.mul_vec_into(k, out);
    } else {
        kron_sum_apply(a, k, out, symmetric);
    }
    let shift = n as f64;
    out.iter_mut().zip(k).for_each(|(o, v)| *o -= shift * v);
    add_bath(space, n, exterior, out);
}

/// `L̂*_n k` on the window, with zero exterior.
pub fn apply_l_hat(space: &KernelSpace, n: usize, k: &[f64]) -> Result<Vec<f64>, HierarchyError> {
    apply_l_hat_with(space, n, k, Exterior::Killing)
}

pub fn apply_l_hat_with(
    space: &KernelSpace,
    n: usize,
    k: &[f64],
    exterior: Exterior,
) -> Result<Vec<f64>, HierarchyError> {
    check_order(n)?;
    check_len(space.len().pow(n as u32), k.len())?;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(HierarchyError::InvalidParameter("non-finite entry".into()));
    }
    let mut out = vec![0.0; k.len()];
    l_hat_into(space, n, k, &mut out, exterior, false);
    Ok(out)
}

/// Pair source `f2(x1, x2) = k1(x2) a(x1, x2) + k1(x1) a(x2, x1)`.
pub fn build_f2(space: &KernelSpace, k1: &[f64]) -> Result<PairArray, HierarchyError> {
    check_len(space.len(), k1.len())?;
    let n = space.len();
    let mut f = PairArray::constant(n, 0.0);
    f2_into(space.kernel(), k1, &mut f.data);
    Ok(f)
}

fn f2_into(kernel: &CsrMatrix, k1: &[f64], out: &mut [f64]) {
    let n = kernel.dim();
    out.fill(0.0);
    for (x, y, a) in kernel.triplets() {
        out[x * n + y] += k1[y] * a;
        out[y * n + x] += k1[y] * a;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationState {
    pub time: f64,
    pub k1: Vec<f64>,
    pub k2: Option<PairArray>,
    /// Source of the pair equation at `time`, when `k2` is tracked.
    pub f2: Option<PairArray>,
}

impl CorrelationState {
    /// Correlation functions of the Poisson measure with intensity `rho`.
    pub fn poisson(space: &KernelSpace, rho: f64, with_pairs: bool) -> Self {
        let n = space.len();
        let k1 = vec![rho; n];
        let k2 = with_pairs.then(|| PairArray::constant(n, rho * rho));
        let f2 = with_pairs.then(|| build_f2(space, &k1).expect("shape"));
        Self {
            time: 0.0,
            k1,
            k2,
            f2,
        }
    }

    pub fn order(&self) -> usize {
        if self.k2.is_some() {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    /// Time step; defaults to `0.1 / (n (1 + max row mass))`.
    pub dt: Option<f64>,
    /// Bound on the step-halving error estimate.
    pub tol: f64,
    pub max_refinements: usize,
    pub exterior: Exterior,
    /// Estimate the error by repeating the run at half the step.
    pub error_control: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            dt: None,
            tol: 1e-8,
            max_refinements: 4,
            exterior: Exterior::Killing,
            error_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evolution {
    pub state: CorrelationState,
    pub dt: f64,
    pub steps: usize,
    /// `sup |y_dt − y_{dt/2}| / 15` of the returned (finer) solution.
    pub error_estimate: Option<f64>,
    pub refinements: usize,
}

/// Largest admissible explicit step for order `n`.
pub fn stable_step(space: &KernelSpace, n: usize) -> f64 {
    0.1 / (n as f64 * (1.0 + space.max_row_mass()))
}

struct Rhs<'a> {
    space: &'a KernelSpace,
    exterior: Exterior,
    pairs: bool,
}

impl Rhs<'_> {
    /// Derivative of the stacked state `(k1, k2)`.
    fn eval(&self, y: &[f64], out: &mut [f64], f2: &mut [f64]) {
        let n = self.space.len();
        let (k1, k2) = y.split_at(n);
        let (d1, d2) = out.split_at_mut(n);
        l_hat_into(self.space, 1, k1, d1, self.exterior, false);
        if self.pairs {
            l_hat_into(self.space, 2, k2, d2, self.exterior, false);
            f2_into(self.space.kernel(), k1, f2);
            d2.iter_mut().zip(f2.iter()).for_each(|(d, f)| *d += f);
        }
    }
}

/// Classical fourth-order Runge–Kutta from `y` over `steps` steps of `dt`.
fn rk4(rhs: &Rhs<'_>, y: &mut [f64], dt: f64, steps: usize) {
    let len = y.len();
    let n = rhs.space.len();
    let mut f2 = vec![0.0; if rhs.pairs { n * n } else { 0 }];
    let mut k = [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    let mut tmp = vec![0.0; len];
    for _ in 0..steps {
        rhs.eval(y, &mut k[0], &mut f2);
        for (stage, c) in [(1, 0.5), (2, 0.5), (3, 1.0)] {
            let (done, rest) = k.split_at_mut(stage);
            let prev = &done[stage - 1];
            tmp.iter_mut()
                .zip(y.iter().zip(prev))
                .for_each(|(t, (y, p))| *t = y + c * dt * p);
            rhs.eval(&tmp, &mut rest[0], &mut f2);
        }
        let h6 = dt / 6.0;
        for i in 0..len {
            y[i] += h6 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }
}

/// Integrates `dk1/dt = L̂*₁ k1` and, when `k2` is present,
/// `dk2/dt = L̂*₂ k2 + f2(k1)` from `state` up to `state.time + t`.
pub fn evolve_correlations(
    space: &KernelSpace,
    state: &CorrelationState,
    t: f64,
    options: &EvolveOptions,
) -> Result<Evolution, HierarchyError> {
    let n = space.len();
    check_len(n, state.k1.len())?;
    if let Some(k2) = &state.k2 {
        check_len(n * n, k2.data.len())?;
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(HierarchyError::InvalidTime(t));
    }
    let order = state.order();
    let bound = stable_step(space, order);
    let dt0 = options.dt.unwrap_or(bound);
    if !(dt0 > 0.0 && dt0 <= bound * (1.0 + 1e-12)) {
        return Err(HierarchyError::StepTooLarge { dt: dt0, bound });
    }
    let rhs = Rhs {
        space,
        exterior: options.exterior,
        pairs: order == 2,
    };
    let mut y0 = state.k1.clone();
    if let Some(k2) = &state.k2 {
        y0.extend_from_slice(&k2.data);
    }
    let finish = |y: Vec<f64>, dt: f64, steps: usize, err: Option<f64>, refinements: usize| {
        let mut k1 = y;
        let k2 = (order == 2).then(|| PairArray {
            n,
            data: k1.split_off(n),
        });
        let f2 = k2.as_ref().map(|_| build_f2(space, &k1).expect("shape"));
        Evolution {
            state: CorrelationState {
                time: state.time + t,
                k1,
                k2,
                f2,
            },
            dt,
            steps,
            error_estimate: err,
            refinements,
        }
    };
    if t == 0.0 {
        return Ok(finish(y0, dt0, 0, Some(0.0), 0));
    }
    let run = |dt: f64| {
        let steps = (t / dt).ceil() as usize;
        let h = t / steps as f64;
        let mut y = y0.clone();
        rk4(&rhs, &mut y, h, steps);
        (y, h, steps)
    };
    let (mut coarse, h, steps) = run(dt0);
    if !options.error_control {
        return Ok(finish(coarse, h, steps, None, 0));
    }
    let mut dt = dt0;
    for refinement in 0..=options.max_refinements {
        dt /= 2.0;
        let (fine, hf, sf) = run(dt);
        let estimate = sup_diff(&coarse, &fine) / 15.0;
        if estimate <= options.tol {
            return Ok(finish(fine, hf, sf, Some(estimate), refinement));
        }
        if refinement == options.max_refinements {
            return Err(HierarchyError::Tolerance {
                estimate,
                tol: options.tol,
                refinements: refinement,
            });
        }
        coarse = fine;
    }
    unreachable!("loop returns on its last iteration")
}

/// Exact-in-exact-arithmetic propagator for `e^{tL̂*_n}` (zero exterior):
/// `e^{−nh} Σ_k (hB)^k / k!` with `B ≥ 0`, so every term is nonnegative
/// on nonnegative data and nothing cancels.
struct Uniformized<'a> {
    space: &'a KernelSpace,
    order: usize,
    symmetric: bool,
    /// Bound on the row sums of `B`.
    b_norm: f64,
    term: Vec<f64>,
    next: Vec<f64>,
    acc: Vec<f64>,
    acc_int: Vec<f64>,
}

/// Target value of `h · ‖B‖` per step.
const TAYLOR_SPAN: f64 = 8.0;
const TAYLOR_MAX_TERMS: usize = 400;

impl<'a> Uniformized<'a> {
    fn new(space: &'a KernelSpace, order: usize, symmetric: bool) -> Self {
        let len = space.len().pow(order as u32);
        Self {
            space,
            order,
            symmetric,
            b_norm: order as f64 * space.max_row_mass(),
            term: vec![0.0; len],
            next: vec![0.0; len],
            acc: vec![0.0; len],
            acc_int: vec![0.0; len],
        }
    }

    fn max_step(&self) -> f64 {
        if self.b_norm > 0.0 {
            TAYLOR_SPAN / self.b_norm
        } else {
            TAYLOR_SPAN
        }
    }

    fn apply_b(&mut self) {
        let a = self.space.weighted_kernel();
        if self.order == 1 {
            a.mul_vec_into(&self.term, &mut self.next);
        } else {
            kron_sum_apply(a, &self.term, &mut self.next, self.symmetric);
        }
    }

    /// Advances `g` by `h`; when `integral` is given, adds `∫_0^h e^{sL̂} g ds`.
    fn step(&mut self, g: &mut [f64], integral: Option<&mut [f64]>, h: f64) {
        let lambda = self.order as f64 * h;
        let decay = (-lambda).exp();
        let want_int = integral.is_some();
        self.term.copy_from_slice(g);
        self.acc.copy_from_slice(g);
        if want_int {
            let j0 = moment_weight(0, lambda);
            self.acc_int.iter_mut().zip(g.iter()).for_each(|(a, v)| *a = j0 * v);
        }
        let span = h * self.b_norm;
        for k in 1..TAYLOR_MAX_TERMS {
            self.apply_b();
            let scale = h / k as f64;
            self.next.iter_mut().for_each(|v| *v *= scale);
            std::mem::swap(&mut self.term, &mut self.next);
            self.acc.iter_mut().zip(&self.term).for_each(|(a, t)| *a += t);
            if want_int {
                let jk = moment_weight(k, lambda);
                self.acc_int
                    .iter_mut()
                    .zip(&self.term)
                    .for_each(|(a, t)| *a += jk * t);
            }
            let tn = sup_norm(&self.term);
            if k as f64 > span && tn <= 1e-17 * sup_norm(&self.acc).max(f64::MIN_POSITIVE) {
                break;
            }
            if tn == 0.0 {
                break;
            }
        }
        g.iter_mut().zip(&self.acc).for_each(|(v, a)| *v = decay * a);
        if let Some(int) = integral {
            int.iter_mut()
                .zip(&self.acc_int)
                .for_each(|(i, a)| *i += h * a);
        }
    }

    /// Advances `g` by `t` in equal substeps no longer than the span.
    fn advance(&mut self, g: &mut [f64], mut integral: Option<&mut [f64]>, t: f64) {
        if t <= 0.0 {
            return;
        }
        let steps = (t / self.max_step()).ceil().max(1.0) as usize;
        let h = t / steps as f64;
        for _ in 0..steps {
            self.step(g, integral.as_deref_mut(), h);
        }
    }
}

/// `∫_0^1 u^k e^{−λu} du = e^{−λ} Σ_j λ^j k! / (k + j + 1)!`.
fn moment_weight(k: usize, lambda: f64) -> f64 {
    let mut term = 1.0 / (k as f64 + 1.0);
    let mut sum = term;
    for j in 0..10_000 {
        term *= lambda / (k as f64 + j as f64 + 2.0);
        sum += term;
        if term <= 1e-17 * sum {
            break;
        }
    }
    (-lambda).exp() * sum
}

/// `e^{tL̂*_n} k` with zero exterior.
pub fn semigroup_apply(
    space: &KernelSpace,
    n: usize,
    k: &[f64],
    t: f64,
) -> Result<Vec<f64>, HierarchyError> {
    check_order(n)?;
    check_len(space.len().pow(n as u32), k.len())?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(HierarchyError::InvalidTime(t));
    }
    let mut g = k.to_vec();
    Uniformized::new(space, n, false).advance(&mut g, None, t);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPair {
    pub rho: f64,
    pub k2: PairArray,
    pub v2: PairArray,
    pub f2_sup: f64,
    /// Time at which the doubling increment fell below `tol`.
    pub t_star: f64,
    pub tol: f64,
    /// `(t, ‖e^{tL̂*₂} f2‖_sup)` at every propagation step.
    pub decay_curve: Vec<(f64, f64)>,
    /// `(T, ‖v(T) − v(T/2)‖_sup)` at each doubling checkpoint.
    pub doubling_increments: Vec<(f64, f64)>,
    /// `‖L̂*₂ v2 + f2‖_sup` with zero exterior.
    pub residual: f64,
    pub min_k2: f64,
    /// Pair at maximal hop distance and `k2 / ρ²` there.
    pub far_pair: (usize, usize),
    pub far_ratio: f64,
}

impl StationaryPair {
    pub fn relative_residual(&self) -> f64 {
        if self.f2_sup > 0.0 {
            self.residual / self.f2_sup
        } else {
            self.residual
        }
    }
}

/// `v2 = ∫_0^∞ e^{tL̂*₂} f2 dt` for `f2 = f2(ρ)`, accumulated until the
/// integral changes by less than `tol` (sup-norm) over a doubling window.
/// Returns `k2 = v2 + ρ²`.
pub fn stationary_pair(
    space: &KernelSpace,
    rho: f64,
    t_max: f64,
    tol: f64,
) -> Result<StationaryPair, HierarchyError> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(HierarchyError::InvalidParameter(format!("rho must be nonnegative, got {rho}")));
    }
    if !(tol > 0.0 && t_max > 0.0 && t_max.is_finite()) {
        return Err(HierarchyError::InvalidParameter("tol and t_max must be positive".into()));
    }
    let n = space.len();
    let f2 = build_f2(space, &vec![rho; n])?;
    let f2_sup = f2.sup_norm();
    let mut prop = Uniformized::new(space, 2, true);
    let h = prop.max_step().min(t_max);
    let mut g = f2.data.clone();
    let mut v = vec![0.0; n * n];
    let mut checkpoint = v.clone();
    let mut t = 0.0;
    let mut next_check = h;
    let mut curve = vec![(0.0, f2_sup)];
    let mut increments = Vec::new();
    loop {
        prop.step(&mut g, Some(&mut v), h);
        t += h;
        curve.push((t, sup_norm(&g)));
        if t >= next_check * (1.0 - 1e-12) {
            let inc = sup_diff(&v, &checkpoint);
            increments.push((t, inc));
            if inc < tol && t > h {
                break;
            }
            if t >= t_max * (1.0 - 1e-12) {
                return Err(HierarchyError::NonConvergence {
                    t_max,
                    last_increment: inc,
                    last_norm: sup_norm(&g),
                    curve,
                });
            }
            checkpoint.copy_from_slice(&v);
            next_check = (2.0 * t).min(t_max);
        }
    }
    let mut residual = vec![0.0; n * n];
    l_hat_into(space, 2, &v, &mut residual, Exterior::Killing, true);
    residual.iter_mut().zip(&f2.data).for_each(|(r, f)| *r += f);
    let v2 = PairArray { n, data: v };
    let k2 = PairArray {
        n,
        data: v2.data.iter().map(|x| x + rho * rho).collect(),
    };
    let far_pair = space.farthest_pair();
    let far_ratio = if rho > 0.0 {
        k2.get(far_pair.0, far_pair.1) / (rho * rho)
    } else {
        1.0
    };
    Ok(StationaryPair {
        rho,
        min_k2: k2.min(),
        k2,
        v2,
        f2_sup,
        t_star: t,
        tol,
        decay_curve: curve,
        doubling_increments: increments,
        residual: sup_norm(&residual),
        far_pair,
        far_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    pub times: Vec<f64>,
    /// `‖k2(t) − k2_stationary‖_sup` starting from Poisson data.
    pub gap: Vec<f64>,
    /// Largest increase of the gap between consecutive grid times.
    pub max_increase: f64,
    pub monotone: bool,
}

/// Gap between the pair correlation evolved from Poisson data (exterior at
/// the Poisson state) and the stationary solution.
///
/// With `k1 ≡ ρ`, `k2(t) − ρ² = ∫_0^t e^{sL̂*₂} f2 ds`, which is computed
/// with the same propagator as the stationary integral.
pub fn convergence_to_stationary(
    space: &KernelSpace,
    stationary: &StationaryPair,
    t_grid: &[f64],
) -> Result<ConvergenceCurve, HierarchyError> {
    if t_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HierarchyError::InvalidParameter("grid must be increasing and nonnegative".into()));
    }
    let n = space.len();
    check_len(n * n, stationary.v2.data.len())?;
    let f2 = build_f2(space, &vec![stationary.rho; n])?;
    let mut prop = Uniformized::new(space, 2, true);
    let mut g = f2.data;
    let mut u = vec![0.0; n * n];
    let mut t = 0.0;
    let mut gap = Vec::with_capacity(t_grid.len());
    for &target in t_grid {
        prop.advance(&mut g, Some(&mut u), target - t);
        t = target;
        gap.push(sup_diff(&u, &stationary.v2.data));
    }
    let max_increase = gap
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    Ok(ConvergenceCurve {
        times: t_grid.to_vec(),
        monotone: max_increase <= 10.0 * stationary.tol,
        max_increase,
        gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityViolation {
    pub trial: usize,
    pub time: f64,
    pub min_entry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub order: usize,
    pub trials: usize,
    pub times: Vec<f64>,
    /// Smallest entry over all trials at each time.
    pub min_by_time: Vec<f64>,
    pub threshold: f64,
    pub violations: Vec<PositivityViolation>,
    pub passes: bool,
}

/// Threshold below which an evolved entry counts as negative.
pub const POSITIVITY_FLOOR: f64 = -1e-9;

/// Evolves random nonnegative arrays under `dk/dt = L̂*_n k` (RK4, zero
/// exterior) and records the smallest entry at each grid time.
pub fn check_semigroup_positivity(
    space: &KernelSpace,
    n: usize,
    trials: usize,
    t_grid: &[f64],
    seed: u64,
) -> Result<PositivityReport, HierarchyError> {
    check_order(n)?;
    if trials < 10 {
        return Err(HierarchyError::InvalidParameter(format!("need at least 10 trials, got {trials}")));
    }
    if t_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HierarchyError::InvalidParameter("grid must be increasing and nonnegative".into()));
    }
    let len = space.len().pow(n as u32);
    let dt = stable_step(space, n);
    let rhs = Rhs {
        space,
        exterior: Exterior::Killing,
        pairs: false,
    };
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream(seed, "positivity", trial as u64);
            let mut k: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
            let mut out = vec![0.0; len];
            let mut t = 0.0;
            let mut mins = Vec::with_capacity(t_grid.len());
            for &target in t_grid {
                let span = target - t;
                if span > 0.0 {
                    let steps = (span / dt).ceil() as usize;
                    let h = span / steps as f64;
                    if n == 1 {
                        rk4(&rhs, &mut k, h, steps);
                    } else {
                        rk4_pairs(space, &mut k, &mut out, h, steps);
                    }
                }
                t = target;
                mins.push(k.iter().copied().fold(f64::INFINITY, f64::min));
            }
            mins
        })
        .collect();
    let mut violations = Vec::new();
    let mut min_by_time = vec![f64::INFINITY; t_grid.len()];
    for (trial, mins) in per_trial.iter().enumerate() {
        for (j, &m) in mins.iter().enumerate() {
            min_by_time[j] = min_by_time[j].min(m);
            if m < POSITIVITY_FLOOR {
                violations.push(PositivityViolation {
                    trial,
                    time: t_grid[j],
                    min_entry: m,
                });
            }
        }
    }
    Ok(PositivityReport {
        order: n,
        trials,
        times: t_grid.to_vec(),
        min_by_time,
        threshold: POSITIVITY_FLOOR,
        passes: violations.is_empty(),
        violations,
    })
}

/// RK4 for the homogeneous pair equation without source.
fn rk4_pairs(space: &KernelSpace, y: &mut [f64], scratch: &mut [f64], dt: f64, steps: usize) {
    let len = y.len();
    let mut k = [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    for _ in 0..steps {
        l_hat_into(space, 2, y, &mut k[0], Exterior::Killing, false);
        for (stage, c) in [(1, 0.5), (2, 0.5), (3, 1.0)] {
            let (done, rest) = k.split_at_mut(stage);
            let prev = &done[stage - 1];
            scratch
                .iter_mut()
                .zip(y.iter().zip(prev))
                .for_each(|(t, (y, p))| *t = y + c * dt * p);
            l_hat_into(space, 2, scratch, &mut rest[0], Exterior::Killing, false);
        }
        let h6 = dt / 6.0;
        for i in 0..len {
            y[i] += h6 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub times: Vec<f64>,
    /// Largest `|z|` at each time.
    pub max_abs_z: Vec<f64>,
    pub max_abs_z_overall: f64,
    pub entries: usize,
    /// Entries with `|z| > 3`.
    pub exceed_3: usize,
    /// Entries with no sample variance whose exact value is too small for
    /// a nonzero sample to be expected; they carry no `z` score.
    pub unresolved: usize,
    /// The identity is exact only when every walker leaves each site at
    /// total rate one (kernel plus exterior) and no jump kernel is present.
    pub applicable: bool,
    /// Matrix-side values `(e^{tL̂*₂} a)(x, y)`, indexed like the estimates.
    pub exact: Vec<Vec<f64>>,
}

/// Compares `e^{tL̂*₂} a` with Monte Carlo two-walker expectations.
pub fn duality_check(
    space: &KernelSpace,
    walk: &PairExpectations,
) -> Result<DualityReport, HierarchyError> {
    let n = space.len();
    if walk.n != n {
        return Err(HierarchyError::ShapeMismatch {
            expected: n,
            got: walk.n,
        });
    }
    let a = PairArray::from_fn(n, |x, y| space.a(x, y));
    let applicable = space.jump().is_none()
        && space.walk_rates().iter().all(|r| (r - 1.0).abs() < 1e-12);
    let mut prop = Uniformized::new(space, 2, false);
    let mut g = a.data.clone();
    let mut t = 0.0;
    let mut exact = Vec::with_capacity(walk.times.len());
    let mut max_abs_z = Vec::with_capacity(walk.times.len());
    let mut exceed_3 = 0;
    let mut unresolved = 0;
    // P(sample > 0) ≥ mean / max for a non-negative bounded sample.
    let a_max = a.max().max(f64::MIN_POSITIVE);
    for (j, &target) in walk.times.iter().enumerate() {
        prop.advance(&mut g, None, target - t);
        t = target;
        let mut worst: f64 = 0.0;
        for i in 0..n * n {
            let diff = walk.mean[j][i] - g[i];
            let se = walk.stderr[j][i];
            let z = if se > 0.0 {
                diff / se
            } else if diff.abs() < 1e-12 {
                0.0
            } else if walk.mean[j][i] == 0.0 && g[i] * walk.replicas as f64 / a_max < 7.0 {
                unresolved += 1;
                0.0
            } else {
                f64::INFINITY
            };
            if z.abs() > 3.0 {
                exceed_3 += 1;
            }
            worst = worst.max(z.abs());
        }
        max_abs_z.push(worst);
        exact.push(g.clone());
    }
    Ok(DualityReport {
        times: walk.times.clone(),
        max_abs_z_overall: max_abs_z.iter().copied().fold(0.0, f64::max),
        max_abs_z,
        entries: n * n * walk.times.len(),
        exceed_3,
        unresolved,
        applicable,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub n: usize,
    /// `K_n = D Q^n (n!)²`.
    pub bound: f64,
    /// `K_n / K_{n−1}` (equal to `n² Q`).
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedBound {
    pub n: usize,
    pub observed_sup: f64,
    pub bound: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundLedger {
    pub q: f64,
    pub d: f64,
    pub rows: Vec<LedgerRow>,
    pub observed: Vec<ObservedBound>,
    pub all_within: bool,
}

/// Smallest `D` with `D Q^n (n!)² ≥ B_n` for `n ≤ n_max`, where `B_1 = ρ`
/// and `B_n = n² B_{n−1} Q + ρ^n`.
pub fn default_ledger_constant(q: f64, rho: f64, n_max: usize) -> f64 {
    let mut b = rho;
    let mut d = if q > 0.0 { rho / q } else { 0.0 };
    let mut fact = 1.0;
    for n in 2..=n_max.max(1) {
        let nf = n as f64;
        b = nf * nf * b * q + rho.powi(n as i32);
        fact *= nf;
        d = d.max(b / (q.powi(n as i32) * fact * fact));
    }
    d
}

/// Table of `K_n = D Q^n (n!)²` and comparison with observed suprema
/// `(n, sup k^(n))`.
pub fn bound_ledger(
    q: f64,
    d: f64,
    n_max: usize,
    observed: &[(usize, f64)],
) -> Result<BoundLedger, HierarchyError> {
    if !(q > 0.0 && d > 0.0 && q.is_finite() && d.is_finite()) {
        return Err(HierarchyError::InvalidParameter("Q and D must be positive".into()));
    }
    let mut rows: Vec<LedgerRow> = Vec::with_capacity(n_max);
    let mut k = d;
    for n in 1..=n_max {
        let nf = n as f64;
        let prev = k;
        k = if n == 1 { d * q } else { prev * nf * nf * q };
        rows.push(LedgerRow {
            n,
            bound: k,
            ratio: (n > 1).then(|| k / prev),
        });
    }
    let observed: Vec<ObservedBound> = observed
        .iter()
        .map(|&(n, sup)| {
            let bound = rows
                .get(n.wrapping_sub(1))
                .map(|r| r.bound)
                .unwrap_or(f64::NAN);
            ObservedBound {
                n,
                observed_sup: sup,
                bound,
                within: sup <= bound,
            }
        })
        .collect();
    Ok(BoundLedger {
        q,
        d,
        all_within: observed.iter().all(|o| o.within),
        rows,
        observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{
        build_lattice_kernel, build_tree_kernel, scale_kernel, BoundaryMode, KernelParts,
        LatticeSpec,
    };
    use approx::assert_abs_diff_eq;

    fn ring(side: usize) -> KernelSpace {
        build_lattice_kernel(&LatticeSpec::new(1, side, BoundaryMode::Periodic)).unwrap()
    }

    #[test]
    fn l_hat_on_two_ring() {
        let s = ring(2);
        assert_eq!(apply_l_hat(&s, 1, &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(apply_l_hat(&s, 1, &[1.0, 0.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(apply_l_hat(&s, 2, &[3.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            apply_l_hat(&s, 2, &[1.0; 3]),
            Err(HierarchyError::ShapeMismatch { expected: 4, got: 3 })
        ));
        assert!(apply_l_hat(&s, 3, &[1.0; 8]).is_err());
    }

    #[test]
    fn bath_annihilates_constants_on_absorbing_windows() {
        let tree = build_tree_kernel(3, 4, BoundaryMode::Absorbing).unwrap();
        let n = tree.len();
        let bath = Exterior::Bath { rho: 2.0 };
        let one = apply_l_hat_with(&tree, 1, &vec![2.0; n], bath).unwrap();
        assert!(sup_norm(&one) < 1e-12);
        let two = apply_l_hat_with(&tree, 2, &vec![4.0; n * n], bath).unwrap();
        assert!(sup_norm(&two) < 1e-12);
        let killed = apply_l_hat(&tree, 1, &vec![2.0; n]).unwrap();
        assert_abs_diff_eq!(killed[n - 1], -4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn f2_examples() {
        let f = build_f2(&ring(2), &[1.0, 1.0]).unwrap();
        assert_eq!(f.data, vec![0.0, 2.0, 2.0, 0.0]);
        assert_eq!(build_f2(&ring(2), &[0.0, 0.0]).unwrap().sup_norm(), 0.0);
        let kernel = CsrMatrix::from_triplets(2, [(0, 1, 1.0), (1, 0, 0.5), (1, 1, 0.5)]);
        let space = KernelSpace::new(KernelParts::closed(kernel, BoundaryMode::Periodic)).unwrap();
        let f = build_f2(&space, &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(f.get(0, 1), 2.5);
        assert_abs_diff_eq!(f.get(1, 0), 2.5);
    }

    #[test]
    fn kron_sum_matches_dense_product() {
        let kernel = CsrMatrix::from_triplets(3, [(0, 1, 0.3), (0, 2, 0.7), (1, 0, 1.0), (2, 1, 0.4), (2, 2, 0.6)]);
        let k: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut out = vec![0.0; 9];
        kron_sum_apply(&kernel, &k, &mut out, false);
        for x in 0..3 {
            for y in 0..3 {
                let mut expect = 0.0;
                for z in 0..3 {
                    expect += kernel.get(x, z) * k[z * 3 + y] + kernel.get(y, z) * k[x * 3 + z];
                }
                assert_abs_diff_eq!(out[x * 3 + y], expect, epsilon = 1e-14);
            }
        }
        let sym = PairArray::from_fn(3, |x, y| (x + y) as f64 + 0.5);
        let mut general = vec![0.0; 9];
        let mut fast = vec![0.0; 9];
        kron_sum_apply(&kernel, &sym.data, &mut general, false);
        kron_sum_apply(&kernel, &sym.data, &mut fast, true);
        for (a, b) in general.iter().zip(&fast) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_state_matrix_exponential() {
        let g = semigroup_apply(&ring(2), 1, &[1.0, 0.0], 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(g[0], e * 1.0f64.cosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], e * 1.0f64.sinh(), epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], 0.56767, epsilon = 1e-5);
        let report = check_semigroup_positivity(&ring(2), 1, 10, &[1.0], 1).unwrap();
        assert!(report.passes);
    }

    #[test]
    fn rk4_matches_propagator() {
        let s = ring(2);
        let state = CorrelationState {
            time: 0.0,
            k1: vec![1.0, 0.0],
            k2: None,
            f2: None,
        };
        let evo = evolve_correlations(&s, &state, 1.0, &EvolveOptions::default()).unwrap();
        assert_abs_diff_eq!(evo.state.k1[0], 0.5676676416183064, epsilon = 1e-8);
        assert!(evo.error_estimate.unwrap() < 1e-8);
    }

    #[test]
    fn constants_are_stationary_and_subcritical_decays() {
        let s = ring(8);
        let evo = evolve_correlations(&s, &CorrelationState::poisson(&s, 1.5, true), 5.0, &EvolveOptions::default()).unwrap();
        assert!(evo.state.k1.iter().all(|v| (v - 1.5).abs() < 1e-12));
        let sub = scale_kernel(&s, 0.9).unwrap();
        let evo = evolve_correlations(&sub, &CorrelationState::poisson(&sub, 1.0, false), 10.0, &EvolveOptions::default()).unwrap();
        for v in &evo.state.k1 {
            assert_abs_diff_eq!(*v, (-1.0f64).exp(), epsilon = 1e-9);
        }
        let same = evolve_correlations(&s, &CorrelationState::poisson(&s, 1.0, true), 0.0, &EvolveOptions::default()).unwrap();
        assert_eq!(same.state.k2, CorrelationState::poisson(&s, 1.0, true).k2);
    }

    #[test]
    fn oversized_step_is_refused() {
        let s = ring(4);
        let options = EvolveOptions {
            dt: Some(1.0),
            ..EvolveOptions::default()
        };
        assert!(matches!(
            evolve_correlations(&s, &CorrelationState::poisson(&s, 1.0, false), 1.0, &options),
            Err(HierarchyError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn step_halving_error_is_fourth_order() {
        let s = ring(6);
        let mut state = CorrelationState::poisson(&s, 1.0, true);
        state.k1 = (0..6).map(|i| 1.0 + 0.5 * (i as f64).cos()).collect();
        let estimate = |dt: f64| {
            let options = EvolveOptions {
                dt: Some(dt),
                tol: 1.0,
                ..EvolveOptions::default()
            };
            evolve_correlations(&s, &state, 2.0, &options)
                .unwrap()
                .error_estimate
                .unwrap()
        };
        let ratio = estimate(0.025) / estimate(0.0125);
        assert!((ratio - 16.0).abs() < 1.5, "{ratio}");
    }

    #[test]
    fn evolution_preserves_symmetry() {
        let tree = build_tree_kernel(3, 3, BoundaryMode::Absorbing).unwrap();
        let n = tree.len();
        let mut state = CorrelationState::poisson(&tree, 1.0, true);
        state.k1 = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let evo = evolve_correlations(&tree, &state, 2.0, &EvolveOptions::default()).unwrap();
        assert!(evo.state.k2.unwrap().asymmetry() < 1e-12);
    }

    #[test]
    fn two_ring_has_no_stationary_pair() {
        match stationary_pair(&ring(2), 1.0, 64.0, 1e-4) {
            Err(HierarchyError::NonConvergence { curve, .. }) => {
                let last = curve.last().unwrap().1;
                assert!(last > 0.5, "{last}");
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_density_gives_zero_pair() {
        let tree = build_tree_kernel(3, 3, BoundaryMode::Absorbing).unwrap();
        let st = stationary_pair(&tree, 0.0, 64.0, 1e-6).unwrap();
        assert_eq!(st.k2.sup_norm(), 0.0);
        assert_eq!(st.v2.sup_norm(), 0.0);
    }

    #[test]
    fn stationary_pair_on_small_tree() {
        let tree = build_tree_kernel(3, 4, BoundaryMode::Absorbing).unwrap();
        let st = stationary_pair(&tree, 1.0, 4096.0, 1e-9).unwrap();
        assert!(st.relative_residual() < 1e-6, "{}", st.relative_residual());
        assert!(st.min_k2 >= 1.0);
        let curve = convergence_to_stationary(&tree, &st, &[0.0, 4.0, 8.0, 16.0]).unwrap();
        assert_abs_diff_eq!(curve.gap[0], st.v2.sup_norm(), epsilon = 1e-15);
        assert!(curve.monotone);
        assert!(curve.gap[3] < curve.gap[1]);
    }

    #[test]
    fn taylor_weights_match_quadrature() {
        for (k, lambda) in [(0, 0.5), (3, 8.0), (20, 8.0)] {
            let n = 200_000;
            let h = 1.0 / n as f64;
            let quad: f64 = (0..n)
                .map(|i| {
                    let u = (i as f64 + 0.5) * h;
                    u.powi(k as i32) * (-lambda * u).exp() * h
                })
                .sum();
            assert_abs_diff_eq!(moment_weight(k, lambda), quad, epsilon = 1e-9);
        }
    }

    #[test]
    fn ledger_arithmetic() {
        let ledger = bound_ledger(1.0, 1.0, 4, &[(1, 0.5), (2, 5.0)]).unwrap();
        assert_eq!(ledger.rows[2].bound, 36.0);
        for row in &ledger.rows[1..] {
            assert_eq!(row.ratio.unwrap(), (row.n * row.n) as f64);
        }
        assert!(ledger.observed[0].within);
        assert!(!ledger.observed[1].within);
        assert!(!ledger.all_within);
        let d = default_ledger_constant(0.5, 1.0, 2);
        assert_abs_diff_eq!(d, 2.0 + 1.0, epsilon = 1e-12);
    }
}
