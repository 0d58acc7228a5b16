//! Large-system predictions for the LASSO estimate and a Monte Carlo check.
//!
//! Model: `z = D a₀ + v` with `D ∈ ℝ^{m×n}` Gaussian, `γ = m/n`, noise variance
//! `σ²`, and `a₀` entries that are standard normal with probability `k` and
//! zero otherwise. The estimate is `â = argmin ½‖z − Da‖² + λ‖a‖₁`.
//!
//! The limit is described by the scalar saddle problem
//!
//! ```text
//! max_{β≥0} min_{p>0}  pβ(γ−1)/2 + γσ²β/(2p) − γβ²/2 + E[S(β/p, pΓ + A)]
//! ```
//!
//! where `S(q, y) = min_x q/2 (x − y)² + λ|x|` and `Γ ~ N(0, 1)`. At the saddle
//! point the estimate behaves like a soft threshold at `ε = λp̂/β̂` of a
//! Gaussian with standard deviation `p̂` (plus the signal when present).

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{DdlError, Result};
use crate::rng::{derive_seed, seeded};
use crate::sparse_coding::lasso_encode;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const GOLDEN_TOL: f64 = 1e-10;
const BRACKET_START: (f64, f64) = (1e-3, 10.0);
const MAX_EXPANSIONS: usize = 60;
const STATIONARITY_TOL: f64 = 1e-6;
const MC_MAX_ITERS: usize = 20_000;
const MC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticProblem {
    pub gamma: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub k_frac: f64,
}

impl AsymptoticProblem {
    pub fn new(gamma: f64, sigma2: f64, lambda: f64, k_frac: f64) -> Result<Self> {
        let p = Self {
            gamma,
            sigma2,
            lambda,
            k_frac,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma.is_finite()
            && self.sigma2 >= 0.0
            && self.sigma2.is_finite()
            && self.lambda > 0.0
            && self.lambda.is_finite()
            && (0.0..=1.0).contains(&self.k_frac);
        if !ok {
            return Err(DdlError::InvalidParameter(format!(
                "need gamma > 0, sigma2 >= 0, lambda > 0, k in [0, 1]; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticSolution {
    pub p_hat: f64,
    pub beta_hat: f64,
    pub second_moment: f64,
    pub mse: f64,
    /// Central-difference partial derivatives at the saddle point.
    pub grad_p: f64,
    pub grad_beta: f64,
}

/// `P(Z > x)` for standard normal `Z`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

fn phi(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `F(q) = λe^{−λ²/2q²}/(2√(2π)) − (q/2)(1 + λ²/q²)Q(λ/q) + q/4`.
pub fn f_scalar(q: f64, lambda: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(DdlError::InvalidParameter(format!("F needs q > 0, got {q}")));
    }
    let t = lambda / q;
    Ok(lambda * (-0.5 * t * t).exp() * INV_SQRT_2PI / 2.0 - 0.5 * q * (1.0 + t * t) * q_function(t)
        + q / 4.0)
}

/// `E[min_x q/2 (x − Γ)² + λ|x|]` for `Γ ~ N(0, 1)`, which equals `2F(q)`.
pub fn expected_envelope(q: f64, lambda: f64) -> Result<f64> {
    Ok(2.0 * f_scalar(q, lambda)?)
}

/// Which quadratic term in `β` the saddle objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaTerm {
    /// `−γβ²/2`
    #[default]
    Half,
    /// `−γβ²/p`, kept for comparison only.
    OverP,
}

/// `E[S(β/p, pΓ + A)] = k√(1+p²)·G(β√(1+p²)/p) + (1−k)p·G(β)` with `G` the
/// expected envelope; `G(0) = 0`.
fn envelope_term(p: f64, beta: f64, prob: &AsymptoticProblem) -> f64 {
    let g = |q: f64| {
        if q <= 0.0 {
            0.0
        } else {
            expected_envelope(q, prob.lambda).expect("q > 0")
        }
    };
    let s = (1.0 + p * p).sqrt();
    let k = prob.k_frac;
    let signal = if k > 0.0 { k * s * g(beta * s / p) } else { 0.0 };
    signal + (1.0 - k) * p * g(beta)
}

pub fn saddle_objective_with(p: f64, beta: f64, prob: &AsymptoticProblem, term: BetaTerm) -> f64 {
    let g = prob.gamma;
    let quad = match term {
        BetaTerm::Half => g * beta * beta / 2.0,
        BetaTerm::OverP => g * beta * beta / p,
    };
    p * beta * (g - 1.0) / 2.0 + g * prob.sigma2 * beta / (2.0 * p) - quad + envelope_term(p, beta, prob)
}

pub fn saddle_objective(p: f64, beta: f64, prob: &AsymptoticProblem) -> f64 {
    saddle_objective_with(p, beta, prob, BetaTerm::Half)
}

/// Golden-section minimization of `f` on `[a, b]`.
fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * (1.0 + c.abs()) {
        // ties (including two infinite values) shrink toward the left end
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Minimizes over `(0, ∞)`, widening the start bracket by doubling (upper end)
/// or halving (lower end) while the minimum sits on its edge.
fn bracketed_min(f: &dyn Fn(f64) -> f64, what: &str) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = BRACKET_START;
    for _ in 0..MAX_EXPANSIONS {
        let (x, fx) = golden_min(f, lo, hi, GOLDEN_TOL);
        let edge = 1e3 * GOLDEN_TOL * (1.0 + x.abs());
        if x - lo <= edge && lo > 1e-300 {
            lo /= 2.0;
        } else if hi - x <= edge {
            hi *= 2.0;
        } else {
            return Ok((x, fx));
        }
    }
    Err(DdlError::Bracket(format!(
        "{what}: no interior minimum in [{lo:e}, {hi:e}] after {MAX_EXPANSIONS} expansions"
    )))
}

/// Solves the saddle problem by nested golden-section searches.
pub fn saddle_solve_with(prob: &AsymptoticProblem, term: BetaTerm) -> Result<(f64, f64)> {
    prob.validate()?;
    let inner = |beta: f64| bracketed_min(&|p| saddle_objective_with(p, beta, prob, term), "inner p");
    let outer = |beta: f64| match inner(beta) {
        Ok((_, v)) => -v,
        Err(_) => f64::INFINITY,
    };
    let (beta, _) = bracketed_min(&outer, "outer beta")?;
    let (p, _) = inner(beta)?;
    Ok((p, beta))
}

pub fn saddle_solve(prob: &AsymptoticProblem) -> Result<(f64, f64)> {
    saddle_solve_with(prob, BetaTerm::Half)
}

/// Central-difference gradient of the saddle objective.
pub fn saddle_gradient(p: f64, beta: f64, prob: &AsymptoticProblem) -> (f64, f64) {
    let hp = 1e-5 * p.max(1e-3);
    let hb = 1e-5 * beta.max(1e-3);
    let gp = (saddle_objective(p + hp, beta, prob) - saddle_objective(p - hp, beta, prob)) / (2.0 * hp);
    let gb = (saddle_objective(p, beta + hb, prob) - saddle_objective(p, beta - hb, prob)) / (2.0 * hb);
    (gp, gb)
}

/// `E[â²] = 2(p̂² + λ²p̂²/β̂²)Q(λ/β̂) − 2λp̂²/(β̂√(2π))·exp(−λ²/2β̂²)` (zero-signal form).
pub fn predicted_second_moment(p_hat: f64, beta_hat: f64, lambda: f64) -> Result<f64> {
    check_pair(p_hat, beta_hat)?;
    let t = lambda / beta_hat;
    let p2 = p_hat * p_hat;
    Ok(2.0 * (p2 + t * t * p2) * q_function(t) - 2.0 * lambda * p2 / beta_hat * phi(t))
}

/// Second moment of a soft threshold at `ε` applied to `N(0, s²)`.
fn soft_second_moment(eps: f64, s: f64) -> f64 {
    let t = eps / s;
    2.0 * (s * s + eps * eps) * q_function(t) - 2.0 * eps * s * phi(t)
}

/// `E[â²]` for a sparse signal: the Gaussian mixture over the support of `a₀`.
/// Reduces to [`predicted_second_moment`] for `k = 0`.
pub fn predicted_second_moment_mixture(
    p_hat: f64,
    beta_hat: f64,
    lambda: f64,
    k_frac: f64,
) -> Result<f64> {
    check_pair(p_hat, beta_hat)?;
    let eps = lambda * p_hat / beta_hat;
    Ok(k_frac * soft_second_moment(eps, (1.0 + p_hat * p_hat).sqrt())
        + (1.0 - k_frac) * soft_second_moment(eps, p_hat))
}

/// `J(ε, p, α) = α² + 2(p² + ε² − α²)Q(ε/√(α²+p²)) − 2ε√((α²+p²)/2π)·exp(−ε²/2(α²+p²))`.
pub fn j_function(eps: f64, p: f64, alpha: f64) -> f64 {
    let s2 = alpha * alpha + p * p;
    let s = s2.sqrt();
    alpha * alpha + 2.0 * (p * p + eps * eps - alpha * alpha) * q_function(eps / s)
        - 2.0 * eps * (s2 * INV_SQRT_2PI * INV_SQRT_2PI).sqrt() * (-eps * eps / (2.0 * s2)).exp()
}

/// `E[(â − a₀)²] = kJ(λp/β, p, 1) + (1−k)J(λp/β, p, 0)`.
pub fn predicted_mse(p_hat: f64, beta_hat: f64, lambda: f64, k_frac: f64) -> Result<f64> {
    check_pair(p_hat, beta_hat)?;
    let eps = lambda * p_hat / beta_hat;
    Ok(k_frac * j_function(eps, p_hat, 1.0) + (1.0 - k_frac) * j_function(eps, p_hat, 0.0))
}

fn check_pair(p: f64, beta: f64) -> Result<()> {
    if !(p > 0.0) {
        return Err(DdlError::InvalidParameter(format!("p_hat must be > 0, got {p}")));
    }
    if !(beta > 0.0) {
        return Err(DdlError::InvalidParameter(format!("beta_hat must be > 0, got {beta}")));
    }
    Ok(())
}

/// Saddle point and the resulting predictions.
pub fn solve(prob: &AsymptoticProblem) -> Result<AsymptoticSolution> {
    let (p, beta) = saddle_solve(prob)?;
    let (grad_p, grad_beta) = saddle_gradient(p, beta, prob);
    if grad_p.abs() > STATIONARITY_TOL || grad_beta.abs() > STATIONARITY_TOL {
        return Err(DdlError::Bracket(format!(
            "saddle point ({p}, {beta}) not stationary: gradient ({grad_p:e}, {grad_beta:e})"
        )));
    }
    Ok(AsymptoticSolution {
        p_hat: p,
        beta_hat: beta,
        second_moment: predicted_second_moment_mixture(p, beta, prob.lambda, prob.k_frac)?,
        mse: predicted_mse(p, beta, prob.lambda, prob.k_frac)?,
        grad_p,
        grad_beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloResult {
    /// Mean over trials of `‖â‖²/n`.
    pub second_moment: f64,
    pub second_moment_stderr: f64,
    /// Mean over trials of `‖â − a₀‖²/n`.
    pub mse: f64,
    pub mse_stderr: f64,
    /// Mean over trials of `‖z − Dâ‖²/m`.
    pub residual: f64,
    /// Trials whose solver hit the iteration cap.
    pub unconverged: usize,
}

struct Trial {
    m2: f64,
    mse: f64,
    residual: f64,
    converged: bool,
}

fn run_trial(prob: &AsymptoticProblem, n: usize, seed: u64) -> Result<Trial> {
    let m = ((prob.gamma * n as f64).round() as usize).max(1);
    let mut rng = seeded(seed);
    let scale = 1.0 / (m as f64).sqrt();
    let d = Array2::from_shape_simple_fn((m, n), || scale * rng.sample::<f64, _>(StandardNormal));
    let a0 = Array1::from_shape_simple_fn(n, || {
        let on = rng.random::<f64>() < prob.k_frac;
        let v: f64 = rng.sample(StandardNormal);
        if on {
            v
        } else {
            0.0
        }
    });
    let sd = prob.sigma2.sqrt();
    let noise = Array1::from_shape_simple_fn(m, || sd * rng.sample::<f64, _>(StandardNormal));
    let z = d.dot(&a0) + noise;
    let (a, converged) = lasso_encode(d.view(), z.view(), prob.lambda, MC_MAX_ITERS, MC_TOL)?;
    let err = &a - &a0;
    let r = &z - &d.dot(&a);
    Ok(Trial {
        m2: a.dot(&a) / n as f64,
        mse: err.dot(&err) / n as f64,
        residual: r.dot(&r) / m as f64,
        converged,
    })
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical moments of the signed LASSO over independent problem draws.
pub fn monte_carlo_lasso(
    prob: &AsymptoticProblem,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloResult> {
    prob.validate()?;
    if n < 50 || trials == 0 {
        return Err(DdlError::InvalidParameter(format!(
            "need n >= 50 and trials >= 1, got n={n} trials={trials}"
        )));
    }
    let results: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(prob, n, derive_seed(seed, t as u64)))
        .collect::<Result<_>>()?;
    let m2: Vec<f64> = results.iter().map(|t| t.m2).collect();
    let mse: Vec<f64> = results.iter().map(|t| t.mse).collect();
    let (second_moment, second_moment_stderr) = mean_stderr(&m2);
    let (mse, mse_stderr) = mean_stderr(&mse);
    Ok(MonteCarloResult {
        second_moment,
        second_moment_stderr,
        mse,
        mse_stderr,
        residual: results.iter().map(|t| t.residual).sum::<f64>() / trials as f64,
        unconverged: results.iter().filter(|t| !t.converged).count(),
    })
}

/// One predictor-vs-simulation comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub problem: AsymptoticProblem,
    pub solution: AsymptoticSolution,
    pub monte_carlo: MonteCarloResult,
}

impl CurvePoint {
    pub fn second_moment_rel_error(&self) -> f64 {
        (self.solution.second_moment - self.monte_carlo.second_moment).abs()
            / self.monte_carlo.second_moment.abs()
    }

    pub fn mse_rel_error(&self) -> f64 {
        (self.solution.mse - self.monte_carlo.mse).abs() / self.monte_carlo.mse.abs()
    }
}

pub fn curve_point(prob: &AsymptoticProblem, n: usize, trials: usize, seed: u64) -> Result<CurvePoint> {
    Ok(CurvePoint {
        problem: *prob,
        solution: solve(prob)?,
        monte_carlo: monte_carlo_lasso(prob, n, trials, seed)?,
    })
}

pub const CURVE_HEADER: &str = "gamma,sigma2,lambda,k,predicted_m2,mc_m2,mc_stderr,predicted_mse,mc_mse";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for c in points {
        let p = c.problem;
        let _ = writeln!(
            s,
            "{},{},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            p.gamma,
            p.sigma2,
            p.lambda,
            p.k_frac,
            c.solution.second_moment,
            c.monte_carlo.second_moment,
            c.monte_carlo.second_moment_stderr,
            c.solution.mse,
            c.monte_carlo.mse
        );
    }
    s
}
