//! Per-column elastic-net sparse coding.
//!
//! Every column `x` of a layer input is encoded by
//!
//! ```text
//! a* = argmin_{a >= 0}  ½‖x − D a‖² + λ‖a‖₁ + (λ′/2)‖a‖²
//! ```
//!
//! The solver is FISTA with function restart (momentum is dropped whenever an
//! accelerated step would increase the objective, so the objective trace is
//! monotone). Once the support has settled, the iterate is polished by solving
//! the active-set optimality system exactly; the polished point is only kept
//! if it satisfies every optimality condition, so it is the exact minimizer up
//! to rounding.
//!
//! Columns are solved in blocks against a shared Gram matrix `DᵀD`, which turns
//! the inner products of all columns into one matrix product per iteration.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DdlError, Result};
use crate::linalg;

/// Relative activation threshold: `a[j]` is active when it exceeds this
/// fraction of `‖a‖∞`.
pub const DEFAULT_ACTIVATION_EPS: f64 = 1e-9;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 500;

const POWER_ITERS: usize = 50;
const BLOCK_COLUMNS: usize = 512;
/// Relative objective change below which an active-set polish is attempted.
const POLISH_TRIGGER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetParams {
    pub lambda: f64,
    pub lambda_prime: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl ElasticNetParams {
    pub fn new(lambda: f64, lambda_prime: f64) -> Result<Self> {
        let p = Self {
            lambda,
            lambda_prime,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(DdlError::InvalidParameter(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.lambda_prime > 0.0) || !self.lambda_prime.is_finite() {
            return Err(DdlError::InvalidParameter(format!(
                "lambda_prime must be finite and > 0, got {}",
                self.lambda_prime
            )));
        }
        if self.max_iters == 0 {
            return Err(DdlError::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(DdlError::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Feasible set for the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignConstraint {
    /// `a >= 0`, the layer coding problem.
    NonNegative,
    /// Unconstrained sign (plain elastic net / LASSO).
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub coeffs: Array1<f64>,
    pub active_set: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SparseCode {
    /// Wraps a coefficient vector, deriving its active set with the default
    /// relative threshold.
    pub fn from_coeffs(coeffs: Array1<f64>) -> Self {
        let active = active_set(coeffs.view(), activation_threshold(coeffs.view()));
        Self {
            coeffs,
            active_set: active,
            objective: f64::NAN,
            iterations: 0,
            converged: true,
        }
    }
}

/// `max(v − t, 0)` elementwise.
pub fn prox_nonneg_l1(v: ArrayView1<f64>, t: f64) -> Array1<f64> {
    v.mapv(|x| (x - t).max(0.0))
}

/// Two-sided soft threshold `sign(v)·max(|v| − t, 0)`.
pub fn soft_threshold(v: ArrayView1<f64>, t: f64) -> Array1<f64> {
    v.mapv(|x| soft(x, t))
}

#[inline]
fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `½‖x − Da‖² + λ‖a‖₁ + (λ′/2)‖a‖²`.
pub fn reconstruction_objective(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    a: ArrayView1<f64>,
    p: &ElasticNetParams,
) -> Result<f64> {
    check_dims(d, x.len(), a.len())?;
    let r = &x - &d.dot(&a);
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    Ok(0.5 * r.dot(&r) + p.lambda * l1 + 0.5 * p.lambda_prime * a.dot(&a))
}

fn check_dims(d: ArrayView2<f64>, m: usize, k: usize) -> Result<()> {
    if d.nrows() != m || d.ncols() != k {
        return Err(DdlError::Dimension(format!(
            "dictionary is {}x{}, signal length {}, code length {}",
            d.nrows(),
            d.ncols(),
            m,
            k
        )));
    }
    Ok(())
}

/// Sorted indices with `a[j] > eps`.
pub fn active_set(a: ArrayView1<f64>, eps: f64) -> Vec<usize> {
    a.iter()
        .enumerate()
        .filter(|(_, &v)| v > eps)
        .map(|(j, _)| j)
        .collect()
}

/// Absolute threshold used for active-set identification:
/// `DEFAULT_ACTIVATION_EPS · ‖a‖∞`, or the bare epsilon for a zero vector.
pub fn activation_threshold(a: ArrayView1<f64>) -> f64 {
    let inf = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if inf > 0.0 {
        DEFAULT_ACTIVATION_EPS * inf
    } else {
        DEFAULT_ACTIVATION_EPS
    }
}

/// Nonnegative elastic-net KKT conditions:
/// `|d_jᵀ(x − Da) − λ − λ′a_j| ≤ tol` on the active set and
/// `d_jᵀ(x − Da) ≤ λ + tol` off it.
pub fn kkt_check(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    code: &SparseCode,
    p: &ElasticNetParams,
    tol: f64,
) -> bool {
    if check_dims(d, x.len(), code.coeffs.len()).is_err() {
        return false;
    }
    if code.coeffs.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return false;
    }
    let r = &x - &d.dot(&code.coeffs);
    let corr = d.t().dot(&r);
    let mut in_active = vec![false; code.coeffs.len()];
    for &j in &code.active_set {
        if j >= in_active.len() {
            return false;
        }
        in_active[j] = true;
    }
    corr.iter().enumerate().all(|(j, &c)| {
        if in_active[j] {
            (c - p.lambda - p.lambda_prime * code.coeffs[j]).abs() <= tol
        } else {
            c <= p.lambda + tol
        }
    })
}

/// Encodes one column with the nonnegative FISTA solver.
pub fn fista_encode(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    p: &ElasticNetParams,
) -> Result<SparseCode> {
    fista_encode_inner(d, x, p, None)
}

/// Like [`fista_encode`], also returning the best objective after every
/// iteration.
pub fn fista_encode_traced(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    p: &ElasticNetParams,
) -> Result<(SparseCode, Vec<f64>)> {
    let mut trace = Vec::new();
    let code = fista_encode_inner(d, x, p, Some(&mut trace))?;
    Ok((code, trace))
}

fn fista_encode_inner(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    p: &ElasticNetParams,
    trace: Option<&mut Vec<f64>>,
) -> Result<SparseCode> {
    check_dims(d, x.len(), d.ncols())?;
    let enc = BatchEncoder::new(d, *p, SignConstraint::NonNegative)?;
    let xm = x.insert_axis(Axis(1));
    let out = enc.encode_traced(xm, trace)?;
    let coeffs = out.codes.column(0).to_owned();
    let objective = reconstruction_objective(d, x, coeffs.view(), p)?;
    let active = active_set(coeffs.view(), activation_threshold(coeffs.view()));
    Ok(SparseCode {
        coeffs,
        active_set: active,
        objective,
        iterations: out.iterations[0],
        converged: out.converged[0],
    })
}

/// Signed LASSO `min ½‖x − Da‖² + λ‖a‖₁`, solved with the same machinery and a
/// vanishing quadratic weight. Returns the code and its convergence flag.
pub fn lasso_encode(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(Array1<f64>, bool)> {
    check_dims(d, x.len(), d.ncols())?;
    let p = ElasticNetParams {
        lambda,
        lambda_prime: 1e-12,
        max_iters,
        tol,
    };
    let enc = BatchEncoder::new(d, p, SignConstraint::Signed)?;
    let out = enc.encode(x.insert_axis(Axis(1)))?;
    Ok((out.codes.column(0).to_owned(), out.converged[0]))
}

/// Codes of a block of columns.
#[derive(Debug, Clone)]
pub struct BatchCodes {
    /// `k × N`, one code per input column.
    pub codes: Array2<f64>,
    pub objectives: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub polished: Vec<bool>,
}

/// FISTA solver bound to one dictionary; reusable across many columns.
#[derive(Debug, Clone)]
pub struct BatchEncoder {
    dict: Array2<f64>,
    gram: Array2<f64>,
    lipschitz: f64,
    params: ElasticNetParams,
    constraint: SignConstraint,
}

impl BatchEncoder {
    pub fn new(
        d: ArrayView2<f64>,
        params: ElasticNetParams,
        constraint: SignConstraint,
    ) -> Result<Self> {
        params.validate()?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(DdlError::NonFinite("dictionary".into()));
        }
        let gram = d.t().dot(&d);
        let lipschitz = linalg::lipschitz_upper(gram.view(), POWER_ITERS) + params.lambda_prime;
        Ok(Self {
            dict: d.to_owned(),
            gram,
            lipschitz,
            params,
            constraint,
        })
    }

    pub fn params(&self) -> &ElasticNetParams {
        &self.params
    }

    pub fn gram(&self) -> ArrayView2<'_, f64> {
        self.gram.view()
    }

    /// Encodes every column of `x` (`m × N`).
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<BatchCodes> {
        self.encode_traced(x, None)
    }

    fn encode_traced(
        &self,
        x: ArrayView2<f64>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<BatchCodes> {
        let (m, k) = self.dict.dim();
        if x.nrows() != m {
            return Err(DdlError::Dimension(format!(
                "input has {} rows, dictionary has {}",
                x.nrows(),
                m
            )));
        }
        if let Some((idx, _)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DdlError::NonFinite(format!(
                "input column {}",
                idx % x.ncols().max(1)
            )));
        }
        let n = x.ncols();
        let mut out = BatchCodes {
            codes: Array2::zeros((k, n)),
            objectives: vec![0.0; n],
            iterations: vec![0; n],
            converged: vec![false; n],
            polished: vec![false; n],
        };
        if let Some(tr) = trace.take() {
            let end = BLOCK_COLUMNS.min(n);
            let block = self.solve_block(x.slice(s![.., 0..end]), Some(tr));
            block.write_into(&mut out, 0);
            if end < n {
                let rest = self.encode(x.slice(s![.., end..]))?;
                out.codes.slice_mut(s![.., end..]).assign(&rest.codes);
                out.objectives[end..].copy_from_slice(&rest.objectives);
                out.iterations[end..].copy_from_slice(&rest.iterations);
                out.converged[end..].copy_from_slice(&rest.converged);
                out.polished[end..].copy_from_slice(&rest.polished);
            }
            return Ok(out);
        }
        let starts: Vec<usize> = (0..n).step_by(BLOCK_COLUMNS).collect();
        let blocks: Vec<BlockResult> = starts
            .par_iter()
            .map(|&start| {
                let end = (start + BLOCK_COLUMNS).min(n);
                self.solve_block(x.slice(s![.., start..end]), None)
            })
            .collect();
        for (start, block) in starts.into_iter().zip(blocks) {
            block.write_into(&mut out, start);
        }
        Ok(out)
    }

    #[inline]
    fn prox(&self, v: f64, t: f64) -> f64 {
        match self.constraint {
            SignConstraint::NonNegative => (v - t).max(0.0),
            SignConstraint::Signed => soft(v, t),
        }
    }

    fn solve_block(&self, x: ArrayView2<f64>, mut trace: Option<&mut Vec<f64>>) -> BlockResult {
        let k = self.dict.ncols();
        let n = x.ncols();
        let p = &self.params;
        let inv_l = 1.0 / self.lipschitz;
        let thresh = p.lambda * inv_l;

        let b = self.dict.t().dot(&x);
        let xx: Vec<f64> = x.columns().into_iter().map(|c| c.dot(&c)).collect();

        let mut a = Array2::<f64>::zeros((k, n));
        let mut a_prev = Array2::<f64>::zeros((k, n));
        let mut ga = Array2::<f64>::zeros((k, n));
        let mut ga_prev = Array2::<f64>::zeros((k, n));
        let mut y = Array2::<f64>::zeros((k, n));
        let mut gy = Array2::<f64>::zeros((k, n));
        let mut t = vec![1.0_f64; n];
        let mut obj: Vec<f64> = xx.iter().map(|v| 0.5 * v).collect();
        let mut done = vec![false; n];
        let mut iters = vec![0usize; n];
        let mut converged = vec![false; n];
        let mut polished = vec![false; n];
        let mut restarted = vec![false; n];
        let mut last_polish: Vec<Option<Vec<i8>>> = vec![None; n];

        for _it in 0..p.max_iters {
            let live: Vec<usize> = (0..n).filter(|&j| !done[j]).collect();
            if live.is_empty() {
                break;
            }
            // proximal gradient step at the extrapolated point, live columns only
            let mut cand = Array2::<f64>::zeros((k, live.len()));
            for (c, &j) in live.iter().enumerate() {
                let mut col = cand.column_mut(c);
                for i in 0..k {
                    let yi = y[[i, j]];
                    let g = gy[[i, j]] - b[[i, j]] + p.lambda_prime * yi;
                    col[i] = self.prox(yi - inv_l * g, thresh);
                }
            }
            let g_cand = self.gram.dot(&cand);

            for (c, &j) in live.iter().enumerate() {
                iters[j] += 1;
                let ac = cand.column(c);
                let gac = g_cand.column(c);
                let f = column_objective(xx[j], ac, b.column(j), gac, p);
                if f > obj[j] {
                    // function restart: keep the current iterate, drop momentum
                    if restarted[j] {
                        // a plain prox-gradient step failed to descend: stagnated
                        done[j] = true;
                        converged[j] = true;
                    }
                    restarted[j] = true;
                    t[j] = 1.0;
                    y.column_mut(j).assign(&a.column(j));
                    gy.column_mut(j).assign(&ga.column(j));
                    continue;
                }
                restarted[j] = false;
                let rel = (obj[j] - f) / f.abs().max(1e-300);
                a_prev.column_mut(j).assign(&a.column(j));
                ga_prev.column_mut(j).assign(&ga.column(j));
                a.column_mut(j).assign(&ac);
                ga.column_mut(j).assign(&gac);
                obj[j] = f;
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t[j] * t[j]).sqrt());
                let mom = (t[j] - 1.0) / t_next;
                t[j] = t_next;
                Zip::from(y.column_mut(j))
                    .and(a.column(j))
                    .and(a_prev.column(j))
                    .for_each(|yv, &av, &ap| *yv = av + mom * (av - ap));
                Zip::from(gy.column_mut(j))
                    .and(ga.column(j))
                    .and(ga_prev.column(j))
                    .for_each(|yv, &av, &ap| *yv = av + mom * (av - ap));

                if rel < POLISH_TRIGGER.max(p.tol) {
                    let pattern = sign_pattern(a.column(j));
                    if last_polish[j].as_ref() != Some(&pattern) {
                        if let Some((z, fz)) =
                            self.polish(a.column(j), b.column(j), xx[j], obj[j])
                        {
                            a.column_mut(j).assign(&z);
                            obj[j] = fz;
                            polished[j] = true;
                            converged[j] = true;
                            done[j] = true;
                        }
                        last_polish[j] = Some(pattern);
                    }
                }
                if !done[j] && rel < p.tol {
                    converged[j] = true;
                    done[j] = true;
                }
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(obj[0]);
            }
        }

        BlockResult {
            codes: a,
            objectives: obj,
            iterations: iters,
            converged,
            polished,
        }
    }

    /// Solves the optimality system on the current support and accepts the
    /// result only if it is feasible, sign-consistent and satisfies the
    /// off-support conditions.
    fn polish(
        &self,
        a: ArrayView1<f64>,
        b: ArrayView1<f64>,
        xx: f64,
        current: f64,
    ) -> Option<(Array1<f64>, f64)> {
        let p = &self.params;
        let k = a.len();
        let support: Vec<usize> = (0..k).filter(|&j| a[j] != 0.0).collect();
        let signs: Vec<f64> = support.iter().map(|&j| a[j].signum()).collect();
        let s = support.len();
        let mut z = Array1::<f64>::zeros(k);
        if s > 0 {
            let mut sys = Array2::<f64>::zeros((s, s));
            let mut rhs = Array1::<f64>::zeros(s);
            for (r, &i) in support.iter().enumerate() {
                for (c, &j) in support.iter().enumerate() {
                    sys[[r, c]] = self.gram[[i, j]];
                }
                sys[[r, r]] += p.lambda_prime;
                rhs[r] = b[i] - p.lambda * signs[r];
            }
            let sol = linalg::cholesky_solve(sys.view(), rhs.view()).ok()?;
            for (r, &j) in support.iter().enumerate() {
                if !(sol[r] * signs[r] > 0.0) {
                    return None;
                }
                z[j] = sol[r];
            }
        }
        let gz = self.gram.dot(&z);
        let scale = 1.0 + p.lambda + b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let slack = 1e-10 * scale;
        for j in 0..k {
            if z[j] != 0.0 {
                continue;
            }
            let c = b[j] - gz[j];
            let ok = match self.constraint {
                SignConstraint::NonNegative => c <= p.lambda + slack,
                SignConstraint::Signed => c.abs() <= p.lambda + slack,
            };
            if !ok {
                return None;
            }
        }
        let fz = column_objective(xx, z.view(), b, gz.view(), p);
        if fz > current + 1e-12 * (1.0 + current.abs()) {
            return None;
        }
        Some((z, fz))
    }
}

struct BlockResult {
    codes: Array2<f64>,
    objectives: Vec<f64>,
    iterations: Vec<usize>,
    converged: Vec<bool>,
    polished: Vec<bool>,
}

impl BlockResult {
    fn write_into(self, out: &mut BatchCodes, offset: usize) {
        let n = self.objectives.len();
        out.codes
            .slice_mut(s![.., offset..offset + n])
            .assign(&self.codes);
        out.objectives[offset..offset + n].copy_from_slice(&self.objectives);
        out.iterations[offset..offset + n].copy_from_slice(&self.iterations);
        out.converged[offset..offset + n].copy_from_slice(&self.converged);
        out.polished[offset..offset + n].copy_from_slice(&self.polished);
    }
}

fn sign_pattern(a: ArrayView1<f64>) -> Vec<i8> {
    a.iter()
        .map(|&v| {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Objective from Gram quantities: `b = Dᵀx`, `ga = DᵀD a`, `xx = ‖x‖²`.
fn column_objective(
    xx: f64,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    ga: ArrayView1<f64>,
    p: &ElasticNetParams,
) -> f64 {
    let mut ab = 0.0;
    let mut aga = 0.0;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for i in 0..a.len() {
        let v = a[i];
        ab += v * b[i];
        aga += v * ga[i];
        l1 += v.abs();
        l2 += v * v;
    }
    (0.5 * (xx - 2.0 * ab + aga)).max(0.0) + p.lambda * l1 + 0.5 * p.lambda_prime * l2
}
