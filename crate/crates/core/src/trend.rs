//! Piecewise-linear trend estimation.
//!
//! Solves `min_u ||u - x||_2^2 + lambda * ||D2 u||_1` where `(D2 u)_t =
//! u_{t+1} - 2 u_t + u_{t-1}` is the discrete second difference. The
//! minimizer is piecewise linear; kinks survive only where the data insists.
//!
//! The solver is ADMM on the split `z = D2 u`. The u-update solves the
//! pentadiagonal system `(2I + rho * D2' D2) u = 2x + rho * D2' (z - w)`
//! with a banded Cholesky factorization that is cached per `(len, rho)`;
//! the z-update is soft thresholding at `lambda / rho`; `w` is the scaled
//! dual. Everything is plain f64 in a fixed order, so identical inputs give
//! bitwise-identical iterates.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::stats::l2_norm;

/// One trend-filtering instance: data plus regularization weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Tv2Problem {
    pub x: Vec<f64>,
    pub lambda: f64,
}

impl Tv2Problem {
    pub fn new(x: Vec<f64>, lambda: f64) -> Result<Self> {
        if x.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "trend filtering needs length >= 3, got {}",
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at position {i} in trend input"
            )));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidInput(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { x, lambda })
    }
}

/// Solver knobs. `rho` defaults to `max(lambda, 1)` and is fixed for the
/// whole run (no adaptive penalty).
#[derive(Debug, Clone, PartialEq)]
pub struct Tv2Options {
    pub rho: Option<f64>,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
}

impl Default for Tv2Options {
    fn default() -> Self {
        Self {
            rho: None,
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// Solver output. `scaled_dual` is the final ADMM scaled dual `w`, kept so
/// callers can build an optimality certificate; `rho` is the penalty the run
/// actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct Tv2Solution {
    pub trend: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub scaled_dual: Vec<f64>,
    pub rho: f64,
}

impl Tv2Solution {
    /// Sup-norm of the stationarity residual `2(u - x) + lambda * D2' g`,
    /// where the subgradient `g` is reconstructed from the scaled dual
    /// (clamped to [-1, 1]) and forced to `sign((D2 u)_t)` wherever the
    /// second difference is decisively nonzero. Small values certify
    /// optimality.
    pub fn kkt_infinity_norm(&self, x: &[f64], lambda: f64) -> f64 {
        let u = &self.trend;
        if lambda == 0.0 {
            return u
                .iter()
                .zip(x)
                .map(|(ui, xi)| (2.0 * (ui - xi)).abs())
                .fold(0.0, f64::max);
        }
        let du = second_diff_unchecked(u);
        let g: Vec<f64> = self
            .scaled_dual
            .iter()
            .zip(&du)
            .map(|(&w, &d)| {
                if d.abs() > 1e-6 {
                    d.signum()
                } else {
                    (self.rho * w / lambda).clamp(-1.0, 1.0)
                }
            })
            .collect();
        let dtg = second_diff_transpose(&g, u.len());
        u.iter()
            .zip(x)
            .zip(&dtg)
            .map(|((ui, xi), gi)| (2.0 * (ui - xi) + lambda * gi).abs())
            .fold(0.0, f64::max)
    }
}

/// Discrete second difference `d_t = u_{t+1} - 2 u_t + u_{t-1}` over the
/// interior; output length is `len - 2`.
pub fn second_diff(u: &[f64]) -> Result<Vec<f64>> {
    if u.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "second difference needs length >= 3, got {}",
            u.len()
        )));
    }
    Ok(second_diff_unchecked(u))
}

fn second_diff_unchecked(u: &[f64]) -> Vec<f64> {
    (1..u.len() - 1)
        .map(|t| u[t + 1] - 2.0 * u[t] + u[t - 1])
        .collect()
}

/// Adjoint of `second_diff`: maps a length `len - 2` vector back to length
/// `len`.
fn second_diff_transpose(v: &[f64], len: usize) -> Vec<f64> {
    debug_assert_eq!(v.len() + 2, len);
    let mut out = vec![0.0; len];
    for (t, &vt) in v.iter().enumerate() {
        out[t] += vt;
        out[t + 1] -= 2.0 * vt;
        out[t + 2] += vt;
    }
    out
}

/// `||u - x||_2^2 + lambda * ||D2 u||_1`, exactly as the solver minimizes it
/// (no 1/2 factor on the data term).
pub fn tv2_objective(x: &[f64], u: &[f64], lambda: f64) -> Result<f64> {
    if x.len() != u.len() {
        return Err(Error::InvalidInput(format!(
            "objective length mismatch: {} vs {}",
            x.len(),
            u.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidInput("objective needs length >= 3".into()));
    }
    let fit: f64 = x.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
    let penalty: f64 = second_diff_unchecked(u).iter().map(|d| d.abs()).sum();
    Ok(fit + lambda * penalty)
}

/// Symmetric pentadiagonal SPD matrix factored as `L L'` with a banded
/// Cholesky; bands are stored by offset.
#[derive(Debug)]
struct BandedCholesky {
    diag: Vec<f64>,
    sub1: Vec<f64>,
    sub2: Vec<f64>,
}

impl BandedCholesky {
    /// Factors the matrix with main diagonal `d0` and symmetric off-diagonals
    /// `d1`, `d2`.
    fn factor(d0: &[f64], d1: &[f64], d2: &[f64]) -> Result<Self> {
        let n = d0.len();
        let mut diag = vec![0.0; n];
        let mut sub1 = vec![0.0; n.saturating_sub(1)];
        let mut sub2 = vec![0.0; n.saturating_sub(2)];
        for i in 0..n {
            let mut v = d0[i];
            if i >= 1 {
                v -= sub1[i - 1] * sub1[i - 1];
            }
            if i >= 2 {
                v -= sub2[i - 2] * sub2[i - 2];
            }
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "banded Cholesky pivot {v} at row {i}"
                )));
            }
            diag[i] = v.sqrt();
            if i + 1 < n {
                let mut off = d1[i];
                if i >= 1 {
                    off -= sub2[i - 1] * sub1[i - 1];
                }
                sub1[i] = off / diag[i];
            }
            if i + 2 < n {
                sub2[i] = d2[i] / diag[i];
            }
        }
        Ok(Self { diag, sub1, sub2 })
    }

    /// Solves `L L' x = b` in place.
    fn solve(&self, b: &mut [f64]) {
        let n = self.diag.len();
        for i in 0..n {
            let mut v = b[i];
            if i >= 1 {
                v -= self.sub1[i - 1] * b[i - 1];
            }
            if i >= 2 {
                v -= self.sub2[i - 2] * b[i - 2];
            }
            b[i] = v / self.diag[i];
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            if i + 1 < n {
                v -= self.sub1[i] * b[i + 1];
            }
            if i + 2 < n {
                v -= self.sub2[i] * b[i + 2];
            }
            b[i] = v / self.diag[i];
        }
    }
}

/// Bands of `2I + rho * D2' D2`.
fn system_bands(len: usize, rho: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d0 = vec![0.0; len];
    let mut d1 = vec![0.0; len - 1];
    let mut d2 = vec![0.0; len - 2];
    for t in 0..len - 2 {
        let cols = [(t, 1.0), (t + 1, -2.0), (t + 2, 1.0)];
        for &(i, ci) in &cols {
            for &(j, cj) in &cols {
                if j == i {
                    d0[i] += ci * cj;
                } else if j == i + 1 {
                    d1[i] += ci * cj;
                } else if j == i + 2 {
                    d2[i] += ci * cj;
                }
            }
        }
    }
    for v in &mut d0 {
        *v *= rho;
        *v += 2.0;
    }
    for v in &mut d1 {
        *v *= rho;
    }
    for v in &mut d2 {
        *v *= rho;
    }
    (d0, d1, d2)
}

fn factor_cache() -> &'static Mutex<HashMap<(usize, u64), Arc<BandedCholesky>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), Arc<BandedCholesky>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

const FACTOR_CACHE_CAP: usize = 64;

fn cached_factorization(len: usize, rho: f64) -> Result<Arc<BandedCholesky>> {
    let key = (len, rho.to_bits());
    {
        let cache = factor_cache().lock().expect("factor cache poisoned");
        if let Some(f) = cache.get(&key) {
            return Ok(Arc::clone(f));
        }
    }
    let (d0, d1, d2) = system_bands(len, rho);
    let factor = Arc::new(BandedCholesky::factor(&d0, &d1, &d2)?);
    let mut cache = factor_cache().lock().expect("factor cache poisoned");
    if cache.len() >= FACTOR_CACHE_CAP {
        cache.clear();
    }
    cache.insert(key, Arc::clone(&factor));
    Ok(factor)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Runs ADMM to the residual tolerances in `opts`. Non-convergence within
/// `max_iter` returns a solution with `converged = false`; NaNs during the
/// iteration are a hard error.
pub fn solve_tv2(problem: &Tv2Problem, opts: &Tv2Options) -> Result<Tv2Solution> {
    let x = &problem.x;
    let lambda = problem.lambda;
    let len = x.len();
    let m = len - 2;

    if lambda == 0.0 {
        // Unpenalized least squares: the data itself.
        return Ok(Tv2Solution {
            trend: x.clone(),
            objective: 0.0,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            converged: true,
            scaled_dual: vec![0.0; m],
            rho: opts.rho.unwrap_or_else(|| lambda.max(1.0)),
        });
    }

    let rho = opts.rho.unwrap_or_else(|| lambda.max(1.0));
    if !rho.is_finite() || rho <= 0.0 {
        return Err(Error::InvalidInput(format!("rho must be positive, got {rho}")));
    }
    let factor = cached_factorization(len, rho)?;
    let threshold = lambda / rho;

    let mut u = x.clone();
    let mut z = second_diff_unchecked(x);
    let mut w = vec![0.0; m];
    let mut z_prev = vec![0.0; m];

    let mut iterations = 0;
    let mut primal_residual = f64::INFINITY;
    let mut dual_residual = f64::INFINITY;
    let mut converged = false;

    for iter in 1..=opts.max_iter {
        iterations = iter;

        // u-update: (2I + rho D2'D2) u = 2x + rho D2'(z - w)
        let zw: Vec<f64> = z.iter().zip(&w).map(|(zi, wi)| zi - wi).collect();
        let mut rhs = second_diff_transpose(&zw, len);
        for (r, xi) in rhs.iter_mut().zip(x) {
            *r = 2.0 * xi + rho * *r;
        }
        factor.solve(&mut rhs);
        u = rhs;
        let du = second_diff_unchecked(&u);

        // z-update: prox of lambda ||.||_1 at du + w
        std::mem::swap(&mut z_prev, &mut z);
        for t in 0..m {
            z[t] = soft_threshold(du[t] + w[t], threshold);
        }

        // scaled dual update
        for t in 0..m {
            w[t] += du[t] - z[t];
        }

        primal_residual = {
            let r2: f64 = du.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            r2.sqrt()
        };
        let zdiff: Vec<f64> = z.iter().zip(&z_prev).map(|(a, b)| a - b).collect();
        dual_residual = rho * l2_norm(&second_diff_transpose(&zdiff, len));

        if !primal_residual.is_finite() || !dual_residual.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite residual at iteration {iter} (lambda = {lambda}, rho = {rho})"
            )));
        }

        let grad_norm = {
            let g2: f64 = u.iter().zip(x).map(|(ui, xi)| 4.0 * (ui - xi) * (ui - xi)).sum();
            g2.sqrt()
        };
        let eps_primal =
            opts.eps_abs * (m as f64).sqrt() + opts.eps_rel * l2_norm(&du).max(l2_norm(&z));
        let eps_dual = opts.eps_abs * (len as f64).sqrt() + opts.eps_rel * grad_norm;
        if primal_residual <= eps_primal && dual_residual <= eps_dual {
            converged = true;
            break;
        }
    }

    let objective = tv2_objective(x, &u, lambda)?;
    if !objective.is_finite() {
        return Err(Error::NumericalFailure("non-finite objective".into()));
    }
    Ok(Tv2Solution {
        trend: u,
        objective,
        iterations,
        primal_residual,
        dual_residual,
        converged,
        scaled_dual: w,
        rho,
    })
}
