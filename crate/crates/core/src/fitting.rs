//! Least-squares extraction of decay rates from quench dynamics and of
//! Lorentzian parameters from smoothed spectral profiles.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::Serialize;

use crate::dynamics::TimeSeries;
use crate::error::{check_dim, Error, Result};
use crate::spectral::SmoothedProfile;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub parameters: BTreeMap<String, f64>,
    pub covariance_diag: BTreeMap<String, f64>,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.parameters.get(name).copied()
    }
}

pub const MAX_ITERATIONS: usize = 200;
pub const INITIAL_DAMPING: f64 = 1e-3;
pub const STEP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Forward-difference Jacobian, one row per residual.
fn jacobian(f: &impl Fn(&[f64]) -> Vec<f64>, p: &[f64], r0: &[f64]) -> Vec<Vec<f64>> {
    let mut cols = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let h = 1e-7 * p[i].abs().max(1e-3);
        let mut q = p.to_vec();
        q[i] += h;
        let r1 = f(&q);
        cols.push(r1.iter().zip(r0).map(|(a, b)| (a - b) / h).collect::<Vec<f64>>());
    }
    (0..r0.len()).map(|k| cols.iter().map(|c| c[k]).collect()).collect()
}

/// Gaussian elimination with partial pivoting for the small normal equations.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col] == 0.0 || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn normal_equations(j: &[Vec<f64>], r: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut a = vec![vec![0.0; n]; n];
    let mut g = vec![0.0; n];
    for (row, res) in j.iter().zip(r) {
        for p in 0..n {
            g[p] += row[p] * res;
            for q in 0..n {
                a[p][q] += row[p] * row[q];
            }
        }
    }
    (a, g)
}

/// Damped Gauss–Newton minimisation of `‖f(p)‖²`. Damping starts at `1e-3`,
/// is multiplied by 10 after a rejected step and divided by 10 after an
/// accepted one. Stops when the relative parameter step falls below `1e-10`,
/// after 200 iterations, or when no damping yields a decrease.
pub fn levenberg_marquardt(f: impl Fn(&[f64]) -> Vec<f64>, p0: &[f64]) -> LmOutcome {
    let n = p0.len();
    let mut p = p0.to_vec();
    let mut r = f(&p);
    let mut cost = sum_sq(&r);
    let mut lambda = INITIAL_DAMPING;
    for it in 1..=MAX_ITERATIONS {
        if cost == 0.0 {
            return LmOutcome { params: p, cost, converged: true, iterations: it - 1 };
        }
        let j = jacobian(&f, &p, &r);
        let (a, g) = normal_equations(&j, &r, n);
        loop {
            let mut damped = a.clone();
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * a[i][i].max(1e-300);
            }
            let step = solve_small(damped, g.iter().map(|x| -x).collect());
            let accepted = step.and_then(|d| {
                let q: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + b).collect();
                let rq = f(&q);
                let cq = sum_sq(&rq);
                (cq.is_finite() && cq < cost).then_some((d, q, rq, cq))
            });
            match accepted {
                Some((d, q, rq, cq)) => {
                    lambda = (lambda / 10.0).max(1e-12);
                    let rel = d
                        .iter()
                        .zip(&q)
                        .map(|(s, x)| s.abs() / x.abs().max(1e-300))
                        .fold(0.0, f64::max);
                    p = q;
                    r = rq;
                    cost = cq;
                    if rel < STEP_TOLERANCE {
                        return LmOutcome { params: p, cost, converged: true, iterations: it };
                    }
                    break;
                }
                None => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        // No descent direction left: p is a minimum to
                        // working precision.
                        return LmOutcome { params: p, cost, converged: true, iterations: it };
                    }
                }
            }
        }
    }
    LmOutcome { params: p, cost, converged: false, iterations: MAX_ITERATIONS }
}

/// Residual variance of the parameters at `p`, from `(JᵀJ)⁻¹ s²`.
fn covariance_diag(f: &impl Fn(&[f64]) -> Vec<f64>, p: &[f64]) -> Vec<f64> {
    let r = f(p);
    let n = p.len();
    let dof = r.len().saturating_sub(n).max(1) as f64;
    let s2 = sum_sq(&r) / dof;
    let j = jacobian(f, p, &r);
    let (a, _) = normal_equations(&j, &r, n);
    (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            solve_small(a.clone(), e).map_or(f64::INFINITY, |x| x[i] * s2)
        })
        .collect()
}

/// Minimum number of samples for a decay fit.
pub const MIN_FIT_POINTS: usize = 50;
/// Log-spaced starting values tried before refinement.
pub const GRID_POINTS: usize = 20;

fn decay_model<'a>(free: &'a [f64], times: &'a [f64], avg: f64, gamma: f64) -> impl Iterator<Item = f64> + 'a {
    free.iter().zip(times).map(move |(f, t)| {
        let d = (-2.0 * gamma * t).exp();
        f * d + avg * (1.0 - d)
    })
}

/// Fits the single rate `Γ` of `⟨O(t)⟩₀ e^{−2Γt} + avg (1 − e^{−2Γt})` to a
/// measured series. A coarse log-spaced scan over `[1/t_max, 10/t_min]`
/// selects the start for a damped Gauss–Newton refinement in `ln Γ`.
pub fn fit_gamma(measured: &TimeSeries, free: &TimeSeries, long_time_avg: f64) -> Result<FitResult> {
    check_dim(measured.len(), free.len())?;
    let t = measured.times();
    for (a, b) in t.iter().zip(free.times()) {
        if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
            return Err(Error::param("measured and free series must share a time grid"));
        }
    }
    if measured.len() < MIN_FIT_POINTS {
        return Err(Error::param(format!(
            "decay fit needs at least {MIN_FIT_POINTS} samples, got {}",
            measured.len()
        )));
    }
    if measured.variance() < 1e-14 {
        return Err(Error::DegenerateInput("measured series is flat".into()));
    }
    let y = measured.values();
    let fv = free.values();
    let t_max = t[t.len() - 1];
    let t_min = t.iter().copied().find(|x| *x > 0.0).unwrap_or(t_max);
    if !(t_max > 0.0) {
        return Err(Error::param("decay fit needs positive times"));
    }
    let residuals = |p: &[f64]| -> Vec<f64> {
        let g = p[0].exp();
        decay_model(fv, t, long_time_avg, g).zip(y).map(|(m, v)| m - v).collect()
    };
    let (lo, hi) = ((1.0 / t_max).ln(), (10.0 / t_min).ln());
    let start = (0..GRID_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64)
        .map(|theta| (theta, sum_sq(&residuals(&[theta]))))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|x| x.0)
        .expect("grid is non-empty");
    let out = levenberg_marquardt(residuals, &[start]);
    let gamma = out.params[0].exp();
    let in_gamma = |p: &[f64]| -> Vec<f64> {
        decay_model(fv, t, long_time_avg, p[0]).zip(y).map(|(m, v)| m - v).collect()
    };
    let var = covariance_diag(&in_gamma, &[gamma])[0];
    Ok(FitResult {
        parameters: BTreeMap::from([("gamma".to_string(), gamma)]),
        covariance_diag: BTreeMap::from([("gamma".to_string(), var)]),
        residual_rms: (out.cost / y.len() as f64).sqrt(),
        converged: out.converged && gamma.is_finite(),
        iterations: out.iterations,
    })
}

/// Samples consecutively within the tolerance band that mark relaxation.
pub const RELAXED_RUN: usize = 50;

/// Length of the fit window: up to the first time the series has stayed
/// within `2√δ²` of `avg` for 50 consecutive samples, at least
/// [`MIN_FIT_POINTS`], at most the whole series.
pub fn relaxation_cutoff(series: &TimeSeries, avg: f64, delta_sq: f64) -> usize {
    let tol = 2.0 * delta_sq.max(0.0).sqrt();
    let mut run = 0;
    for (i, v) in series.values().iter().enumerate() {
        if (v - avg).abs() <= tol {
            run += 1;
            if run == RELAXED_RUN {
                return (i + 1).max(MIN_FIT_POINTS).min(series.len());
            }
        } else {
            run = 0;
        }
    }
    series.len()
}

/// Which physical width a Lorentzian fit reports as `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthConvention {
    /// Only the raw fitted half-width.
    Raw,
    /// Overlap profile: half-width `Γ + ε`.
    Ldos,
    /// Strength function: half-width `2Γ + ε`.
    StrengthFunction,
}

/// Fits `A (w/π) / ((x − c)² + w²)` to a profile. The smoothing width `ε`
/// is removed from `w` according to `convention`.
pub fn fit_lorentzian(profile: &SmoothedProfile, convention: WidthConvention) -> Result<FitResult> {
    let x = &profile.grid;
    let y = &profile.values;
    check_dim(x.len(), y.len())?;
    if x.len() < 10 {
        return Err(Error::param("Lorentzian fit needs at least 10 grid points"));
    }
    if y.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::param("Lorentzian fit needs non-negative profile values"));
    }
    let peak_idx = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).expect("non-empty");
    let peak = y[peak_idx];
    if peak <= 0.0 {
        return Err(Error::DegenerateInput("profile is identically zero".into()));
    }
    let half = 0.5 * peak;
    let left = (0..peak_idx).rev().find(|&i| y[i] < half).map_or(x[0], |i| x[i]);
    let right = (peak_idx..y.len()).find(|&i| y[i] < half).map_or(x[x.len() - 1], |i| x[i]);
    let w0 = (0.5 * (right - left)).max(profile.grid_spacing());
    let a0 = peak * PI * w0;
    let residuals = |p: &[f64]| -> Vec<f64> {
        let (a, c, w) = (p[0], p[1], p[2].exp());
        x.iter()
            .zip(y)
            .map(|(xi, yi)| a * w / PI / ((xi - c).powi(2) + w * w) - yi)
            .collect()
    };
    let out = levenberg_marquardt(residuals, &[a0, x[peak_idx], w0.ln()]);
    let (a, c, w) = (out.params[0], out.params[1], out.params[2].exp());
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::DegenerateInput(format!("fitted width {w} is not positive")));
    }
    let plain = |p: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| p[0] * p[2] / PI / ((xi - p[1]).powi(2) + p[2] * p[2]) - yi)
            .collect()
    };
    let cov = covariance_diag(&plain, &[a, c, w]);
    let mut parameters = BTreeMap::from([
        ("amplitude".to_string(), a),
        ("center".to_string(), c),
        ("width".to_string(), w),
    ]);
    let mut covariance = BTreeMap::from([
        ("amplitude".to_string(), cov[0]),
        ("center".to_string(), cov[1]),
        ("width".to_string(), cov[2]),
    ]);
    let eps = profile.epsilon;
    let gamma = match convention {
        WidthConvention::Raw => None,
        WidthConvention::Ldos => Some((w - eps, cov[2])),
        WidthConvention::StrengthFunction => Some(((w - eps) / 2.0, cov[2] / 4.0)),
    };
    if let Some((g, v)) = gamma {
        parameters.insert("gamma".into(), g);
        covariance.insert("gamma".into(), v);
    }
    Ok(FitResult {
        parameters,
        covariance_diag: covariance,
        residual_rms: (out.cost / y.len() as f64).sqrt(),
        converged: out.converged,
        iterations: out.iterations,
    })
}
