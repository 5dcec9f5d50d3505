//! Dense diagonalization and quantities derived from eigenpairs: overlaps,
//! smoothed local densities of states, strength functions and DOS estimates.

pub mod cache;

use std::f64::consts::PI;

use faer::{Mat, Side};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::hilbert::{BasisTag, SparseHermitian, StateVector};
use crate::models::ObservableMatrix;

/// Ascending spectrum and orthogonal eigenvector matrix. Column `μ` of
/// `vectors` holds `c_μ(α)` in the basis named by `basis`.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    energies: Vec<f64>,
    vectors: Mat<f64>,
    basis: BasisTag,
}

impl EigenSystem {
    pub fn from_parts(energies: Vec<f64>, vectors: Mat<f64>, basis: BasisTag) -> Result<Self> {
        check_dim(energies.len(), vectors.nrows())?;
        check_dim(energies.len(), vectors.ncols())?;
        if energies.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::param("energies must be finite and non-decreasing"));
        }
        Ok(Self {
            energies,
            vectors,
            basis,
        })
    }

    /// Eigensystem of a diagonal matrix: sorted values with permutation
    /// vectors.
    pub fn from_diagonal(values: &[f64], basis: BasisTag) -> Result<Self> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let mut vectors = Mat::zeros(values.len(), values.len());
        for (mu, &i) in order.iter().enumerate() {
            vectors[(i, mu)] = 1.0;
        }
        Self::from_parts(order.iter().map(|&i| values[i]).collect(), vectors, basis)
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn vectors(&self) -> &Mat<f64> {
        &self.vectors
    }

    pub fn basis(&self) -> BasisTag {
        self.basis
    }

    pub fn dimension(&self) -> usize {
        self.energies.len()
    }

    /// `max |VᵀV − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let g = self.vectors.transpose() * &self.vectors;
        max_abs_deviation(&g, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// `max |V diag(E) Vᵀ − H|`.
    pub fn reconstruction_error(&self, h: &Mat<f64>) -> Result<f64> {
        check_dim(self.dimension(), h.nrows())?;
        let mut scaled = self.vectors.clone();
        for (mu, e) in self.energies.iter().enumerate() {
            scaled.col_mut(mu).iter_mut().for_each(|x| *x *= e);
        }
        let rec = &scaled * self.vectors.transpose();
        Ok(max_abs_deviation(&rec, |r, c| h[(r, c)]))
    }

    /// `c̄_μ = ⟨ψ_μ|ψ⟩` for every level.
    pub fn project(&self, state: &StateVector) -> Result<Vec<f64>> {
        self.project_slice(state.amplitudes())
    }

    pub fn project_slice(&self, amplitudes: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dimension(), amplitudes.len())?;
        Ok((0..self.dimension())
            .into_par_iter()
            .map(|mu| {
                self.vectors
                    .col(mu)
                    .iter()
                    .zip(amplitudes)
                    .map(|(v, a)| v * a)
                    .sum()
            })
            .collect())
    }

    /// Mean level spacing over the levels inside `window`.
    pub fn mean_spacing(&self, window: &EnergyWindow) -> Result<f64> {
        let inside: Vec<f64> = self
            .energies
            .iter()
            .copied()
            .filter(|e| window.contains(*e))
            .collect();
        if inside.len() < 2 {
            return Err(Error::param("fewer than two levels inside the energy window"));
        }
        Ok((inside[inside.len() - 1] - inside[0]) / (inside.len() - 1) as f64)
    }

    /// Smallest gap relative to the bandwidth.
    pub fn min_gap_ratio(&self) -> f64 {
        let width = self.energies[self.dimension() - 1] - self.energies[0];
        let gap = self
            .energies
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if width > 0.0 {
            gap / width
        } else {
            0.0
        }
    }
}

fn max_abs_deviation(m: &Mat<f64>, target: impl Fn(usize, usize) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            worst = worst.max((m[(r, c)] - target(r, c)).abs());
        }
    }
    worst
}

/// Full diagonalization of a dense real-symmetric matrix. Each eigenvector is
/// signed so that its largest-magnitude component (first one on ties) is
/// positive.
pub fn diagonalize(h: &Mat<f64>, basis: BasisTag) -> Result<EigenSystem> {
    let n = h.nrows();
    if n < 2 {
        return Err(Error::param(format!("dimension must be >= 2, got {n}")));
    }
    check_dim(n, h.ncols())?;
    let mut norm_sq = 0.0;
    let mut scale = 0.0f64;
    let mut asymmetry = 0.0f64;
    for c in 0..n {
        for r in 0..n {
            let v = h[(r, c)];
            norm_sq += v * v;
            scale = scale.max(v.abs());
            if r < c {
                asymmetry = asymmetry.max((v - h[(c, r)]).abs());
            }
        }
    }
    let norm = norm_sq.sqrt();
    let fail = |reason: String| Error::Eigensolver {
        dimension: n,
        norm,
        asymmetry,
        reason,
    };
    if !norm.is_finite() {
        return Err(fail("matrix contains non-finite entries".into()));
    }
    if asymmetry > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(fail("matrix is not symmetric".into()));
    }
    let evd = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| fail(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let energies: Vec<f64> = (0..n).map(|i| s[i]).collect();
    let mut vectors = evd.U().to_owned();
    for mu in 0..n {
        let col = vectors.col_mut(mu);
        let mut best = 0;
        for r in 1..n {
            if col[r].abs() > col[best].abs() {
                best = r;
            }
        }
        if col[best] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
    EigenSystem::from_parts(energies, vectors, basis).map_err(|e| fail(e.to_string()))
}

pub fn diagonalize_sparse(h: &SparseHermitian, basis: BasisTag) -> Result<EigenSystem> {
    diagonalize(&h.to_dense(), basis)
}

/// `c_μ(α) = ⟨φ_α|ψ_μ⟩` with `φ_α` the columns of `reference`, or the basis
/// of `interacting` itself when `reference` is `None`.
pub fn overlaps(interacting: &EigenSystem, reference: Option<&EigenSystem>) -> Result<Mat<f64>> {
    match reference {
        None => Ok(interacting.vectors.clone()),
        Some(r) => {
            check_dim(r.dimension(), interacting.dimension())?;
            if r.basis != interacting.basis {
                return Err(Error::param("reference and interacting eigensystems use different bases"));
            }
            Ok(r.vectors.transpose() * &interacting.vectors)
        }
    }
}

/// Energy interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyWindow {
    pub lo: f64,
    pub hi: f64,
}

impl EnergyWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::param(format!("empty energy window [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Middle `fraction` of the range spanned by `energies`.
    pub fn central_fraction(energies: &[f64], fraction: f64) -> Result<Self> {
        if energies.is_empty() || !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::param("central window needs a spectrum and a fraction in (0, 1]"));
        }
        let lo = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let trim = 0.5 * (1.0 - fraction) * (hi - lo);
        Self::new(lo + trim, hi - trim)
    }

    pub fn contains(&self, e: f64) -> bool {
        e >= self.lo && e <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Ldos,
    StrengthFunction,
    Dos,
}

/// Lorentzian-smoothed profile on an energy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedProfile {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub epsilon: f64,
    pub kind: ProfileKind,
}

impl SmoothedProfile {
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Grid positions of strict local maxima.
    pub fn local_maxima(&self) -> Vec<f64> {
        (1..self.values.len().saturating_sub(1))
            .filter(|&i| self.values[i] > self.values[i - 1] && self.values[i] >= self.values[i + 1])
            .map(|i| self.grid[i])
            .collect()
    }

    pub fn grid_spacing(&self) -> f64 {
        if self.grid.len() < 2 {
            return 0.0;
        }
        (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
    }
}

/// `δ_ε(x) = (ε/π)/(x² + ε²)`.
pub fn kernel(x: f64, epsilon: f64) -> f64 {
    epsilon / PI / (x * x + epsilon * epsilon)
}

pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 || !(lo < hi) {
        return Err(Error::param("grid needs at least two points and lo < hi"));
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + step * i as f64).collect())
}

fn check_grid(grid: &[f64], epsilon: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::param("energy grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::param("energy grid must be strictly increasing"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param(format!("smoothing width must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Default smoothing width: five mean level spacings over `window`.
pub fn default_epsilon(eig: &EigenSystem, window: &EnergyWindow) -> Result<f64> {
    Ok(5.0 * eig.mean_spacing(window)?)
}

/// `F(E) = Σ_μ |⟨ψ_μ|ψ⟩|² δ_ε(E_μ − E)`.
pub fn ldos_profile(
    state: &StateVector,
    eig: &EigenSystem,
    epsilon: f64,
    grid: &[f64],
) -> Result<SmoothedProfile> {
    check_grid(grid, epsilon)?;
    let c = eig.project(state)?;
    let weights: Vec<(f64, f64)> = c
        .iter()
        .zip(&eig.energies)
        .map(|(c, e)| (c * c, *e))
        .filter(|(w, _)| *w > 0.0)
        .collect();
    let values = grid
        .par_iter()
        .map(|&x| weights.iter().map(|(w, e)| w * kernel(e - x, epsilon)).sum())
        .collect();
    Ok(SmoothedProfile {
        grid: grid.to_vec(),
        values,
        epsilon,
        kind: ProfileKind::Ldos,
    })
}

/// `S(ω) = M⁻¹ Σ_{μ∈W} Σ_{ν≠μ} |O_μν|² δ_ε(ω − (E_μ − E_ν))`, averaged over
/// the `M` levels `μ` inside `window`.
///
/// Weights are first accumulated on a histogram of bin width `ε/20` and the
/// kernel is applied per bin, which keeps the cost independent of the number
/// of level pairs.
pub fn strength_function(
    o_int: &Mat<f64>,
    eig: &EigenSystem,
    epsilon: f64,
    grid: &[f64],
    window: &EnergyWindow,
) -> Result<SmoothedProfile> {
    check_grid(grid, epsilon)?;
    let d = eig.dimension();
    check_dim(d, o_int.nrows())?;
    check_dim(d, o_int.ncols())?;
    let members: Vec<usize> = (0..d).filter(|&mu| window.contains(eig.energies[mu])).collect();
    if members.is_empty() {
        return Err(Error::param("no levels inside the strength-function window"));
    }
    let e = &eig.energies;
    let span = e[d - 1] - e[0];
    let mut h = epsilon / 20.0;
    const MAX_BINS: f64 = 4e6;
    if 2.0 * span / h > MAX_BINS {
        h = 2.0 * span / MAX_BINS;
    }
    let n_bins = (2.0 * span / h).ceil() as usize + 1;
    let origin = -span - 0.5 * h;
    // Per bin: total weight and weighted position, so mass sits at the bin
    // centroid and the binning error is second order in the bin width.
    // Fixed chunking and an ordered merge keep the sums independent of the
    // thread count.
    let chunk = members.len().div_ceil(16);
    let partial: Vec<Vec<(f64, f64)>> = members
        .par_chunks(chunk)
        .map(|mus| {
            let mut acc = vec![(0.0f64, 0.0f64); n_bins];
            for &mu in mus {
                for nu in 0..d {
                    if nu == mu {
                        continue;
                    }
                    let w = o_int[(mu, nu)].powi(2);
                    if w == 0.0 {
                        continue;
                    }
                    let x = e[mu] - e[nu];
                    let bin = ((x - origin) / h) as usize;
                    let slot = &mut acc[bin.min(n_bins - 1)];
                    slot.0 += w;
                    slot.1 += w * x;
                }
            }
            acc
        })
        .collect();
    let mut hist = vec![(0.0f64, 0.0f64); n_bins];
    for part in &partial {
        hist.iter_mut().zip(part).for_each(|(x, y)| {
            x.0 += y.0;
            x.1 += y.1;
        });
    }
    let occupied: Vec<(f64, f64)> = hist
        .iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|&(w, wx)| (wx / w, w))
        .collect();
    let m = members.len() as f64;
    let values = grid
        .par_iter()
        .map(|&x| occupied.iter().map(|(c, w)| w * kernel(x - c, epsilon)).sum::<f64>() / m)
        .collect();
    Ok(SmoothedProfile {
        grid: grid.to_vec(),
        values,
        epsilon,
        kind: ProfileKind::StrengthFunction,
    })
}

/// Level count per unit energy in `[e − width/2, e + width/2]`. The window
/// must lie inside the spectrum.
pub fn dos_estimate(eig: &EigenSystem, e: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::param(format!("DOS window width must be positive, got {width}")));
    }
    let (lo, hi) = (e - 0.5 * width, e + 0.5 * width);
    let (emin, emax) = (eig.energies[0], eig.energies[eig.dimension() - 1]);
    if lo < emin || hi > emax {
        return Err(Error::param(format!(
            "DOS window [{lo:.6}, {hi:.6}] extends beyond the spectrum [{emin:.6}, {emax:.6}]"
        )));
    }
    let count = eig.energies.iter().filter(|x| **x >= lo && **x < hi).count();
    Ok(count as f64 / width)
}

/// `O_μν = Σ_αβ c_μ(α) c_ν(β) O_αβ`.
pub fn observable_to_eigenbasis(o: &ObservableMatrix, eig: &EigenSystem) -> Result<Mat<f64>> {
    check_basis(o, eig)?;
    let ov = o.matrix().mul_dense(&eig.vectors)?;
    Ok(eig.vectors.transpose() * &ov)
}

pub(crate) fn check_basis(o: &ObservableMatrix, eig: &EigenSystem) -> Result<()> {
    check_dim(eig.dimension(), o.dimension())?;
    if o.basis() != eig.basis {
        return Err(Error::param(format!(
            "observable is expressed in the {:?} basis but eigenvectors in the {:?} basis",
            o.basis(),
            eig.basis
        )));
    }
    Ok(())
}

/// `max_μ |Σ_ν O_μν² − (O²)_μμ|`, with `(O²)_μμ = ‖O v_μ‖²` computed
/// independently of `o_int`.
pub fn sum_rule_residual(o: &ObservableMatrix, eig: &EigenSystem, o_int: &Mat<f64>) -> Result<f64> {
    check_basis(o, eig)?;
    check_dim(eig.dimension(), o_int.nrows())?;
    let ov = o.matrix().mul_dense(&eig.vectors)?;
    Ok((0..eig.dimension())
        .into_par_iter()
        .map(|mu| {
            let direct: f64 = ov.col(mu).iter().map(|x| x * x).sum();
            let from_rows: f64 = (0..o_int.ncols()).map(|nu| o_int[(mu, nu)].powi(2)).sum();
            (direct - from_rows).abs()
        })
        .reduce(|| 0.0, f64::max))
}
