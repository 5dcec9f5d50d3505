//! Closed-form predictions: Lorentzian overlap profiles, wavefunction
//! correlators, microcanonical averages, decay law and fluctuation formulas.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::dynamics::TimeSeries;
use crate::error::{check_dim, Error, Result};
use crate::models::ObservableMatrix;

/// The family `Λ^(n)(ΔE) = ω₀nΓ/π / (ΔE² + (nΓ)²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianFamily {
    omega0: f64,
    gamma: f64,
}

impl LorentzianFamily {
    pub fn new(omega0: f64, gamma: f64) -> Result<Self> {
        if !(omega0 > 0.0 && omega0.is_finite()) {
            return Err(Error::param(format!("omega0 must be positive, got {omega0}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::param(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { omega0, gamma })
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda_n(&self, n: u32, de: f64) -> f64 {
        assert!(n >= 1, "Lorentzian order must be >= 1");
        let w = n as f64 * self.gamma;
        self.omega0 * w / PI / (de * de + w * w)
    }

    pub fn lambda(&self, de: f64) -> f64 {
        self.lambda_n(1, de)
    }
}

/// `⟨c_μ(α₀) c_ν(β₀) c_μ(α) c_ν(β)⟩` for `μ ≠ ν`, including both
/// orthogonality corrections. `idx = [α₀, β₀, α, β]` index into `energies`.
pub fn four_point_offdiag(
    fam: &LorentzianFamily,
    e_mu: f64,
    e_nu: f64,
    energies: &[f64],
    idx: [usize; 4],
) -> Result<f64> {
    if e_mu == e_nu {
        return Err(Error::param(
            "off-diagonal correlator requires distinct levels; use four_point_diag",
        ));
    }
    check_indices(energies, &idx)?;
    let [a0, b0, a, b] = idx;
    let l = |e: f64, k: usize| fam.lambda(e - energies[k]);
    let l2 = fam.lambda_n(2, e_mu - e_nu);
    let mut value = 0.0;
    if a0 == a && b0 == b {
        value += l(e_mu, a0) * l(e_nu, b0);
    }
    if a0 == b0 && a == b {
        value -= l(e_mu, a0) * l(e_nu, a0) * l(e_mu, a) * l(e_nu, a) / l2;
    }
    if a0 == b && b0 == a {
        value -= l(e_mu, a0) * l(e_nu, a0) * l(e_mu, b0) * l(e_nu, b0) / l2;
    }
    Ok(value)
}

/// `⟨c_μ(α) c_μ(β) c_μ(α′) c_μ(β′)⟩` with `idx = [α, β, α′, β′]`.
pub fn four_point_diag(
    fam: &LorentzianFamily,
    e_mu: f64,
    energies: &[f64],
    idx: [usize; 4],
) -> Result<f64> {
    check_indices(energies, &idx)?;
    let [a, b, ap, bp] = idx;
    let l = |k: usize| fam.lambda(e_mu - energies[k]);
    let mut value = 0.0;
    if a == b && ap == bp {
        value += l(a) * l(ap);
    }
    if a == ap && b == bp {
        value += l(a) * l(b);
    }
    if a == bp && ap == b {
        value += l(a) * l(b);
    }
    Ok(value)
}

fn check_indices(energies: &[f64], idx: &[usize; 4]) -> Result<()> {
    if let Some(k) = idx.iter().find(|&&k| k >= energies.len()) {
        return Err(Error::param(format!(
            "index {k} out of range for {} energies",
            energies.len()
        )));
    }
    Ok(())
}

fn require_energies(o: &ObservableMatrix) -> Result<&[f64]> {
    o.energies()
        .ok_or_else(|| Error::param("observable carries no non-interacting energies"))
}

/// Lorentzian-weighted average of the band-`n` elements around `e_center`.
pub fn microcanonical_average(
    o: &ObservableMatrix,
    band: i64,
    fam: &LorentzianFamily,
    e_center: f64,
) -> Result<f64> {
    band_sum(o, band, fam, e_center, |v| v)
}

fn band_sum(
    o: &ObservableMatrix,
    band: i64,
    fam: &LorentzianFamily,
    e_center: f64,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    if !o.bands().contains_key(&band) {
        return Err(Error::param(format!("band {band} is not declared on the observable")));
    }
    let e = require_energies(o)?;
    Ok(o
        .matrix()
        .iter_full()
        .filter(|&(r, c, _)| o.band_of(r, c) == Some(band))
        .map(|(r, _, v)| fam.lambda(e_center - e[r]) * f(v))
        .sum())
}

/// Band weights `a_n` and the gap energy `E_n` of every band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCoefficients {
    pub center: f64,
    pub coefficients: BTreeMap<i64, f64>,
    pub gaps: BTreeMap<i64, f64>,
}

impl BandCoefficients {
    pub fn a0(&self) -> f64 {
        self.coefficients.get(&0).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.coefficients.values().sum()
    }
}

/// `a₀` is the microcanonical variance of the diagonal, `a_n` the
/// microcanonical average of the squared band-`n` elements.
pub fn band_coefficients(
    o: &ObservableMatrix,
    fam: &LorentzianFamily,
    e_center: f64,
) -> Result<BandCoefficients> {
    let mut coefficients = BTreeMap::new();
    for &n in o.bands().keys() {
        let a = if n == 0 {
            let mean = band_sum(o, 0, fam, e_center, |v| v)?;
            let sq = band_sum(o, 0, fam, e_center, |v| v * v)?;
            (sq - mean * mean).max(0.0)
        } else {
            band_sum(o, n, fam, e_center, |v| v * v)?
        };
        coefficients.insert(n, a);
    }
    Ok(BandCoefficients {
        center: e_center,
        coefficients,
        gaps: o.bands().clone(),
    })
}

/// Static field `B_z σ_z + B_x σ_x` on the system spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemField {
    pub bz: f64,
    pub bx: f64,
}

impl SystemField {
    pub fn new(bz: f64, bx: f64) -> Self {
        Self { bz, bx }
    }

    pub fn splitting(&self) -> f64 {
        self.bz.hypot(self.bx)
    }

    fn check(&self) -> Result<f64> {
        let e = self.splitting();
        if e == 0.0 || !e.is_finite() {
            return Err(Error::param("system field must be non-zero and finite"));
        }
        Ok(e)
    }

    /// `[(+E, φ₊), (−E, φ₋)]` with vectors in the `(↑, ↓)` basis, normalised
    /// so that `ψ± = ⟨φ±|↑⟩` are both non-negative for `B_z, B_x ≥ 0`.
    pub fn eigenstates(&self) -> Result<[(f64, [f64; 2]); 2]> {
        let e = self.check()?;
        let p = self.bz + e;
        if p == 0.0 {
            // Negative pure z field: the up spin is the lower level.
            return Ok([(e, [0.0, 1.0]), (-e, [1.0, 0.0])]);
        }
        let n = p.hypot(self.bx);
        Ok([(e, [p / n, self.bx / n]), (-e, [self.bx / n, -p / n])])
    }

    /// `(ψ₊, ψ₋)`, the overlaps of `|↑⟩` with the two eigenstates.
    pub fn psi(&self) -> Result<(f64, f64)> {
        let s = self.eigenstates()?;
        Ok((s[0].1[0], s[1].1[0]))
    }
}

/// Band weights of `σ_z` under a crossed field: `a₀ = B_z²/E² − avg²`,
/// `a₁ = a₂ = B_x²/(2E²)`, with gaps `0, ∓2E` on labels `0, ±1`.
pub fn crossed_field_coefficients(field: &SystemField, time_average: f64) -> Result<BandCoefficients> {
    let e = field.check()?;
    let a0 = field.bz.powi(2) / (e * e) - time_average.powi(2);
    let a1 = field.bx.powi(2) / (2.0 * e * e);
    Ok(BandCoefficients {
        center: 0.0,
        coefficients: BTreeMap::from([(-1, a1), (0, a0), (1, a1)]),
        gaps: BTreeMap::from([(-1, 2.0 * e), (0, 0.0), (1, -2.0 * e)]),
    })
}

/// `⟨O(t)⟩₀ e^{−2Γt} + avg (1 − e^{−2Γt})`.
pub fn predicted_decay(free: &TimeSeries, average: f64, gamma: f64) -> Result<TimeSeries> {
    if !(gamma > 0.0) {
        return Err(Error::param(format!("gamma must be positive, got {gamma}")));
    }
    let values = free
        .times()
        .iter()
        .zip(free.values())
        .map(|(t, v)| {
            let d = (-2.0 * gamma * t).exp();
            v * d + average * (1.0 - d)
        })
        .collect();
    TimeSeries::new(free.times().to_vec(), values)
}

/// `δ² = a₀ ω₀ / (4πΓ)`, where `ω₀` may be replaced by `1/D(E)`.
pub fn qcfdt_simple(a0: f64, inverse_dos: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::param(format!("gamma must be positive, got {gamma}")));
    }
    if !(inverse_dos > 0.0) {
        return Err(Error::param(format!("level spacing must be positive, got {inverse_dos}")));
    }
    Ok(a0 * inverse_dos / (4.0 * PI * gamma))
}

/// `Σ_{αβ} Σ_n a_n w_α w_β Λ^(4)(E_α − E_β + E_n)` over the initial-state
/// weights `w` on the grid `energies`.
pub fn qcfdt_general(
    weights: &[f64],
    energies: &[f64],
    bands: &BandCoefficients,
    fam: &LorentzianFamily,
) -> Result<f64> {
    check_dim(energies.len(), weights.len())?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-8 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::param(format!(
            "initial weights must be non-negative and sum to 1, got sum {total}"
        )));
    }
    let support: Vec<(f64, f64)> = weights
        .iter()
        .zip(energies)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, e)| (*w, *e))
        .collect();
    let terms: Vec<(f64, f64)> = bands
        .coefficients
        .iter()
        .filter(|(_, a)| **a != 0.0)
        .map(|(n, a)| (*a, bands.gaps.get(n).copied().unwrap_or(0.0)))
        .collect();
    let mut sum = 0.0;
    for &(wa, ea) in &support {
        let mut inner = 0.0;
        for &(wb, eb) in &support {
            let mut s = 0.0;
            for &(a, gap) in &terms {
                s += a * fam.lambda_n(4, ea - eb + gap);
            }
            inner += wb * s;
        }
        sum += wa * inner;
    }
    Ok(sum)
}

/// Fluctuations of `σ_z` for `|↑⟩_S` times a bath eigenstate under a
/// crossed system field.
pub fn qcfdt_three_peak(
    field: &SystemField,
    gamma: f64,
    inverse_dos: f64,
    time_average: f64,
) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::param(format!("gamma must be positive, got {gamma}")));
    }
    let e = field.check()?;
    let (pp, pm) = field.psi()?;
    let c = crossed_field_coefficients(field, time_average)?;
    let (a0, a1) = (c.coefficients[&0], c.coefficients[&1]);
    let peak = |x: f64| (4.0 * gamma / PI) / (x * x + (4.0 * gamma).powi(2));
    let centre = 1.0 / (4.0 * PI * gamma);
    let (p2, m2) = (pp * pp, pm * pm);
    let bracket = (p2 * p2 + m2 * m2) * (a0 * centre + 2.0 * a1 * peak(2.0 * e))
        + 2.0 * p2 * m2 * (a0 * peak(2.0 * e) + a1 * centre + a1 * peak(4.0 * e));
    Ok(inverse_dos * bracket)
}

/// `Σ_{μ≠ν} Λ(μ,α₀)Λ(ν,α₀)Λ(μ,β₀)Λ(ν,β₀)/Λ^(2)(μ,ν)` in the continuum limit,
/// as a function of `E_α₀ − E_β₀`.
pub fn third_term_kernel(fam: &LorentzianFamily, de: f64) -> f64 {
    let g = fam.gamma;
    let d2 = de * de;
    fam.omega0 * (d2 * g + 12.0 * g.powi(3)) / (PI * (d2 + 4.0 * g * g).powi(2))
}

/// `max|O| · N_O · 3ω₀/(4πΓ)`.
pub fn bound_third_term(o: &ObservableMatrix, fam: &LorentzianFamily) -> f64 {
    o.matrix().max_abs() * o.n_bands() as f64 * 3.0 * fam.omega0 / (4.0 * PI * fam.gamma)
}

/// Direct evaluation of `|A(t)|`, the correction term neglected by the decay
/// law, with `psi` the initial amplitudes in the non-interacting basis and
/// `interacting_energies` the `E_μ`.
pub fn third_term_direct(
    o: &ObservableMatrix,
    psi: &[f64],
    fam: &LorentzianFamily,
    interacting_energies: &[f64],
    times: &[f64],
) -> Result<Vec<f64>> {
    let e = require_energies(o)?;
    check_dim(e.len(), psi.len())?;
    let pairs: Vec<(usize, usize, f64)> = o
        .matrix()
        .iter_full()
        .map(|(a, b, v)| (a, b, psi[a] * psi[b] * v))
        .filter(|p| p.2 != 0.0)
        .collect();
    let em = interacting_energies;
    let m = em.len();
    let mut re = vec![0.0; times.len()];
    let mut im = vec![0.0; times.len()];
    for &(a0, b0, w) in &pairs {
        let x: Vec<f64> = em
            .iter()
            .map(|&eu| fam.lambda(eu - e[a0]) * fam.lambda(eu - e[b0]))
            .collect();
        for mu in 0..m {
            for nu in 0..m {
                if mu == nu {
                    continue;
                }
                let de = em[mu] - em[nu];
                let amp = w * x[mu] * x[nu] / fam.lambda_n(2, de);
                for (k, t) in times.iter().enumerate() {
                    let (s, c) = (de * t).sin_cos();
                    re[k] += amp * c;
                    im[k] -= amp * s;
                }
            }
        }
    }
    Ok(re.iter().zip(&im).map(|(r, i)| r.hypot(*i)).collect())
}
