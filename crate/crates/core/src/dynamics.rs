//! Quench dynamics in the eigenbasis, diagonal-ensemble averages and
//! time-averaged fluctuations.

use std::io::Write;

use faer::Mat;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::hilbert::StateVector;
use crate::models::ObservableMatrix;
use crate::spectral::{check_basis, EigenSystem};

/// Samples `⟨O(t)⟩` on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_dim(times.len(), values.len())?;
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("times must be strictly increasing"));
        }
        if times.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(Error::param("time series contains non-finite values"));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Samples with `t_min ≤ t ≤ t_max`.
    pub fn window(&self, t_min: f64, t_max: f64) -> TimeSeries {
        let (times, values) = self
            .times
            .iter()
            .zip(&self.values)
            .filter(|(t, _)| **t >= t_min && **t <= t_max)
            .map(|(t, v)| (*t, *v))
            .unzip();
        TimeSeries { times, values }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population variance about the sample mean.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.values.len() as f64
    }

    /// CSV with header `t,value` and round-trip exact numbers.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,value")?;
        for (t, v) in self.times.iter().zip(&self.values) {
            writeln!(w, "{t:.16e},{v:.16e}")?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

pub fn uniform_times(t_start: f64, t_end: f64, samples: usize) -> Result<Vec<f64>> {
    if samples < 2 || !(t_start < t_end) {
        return Err(Error::param("time grid needs at least two samples and t_start < t_end"));
    }
    let dt = (t_end - t_start) / (samples - 1) as f64;
    Ok((0..samples).map(|k| t_start + dt * k as f64).collect())
}

const TIME_BATCH: usize = 128;

/// `⟨O(t)⟩ = Σ_{μν} c̄_μ c̄_ν O_μν e^{−i(E_μ−E_ν)t}`, evaluated by propagating
/// the state in the eigenbasis and mapping back, a batch of times per GEMM.
pub fn evolve_expectation(
    eig: &EigenSystem,
    psi0: &StateVector,
    o: &ObservableMatrix,
    times: &[f64],
) -> Result<TimeSeries> {
    check_basis(o, eig)?;
    check_dim(eig.dimension(), psi0.dimension())?;
    let c = eig.project(psi0)?;
    // Levels without weight never contribute; dropping them is exact.
    let support: Vec<usize> = (0..c.len()).filter(|&mu| c[mu] != 0.0).collect();
    let d = eig.dimension();
    let v_sub;
    let v: &Mat<f64> = if support.len() == d {
        eig.vectors()
    } else {
        v_sub = Mat::from_fn(d, support.len(), |r, k| eig.vectors()[(r, support[k])]);
        &v_sub
    };
    let energies: Vec<f64> = support.iter().map(|&mu| eig.energies()[mu]).collect();
    let amps: Vec<f64> = support.iter().map(|&mu| c[mu]).collect();
    let triplets: Vec<(usize, usize, f64)> = o.matrix().iter_full().collect();

    let mut values = Vec::with_capacity(times.len());
    let mut worst_imag = 0.0f64;
    for chunk in times.chunks(TIME_BATCH) {
        let b = chunk.len();
        let p_re = Mat::from_fn(amps.len(), b, |mu, k| amps[mu] * (energies[mu] * chunk[k]).cos());
        let p_im = Mat::from_fn(amps.len(), b, |mu, k| -amps[mu] * (energies[mu] * chunk[k]).sin());
        let psi_re = v * &p_re;
        let psi_im = v * &p_im;
        let batch: Vec<(f64, f64)> = (0..b)
            .into_par_iter()
            .map(|k| {
                let re = psi_re.col(k);
                let im = psi_im.col(k);
                let mut val = 0.0;
                let mut imag = 0.0;
                for &(r, cc, x) in &triplets {
                    val += x * (re[r] * re[cc] + im[r] * im[cc]);
                    imag += x * (re[r] * im[cc] - im[r] * re[cc]);
                }
                (val, imag)
            })
            .collect();
        for (val, imag) in batch {
            worst_imag = worst_imag.max(imag.abs());
            values.push(val);
        }
    }
    let scale = o.matrix().max_abs().max(1.0);
    if worst_imag > 1e-9 * scale {
        return Err(Error::Construction(format!(
            "expectation value acquired an imaginary part {worst_imag:.3e}"
        )));
    }
    TimeSeries::new(times.to_vec(), values)
}

/// Evolution under the non-interacting Hamiltonian, given its eigensystem.
pub fn free_evolution(
    h0_eig: &EigenSystem,
    psi0: &StateVector,
    o: &ObservableMatrix,
    times: &[f64],
) -> Result<TimeSeries> {
    evolve_expectation(h0_eig, psi0, o, times)
}

/// `⟨σ_z(t)⟩₀ = A² + 4B² cos(2Et)` for a spin prepared up in the field
/// `B_z σ_z + B_x σ_x`, with `A = B_z/E`, `B = B_x/(2E)`.
pub fn analytic_free_evolution(bz: f64, bx: f64, times: &[f64]) -> Result<TimeSeries> {
    let e = bz.hypot(bx);
    if e == 0.0 || !e.is_finite() {
        return Err(Error::param("system field must be non-zero and finite"));
    }
    let a = bz / e;
    let b = bx / (2.0 * e);
    let values = times
        .iter()
        .map(|t| a * a + 4.0 * b * b * (2.0 * e * t).cos())
        .collect();
    TimeSeries::new(times.to_vec(), values)
}

/// `|c̄_μ|²`.
pub fn diagonal_weights(eig: &EigenSystem, psi0: &StateVector) -> Result<Vec<f64>> {
    Ok(eig.project(psi0)?.into_iter().map(|c| c * c).collect())
}

fn warn_if_degenerate(eig: &EigenSystem) {
    let ratio = eig.min_gap_ratio();
    if ratio <= 1e-12 {
        log::warn!("spectrum has near-degenerate levels (min gap / bandwidth = {ratio:.3e}); diagonal-ensemble formulas assume none");
    }
}

/// `O_μμ` for every level without forming the full transformed matrix.
pub fn eigenbasis_diagonal(o: &ObservableMatrix, eig: &EigenSystem) -> Result<Vec<f64>> {
    check_basis(o, eig)?;
    let ov = o.matrix().mul_dense(eig.vectors())?;
    Ok((0..eig.dimension())
        .into_par_iter()
        .map(|mu| {
            eig.vectors()
                .col(mu)
                .iter()
                .zip(ov.col(mu).iter())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect())
}

/// `Σ_μ |c̄_μ|² O_μμ`.
pub fn time_average_diagonal(eig: &EigenSystem, psi0: &StateVector, o: &ObservableMatrix) -> Result<f64> {
    warn_if_degenerate(eig);
    let w = diagonal_weights(eig, psi0)?;
    let diag = eigenbasis_diagonal(o, eig)?;
    Ok(w.iter().zip(&diag).map(|(a, b)| a * b).sum())
}

/// `Σ_{μ≠ν} |c̄_μ|² |c̄_ν|² O_μν²`.
pub fn fluctuations_diagonal(eig: &EigenSystem, psi0: &StateVector, o: &ObservableMatrix) -> Result<f64> {
    warn_if_degenerate(eig);
    let w = diagonal_weights(eig, psi0)?;
    let o_int = crate::spectral::observable_to_eigenbasis(o, eig)?;
    fluctuations_from_eigenbasis(&w, &o_int)
}

/// Same as [`fluctuations_diagonal`] with weights and `O_μν` supplied.
pub fn fluctuations_from_eigenbasis(weights: &[f64], o_int: &Mat<f64>) -> Result<f64> {
    check_dim(weights.len(), o_int.nrows())?;
    check_dim(weights.len(), o_int.ncols())?;
    let support: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] != 0.0).collect();
    let terms: Vec<f64> = support
        .par_iter()
        .map(|&nu| {
            let col = o_int.col(nu);
            let s: f64 = support
                .iter()
                .filter(|&&mu| mu != nu)
                .map(|&mu| weights[mu] * col[mu] * col[mu])
                .sum();
            weights[nu] * s
        })
        .collect();
    // Summed in order so the result does not depend on the thread count.
    Ok(terms.iter().sum())
}

/// `Σ_μ w_μ O_μμ` with `O_μν` supplied.
pub fn time_average_from_eigenbasis(weights: &[f64], o_int: &Mat<f64>) -> Result<f64> {
    check_dim(weights.len(), o_int.nrows())?;
    Ok(weights.iter().enumerate().map(|(mu, w)| w * o_int[(mu, mu)]).sum())
}

/// Minimum number of samples for a windowed fluctuation estimate.
pub const MIN_WINDOW_SAMPLES: usize = 100;

/// Variance of the series over `t_min ≤ t ≤ t_max`. When `gamma_est` is
/// given the window must start after `5/Γ`, so the decay transient is
/// excluded.
pub fn fluctuations_windowed(
    series: &TimeSeries,
    t_min: f64,
    t_max: f64,
    gamma_est: Option<f64>,
) -> Result<f64> {
    if let Some(g) = gamma_est {
        if t_min < 5.0 / g {
            return Err(Error::param(format!(
                "window starts at t = {t_min:.4}, before 5/Γ = {:.4}",
                5.0 / g
            )));
        }
    }
    let w = series.window(t_min, t_max);
    if w.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::param(format!(
            "window holds {} samples; at least {MIN_WINDOW_SAMPLES} are required",
            w.len()
        )));
    }
    Ok(w.variance())
}

/// Measured and diagonal-ensemble fluctuations of one quench.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuationReport {
    pub delta_sq_measured: f64,
    pub delta_sq_diag_ensemble: f64,
    pub time_average: f64,
    pub microcanonical_average: f64,
    pub window: (f64, f64),
}
