//! Experiment recipes: each kind builds a family of models, runs a quench
//! per initial state and reports measured fluctuations next to the
//! fluctuation-dissipation predictions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use faer::Mat;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dynamics::{
    analytic_free_evolution, evolve_expectation, fluctuations_from_eigenbasis, fluctuations_windowed,
    time_average_from_eigenbasis, uniform_times, TimeSeries,
};
use crate::error::{Error, Result};
use crate::fitting::{fit_gamma, fit_lorentzian, relaxation_cutoff, FitResult, WidthConvention};
use crate::hilbert::{BasisTag, Spin, SpinBasis, StateVector};
use crate::models::{
    build_rmt_model, build_spin_chain, default_coupled_site, initial_state, make_parity_observables,
    parse_spin_pattern, system_sigma_z, InitialStateSpec, NonInteractingBasis, ObservableMatrix, RmtParams,
    SpinChainParams,
};
use crate::rng::{stream, INITIAL_STATE_STREAM};
use crate::spectral::cache::EigenCache;
use crate::spectral::{
    default_epsilon, diagonalize, dos_estimate, ldos_profile, observable_to_eigenbasis, strength_function,
    uniform_grid, EigenSystem, EnergyWindow,
};
use crate::theory::{
    band_coefficients, four_point_diag, four_point_offdiag, microcanonical_average, predicted_decay,
    qcfdt_general, qcfdt_simple, qcfdt_three_peak, LorentzianFamily, SystemField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RmtFdt,
    SpinchainFdt,
    SpinchainProductState,
    GeneralizedFdtBx,
    CouplingSweep,
    TimeDependence,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::RmtFdt,
        ExperimentKind::SpinchainFdt,
        ExperimentKind::SpinchainProductState,
        ExperimentKind::GeneralizedFdtBx,
        ExperimentKind::CouplingSweep,
        ExperimentKind::TimeDependence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::RmtFdt => "rmt_fdt",
            ExperimentKind::SpinchainFdt => "spinchain_fdt",
            ExperimentKind::SpinchainProductState => "spinchain_product_state",
            ExperimentKind::GeneralizedFdtBx => "generalized_fdt_bx",
            ExperimentKind::CouplingSweep => "coupling_sweep",
            ExperimentKind::TimeDependence => "time_dependence",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::param(format!("unknown experiment kind {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParityObservable {
    Odd,
    Sym,
}

impl ParityObservable {
    pub fn name(self) -> &'static str {
        match self {
            ParityObservable::Odd => "odd",
            ParityObservable::Sym => "sym",
        }
    }
}

impl FromStr for ParityObservable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odd" => Ok(Self::Odd),
            "sym" => Ok(Self::Sym),
            other => Err(Error::param(format!("unknown observable {other:?}; expected odd or sym"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmtSpec {
    pub dimensions: Vec<usize>,
    pub couplings: Vec<f64>,
    pub observables: Vec<ParityObservable>,
}

/// Initial state of a spin-chain quench. The system spin always starts up.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainInitial {
    /// Random bath eigenstates from the central window.
    BathEigenstate,
    /// Bath spins all down.
    AllDown,
    /// Bath spins alternating, first bath spin up.
    Neel,
    /// Explicit bath pattern such as `"UDDU"`, one character per bath spin.
    Pattern(String),
}

impl ChainInitial {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bath_eigenstate" => Ok(Self::BathEigenstate),
            "all_down" => Ok(Self::AllDown),
            "neel" => Ok(Self::Neel),
            p => {
                parse_spin_pattern(p)?;
                Ok(Self::Pattern(p.to_string()))
            }
        }
    }

    fn bath_spins(&self, n_bath: usize) -> Result<Option<Vec<Spin>>> {
        Ok(match self {
            ChainInitial::BathEigenstate => None,
            ChainInitial::AllDown => Some(vec![Spin::Down; n_bath]),
            ChainInitial::Neel => Some(
                (0..n_bath)
                    .map(|j| if j % 2 == 0 { Spin::Up } else { Spin::Down })
                    .collect(),
            ),
            ChainInitial::Pattern(p) => {
                let spins = parse_spin_pattern(p)?;
                if spins.len() != n_bath {
                    return Err(Error::param(format!(
                        "bath pattern {p:?} has {} spins, the bath has {n_bath}",
                        spins.len()
                    )));
                }
                Some(spins)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSpec {
    pub sizes: Vec<usize>,
    /// Template parameters; `n_spins` and `coupled_site` are set per size.
    pub base: SpinChainParams,
    pub coupled_site: Option<usize>,
    /// Values of `B_z` on the system spin; empty keeps the template value.
    pub bz_system_values: Vec<f64>,
    /// Joint factors applied to both system-bath couplings.
    pub coupling_scales: Vec<f64>,
    pub initial: ChainInitial,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Rmt(RmtSpec),
    SpinChain(ChainSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleSpec {
    pub n_realizations: usize,
    pub n_initial_states: usize,
    pub seed: u64,
}

/// Numerical choices of the analysis. Times are in units of `1/Γ_fit` and
/// widths in units of `Γ_fit` where noted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSpec {
    /// Smoothing width of profiles; default five mean level spacings.
    pub epsilon: Option<f64>,
    /// Fraction of the energy range used for initial states and profiles.
    pub central_fraction: f64,
    /// Fixed horizon of the decay fit; adaptive when absent.
    pub fit_horizon: Option<f64>,
    pub fit_samples: usize,
    /// Start of the fluctuation window, `1/Γ` units.
    pub window_start: f64,
    /// Length of the fluctuation window, `1/Γ` units.
    pub window_length: f64,
    pub window_samples: usize,
    /// Width of the DOS counting window, `Γ` units.
    pub dos_width: f64,
    pub profiles: bool,
    pub profile_points: usize,
    pub emit_series: bool,
    pub series_horizon: Option<f64>,
    pub series_samples: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            epsilon: None,
            central_fraction: 0.5,
            fit_horizon: None,
            fit_samples: 1000,
            window_start: 10.0,
            window_length: 400.0,
            window_samples: 4000,
            dos_width: 10.0,
            profiles: false,
            profile_points: 801,
            emit_series: false,
            series_horizon: None,
            series_samples: 1000,
        }
    }
}

/// Emitted series span this many fitted decay times unless a horizon is given.
pub const SERIES_DECAY_TIMES: f64 = 5.0;

pub const DEFAULT_BUDGET_GB: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    pub ensemble: EnsembleSpec,
    pub analysis: AnalysisSpec,
    pub budget_gb: f64,
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must be positive and finite, got {x}")))
    }
}

fn non_empty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        Err(Error::param(format!("{name} must list at least one value")))
    } else {
        Ok(())
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        match (&self.kind, &self.model) {
            (ExperimentKind::RmtFdt, ModelSpec::Rmt(_)) | (ExperimentKind::TimeDependence, _) => {}
            (ExperimentKind::RmtFdt, _) => return Err(Error::param("rmt_fdt needs an RMT model")),
            (k, ModelSpec::Rmt(_)) => return Err(Error::param(format!("{k} needs a spin-chain model"))),
            _ => {}
        }
        if self.ensemble.n_realizations == 0 || self.ensemble.n_initial_states == 0 {
            return Err(Error::param("ensemble counts must be positive"));
        }
        positive("budget_gb", self.budget_gb)?;
        let a = &self.analysis;
        if !(a.central_fraction > 0.0 && a.central_fraction <= 1.0) {
            return Err(Error::param("central_fraction must lie in (0, 1]"));
        }
        if let Some(e) = a.epsilon {
            positive("epsilon", e)?;
        }
        if let Some(h) = a.fit_horizon {
            positive("fit_horizon", h)?;
        }
        if let Some(h) = a.series_horizon {
            positive("series_horizon", h)?;
        }
        if a.window_start < 5.0 {
            return Err(Error::param(format!(
                "window_start must be at least 5 (in units of 1/gamma), got {}",
                a.window_start
            )));
        }
        positive("window_length", a.window_length)?;
        positive("dos_width", a.dos_width)?;
        if a.fit_samples < crate::fitting::MIN_FIT_POINTS
            || a.window_samples < crate::dynamics::MIN_WINDOW_SAMPLES
            || a.profile_points < 10
            || a.series_samples < 2
        {
            return Err(Error::param("sample counts are below their minimums"));
        }
        match &self.model {
            ModelSpec::Rmt(r) => {
                non_empty("dimensions", &r.dimensions)?;
                non_empty("couplings", &r.couplings)?;
                non_empty("observables", &r.observables)?;
                for &n in &r.dimensions {
                    RmtParams::new(n, 0.1, 0)?;
                }
                for &g in &r.couplings {
                    positive("g", g)?;
                }
            }
            ModelSpec::SpinChain(c) => {
                non_empty("sizes", &c.sizes)?;
                non_empty("coupling_scales", &c.coupling_scales)?;
                for &s in &c.coupling_scales {
                    positive("coupling scale", s)?;
                }
                for p in chain_cases(c) {
                    p.params.validate()?;
                    c.initial.bath_spins(p.params.n_spins - 1)?;
                }
            }
        }
        Ok(())
    }

    /// Largest Hilbert-space dimension the run will diagonalize.
    pub fn max_dimension(&self) -> usize {
        match &self.model {
            ModelSpec::Rmt(r) => r.dimensions.iter().copied().max().unwrap_or(0),
            ModelSpec::SpinChain(c) => c
                .sizes
                .iter()
                .map(|&n| 1usize.checked_shl(n as u32).unwrap_or(usize::MAX))
                .max()
                .unwrap_or(0),
        }
    }

    /// Three dense `D × D` matrices of `f64`.
    pub fn memory_estimate_bytes(&self) -> f64 {
        let d = self.max_dimension() as f64;
        8.0 * d * d * 3.0
    }

    pub fn check_budget(&self) -> Result<()> {
        let required_gb = self.memory_estimate_bytes() / 1e9;
        if required_gb > self.budget_gb {
            return Err(Error::BudgetExceeded {
                required_gb,
                budget_gb: self.budget_gb,
            });
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One quench.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub instance: String,
    /// Matrix dimension (RMT) or number of spins.
    #[serde(rename = "N")]
    pub n: usize,
    /// RMT coupling or spin-chain coupling scale.
    pub g: f64,
    pub gamma_fit: f64,
    pub delta2_measured: f64,
    pub delta2_diag: f64,
    pub delta2_pred_simple: f64,
    pub delta2_pred_general: f64,
    pub dos: f64,
    pub time_avg: f64,
    pub mc_avg: f64,
    pub flags: Vec<String>,
    pub extras: BTreeMap<String, f64>,
}

impl Row {
    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.get(key).copied()
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

pub const ROWS_CSV_HEADER: &str =
    "instance,N,g,gamma_fit,delta2_measured,delta2_diag,delta2_pred_simple,delta2_pred_general,dos,time_avg,mc_avg,flags";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRecord {
    pub instance: String,
    pub times: Vec<f64>,
    pub measured: Vec<f64>,
    pub free: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl SeriesRecord {
    /// CSV with header `t,measured,free,predicted`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,measured,free,predicted\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.times[i], self.measured[i], self.free[i], self.predicted[i]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRecord {
    pub instance: String,
    pub kind: String,
    pub epsilon: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub maxima: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub central_window: String,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub spec: ExperimentSpec,
    pub rows: Vec<Row>,
    pub series: Vec<SeriesRecord>,
    pub profiles: Vec<ProfileRecord>,
    pub provenance: Provenance,
}

impl RunReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(ROWS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.instance,
                r.n,
                r.g,
                r.gamma_fit,
                r.delta2_measured,
                r.delta2_diag,
                r.delta2_pred_simple,
                r.delta2_pred_general,
                r.dos,
                r.time_avg,
                r.mc_avg,
                r.flags.join(";")
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Where initial states are drawn from.
#[derive(Debug, Clone, Copy)]
pub enum InitialSource<'a> {
    /// Basis states of the RMT model, given its unperturbed energies.
    RmtBasis(&'a [f64]),
    /// `|↑⟩_S|φ_α⟩_B` for bath eigenstates `φ_α`.
    BathEigenstate(&'a EigenSystem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledState {
    pub index: usize,
    pub energy: f64,
    pub state: StateVector,
}

/// Samples `count` distinct states uniformly among those whose energy lies
/// in the middle `fraction` of the energy range. Indices are returned in
/// increasing order.
pub fn random_initial_states(
    source: InitialSource<'_>,
    count: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<SampledState>> {
    let energies = match source {
        InitialSource::RmtBasis(e) => e,
        InitialSource::BathEigenstate(b) => b.energies(),
    };
    let window = EnergyWindow::central_fraction(energies, fraction)?;
    let candidates: Vec<usize> = (0..energies.len()).filter(|&i| window.contains(energies[i])).collect();
    if candidates.is_empty() {
        return Err(Error::param("no states inside the central energy window"));
    }
    if count > candidates.len() {
        return Err(Error::param(format!(
            "requested {count} initial states but the window holds {}",
            candidates.len()
        )));
    }
    let mut rng = stream(seed, INITIAL_STATE_STREAM);
    let mut picks: Vec<usize> = sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|index| {
            let state = match source {
                InitialSource::RmtBasis(e) => StateVector::basis_state(e.len(), index)?,
                InitialSource::BathEigenstate(b) => initial_state(
                    &InitialStateSpec::SystemUpBathEigenstate(index),
                    2 * b.dimension(),
                    Some(b),
                )?,
            };
            Ok(SampledState {
                index,
                energy: energies[index],
                state,
            })
        })
        .collect()
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
    pub cache: Option<EigenCache>,
}

fn eigensystem(h: &Mat<f64>, basis: BasisTag, cache: Option<&EigenCache>) -> Result<EigenSystem> {
    match cache {
        Some(c) => c.get_or_compute(h, basis),
        None => diagonalize(h, basis),
    }
}

fn mix_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stream used for the jittered fluctuation-window sample times.
const JITTER_STREAM: u64 = u64::MAX - 1;

/// One quench to analyse. `o` lives in the basis of `eig`; `o_ni` and
/// `ni_weights` describe the observable and the initial state in the
/// non-interacting eigenbasis.
struct Quench<'a> {
    eig: &'a EigenSystem,
    o: &'a ObservableMatrix,
    o_int: &'a Mat<f64>,
    o_ni: &'a ObservableMatrix,
    ni_weights: Vec<f64>,
    psi0: StateVector,
    free: &'a dyn Fn(&[f64]) -> Result<TimeSeries>,
    /// Highest frequency of the free evolution, to resolve it on the fit grid.
    free_frequency: f64,
    field: Option<SystemField>,
}

struct Outcome {
    row: Row,
    series: Option<SeriesRecord>,
    profiles: Vec<ProfileRecord>,
}

const MAX_FIT_PASSES: usize = 4;
/// Accepted range of `Γ_fit · horizon` before the fit grid is rescaled.
const HORIZON_RANGE: (f64, f64) = (3.0, 12.0);
const HORIZON_TARGET: f64 = 5.0;
const MAX_FIT_SAMPLES: usize = 20_000;

/// Half the interquartile range of the energy distribution, which equals
/// the half-width of a Lorentzian.
fn ldos_width_guess(weights: &[f64], energies: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut q1 = None;
    let mut q3 = None;
    for (w, e) in weights.iter().zip(energies) {
        acc += w;
        if q1.is_none() && acc >= 0.25 {
            q1 = Some(*e);
        }
        if q3.is_none() && acc >= 0.75 {
            q3 = Some(*e);
        }
    }
    let spread = energies[energies.len() - 1] - energies[0];
    let w = 0.5 * (q3.unwrap_or(energies[energies.len() - 1]) - q1.unwrap_or(energies[0]));
    w.max(1e-6 * spread.max(1.0))
}

fn fit_grid(horizon: f64, samples: usize, free_frequency: f64) -> Result<Vec<f64>> {
    let mut n = samples;
    if free_frequency > 0.0 {
        // At least sixteen samples per free oscillation period.
        let per_period = 16.0 * horizon * free_frequency / (2.0 * std::f64::consts::PI);
        n = n.max(per_period.ceil() as usize);
    }
    uniform_times(0.0, horizon, n.min(MAX_FIT_SAMPLES))
}

/// Stratified random times: one uniform draw in each of `n` equal cells, so
/// the sample variance is unbiased for the window average regardless of
/// the signal's frequency content.
fn jittered_times(t0: f64, t1: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dt = (t1 - t0) / n as f64;
    (0..n)
        .map(|k| t0 + (k as f64 + rng.random::<f64>()) * dt)
        .collect()
}

fn series_slice(s: &TimeSeries, n: usize) -> Result<TimeSeries> {
    TimeSeries::new(s.times()[..n].to_vec(), s.values()[..n].to_vec())
}

fn fit_decay(
    q: &Quench<'_>,
    a: &AnalysisSpec,
    time_avg: f64,
    delta2_diag: f64,
    flags: &mut Vec<String>,
) -> Result<Option<(FitResult, f64, usize)>> {
    let mut horizon = match a.fit_horizon {
        Some(h) => h,
        None => HORIZON_TARGET / ldos_width_guess(&q.eig.project(&q.psi0)?.iter().map(|c| c * c).collect::<Vec<_>>(), q.eig.energies()),
    };
    let mut last = None;
    for pass in 0..MAX_FIT_PASSES {
        let times = fit_grid(horizon, a.fit_samples, q.free_frequency)?;
        let measured = evolve_expectation(q.eig, &q.psi0, q.o, &times)?;
        let free = (q.free)(&times)?;
        let cut = relaxation_cutoff(&measured, time_avg, delta2_diag);
        let fit = match fit_gamma(&series_slice(&measured, cut)?, &series_slice(&free, cut)?, time_avg) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("decay fit failed: {e}");
                flags.push("fit_failed".into());
                return Ok(None);
            }
        };
        let gamma = fit.parameters["gamma"];
        let settled = (HORIZON_RANGE.0..=HORIZON_RANGE.1).contains(&(gamma * horizon));
        last = Some((fit, horizon, cut));
        if settled || a.fit_horizon.is_some() {
            break;
        }
        if pass + 1 == MAX_FIT_PASSES {
            flags.push("fit_horizon_unsettled".into());
            break;
        }
        horizon = HORIZON_TARGET / gamma;
    }
    Ok(last)
}

fn analyze(q: &Quench<'_>, a: &AnalysisSpec, instance: String, n: usize, g: f64, rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let c = q.eig.project(&q.psi0)?;
    let w: Vec<f64> = c.iter().map(|x| x * x).collect();
    let time_avg = time_average_from_eigenbasis(&w, q.o_int)?;
    let delta2_diag = fluctuations_from_eigenbasis(&w, q.o_int)?;
    let e0: f64 = w.iter().zip(q.eig.energies()).map(|(w, e)| w * e).sum();
    let ni_energies = q
        .o_ni
        .energies()
        .ok_or_else(|| Error::param("non-interacting observable carries no energies"))?;
    let e0_ni: f64 = q.ni_weights.iter().zip(ni_energies).map(|(w, e)| w * e).sum();

    let mut flags = Vec::new();
    let mut extras = BTreeMap::from([
        ("e0".to_string(), e0),
        ("e0_noninteracting".to_string(), e0_ni),
    ]);

    let fit = fit_decay(q, a, time_avg, delta2_diag, &mut flags)?;
    let mut gamma_fit = f64::NAN;
    if let Some((f, horizon, cut)) = &fit {
        gamma_fit = f.parameters["gamma"];
        if !f.converged {
            flags.push("fit_not_converged".into());
        }
        extras.insert("gamma_stderr".into(), f.covariance_diag["gamma"].max(0.0).sqrt());
        extras.insert("fit_residual_rms".into(), f.residual_rms);
        extras.insert("fit_horizon".into(), *horizon);
        extras.insert("fit_points".into(), *cut as f64);
    }

    let mut delta2_measured = f64::NAN;
    let mut dos = f64::NAN;
    let (mut simple, mut general, mut mc_avg) = (f64::NAN, f64::NAN, f64::NAN);
    if gamma_fit > 0.0 && gamma_fit.is_finite() {
        let t0 = a.window_start / gamma_fit;
        let t1 = t0 + a.window_length / gamma_fit;
        let times = jittered_times(t0, t1, a.window_samples, rng);
        let series = evolve_expectation(q.eig, &q.psi0, q.o, &times)?;
        match fluctuations_windowed(&series, t0, t1, Some(gamma_fit)) {
            Ok(v) => delta2_measured = v,
            Err(e) => {
                log::warn!("fluctuation window failed: {e}");
                flags.push("window_failed".into());
            }
        }
        extras.insert("window_start".into(), t0);
        extras.insert("window_end".into(), t1);

        match dos_estimate(q.eig, e0, a.dos_width * gamma_fit) {
            Ok(d) if d > 0.0 => dos = d,
            _ => flags.push("dos_window_clipped".into()),
        }
        if dos.is_finite() {
            let fam = LorentzianFamily::new(1.0 / dos, gamma_fit)?;
            let bands = band_coefficients(q.o_ni, &fam, e0_ni)?;
            mc_avg = microcanonical_average(q.o_ni, 0, &fam, e0_ni)?;
            simple = qcfdt_simple(bands.a0(), 1.0 / dos, gamma_fit)?;
            general = qcfdt_general(&q.ni_weights, ni_energies, &bands, &fam)?;
            extras.insert("a0".into(), bands.a0());
            if bands.a0() > 0.0 && delta2_measured.is_finite() {
                extras.insert(
                    "qcfdt_ratio".into(),
                    delta2_measured * 4.0 * std::f64::consts::PI * gamma_fit * dos / bands.a0(),
                );
            }
            if let Some(field) = q.field.filter(|f| f.bx != 0.0) {
                extras.insert(
                    "delta2_pred_three_peak".into(),
                    qcfdt_three_peak(&field, gamma_fit, 1.0 / dos, time_avg)?,
                );
            }
        }
    }
    if !(delta2_measured >= 0.0) && !flags.iter().any(|f| f == "fit_failed" || f == "window_failed") {
        flags.push("no_measurement".into());
    }

    let series = if a.emit_series && gamma_fit > 0.0 {
        let horizon = a.series_horizon.unwrap_or(SERIES_DECAY_TIMES / gamma_fit);
        let times = fit_grid(horizon, a.series_samples, q.free_frequency)?;
        let measured = evolve_expectation(q.eig, &q.psi0, q.o, &times)?;
        let free = (q.free)(&times)?;
        let predicted = predicted_decay(&free, time_avg, gamma_fit)?;
        Some(SeriesRecord {
            instance: instance.clone(),
            times,
            measured: measured.values().to_vec(),
            free: free.values().to_vec(),
            predicted: predicted.values().to_vec(),
        })
    } else {
        None
    };

    let profiles = if a.profiles && gamma_fit > 0.0 {
        profiles_for(q, a, &instance, e0, gamma_fit, &mut extras)?
    } else {
        Vec::new()
    };

    Ok(Outcome {
        row: Row {
            instance,
            n,
            g,
            gamma_fit,
            delta2_measured,
            delta2_diag,
            delta2_pred_simple: simple,
            delta2_pred_general: general,
            dos,
            time_avg,
            mc_avg,
            flags,
            extras,
        },
        series,
        profiles,
    })
}

fn profiles_for(
    q: &Quench<'_>,
    a: &AnalysisSpec,
    instance: &str,
    e0: f64,
    gamma: f64,
    extras: &mut BTreeMap<String, f64>,
) -> Result<Vec<ProfileRecord>> {
    let window = EnergyWindow::central_fraction(q.eig.energies(), a.central_fraction)?;
    let eps = match a.epsilon {
        Some(e) => e,
        None => default_epsilon(q.eig, &window)?,
    };
    let split = q.field.map_or(0.0, |f| if f.bx != 0.0 { 2.0 * f.splitting() } else { 0.0 });
    let half = 20.0 * gamma + 10.0 * eps + 1.5 * split;
    let ldos = ldos_profile(&q.psi0, q.eig, eps, &uniform_grid(e0 - half, e0 + half, a.profile_points)?)?;
    let sf = strength_function(q.o_int, q.eig, eps, &uniform_grid(-half, half, a.profile_points)?, &window)?;
    if split == 0.0 {
        if let Ok(f) = fit_lorentzian(&ldos, WidthConvention::Ldos) {
            extras.insert("gamma_ldos".into(), f.parameters["gamma"]);
        }
        if let Ok(f) = fit_lorentzian(&sf, WidthConvention::StrengthFunction) {
            extras.insert("gamma_strength".into(), f.parameters["gamma"]);
        }
    }
    Ok([("ldos", ldos), ("strength_function", sf)]
        .into_iter()
        .map(|(kind, p)| ProfileRecord {
            instance: instance.to_string(),
            kind: kind.to_string(),
            epsilon: p.epsilon,
            maxima: p.local_maxima(),
            grid: p.grid,
            values: p.values,
        })
        .collect())
}

fn constant_series(value: f64) -> impl Fn(&[f64]) -> Result<TimeSeries> {
    move |t: &[f64]| TimeSeries::new(t.to_vec(), vec![value; t.len()])
}

fn run_rmt(spec: &ExperimentSpec, r: &RmtSpec, opts: &RunOptions, out: &mut Vec<Outcome>) -> Result<()> {
    let ens = &spec.ensemble;
    for &n in &r.dimensions {
        let (odd, sym) = make_parity_observables(n)?;
        for &g in &r.couplings {
            for real in 0..ens.n_realizations as u64 {
                let params = RmtParams::new(n, g, ens.seed)?.with_realization(real);
                let model = build_rmt_model(params)?;
                let eig = eigensystem(&model.hamiltonian(), BasisTag::NonInteracting, opts.cache.as_ref())?;
                let h0 = params.h0_energies();
                let states = random_initial_states(
                    InitialSource::RmtBasis(&h0),
                    ens.n_initial_states,
                    spec.analysis.central_fraction,
                    mix_seed(ens.seed, real),
                )?;
                for &kind in &r.observables {
                    let o = match kind {
                        ParityObservable::Odd => &odd,
                        ParityObservable::Sym => &sym,
                    };
                    let o_int = observable_to_eigenbasis(o, &eig)?;
                    for s in &states {
                        let start = o.matrix().diagonal()[s.index];
                        let free = constant_series(start);
                        let q = Quench {
                            eig: &eig,
                            o,
                            o_int: &o_int,
                            o_ni: o,
                            ni_weights: s.state.amplitudes().iter().map(|x| x * x).collect(),
                            psi0: s.state.clone(),
                            free: &free,
                            free_frequency: 0.0,
                            field: None,
                        };
                        let instance = format!(
                            "rmt/N={n}/g={g}/r={real:04}/{}/alpha={:06}",
                            kind.name(),
                            s.index
                        );
                        let mut rng = stream(mix_seed(ens.seed, out.len() as u64), JITTER_STREAM);
                        let mut o = analyze(&q, &spec.analysis, instance, n, g, &mut rng)?;
                        o.row.extras.insert("gamma_theory".into(), params.gamma());
                        o.row.extras.insert("realization".into(), real as f64);
                        o.row.extras.insert("initial_index".into(), s.index as f64);
                        out.push(o);
                    }
                }
            }
        }
    }
    Ok(())
}

struct ChainCase {
    params: SpinChainParams,
    scale: f64,
}

fn chain_cases(c: &ChainSpec) -> Vec<ChainCase> {
    let bz_values = if c.bz_system_values.is_empty() {
        vec![c.base.bz_system]
    } else {
        c.bz_system_values.clone()
    };
    let mut cases = Vec::new();
    for &n in &c.sizes {
        for &bz in &bz_values {
            for &scale in &c.coupling_scales {
                let params = SpinChainParams {
                    n_spins: n,
                    bz_system: bz,
                    coupled_site: c.coupled_site.unwrap_or_else(|| default_coupled_site(n)),
                    ..c.base
                }
                .with_coupling_scale(scale);
                cases.push(ChainCase { params, scale });
            }
        }
    }
    cases
}

fn run_chain(spec: &ExperimentSpec, c: &ChainSpec, opts: &RunOptions, out: &mut Vec<Outcome>) -> Result<()> {
    let ens = &spec.ensemble;
    for case in chain_cases(c) {
        let p = case.params;
        let chain = build_spin_chain(p)?;
        let d = chain.basis.dimension();
        let eig = eigensystem(&chain.h.to_dense(), BasisTag::Computational, opts.cache.as_ref())?;
        let bath_eig = eigensystem(
            &chain.bath_hamiltonian()?.to_dense(),
            BasisTag::Computational,
            opts.cache.as_ref(),
        )?;
        let field = p.system_field();
        let ni = NonInteractingBasis::new(field, &bath_eig)?;
        let o_ni = ni.sigma_z()?;
        let o = system_sigma_z(&chain)?;
        let o_int = observable_to_eigenbasis(&o, &eig)?;
        let free = |t: &[f64]| analytic_free_evolution(field.bz, field.bx, t);
        let free_frequency = if field.bx != 0.0 { 2.0 * field.splitting() } else { 0.0 };

        // (label, initial index, state, bath amplitudes in the bath eigenbasis)
        let mut starts: Vec<(String, f64, StateVector, Vec<f64>)> = Vec::new();
        match c.initial.bath_spins(p.n_spins - 1)? {
            None => {
                let states = random_initial_states(
                    InitialSource::BathEigenstate(&bath_eig),
                    ens.n_initial_states,
                    spec.analysis.central_fraction,
                    mix_seed(ens.seed, p.n_spins as u64),
                )?;
                for s in states {
                    let mut amps = vec![0.0; bath_eig.dimension()];
                    amps[s.index] = 1.0;
                    starts.push((format!("bath={:05}", s.index), s.index as f64, s.state, amps));
                }
            }
            Some(bath) => {
                let bath_index = SpinBasis::new(bath.len())?.index_of(&bath)?;
                let mut spins = vec![Spin::Up];
                spins.extend(bath.iter().copied());
                let psi = initial_state(&InitialStateSpec::ProductPattern(spins), d, None)?;
                let mut e = vec![0.0; bath_eig.dimension()];
                e[bath_index] = 1.0;
                let amps = bath_eig.project_slice(&e)?;
                starts.push((format!("product={bath_index:05}"), bath_index as f64, psi, amps));
            }
        }
        for (label, index, psi0, amps) in starts {
            let q = Quench {
                eig: &eig,
                o: &o,
                o_int: &o_int,
                o_ni: &o_ni,
                ni_weights: ni.product_weights([1.0, 0.0], &amps)?,
                psi0,
                free: &free,
                free_frequency,
                field: Some(field),
            };
            let instance = format!(
                "chain/N={:02}/bz={}/bx={}/c={}/{label}",
                p.n_spins, p.bz_system, p.bx_system, case.scale
            );
            let mut rng = stream(mix_seed(ens.seed, out.len() as u64), JITTER_STREAM);
            let mut o = analyze(&q, &spec.analysis, instance, p.n_spins, case.scale, &mut rng)?;
            o.row.extras.insert("bz_system".into(), p.bz_system);
            o.row.extras.insert("bx_system".into(), p.bx_system);
            o.row.extras.insert("coupling_scale".into(), case.scale);
            o.row.extras.insert("jz_sb".into(), p.jz_sb);
            o.row.extras.insert("jx_sb".into(), p.jx_sb);
            o.row.extras.insert("initial_index".into(), index);
            out.push(o);
        }
    }
    Ok(())
}

/// Runs `f` on a dedicated pool of `threads` workers, with the dense
/// linear algebra limited to the same count.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Err(Error::param("thread count must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Construction(format!("thread pool: {e}")))?;
    let previous = faer::get_global_parallelism();
    faer::set_global_parallelism(if threads == 1 { faer::Par::Seq } else { faer::Par::rayon(threads) });
    let out = pool.install(f);
    faer::set_global_parallelism(previous);
    Ok(out)
}

/// Runs every instance of `spec` in a deterministic order.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunReport> {
    spec.validate()?;
    spec.check_budget()?;
    let body = || -> Result<Vec<Outcome>> {
        let mut out = Vec::new();
        match &spec.model {
            ModelSpec::Rmt(r) => run_rmt(spec, r, opts, &mut out)?,
            ModelSpec::SpinChain(c) => run_chain(spec, c, opts, &mut out)?,
        }
        Ok(out)
    };
    let mut outcomes = match opts.threads {
        Some(t) => with_threads(t, body)??,
        None => body()?,
    };
    outcomes.sort_by(|a, b| a.row.instance.cmp(&b.row.instance));
    let mut report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: spec.kind,
        spec: spec.clone(),
        rows: Vec::new(),
        series: Vec::new(),
        profiles: Vec::new(),
        provenance: Provenance {
            seed: spec.ensemble.seed,
            config_hash: spec.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            central_window: format!(
                "middle {} of the energy range (by energy, not by level count)",
                spec.analysis.central_fraction
            ),
        },
    };
    for o in outcomes {
        report.rows.push(o.row);
        report.series.extend(o.series);
        report.profiles.extend(o.profiles);
    }
    Ok(report)
}

/// Which correlator a tuple probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelatorKind {
    /// `⟨c_μ(α₀) c_ν(β₀) c_μ(α) c_ν(β)⟩` with `ν = μ + nu_offset`.
    OffDiagonal { nu_offset: i64 },
    /// `⟨c_μ(α) c_μ(β) c_μ(α′) c_μ(β′)⟩`.
    Diagonal,
}

/// Index tuple relative to the level `μ`: basis index `μ + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleTuple {
    pub kind: CorrelatorKind,
    pub offsets: [i64; 4],
}

/// The tuples probed by [`oracle_check`]: every delta structure of both
/// correlators, including the two negative orthogonality corrections and
/// tuples whose expectation vanishes.
pub fn default_oracle_tuples() -> Vec<OracleTuple> {
    let off = |offsets| OracleTuple {
        kind: CorrelatorKind::OffDiagonal { nu_offset: 3 },
        offsets,
    };
    let diag = |offsets| OracleTuple {
        kind: CorrelatorKind::Diagonal,
        offsets,
    };
    vec![
        off([0, 3, 0, 3]),
        off([2, -1, 2, -1]),
        off([-4, 6, -4, 6]),
        off([0, 0, 0, 0]),
        off([1, 1, 1, 1]),
        off([3, 3, 3, 3]),
        off([0, 0, 3, 3]),
        off([0, 3, 3, 0]),
        off([-2, -2, 5, 5]),
        off([1, 2, 2, 1]),
        off([0, 1, 2, 3]),
        off([0, 0, 1, 2]),
        diag([0, 0, 0, 0]),
        diag([5, 5, 5, 5]),
        diag([-1, -1, -1, -1]),
        diag([0, 0, 2, 2]),
        diag([0, 2, 0, 2]),
        diag([0, 2, 2, 0]),
        diag([1, 1, -3, -3]),
        diag([0, 1, 2, 3]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSpec {
    pub dimension: usize,
    pub realizations: usize,
    pub seed: u64,
    /// GOE coupling; default puts `Γ` at five level spacings.
    pub coupling: Option<f64>,
    /// Pass threshold in standard errors.
    pub tolerance_se: f64,
    /// Slide every tuple across the middle half of the spectrum and pool,
    /// instead of sampling it at the central level only.
    pub pool: bool,
    pub tuples: Vec<OracleTuple>,
}

impl OracleSpec {
    pub fn new(dimension: usize, realizations: usize, seed: u64) -> Self {
        Self {
            dimension,
            realizations,
            seed,
            coupling: None,
            tolerance_se: 5.0,
            pool: false,
            tuples: default_oracle_tuples(),
        }
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
            .unwrap_or_else(|| (5.0 / (std::f64::consts::PI * self.dimension as f64)).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub tuple: OracleTuple,
    pub theory: f64,
    pub empirical: f64,
    pub standard_error: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub dimension: usize,
    pub realizations: usize,
    pub coupling: f64,
    pub gamma: f64,
    /// Levels `μ` pooled per realization.
    pub pooled_levels: usize,
    pub rows: Vec<OracleRow>,
    pub passed: bool,
}

/// Compares empirical four-point overlap correlators of GOE-perturbed
/// spectra with the closed forms, tuple by tuple at the central level. With
/// `pool` the tuple is also slid across the middle half of the spectrum
/// within each realization. Realizations are independent, so the spread of
/// their means gives the standard error either way.
pub fn oracle_check(spec: &OracleSpec) -> Result<OracleReport> {
    if spec.realizations < 2 {
        return Err(Error::param("oracle check needs at least two realizations"));
    }
    if spec.tuples.is_empty() {
        return Err(Error::param("oracle check needs at least one tuple"));
    }
    let n = spec.dimension;
    let g = spec.coupling();
    let reach = spec
        .tuples
        .iter()
        .flat_map(|t| {
            let nu = match t.kind {
                CorrelatorKind::OffDiagonal { nu_offset } => nu_offset,
                CorrelatorKind::Diagonal => 0,
            };
            t.offsets.into_iter().chain([nu])
        })
        .map(i64::abs)
        .max()
        .unwrap_or(0) as usize;
    let (lo, hi) = if spec.pool {
        (n / 4 + reach, (3 * n / 4).saturating_sub(reach))
    } else {
        (n / 2, n / 2 + 1)
    };
    if lo >= hi || lo < reach || hi + reach > n {
        return Err(Error::param(format!("dimension {n} too small for tuple offsets up to {reach}")));
    }
    let params = RmtParams::new(n, g, spec.seed)?;
    let h0 = params.h0_energies();
    let fam = LorentzianFamily::new(params.omega0(), params.gamma())?;
    let at = |m: usize, k: i64| (m as i64 + k) as usize;

    // Per realization and tuple: (empirical mean, theory mean) over levels.
    let per_real: Vec<Vec<(f64, f64)>> = (0..spec.realizations as u64)
        .map(|r| -> Result<Vec<(f64, f64)>> {
            let model = build_rmt_model(params.with_realization(r))?;
            let eig = diagonalize(&model.hamiltonian(), BasisTag::NonInteracting)?;
            let v = eig.vectors();
            let e = eig.energies();
            spec.tuples
                .iter()
                .map(|t| {
                    let mut emp = 0.0;
                    let mut th = 0.0;
                    for m in lo..hi {
                        let o = t.offsets;
                        let idx = [at(m, o[0]), at(m, o[1]), at(m, o[2]), at(m, o[3])];
                        match t.kind {
                            CorrelatorKind::OffDiagonal { nu_offset } => {
                                let nu = at(m, nu_offset);
                                emp += v[(idx[0], m)] * v[(idx[1], nu)] * v[(idx[2], m)] * v[(idx[3], nu)];
                                th += four_point_offdiag(&fam, e[m], e[nu], &h0, idx)?;
                            }
                            CorrelatorKind::Diagonal => {
                                emp += v[(idx[0], m)] * v[(idx[1], m)] * v[(idx[2], m)] * v[(idx[3], m)];
                                th += four_point_diag(&fam, e[m], &h0, idx)?;
                            }
                        }
                    }
                    let k = (hi - lo) as f64;
                    Ok((emp / k, th / k))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let r = spec.realizations as f64;
    let rows: Vec<OracleRow> = spec
        .tuples
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let emp: Vec<f64> = per_real.iter().map(|x| x[j].0).collect();
            let mean = emp.iter().sum::<f64>() / r;
            let var = emp.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
            let se = (var / r).sqrt();
            let theory = per_real.iter().map(|x| x[j].1).sum::<f64>() / r;
            let z = if se > 0.0 { (mean - theory) / se } else { f64::INFINITY };
            OracleRow {
                tuple: *t,
                theory,
                empirical: mean,
                standard_error: se,
                z,
                pass: z.abs() <= spec.tolerance_se,
            }
        })
        .collect();
    Ok(OracleReport {
        dimension: n,
        realizations: spec.realizations,
        coupling: g,
        gamma: params.gamma(),
        pooled_levels: hi - lo,
        passed: rows.iter().all(|x| x.pass),
        rows,
    })
}
