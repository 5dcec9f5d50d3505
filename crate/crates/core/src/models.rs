//! Model Hamiltonians, synthetic observables and initial states.

use std::collections::BTreeMap;

use faer::Mat;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::hilbert::{
    operator_product_sum, BasisTag, PauliKind, PauliTerm, SparseHermitian, Spin, SpinBasis,
    StateVector,
};
use crate::rng;
use crate::spectral::EigenSystem;
use crate::theory::SystemField;

/// Parameters of the banded random-matrix model `H = H0 + V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmtParams {
    dimension: usize,
    coupling: f64,
    seed: u64,
    realization: u64,
}

impl RmtParams {
    pub fn new(dimension: usize, coupling: f64, seed: u64) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::param(format!("dimension must be >= 2, got {dimension}")));
        }
        if !(coupling >= 0.0 && coupling.is_finite()) {
            return Err(Error::param(format!("coupling must be finite and >= 0, got {coupling}")));
        }
        Ok(Self {
            dimension,
            coupling,
            seed,
            realization: 0,
        })
    }

    pub fn with_realization(mut self, realization: u64) -> Self {
        self.realization = realization;
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn realization(&self) -> u64 {
        self.realization
    }

    pub fn omega0(&self) -> f64 {
        1.0 / self.dimension as f64
    }

    /// Decay width `πg²/(Nω₀)`, which reduces to `πg²`.
    pub fn gamma(&self) -> f64 {
        std::f64::consts::PI * self.coupling.powi(2) / (self.dimension as f64 * self.omega0())
    }

    /// Non-interacting energies `αω₀`, `α = 1..=N`.
    pub fn h0_energies(&self) -> Vec<f64> {
        let w = self.omega0();
        (1..=self.dimension).map(|a| a as f64 * w).collect()
    }
}

/// Samples a GOE matrix with off-diagonal variance `g²/N` and diagonal
/// variance `2g²/N`. Entries are drawn row by row over the upper triangle.
pub fn sample_goe(n: usize, g: f64, seed: u64, realization: u64) -> Result<Mat<f64>> {
    if n < 2 {
        return Err(Error::param(format!("GOE dimension must be >= 2, got {n}")));
    }
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::param(format!("coupling must be finite and >= 0, got {g}")));
    }
    let mut rng = rng::stream(seed, realization);
    let sigma = g / (n as f64).sqrt();
    let sigma_diag = sigma * std::f64::consts::SQRT_2;
    let mut m = Mat::<f64>::zeros(n, n);
    for r in 0..n {
        for c in r..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            if r == c {
                m[(r, r)] = sigma_diag * z;
            } else {
                m[(r, c)] = sigma * z;
                m[(c, r)] = sigma * z;
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct RmtModel {
    pub params: RmtParams,
    pub h0_energies: Vec<f64>,
    pub perturbation: Mat<f64>,
}

impl RmtModel {
    /// Dense `H0 + V`.
    pub fn hamiltonian(&self) -> Mat<f64> {
        let mut h = self.perturbation.clone();
        for (i, e) in self.h0_energies.iter().enumerate() {
            h[(i, i)] += e;
        }
        h
    }
}

pub fn build_rmt_model(params: RmtParams) -> Result<RmtModel> {
    let perturbation = sample_goe(
        params.dimension,
        params.coupling,
        params.seed,
        params.realization,
    )?;
    Ok(RmtModel {
        params,
        h0_energies: params.h0_energies(),
        perturbation,
    })
}

/// Default bath site coupled to the system spin.
pub const DEFAULT_COUPLED_SITE: usize = 5;

/// Fields and couplings of the system-plus-bath spin chain. Site 1 is the
/// system spin, sites `2..=N` form an open bath chain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SpinChainParams {
    pub n_spins: usize,
    pub bz_system: f64,
    pub bx_system: f64,
    pub bz_bath: f64,
    pub bx_bath: f64,
    pub jz: f64,
    pub jx: f64,
    pub jz_sb: f64,
    pub jx_sb: f64,
    pub coupled_site: usize,
}

impl SpinChainParams {
    /// Parameter set with Ising bath coupling `J_z = 0.1`.
    pub fn standard(n_spins: usize) -> Self {
        Self {
            n_spins,
            bz_system: 0.8,
            bx_system: 0.0,
            bz_bath: 0.0,
            bx_bath: 0.3,
            jz: 0.1,
            jx: 1.0,
            jz_sb: 0.2,
            jx_sb: 0.4,
            coupled_site: default_coupled_site(n_spins),
        }
    }

    /// As [`SpinChainParams::standard`] but with `J_z = 0`.
    pub fn xx_bath(n_spins: usize) -> Self {
        Self {
            jz: 0.0,
            ..Self::standard(n_spins)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_spins < 2 || self.n_spins > 30 {
            return Err(Error::param(format!(
                "n_spins must be in 2..=30, got {}",
                self.n_spins
            )));
        }
        if self.coupled_site < 2 || self.coupled_site > self.n_spins {
            return Err(Error::param(format!(
                "coupled_site must be in 2..={}, got {}",
                self.n_spins, self.coupled_site
            )));
        }
        let values = [
            self.bz_system,
            self.bx_system,
            self.bz_bath,
            self.bx_bath,
            self.jz,
            self.jx,
            self.jz_sb,
            self.jx_sb,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("spin-chain fields and couplings must be finite"));
        }
        Ok(())
    }

    pub fn system_field(&self) -> SystemField {
        SystemField::new(self.bz_system, self.bx_system)
    }

    /// Scales both system-bath couplings by `factor`.
    pub fn with_coupling_scale(mut self, factor: f64) -> Self {
        self.jz_sb *= factor;
        self.jx_sb *= factor;
        self
    }
}

/// `min(5, N)`, with a warning when clamped.
pub fn default_coupled_site(n_spins: usize) -> usize {
    if n_spins < DEFAULT_COUPLED_SITE {
        log::warn!(
            "chain of {n_spins} spins is shorter than the default coupled site {DEFAULT_COUPLED_SITE}; coupling to site {n_spins}"
        );
        n_spins
    } else {
        DEFAULT_COUPLED_SITE
    }
}

#[derive(Debug, Clone)]
pub struct SpinChain {
    pub params: SpinChainParams,
    pub basis: SpinBasis,
    pub h_s: SparseHermitian,
    pub h_b: SparseHermitian,
    pub h_sb: SparseHermitian,
    pub h0: SparseHermitian,
    pub h: SparseHermitian,
}

fn bath_terms(p: &SpinChainParams, offset: usize) -> Vec<PauliTerm> {
    // `offset` shifts full-chain site labels onto the target basis.
    let site = |j: usize| j - offset;
    let mut terms = Vec::new();
    for j in 2..=p.n_spins {
        terms.push(PauliTerm::new(p.bz_bath, [(PauliKind::Z, site(j))]));
        terms.push(PauliTerm::new(p.bx_bath, [(PauliKind::X, site(j))]));
    }
    for j in 2..p.n_spins {
        terms.push(PauliTerm::new(
            p.jz,
            [(PauliKind::Z, site(j)), (PauliKind::Z, site(j + 1))],
        ));
        terms.push(PauliTerm::new(
            p.jx,
            [(PauliKind::Plus, site(j)), (PauliKind::Minus, site(j + 1))],
        ));
        terms.push(PauliTerm::new(
            p.jx,
            [(PauliKind::Minus, site(j)), (PauliKind::Plus, site(j + 1))],
        ));
    }
    terms
}

pub fn build_spin_chain(params: SpinChainParams) -> Result<SpinChain> {
    params.validate()?;
    let basis = SpinBasis::new(params.n_spins)?;
    let h_s = operator_product_sum(
        &[
            PauliTerm::new(params.bz_system, [(PauliKind::Z, 1)]),
            PauliTerm::new(params.bx_system, [(PauliKind::X, 1)]),
        ],
        &basis,
    )?;
    let h_b = operator_product_sum(&bath_terms(&params, 0), &basis)?;
    let m = params.coupled_site;
    let h_sb = operator_product_sum(
        &[
            PauliTerm::new(params.jz_sb, [(PauliKind::Z, 1), (PauliKind::Z, m)]),
            PauliTerm::new(params.jx_sb, [(PauliKind::Plus, 1), (PauliKind::Minus, m)]),
            PauliTerm::new(params.jx_sb, [(PauliKind::Minus, 1), (PauliKind::Plus, m)]),
        ],
        &basis,
    )?;
    let h0 = h_s.add(&h_b)?;
    let h = h0.add(&h_sb)?;
    Ok(SpinChain {
        params,
        basis,
        h_s,
        h_b,
        h_sb,
        h0,
        h,
    })
}

impl SpinChain {
    /// Bath Hamiltonian acting on the `N − 1` bath spins alone.
    pub fn bath_hamiltonian(&self) -> Result<SparseHermitian> {
        let basis = SpinBasis::new(self.params.n_spins - 1)?;
        operator_product_sum(&bath_terms(&self.params, 1), &basis)
    }

    pub fn bath_dimension(&self) -> usize {
        self.basis.dimension() / 2
    }
}

/// Sparse observable together with its band structure.
///
/// `bands` maps a band label `n` to the energy offset `E_n` of that band.
/// When `energies` is present every stored entry `(r, c)` must satisfy
/// `E_c − E_r = E_n` for one declared band; otherwise the label is the index
/// offset `c − r`.
#[derive(Debug, Clone)]
pub struct ObservableMatrix {
    matrix: SparseHermitian,
    basis: BasisTag,
    bands: BTreeMap<i64, f64>,
    energies: Option<Vec<f64>>,
}

impl ObservableMatrix {
    pub fn new(
        matrix: SparseHermitian,
        basis: BasisTag,
        bands: BTreeMap<i64, f64>,
        energies: Option<Vec<f64>>,
    ) -> Result<Self> {
        if let Some(e) = &energies {
            check_dim(matrix.dimension(), e.len())?;
        }
        let obs = Self {
            matrix,
            basis,
            bands,
            energies,
        };
        for (r, c, v) in obs.matrix.iter_upper() {
            if obs.band_of(r, c).is_none() {
                return Err(Error::Construction(format!(
                    "entry ({r}, {c}) = {v} lies on no declared band"
                )));
            }
        }
        Ok(obs)
    }

    /// Observable with no band metadata, treated as a single diagonal band.
    /// Only valid for diagonal matrices.
    pub fn diagonal(values: &[f64], basis: BasisTag, energies: Option<Vec<f64>>) -> Result<Self> {
        Self::new(
            SparseHermitian::from_diagonal(values),
            basis,
            BTreeMap::from([(0, 0.0)]),
            energies,
        )
    }

    pub fn matrix(&self) -> &SparseHermitian {
        &self.matrix
    }

    pub fn basis(&self) -> BasisTag {
        self.basis
    }

    pub fn dimension(&self) -> usize {
        self.matrix.dimension()
    }

    pub fn bands(&self) -> &BTreeMap<i64, f64> {
        &self.bands
    }

    /// Number of declared bands `N_O`.
    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn energies(&self) -> Option<&[f64]> {
        self.energies.as_deref()
    }

    /// Band label of entry `(row, col)`, if it lies on a declared band.
    pub fn band_of(&self, row: usize, col: usize) -> Option<i64> {
        match &self.energies {
            Some(e) => {
                let gap = e[col] - e[row];
                let scale = e.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                self.bands
                    .iter()
                    .find(|(_, &en)| (en - gap).abs() <= 1e-9 * scale)
                    .map(|(&n, _)| n)
            }
            None => {
                let n = col as i64 - row as i64;
                self.bands.contains_key(&n).then_some(n)
            }
        }
    }
}

/// The two diagonal parity observables on the energy-ordered RMT basis:
/// `O_odd = diag(1, 0, 1, 0, ...)` and `O_sym = diag(1, −1, 1, −1, ...)`.
pub fn make_parity_observables(n: usize) -> Result<(ObservableMatrix, ObservableMatrix)> {
    let params = RmtParams::new(n, 0.0, 0)?;
    let odd: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let sym: Vec<f64> = odd.iter().map(|v| 2.0 * v - 1.0).collect();
    let e = params.h0_energies();
    Ok((
        ObservableMatrix::diagonal(&odd, BasisTag::NonInteracting, Some(e.clone()))?,
        ObservableMatrix::diagonal(&sym, BasisTag::NonInteracting, Some(e))?,
    ))
}

/// `σ_z` on the system spin in the computational basis of the full chain.
pub fn system_sigma_z(chain: &SpinChain) -> Result<ObservableMatrix> {
    let basis = chain.basis;
    let values: Vec<f64> = (0..basis.dimension())
        .map(|i| match basis.spin(i, 1) {
            Spin::Up => 1.0,
            Spin::Down => -1.0,
        })
        .collect();
    ObservableMatrix::diagonal(&values, BasisTag::Computational, None)
}

/// Eigenbasis of `H0 = H_S + H_B`: product states `|s⟩_S|φ_b⟩_B` ordered
/// by energy.
#[derive(Debug, Clone)]
pub struct NonInteractingBasis {
    field: SystemField,
    energies: Vec<f64>,
    labels: Vec<(usize, usize)>,
}

impl NonInteractingBasis {
    pub fn new(field: SystemField, bath: &EigenSystem) -> Result<Self> {
        let states = field.eigenstates()?;
        let mut entries: Vec<(f64, (usize, usize))> = Vec::with_capacity(2 * bath.dimension());
        for (s, (es, _)) in states.iter().enumerate() {
            for (b, eb) in bath.energies().iter().enumerate() {
                entries.push((es + eb, (s, b)));
            }
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(Self {
            field,
            energies: entries.iter().map(|e| e.0).collect(),
            labels: entries.iter().map(|e| e.1).collect(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// `(system eigenstate, bath eigenstate)` label of each basis index.
    pub fn labels(&self) -> &[(usize, usize)] {
        &self.labels
    }

    /// `σ_z` of the system spin in this basis. Bands are labelled by the
    /// system gap: `0` for diagonal, `±1` for `∓2E` jumps when `B_x ≠ 0`.
    pub fn sigma_z(&self) -> Result<ObservableMatrix> {
        let states = self.field.eigenstates()?;
        let sz = |s: usize, t: usize| {
            let (a, b) = (states[s].1, states[t].1);
            a[0] * b[0] - a[1] * b[1]
        };
        let mut by_bath: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, &(s, b)) in self.labels.iter().enumerate() {
            by_bath.entry(b).or_default().push((i, s));
        }
        let mut triplets = Vec::new();
        for members in by_bath.values() {
            for &(i, s) in members {
                for &(j, t) in members {
                    if i <= j {
                        let v = sz(s, t);
                        if v.abs() > 1e-15 {
                            triplets.push((i, j, v));
                        }
                    }
                }
            }
        }
        let matrix = SparseHermitian::from_triplets(self.dimension(), triplets)?;
        let gap = states[0].0 - states[1].0;
        let mut bands = BTreeMap::from([(0, 0.0)]);
        if self.field.bx != 0.0 {
            bands.insert(1, -gap);
            bands.insert(-1, gap);
        }
        ObservableMatrix::new(
            matrix,
            BasisTag::NonInteracting,
            bands,
            Some(self.energies.clone()),
        )
    }

    /// Weights `|⟨s, b|ψ⟩|²` of the product state with system amplitudes
    /// `system` (in the `↑, ↓` basis) and bath amplitudes `bath` given in the
    /// bath eigenbasis.
    pub fn product_weights(&self, system: [f64; 2], bath_eigen_amplitudes: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dimension() / 2, bath_eigen_amplitudes.len())?;
        let states = self.field.eigenstates()?;
        Ok(self
            .labels
            .iter()
            .map(|&(s, b)| {
                let v = states[s].1;
                let a = v[0] * system[0] + v[1] * system[1];
                (a * bath_eigen_amplitudes[b]).powi(2)
            })
            .collect())
    }
}

/// Recipe for an initial state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialStateSpec {
    /// Basis vector `e_α` (0-based) of the RMT model.
    RmtBasisState(usize),
    /// `|↑⟩_S ⊗ |φ_α⟩_B` with `φ_α` the `α`-th (0-based) bath eigenstate.
    SystemUpBathEigenstate(usize),
    /// Computational-basis product state, one spin per site.
    ProductPattern(Vec<Spin>),
}

pub fn initial_state(
    spec: &InitialStateSpec,
    dimension: usize,
    bath: Option<&EigenSystem>,
) -> Result<StateVector> {
    match spec {
        InitialStateSpec::RmtBasisState(a) => StateVector::basis_state(dimension, *a),
        InitialStateSpec::SystemUpBathEigenstate(a) => {
            let bath = bath.ok_or_else(|| {
                Error::param("bath eigenstate initial state requires a bath eigensystem")
            })?;
            check_dim(dimension, 2 * bath.dimension())?;
            if *a >= bath.dimension() {
                return Err(Error::param(format!(
                    "bath eigenstate index {a} out of range 0..{}",
                    bath.dimension()
                )));
            }
            let mut amps = vec![0.0; dimension];
            for (i, v) in amps.iter_mut().take(bath.dimension()).enumerate() {
                *v = bath.vectors()[(i, *a)];
            }
            StateVector::normalized(amps)
        }
        InitialStateSpec::ProductPattern(config) => {
            let basis = SpinBasis::new(config.len())?;
            check_dim(dimension, basis.dimension())?;
            StateVector::basis_state(dimension, basis.index_of(config)?)
        }
    }
}

/// Parses a pattern such as `"UDDD"` or `"↑↓↓"`.
pub fn parse_spin_pattern(pattern: &str) -> Result<Vec<Spin>> {
    pattern
        .chars()
        .map(|ch| match ch {
            'u' | 'U' | '↑' => Ok(Spin::Up),
            'd' | 'D' | '↓' => Ok(Spin::Down),
            other => Err(Error::param(format!("invalid spin character {other:?} in pattern"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{expectation, pauli_operator};
    use crate::spectral::diagonalize_sparse;

    #[test]
    fn goe_moments() {
        let (n, g) = (100, 0.3);
        let mut off = Vec::new();
        let mut diag = Vec::new();
        for k in 0..20 {
            let m = sample_goe(n, g, 11, k).unwrap();
            for r in 0..n {
                diag.push(m[(r, r)]);
                for c in r + 1..n {
                    off.push(m[(r, c)]);
                }
            }
        }
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var, n)
        };
        let target = g * g / n as f64;
        let (mean, var, cnt) = stats(&off);
        assert!(mean.abs() < 5.0 * (target / cnt).sqrt());
        assert!((var - target).abs() < 5.0 * target * (2.0 / cnt).sqrt());
        let (mean, var, cnt) = stats(&diag);
        assert!(mean.abs() < 5.0 * (2.0 * target / cnt).sqrt());
        assert!((var - 2.0 * target).abs() < 5.0 * 2.0 * target * (2.0 / cnt).sqrt());
    }

    #[test]
    fn goe_is_symmetric_reproducible_and_zero_at_zero_coupling() {
        let a = sample_goe(30, 0.1, 5, 2).unwrap();
        let b = sample_goe(30, 0.1, 5, 2).unwrap();
        let c = sample_goe(30, 0.1, 5, 3).unwrap();
        let mut differs = false;
        for r in 0..30 {
            for col in 0..30 {
                assert_eq!(a[(r, col)].to_bits(), b[(r, col)].to_bits());
                assert_eq!(a[(r, col)], a[(col, r)]);
                differs |= a[(r, col)] != c[(r, col)];
            }
        }
        assert!(differs);
        let z = sample_goe(10, 0.0, 1, 0).unwrap();
        assert!((0..10).all(|r| (0..10).all(|c| z[(r, c)] == 0.0)));
        assert!(sample_goe(1, 0.1, 0, 0).is_err());
    }

    #[test]
    fn rmt_model_grid_and_width() {
        let p = RmtParams::new(4, 0.1, 0).unwrap();
        assert_eq!(p.h0_energies(), vec![0.25, 0.5, 0.75, 1.0]);
        assert!((p.gamma() - 0.031_415_926_535_897_93).abs() < 1e-15);
        let m = build_rmt_model(RmtParams::new(6, 0.0, 3).unwrap()).unwrap();
        let h = m.hamiltonian();
        for r in 0..6 {
            for c in 0..6 {
                let expected = if r == c { (r + 1) as f64 / 6.0 } else { 0.0 };
                assert!((h[(r, c)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parity_observables() {
        let (odd, sym) = make_parity_observables(6).unwrap();
        assert_eq!(odd.matrix().diagonal(), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let d = sym.matrix().diagonal();
        assert_eq!(d, vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        assert!(d.iter().all(|v| v * v == 1.0));
        let two_odd_minus_one: Vec<f64> = odd.matrix().diagonal().iter().map(|v| 2.0 * v - 1.0).collect();
        assert_eq!(two_odd_minus_one, d);
        assert_eq!(odd.n_bands(), 1);
    }

    #[test]
    fn chain_without_couplings_is_diagonal_field_sum() {
        let p = SpinChainParams {
            n_spins: 3,
            bz_system: 0.7,
            bx_system: 0.0,
            bz_bath: 0.2,
            bx_bath: 0.0,
            jz: 0.0,
            jx: 0.0,
            jz_sb: 0.0,
            jx_sb: 0.0,
            coupled_site: 3,
        };
        let chain = build_spin_chain(p).unwrap();
        assert!(chain.h.is_diagonal());
        let d = chain.h.diagonal();
        for (i, v) in d.iter().enumerate() {
            let expected: f64 = chain
                .basis
                .config_of(i)
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let sign = if *s == Spin::Up { 1.0 } else { -1.0 };
                    sign * if k == 0 { 0.7 } else { 0.2 }
                })
                .sum();
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn xx_bath_parameter_set_builds() {
        let p = SpinChainParams::xx_bath(8);
        assert_eq!(p.coupled_site, 5);
        let chain = build_spin_chain(p).unwrap();
        assert_eq!(chain.h.dimension(), 256);
        assert_eq!(chain.bath_hamiltonian().unwrap().dimension(), 128);
    }

    #[test]
    fn system_sigma_z_commutes_with_h0_without_transverse_field() {
        let chain = build_spin_chain(SpinChainParams::standard(5)).unwrap();
        let sz = pauli_operator(PauliKind::Z, 1, &chain.basis).unwrap();
        let h0 = chain.h0.to_operator();
        let comm = sz.matmul(&h0).unwrap().add(&h0.matmul(&sz).unwrap().scale((-1.0).into())).unwrap();
        assert!(comm.iter().all(|(_, _, v)| v.norm() < 1e-14));
        let chain = build_spin_chain(SpinChainParams {
            bx_system: 0.5,
            ..SpinChainParams::standard(5)
        })
        .unwrap();
        let h0 = chain.h0.to_operator();
        let comm = sz.matmul(&h0).unwrap().add(&h0.matmul(&sz).unwrap().scale((-1.0).into())).unwrap();
        assert!(comm.iter().any(|(_, _, v)| v.norm() > 1e-3));
    }

    #[test]
    fn chain_operators_are_symmetric() {
        let chain = build_spin_chain(SpinChainParams::standard(6)).unwrap();
        for m in [&chain.h, &chain.h0, &chain.h_sb] {
            let d = m.to_dense();
            for r in 0..d.nrows() {
                for c in 0..d.ncols() {
                    assert_eq!(d[(r, c)], d[(c, r)]);
                }
            }
        }
    }

    #[test]
    fn coupled_site_is_validated_and_clamped() {
        let mut p = SpinChainParams::standard(6);
        p.coupled_site = 7;
        assert!(build_spin_chain(p).is_err());
        p.coupled_site = 1;
        assert!(build_spin_chain(p).is_err());
        assert_eq!(SpinChainParams::standard(3).coupled_site, 3);
    }

    #[test]
    fn initial_states() {
        let s = initial_state(&InitialStateSpec::RmtBasisState(2), 5, None).unwrap();
        assert_eq!(s.amplitudes(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(initial_state(&InitialStateSpec::RmtBasisState(5), 5, None).is_err());

        let pattern = parse_spin_pattern("UDD").unwrap();
        let s = initial_state(&InitialStateSpec::ProductPattern(pattern), 8, None).unwrap();
        assert_eq!(s.amplitudes()[0b011], 1.0);

        let chain = build_spin_chain(SpinChainParams::standard(5)).unwrap();
        let bath = diagonalize_sparse(&chain.bath_hamiltonian().unwrap(), BasisTag::Computational).unwrap();
        assert!(initial_state(&InitialStateSpec::SystemUpBathEigenstate(0), 32, None).is_err());
        let s = initial_state(&InitialStateSpec::SystemUpBathEigenstate(7), 32, Some(&bath)).unwrap();
        let norm: f64 = s.amplitudes().iter().map(|a| a * a).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        let sz = system_sigma_z(&chain).unwrap();
        assert!((expectation(&s, sz.matrix()).unwrap() - 1.0).abs() < 1e-12);
        assert!(parse_spin_pattern("UX").is_err());
    }

    #[test]
    fn off_band_entries_are_rejected() {
        let m = SparseHermitian::from_triplets(4, [(0, 2, 1.0)]).unwrap();
        let bands = BTreeMap::from([(0, 0.0), (1, 1.0)]);
        assert!(ObservableMatrix::new(m.clone(), BasisTag::NonInteracting, bands.clone(), None).is_err());
        let bands = BTreeMap::from([(2, 0.0)]);
        assert!(ObservableMatrix::new(m, BasisTag::NonInteracting, bands, None).is_ok());
    }

    #[test]
    fn non_interacting_sigma_z_matches_computational() {
        // O in the H0 basis, rotated back, must equal σ_z^(1).
        let p = SpinChainParams {
            bx_system: 0.6,
            ..SpinChainParams::standard(4)
        };
        let chain = build_spin_chain(p).unwrap();
        let bath = diagonalize_sparse(&chain.bath_hamiltonian().unwrap(), BasisTag::Computational).unwrap();
        let nib = NonInteractingBasis::new(p.system_field(), &bath).unwrap();
        let o = nib.sigma_z().unwrap();
        assert_eq!(o.n_bands(), 3);
        let h0 = diagonalize_sparse(&chain.h0, BasisTag::Computational).unwrap();
        for (a, b) in h0.energies().iter().zip(nib.energies()) {
            assert!((a - b).abs() < 1e-10);
        }
        let states = p.system_field().eigenstates().unwrap();
        let db = bath.dimension();
        let vec_of = |i: usize| -> Vec<f64> {
            let (s, b) = nib.labels()[i];
            let mut v = vec![0.0; 2 * db];
            for k in 0..db {
                v[k] = states[s].1[0] * bath.vectors()[(k, b)];
                v[db + k] = states[s].1[1] * bath.vectors()[(k, b)];
            }
            v
        };
        let sz = system_sigma_z(&chain).unwrap();
        for i in [0, 3, 7, 12] {
            for j in 0..2 * db {
                let vi = vec_of(i);
                let vj = vec_of(j);
                let ov = sz.matrix().matvec(&vj).unwrap();
                let direct: f64 = vi.iter().zip(&ov).map(|(a, b)| a * b).sum();
                assert!((direct - o.matrix().get(i, j)).abs() < 1e-12);
            }
        }
    }
}
