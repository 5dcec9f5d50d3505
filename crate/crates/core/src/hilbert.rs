//! Many-spin operators and states in the tensor-product basis.
//!
//! Basis convention: index `i` of a `2^n` dimensional space encodes the spin
//! configuration bit-wise with site 1 stored in the most significant bit. A
//! zero bit is spin up (`σ_z = +1`), a one bit is spin down. Index 0 is the
//! all-up state.

use std::collections::BTreeMap;

use faer::Mat;
use num_complex::Complex64;

use crate::error::{check_dim, Error, Result};

/// Which basis the rows of a matrix or the entries of a state refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisTag {
    /// Eigenbasis of the non-interacting Hamiltonian `H0`.
    NonInteracting,
    /// Spin-configuration product basis.
    Computational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spin {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpinBasis {
    n_spins: usize,
}

impl SpinBasis {
    pub fn new(n_spins: usize) -> Result<Self> {
        if n_spins == 0 || n_spins > 30 {
            return Err(Error::param(format!("n_spins must be in 1..=30, got {n_spins}")));
        }
        Ok(Self { n_spins })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dimension(&self) -> usize {
        1 << self.n_spins
    }

    /// Bit position of a 1-based site.
    fn bit(&self, site: usize) -> usize {
        self.n_spins - site
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site == 0 || site > self.n_spins {
            return Err(Error::param(format!(
                "site {site} out of range 1..={}",
                self.n_spins
            )));
        }
        Ok(())
    }

    pub fn spin(&self, index: usize, site: usize) -> Spin {
        if index >> self.bit(site) & 1 == 0 {
            Spin::Up
        } else {
            Spin::Down
        }
    }

    pub fn index_of(&self, config: &[Spin]) -> Result<usize> {
        check_dim(self.n_spins, config.len())?;
        Ok(config.iter().fold(0, |acc, s| (acc << 1) | usize::from(*s == Spin::Down)))
    }

    pub fn config_of(&self, index: usize) -> Vec<Spin> {
        (1..=self.n_spins).map(|site| self.spin(index, site)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PauliKind {
    X,
    Y,
    Z,
    Plus,
    Minus,
}

impl PauliKind {
    /// Action on a single basis bit: returns the new bit and amplitude, or
    /// `None` when the state is annihilated.
    fn act(self, bit: usize) -> Option<(usize, Complex64)> {
        let one = Complex64::new(1.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        match (self, bit) {
            (PauliKind::X, b) => Some((b ^ 1, one)),
            (PauliKind::Y, 0) => Some((1, i)),
            (PauliKind::Y, _) => Some((0, -i)),
            (PauliKind::Z, 0) => Some((0, one)),
            (PauliKind::Z, _) => Some((1, -one)),
            (PauliKind::Plus, 0) => None,
            (PauliKind::Plus, _) => Some((0, one)),
            (PauliKind::Minus, 0) => Some((1, one)),
            (PauliKind::Minus, _) => None,
        }
    }
}

/// Applies the operator string `factors` (rightmost factor acts first) to
/// basis state `index`.
fn apply_string(
    basis: &SpinBasis,
    factors: &[(PauliKind, usize)],
    index: usize,
) -> Option<(usize, Complex64)> {
    let mut state = index;
    let mut amp = Complex64::new(1.0, 0.0);
    for &(kind, site) in factors.iter().rev() {
        let shift = basis.bit(site);
        let (new_bit, a) = kind.act(state >> shift & 1)?;
        state = (state & !(1 << shift)) | (new_bit << shift);
        amp *= a;
    }
    Some((state, amp))
}

/// General sparse matrix with complex coefficients. Used for non-Hermitian
/// building blocks such as `σ_±` and for composing operators.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dimension: usize,
    entries: BTreeMap<(usize, usize), Complex64>,
}

impl SparseOperator {
    pub fn zeros(dimension: usize) -> Self {
        Self {
            dimension,
            entries: BTreeMap::new(),
        }
    }

    pub fn identity(dimension: usize) -> Self {
        Self {
            dimension,
            entries: (0..dimension).map(|i| ((i, i), Complex64::new(1.0, 0.0))).collect(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.entries.get(&(row, col)).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        self.entries.iter().map(|(&(r, c), &v)| (r, c, v))
    }

    fn accumulate(&mut self, row: usize, col: usize, value: Complex64) {
        let slot = self.entries.entry((row, col)).or_default();
        *slot += value;
        if *slot == Complex64::default() {
            self.entries.remove(&(row, col));
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.dimension, other.dimension)?;
        let mut out = self.clone();
        for (r, c, v) in other.iter() {
            out.accumulate(r, c, v);
        }
        Ok(out)
    }

    pub fn scale(&self, factor: Complex64) -> Self {
        let mut out = Self::zeros(self.dimension);
        for (r, c, v) in self.iter() {
            out.accumulate(r, c, v * factor);
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_dim(self.dimension, other.dimension)?;
        let mut by_row: BTreeMap<usize, Vec<(usize, Complex64)>> = BTreeMap::new();
        for (r, c, v) in other.iter() {
            by_row.entry(r).or_default().push((c, v));
        }
        let mut out = Self::zeros(self.dimension);
        for (r, k, a) in self.iter() {
            if let Some(row) = by_row.get(&k) {
                for &(c, b) in row {
                    out.accumulate(r, c, a * b);
                }
            }
        }
        Ok(out)
    }

    pub fn adjoint(&self) -> Self {
        Self {
            dimension: self.dimension,
            entries: self.iter().map(|(r, c, v)| ((c, r), v.conj())).collect(),
        }
    }

    /// Converts to real-symmetric storage, failing if any entry has an
    /// imaginary part or the matrix is not symmetric.
    pub fn to_real_symmetric(&self) -> Result<SparseHermitian> {
        let scale = self.entries.values().map(|v| v.norm()).fold(0.0, f64::max);
        let tol = 1e-12 * scale.max(1.0);
        let mut upper = BTreeMap::new();
        for (r, c, v) in self.iter() {
            if v.im.abs() > tol {
                return Err(Error::Construction(format!(
                    "entry ({r}, {c}) has imaginary part {:.3e}; only real-symmetric operators are supported",
                    v.im
                )));
            }
            let mirror = self.get(c, r);
            if (mirror.re - v.re).abs() > tol || (mirror.im + v.im).abs() > tol {
                return Err(Error::Construction(format!(
                    "operator is not Hermitian: ({r}, {c}) = {v}, ({c}, {r}) = {mirror}"
                )));
            }
            if r <= c && v.re != 0.0 {
                upper.insert((r, c), v.re);
            }
        }
        Ok(SparseHermitian {
            dimension: self.dimension,
            upper,
        })
    }
}

/// Real-symmetric sparse matrix; only the upper triangle (`row <= col`) is
/// stored and no stored entry is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHermitian {
    dimension: usize,
    upper: BTreeMap<(usize, usize), f64>,
}

impl SparseHermitian {
    pub fn zeros(dimension: usize) -> Self {
        Self {
            dimension,
            upper: BTreeMap::new(),
        }
    }

    pub fn identity(dimension: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dimension])
    }

    pub fn from_diagonal(values: &[f64]) -> Self {
        Self {
            dimension: values.len(),
            upper: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, &v)| ((i, i), v))
                .collect(),
        }
    }

    /// Builds from arbitrary `(row, col, value)` triplets. Each off-diagonal
    /// triplet sets both `(row, col)` and `(col, row)`; repeated positions
    /// accumulate.
    pub fn from_triplets(
        dimension: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut upper: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (r, c, v) in triplets {
            if r >= dimension || c >= dimension {
                return Err(Error::param(format!(
                    "entry ({r}, {c}) outside {dimension}x{dimension} matrix"
                )));
            }
            *upper.entry((r.min(c), r.max(c))).or_default() += v;
        }
        upper.retain(|_, v| *v != 0.0);
        Ok(Self { dimension, upper })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of stored (upper-triangle) entries.
    pub fn nnz_stored(&self) -> usize {
        self.upper.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.upper
            .get(&(row.min(col), row.max(col)))
            .copied()
            .unwrap_or(0.0)
    }

    /// Stored upper-triangle entries.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.upper.iter().map(|(&(r, c), &v)| (r, c, v))
    }

    /// All nonzero entries of the full matrix, both triangles.
    pub fn iter_full(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.iter_upper().flat_map(|(r, c, v)| {
            let mirror = (r != c).then_some((c, r, v));
            std::iter::once((r, c, v)).chain(mirror)
        })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dimension).map(|i| self.get(i, i)).collect()
    }

    pub fn is_diagonal(&self) -> bool {
        self.upper.keys().all(|(r, c)| r == c)
    }

    pub fn max_abs(&self) -> f64 {
        self.upper.values().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, 1.0)
    }

    pub fn add_scaled(&self, other: &Self, factor: f64) -> Result<Self> {
        check_dim(self.dimension, other.dimension)?;
        let mut upper = self.upper.clone();
        for (r, c, v) in other.iter_upper() {
            *upper.entry((r, c)).or_default() += factor * v;
        }
        upper.retain(|_, v| *v != 0.0);
        Ok(Self {
            dimension: self.dimension,
            upper,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut upper = self.upper.clone();
        upper.values_mut().for_each(|v| *v *= factor);
        upper.retain(|_, v| *v != 0.0);
        Self {
            dimension: self.dimension,
            upper,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dimension, x.len())?;
        let mut y = vec![0.0; self.dimension];
        for (r, c, v) in self.iter_full() {
            y[r] += v * x[c];
        }
        Ok(y)
    }

    pub fn matvec_complex(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        check_dim(self.dimension, x.len())?;
        let mut y = vec![Complex64::default(); self.dimension];
        for (r, c, v) in self.iter_full() {
            y[r] += x[c] * v;
        }
        Ok(y)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.dimension, self.dimension);
        for (r, c, v) in self.iter_full() {
            m[(r, c)] = v;
        }
        m
    }

    /// `self · rhs` for a dense right-hand side.
    pub fn mul_dense(&self, rhs: &Mat<f64>) -> Result<Mat<f64>> {
        check_dim(self.dimension, rhs.nrows())?;
        let triplets: Vec<(usize, usize, f64)> = self.iter_full().collect();
        let mut out = Mat::zeros(self.dimension, rhs.ncols());
        for j in 0..rhs.ncols() {
            let src = rhs.col(j);
            let mut dst = out.col_mut(j);
            for &(r, c, v) in &triplets {
                dst[r] += v * src[c];
            }
        }
        Ok(out)
    }

    pub fn to_operator(&self) -> SparseOperator {
        SparseOperator {
            dimension: self.dimension,
            entries: self
                .iter_full()
                .map(|(r, c, v)| ((r, c), Complex64::new(v, 0.0)))
                .collect(),
        }
    }
}

/// Single-site Pauli operator embedded in the full space.
pub fn pauli_operator(kind: PauliKind, site: usize, basis: &SpinBasis) -> Result<SparseOperator> {
    basis.check_site(site)?;
    let mut op = SparseOperator::zeros(basis.dimension());
    for col in 0..basis.dimension() {
        if let Some((row, amp)) = apply_string(basis, &[(kind, site)], col) {
            op.accumulate(row, col, amp);
        }
    }
    Ok(op)
}

/// One term of a Pauli-string sum: a coefficient times an ordered product of
/// single-site operators.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliTerm {
    pub coefficient: f64,
    pub factors: Vec<(PauliKind, usize)>,
}

impl PauliTerm {
    pub fn new(coefficient: f64, factors: impl Into<Vec<(PauliKind, usize)>>) -> Self {
        Self {
            coefficient,
            factors: factors.into(),
        }
    }
}

/// Assembles `Σ_k coefficient_k · Π factors_k`, which must come out real
/// symmetric.
pub fn operator_product_sum(terms: &[PauliTerm], basis: &SpinBasis) -> Result<SparseHermitian> {
    let mut acc = SparseOperator::zeros(basis.dimension());
    for term in terms {
        for &(_, site) in &term.factors {
            basis.check_site(site)?;
        }
        if term.coefficient == 0.0 {
            continue;
        }
        for col in 0..basis.dimension() {
            if let Some((row, amp)) = apply_string(basis, &term.factors, col) {
                acc.accumulate(row, col, amp * term.coefficient);
            }
        }
    }
    acc.to_real_symmetric()
}

/// Normalized real state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: Vec<f64>,
}

impl StateVector {
    const NORM_TOL: f64 = 1e-12;

    /// Wraps amplitudes that must already be unit norm.
    pub fn new(amplitudes: Vec<f64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::param("state vector must be non-empty"));
        }
        let norm_sq: f64 = amplitudes.iter().map(|a| a * a).sum();
        if (norm_sq - 1.0).abs() > Self::NORM_TOL {
            return Err(Error::param(format!("state norm² is {norm_sq}, expected 1")));
        }
        Ok(Self { amplitudes })
    }

    /// Rescales arbitrary nonzero amplitudes to unit norm.
    pub fn normalized(mut amplitudes: Vec<f64>) -> Result<Self> {
        let norm = amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::param("cannot normalize a zero or non-finite state"));
        }
        amplitudes.iter_mut().for_each(|a| *a /= norm);
        Ok(Self { amplitudes })
    }

    pub fn basis_state(dimension: usize, index: usize) -> Result<Self> {
        if index >= dimension {
            return Err(Error::param(format!(
                "basis index {index} out of range for dimension {dimension}"
            )));
        }
        let mut amplitudes = vec![0.0; dimension];
        amplitudes[index] = 1.0;
        Ok(Self { amplitudes })
    }

    pub fn dimension(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }
}

/// `⟨ψ|O|ψ⟩` for a real state.
pub fn expectation(state: &StateVector, op: &SparseHermitian) -> Result<f64> {
    check_dim(op.dimension(), state.dimension())?;
    let psi = state.amplitudes();
    Ok(op.iter_full().map(|(r, c, v)| psi[r] * v * psi[c]).sum())
}

/// `⟨ψ|O|ψ⟩` for a complex state. The imaginary residue must vanish up to
/// rounding.
pub fn expectation_complex(state: &[Complex64], op: &SparseHermitian) -> Result<f64> {
    check_dim(op.dimension(), state.len())?;
    let value: Complex64 = op
        .iter_full()
        .map(|(r, c, v)| state[r].conj() * state[c] * v)
        .sum();
    assert!(
        value.im.abs() < 1e-10,
        "expectation value has imaginary residue {:.3e}",
        value.im
    );
    Ok(value.re)
}
