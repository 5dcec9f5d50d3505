//! Numerical toolkit for quantum thermalization in random-matrix and spin-chain
//! models.
//!
//! The crate builds model Hamiltonians ([`models`]), diagonalizes them
//! ([`spectral`]), evolves observables through a quench ([`dynamics`]),
//! extracts decay rates ([`fitting`]) and compares the measured time-averaged
//! fluctuations against the closed-form predictions in [`theory`].
//! [`experiments`] strings these together into reproducible ensemble runs.

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fitting;
pub mod hilbert;
pub mod models;
pub mod rng;
pub mod spectral;
pub mod theory;

pub use error::{Error, Result};
