//! Spin-chain dynamics and thermodynamics toolkit.
//!
//! The crate is organized bottom-up:
//!
//! - [`hilbert`]: computational basis, total-Sz sectors and state vectors.
//! - [`models`]: local Hamiltonians (XXZ, mixed ferro/antiferro dimer chain,
//!   frustrated J1-J2 chain) and their sparse sector matrices.
//! - [`propagation`]: Taylor-series and Krylov time evolution.
//! - [`freefermion`]: exact XX-chain dynamics through the Jordan-Wigner map.
//! - [`lightcone`]: the light-cone sampling estimator for local observables.
//! - [`circuits`]: block and corner-transfer circuit approximations to
//!   `exp(-iHt)` with dense verification.
//! - [`qbp`]: quantum belief propagation sweeps for thermal states.
//! - [`cli`]: config parsing, presets and CSV output used by the binary.

pub mod circuits;
pub mod cli;
pub mod dense;
pub mod error;
pub mod freefermion;
pub mod hilbert;
pub mod lightcone;
pub mod models;
pub mod propagation;
pub mod qbp;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
