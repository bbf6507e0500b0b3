//! Numerical laboratory for entropy dissipation along Langevin diffusions.
//!
//! This crate simulates Itô–Langevin diffusions `dX = −(∇ψ + β·1_{t>t₀}) dt
//! + dW` whose drift is a confining potential plus a compactly supported,
//! gradient-type perturbation switched on at a deterministic time, and it
//! verifies — numerically, at explicit tolerances — the entropy identities
//! that govern such flows: entropy production along the Fokker–Planck
//! evolution, trajectorial decompositions of the log-likelihood ratio under
//! time reversal, Wasserstein metric derivatives and steepest-descent
//! properties of the free energy, interpolation inequalities between
//! entropy, transport distance, and Fisher information, and exponential
//! decay under curvature bounds.
//!
//! # Structure
//!
//! - [`model`]: potentials ψ, bump perturbations β = ∇B, reference measure
//!   q = e^{−2ψ}.
//! - [`grid`]: tensor grids, densities at cell centers, interpolation,
//!   finite-difference score fields.
//! - [`fpe`]: mass-conserving exponential-fitting Fokker–Planck solver.
//! - [`entropy`]: relative entropy, Fisher information, free energy — on
//!   grids and from samples.
//! - [`simulate`]: Euler–Maruyama ensembles with reproducible per-particle
//!   noise streams and streaming path visitors.
//! - [`reversal`]: time-reversed dynamics, backward Brownian reconstruction,
//!   trajectorial ledgers.
//! - [`dissipation`]: entropy-production checks along the flow.
//! - [`transport`]: Wasserstein-2 distances (exact 1D, entropic 2D),
//!   displacement interpolation, metric-slope checks.
//! - [`report`]: structured pass/fail check reports.
//! - [`container`]: binary containers for paths, grids, and ledgers.
//!
//! # Scalar types
//!
//! All numerics are generic over the [`real::Real`] scalar. Concrete `f64`
//! aliases are exported at the crate root; `f64` is the supported precision
//! for verification runs (file containers always store `f64`), while `f32`
//! remains available for quick smoke experiments.

pub mod container;
pub mod dissipation;
pub mod entropy;
pub mod error;
pub mod fpe;
pub mod grid;
pub mod model;
pub mod real;
pub mod report;
pub mod reversal;
pub mod simulate;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
pub use real::Real;
pub use report::{CheckReport, RunReport};

/// Default scalar type for verification runs.
pub type Scalar = f64;

pub type Potential64 = model::Potential<Scalar>;
pub type Perturbation64 = model::Perturbation<Scalar>;
pub type ReferenceMeasure64 = model::ReferenceMeasure<Scalar>;
pub type GridSpec64 = grid::GridSpec<Scalar>;
pub type GridDensity64 = grid::GridDensity<Scalar>;
pub type InterpField64 = grid::InterpField<Scalar>;
pub type EnsembleState64 = simulate::EnsembleState<Scalar>;
pub type PathBundle64 = simulate::PathBundle<Scalar>;
pub type TrajectorialLedger64 = reversal::TrajectorialLedger<Scalar>;
pub type BackwardIncrements64 = reversal::BackwardIncrements<Scalar>;
pub type Quantile1D64 = transport::Quantile1D<Scalar>;
pub type TransportPlan64 = transport::TransportPlan<Scalar>;
pub type Cloud64 = transport::Cloud<Scalar>;
