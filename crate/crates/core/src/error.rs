//! Error type shared by every module in the crate.
//!
//! The variants mirror the failure modes the operations contract cares
//! about: precondition violations (CFL bounds, stability limits, empty or
//! mismatched inputs), runtime numeric failures (blow-up, lost positivity,
//! non-finite densities), and query errors (off-grid evaluation). The CLI
//! maps all of these to its "numerical failure" exit code; config-file
//! problems are diagnosed separately before any of this code runs.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the solvers, estimators, and checks.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar parameter violated a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An input collection was empty where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Two inputs that must agree in shape or length do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The explicit scheme's time step violates a stability bound.
    #[error("CFL violation: {bound} requires dt <= {limit:.6e}, got {dt:.6e}")]
    CflViolation {
        /// Which bound failed (diffusion stability or drift CFL).
        bound: &'static str,
        /// Maximum admissible step.
        limit: f64,
        /// Requested step.
        dt: f64,
    },

    /// A particle left the sanity region during simulation.
    #[error(
        "blow-up: particle {particle} reached |x| = {magnitude:.3e} at step {step}; \
         reduce dt or check the potential"
    )]
    BlowUp {
        /// Offending particle index.
        particle: usize,
        /// Step index at which the guard tripped.
        step: usize,
        /// Norm of the offending position.
        magnitude: f64,
    },

    /// A density cell dropped below the positivity tolerance.
    #[error("positivity lost: cell {cell} holds {value:.3e} at step {step}")]
    PositivityLost {
        /// Flattened cell index.
        cell: usize,
        /// Time step at which positivity failed.
        step: usize,
        /// Offending value.
        value: f64,
    },

    /// A density stopped being finite (NaN or infinity appeared).
    #[error("non-finite density value at cell {cell}: {value}")]
    NonFiniteDensity {
        /// Flattened cell index.
        cell: usize,
        /// Offending value.
        value: f64,
    },

    /// Conserved mass drifted beyond tolerance.
    #[error("mass not conserved: |mass - 1| = {drift:.3e} at step {step}")]
    MassNotConserved {
        /// Time step at which the budget failed.
        step: usize,
        /// Measured deviation from unit mass.
        drift: f64,
    },

    /// A point query fell outside the grid domain.
    #[error("off-grid query: coordinate {coordinate:.6} outside [{lo:.6}, {hi:.6}] on axis {axis}")]
    OffGrid {
        /// Axis index of the violation.
        axis: usize,
        /// Offending coordinate.
        coordinate: f64,
        /// Domain lower edge on that axis.
        lo: f64,
        /// Domain upper edge on that axis.
        hi: f64,
    },

    /// A statistical test was asked to run on too small a sample.
    #[error("insufficient sample: need at least {need}, got {got} ({context})")]
    InsufficientSamples {
        /// Minimum admissible sample count.
        need: usize,
        /// Actual sample count.
        got: usize,
        /// Which operation complained.
        context: &'static str,
    },

    /// An iterative solver failed to reach its convergence target.
    #[error("no convergence: {context} stalled at error {error:.3e} after {iterations} iterations")]
    NoConvergence {
        /// Which solver failed.
        context: &'static str,
        /// Final error level.
        error: f64,
        /// Iterations spent.
        iterations: usize,
    },

    /// Binary container I/O or format failure.
    #[error("container error: {0}")]
    Container(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
