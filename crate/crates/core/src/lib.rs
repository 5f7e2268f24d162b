//! Finite-volume solver library for capturing similarity solutions of the
//! 1d/2d Burgers' equation by direct forward simulation of the freezing PDAE.
//!
//! The pieces fit together as follows:
//!
//! * [`mesh`] — uniform cell-centered grids and cell-average fields,
//! * [`limiter`] — minmod slopes and one-sided face limits,
//! * [`central_flux`] — second-order semi-discrete central fluxes for
//!   space-dependent conservation laws, plus diffusion and no-flux closure,
//! * [`freezing_rhs`] — assembly of the discrete freezing operator bundle,
//!   wave-speed bounds and phase conditions,
//! * [`linear_solvers`] — factorization of the implicit diffusion operator
//!   and the small dense phase systems,
//! * [`imex_dae`] — the half-explicit IMEX-Runge-Kutta stepper for the
//!   resulting index-1/index-2 DAEs, with group reconstruction and
//!   CFL-adaptive step control,
//! * [`dae_verification`] — a manufactured-DAE harness measuring the
//!   temporal convergence orders of the stepper.

pub mod central_flux;
pub mod dae_verification;
pub mod freezing_rhs;
pub mod imex_dae;
pub mod limiter;
pub mod linear_solvers;
pub mod mesh;

use thiserror::Error;

/// Errors produced by grid construction, operator assembly and time stepping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounds on axis {axis}: [{lo}, {hi}]")]
    InvalidBounds { axis: usize, lo: f64, hi: f64 },
    #[error("too few cells on axis {axis}: got {got}, need at least {min}")]
    TooFewCells { axis: usize, got: usize, min: usize },
    #[error("dimension {0} not supported (only 1 and 2)")]
    UnsupportedDim(usize),
    #[error("grid too small for limiter stencil: {cells} cells on axis {axis}")]
    GridTooSmall { axis: usize, cells: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("missing reference field for fixed phase condition")]
    MissingReference,
    #[error("singular Gram matrix in phase solve (cond estimate {cond:.3e})")]
    SingularGram { cond: f64 },
    #[error("singular {context} system")]
    SingularSystem { context: &'static str },
    #[error("implicit operator not positive definite (row {row})")]
    NotSpd { row: usize },
    #[error("stale implicit factorization: built for coeff {built}, asked for {asked}")]
    StaleFactor { built: f64, asked: f64 },
    #[error("iterative solve did not reach tolerance ({residual:.3e} after {iters} iterations)")]
    NoConvergence { residual: f64, iters: usize },
    #[error("non-finite stage value at stage {stage}")]
    NonFiniteStage { stage: usize },
    #[error("scaling variable became non-positive ({alpha}) — step size too large")]
    NonPositiveScaling { alpha: f64 },
    #[error("step size underflow at tau = {tau} (dtau = {dtau:.3e})")]
    StepSizeUnderflow { tau: f64, dtau: f64 },
    #[error("integration failed at step {step}, tau = {tau}: {source}")]
    StepFailed {
        step: usize,
        tau: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("order study needs at least {min} step sizes, got {got}")]
    TooFewStepSizes { min: usize, got: usize },
    #[error("order study produced no usable slope for {variable}")]
    SlopeUndefined { variable: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
