//! Trajectory simulation and verification kernels for stochastic Schrodinger
//! equations of open quantum systems in position representation.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`]: uniform tensor grids, complex wavefunctions, finite-difference
//!   stencils with exact discrete adjoints.
//! * [`model`]: coordinate-model coefficients (alpha, V, A, sigma, eta) and the
//!   matrix-free operators H(t), L_l(t), G(t), C built from them, plus the
//!   structural diagnostics (phase condition, growth bounds, commutator
//!   expansions).
//! * [`integrate`]: counter-based Gaussian noise, Euler-Maruyama and
//!   semi-implicit steppers for the linear and norm-preserving dynamics, and
//!   the resolvent-regularized scheme.
//! * [`observe`]: ensemble statistics, Ehrenfest residuals, heating-rate fits,
//!   regularity monitoring, and mixed-state density estimation.
//! * [`oracle`]: slow dense references (matrix assembly, master-equation
//!   propagation, operator-identity suite) against which the matrix-free path
//!   is checked.
//!
//! All numerics are generic over the floating scalar through [`Scalar`];
//! `f64` aliases for the main types are exported at the crate root.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

pub mod grid;
pub mod integrate;
pub mod model;
pub mod observe;
pub mod oracle;

/// Floating scalar the kernels are generic over. Covers `f32` and `f64`.
///
/// `Send + Sync + 'static` is required so wavefunctions and operator handles
/// can be shared across trajectory workers.
pub trait Scalar:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + Sum
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    /// Embeds an `f64` literal. Panics only on values unrepresentable as the
    /// target type (never for finite literals in `f32`/`f64`).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Lossy view used by diagnostics and error messages.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + NumAssign
        + FromPrimitive
        + Sum
        + fmt::Debug
        + fmt::Display
        + fmt::LowerExp
        + Send
        + Sync
        + 'static
{
}

pub use grid::{Boundary, GridError, GridSpec, WaveFunction};
pub use integrate::{
    run_trajectory, CoarsenedNoise, Flow, IntegrateError, NoiseSource, Scheme, SchemeConfig,
    TrajectoryRecord,
};
pub use model::{CoefficientSet, ModelOps, ObservableSpec, OperatorHandle};
pub use observe::EnsembleSummary;

/// `f64` concretizations of the main types.
pub type GridSpec64 = GridSpec<f64>;
pub type WaveFunction64 = WaveFunction<f64>;
pub type CoefficientSet64 = CoefficientSet<f64>;
pub type OperatorHandle64 = OperatorHandle<f64>;
pub type ModelOps64 = ModelOps<f64>;
pub type ObservableSpec64 = ObservableSpec<f64>;
pub type SchemeConfig64 = SchemeConfig<f64>;
pub type TrajectoryRecord64 = TrajectoryRecord<f64>;
pub type EnsembleSummary64 = EnsembleSummary<f64>;
