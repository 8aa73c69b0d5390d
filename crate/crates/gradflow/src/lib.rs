//! # gradflow
//!
//! Differentiable ODE/CDE/SDE solvers with three backpropagation regimes.
//!
//! The crate provides:
//!
//! * explicit Runge-Kutta solvers with an embedded adaptive step-size
//!   controller and jump-aware integration ([`ode`]);
//! * algebraically reversible steppers (reversible Heun, asynchronous
//!   leapfrog, leapfrog/midpoint, semi-implicit Euler) with exact
//!   discretise-then-optimise gradients in O(1) memory ([`reversible`]);
//! * reproducible Brownian motion: splittable seeds, Brownian bridges, and
//!   the Brownian Path / Virtual Brownian Tree / Brownian Interval
//!   reconstructions ([`brownian`]);
//! * stochastic steppers (Euler-Maruyama, Stratonovich Heun, Milstein,
//!   reversible Heun for SDEs) and a strong-convergence harness ([`sde`]);
//! * discretise-then-optimise replay, continuous adjoints for ODEs, CDEs and
//!   SDEs (with interpolation, checkpointing and the adjoint seminorm), and
//!   forward sensitivity ([`adjoint`]);
//! * control-path construction from irregular time series, four
//!   interpolation schemes, and the depth-2 logsignature reduction
//!   ([`paths`]);
//! * continuous-normalising-flow density utilities: exact divergence and
//!   Hutchinson's estimator ([`density`]).
//!
//! Everything numerical is generic over the scalar type through [`Real`]
//! (f32 or f64); the common double-precision instantiations are aliased at
//! the crate root.

pub mod adjoint;
pub mod brownian;
pub mod density;
pub mod error;
pub mod field;
pub mod ode;
pub mod paths;
pub mod problems;
pub mod real;
pub mod reversible;
mod rng;
pub mod sde;
pub mod tableau;

pub use error::{Error, Result};
pub use field::{Activation, AnalyticField, FieldSpec, Mlp, VectorField, VjpResult};
pub use real::Real;

// Concrete double-precision aliases for the most commonly used types.
pub type Mlp64 = field::Mlp<f64>;
pub type BrownianInterval64 = brownian::BrownianInterval<f64>;
pub type BrownianPath64 = brownian::BrownianPath<f64>;
pub type VirtualBrownianTree64 = brownian::VirtualBrownianTree<f64>;
pub type ControlPath64 = paths::ControlPath<f64>;
pub type TimeSeries64 = paths::TimeSeries<f64>;
pub type Tableau64 = tableau::ButcherTableau<f64>;
pub type Controller64 = ode::ControllerConfig<f64>;
pub type Solution64 = ode::Solution<f64>;
