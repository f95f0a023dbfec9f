//! Conserved-quantity discovery for polynomial evolution equations
//! `u_t = f(u, u_x, u_xx, ...)`, coefficient search that maximizes the number
//! of conserved quantities, and simulation tools for checking the results.
//!
//! Module map:
//! - [`symbolic`]: exact polynomial algebra over derivative jets
//! - [`curves`]: Gaussian-mixture test curves with analytic jets
//! - [`cqfinder`]: conservation matrix, null space, sparsification, trivial detection
//! - [`optpde`]: smoothed CQ count, spherical parametrization, gradient search
//! - [`simulator`]: method-of-lines evolution, CQ monitoring, break time, decay fits
//! - [`analysis`]: PCA, support-set families, scaling sweeps, rationalization
//! - [`presets`]: the standard CQ and PDE bases
//!
//! Symbolic code is generic over the coefficient ring ([`scalar::Coefficient`]);
//! curves, simulation and the sigmoid loss are generic over [`scalar::Real`]
//! (`f32`/`f64`). The SVD-based pipeline runs in `f64`.

pub mod analysis;
pub mod cqfinder;
pub mod curves;
pub mod optpde;
pub mod presets;
pub mod scalar;
pub mod simulator;
pub mod symbolic;

pub use scalar::{Coefficient, Rational, Real};

/// Expression with exact rational coefficients.
pub type Expr = symbolic::DiffExpr<Rational>;
/// Expression with floating point coefficients.
pub type FloatExpr = symbolic::DiffExpr<f64>;
/// Double precision curve ensemble, the one the CQ pipeline consumes.
pub type Ensemble = curves::CurveEnsemble<f64>;
/// Single precision curve ensemble.
pub type Ensemble32 = curves::CurveEnsemble<f32>;
/// Double precision simulation trace.
pub type Trace = simulator::SimulationTrace<f64>;
