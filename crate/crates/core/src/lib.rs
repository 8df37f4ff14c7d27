//! Spatial quantile function-on-scalar regression.
//!
//! Coefficient functions live in a reproducing-kernel Hilbert space and are
//! fitted per quantile level by a primal-dual alternation over a
//! box-constrained dual; smoothing is picked by GACV. The spatial dependence
//! of the residual quantile field is modelled by a Student-t copula with a
//! Matérn correlation whose range depends on the covariates, fitted by
//! weighted least squares on Matheron variograms. The fitted model can
//! sample new functional responses given covariates.

pub mod error;
pub mod kernels;
pub mod copula;
pub mod qp;
pub mod sampler;
pub mod simgen;
pub mod special;
pub mod sqr;

pub use error::{Result, SqrError};
