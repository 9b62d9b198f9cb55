pub mod covariance;
pub mod diagnostics;
pub mod error;
pub mod invariant;
pub mod io;
pub mod limit;
pub mod linalg;
pub mod montecarlo;
pub mod quadform;
pub mod report;
pub mod rng;
pub mod tol;

pub use error::{Error, Result};
