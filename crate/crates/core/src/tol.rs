//! Numerical tolerances used throughout the crate.
//!
//! The `DEFAULT_*` constants are used by the low-level primitives. The
//! decision-level routines (limit classification, alpha* and
//! distinguishability) read a [`Tolerances`] value so callers can override
//! them.

use serde::{Deserialize, Serialize};

/// Relative symmetry tolerance: `max |A_ij - A_ji| <= DEFAULT_SYM * ||A||`.
pub const DEFAULT_SYM: f64 = 1e-10;
/// Orthonormality tolerance for eigenvector and residual bases.
pub const DEFAULT_ORTHO: f64 = 1e-10;
/// Relative tolerance for negative eigenvalues in square roots.
pub const DEFAULT_PSD: f64 = 1e-10;
/// Relative singular value cutoff for the rank check of a design matrix.
pub const DEFAULT_RANK: f64 = 1e-10;
/// `y` is treated as lying in span(X) when `||C_X y|| <= DEFAULT_SPAN * ||y||`.
pub const DEFAULT_SPAN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Span test used for the concentration direction `e`, which is usually
    /// known only to eigen-solver accuracy.
    pub e_in_span: f64,
    /// Residual threshold for limit checks (concentration, off-diagonal decay).
    pub check: f64,
    /// Relative residual for eigenvector membership tests.
    pub eigvec: f64,
    /// Residuals between `eigvec` and this value are flagged ambiguous.
    pub ambiguous: f64,
    /// Multiple-of-identity threshold for indistinguishability.
    pub indist: f64,
    /// Relative width of the level-set band `|T_B(y) - kappa|`.
    pub level: f64,
    /// Required agreement `|<e_hat, e>| >= 1 - direction` with an analytic `e`.
    pub direction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            e_in_span: 1e-8,
            check: 1e-3,
            eigvec: 1e-8,
            ambiguous: 1e-4,
            indist: 1e-8,
            level: 1e-9,
            direction: 1e-6,
        }
    }
}
