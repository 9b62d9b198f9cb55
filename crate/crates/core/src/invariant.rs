//! Quadratic-form test statistics `T_B(y) = y'C'BCy / ||Cy||^2`, the
//! standard choices of `B`, and the geometry of their rejection regions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::linalg::{self, sign_fix, Design, SymEig};
use crate::tol;

/// Which construction produced `B`.
#[derive(Debug, Clone, PartialEq)]
pub enum TestKind {
    /// `B = C (W + W') C'`, SEM only.
    CliffOrd,
    /// `B = -(C Sigma(rho_bar) C')^{-1}`.
    PointOptimal { rho_bar: f64 },
    /// `B = C Sigma'(0) C'`.
    LocallyBest,
    Custom(DMatrix<f64>),
}

impl TestKind {
    pub fn tag(&self) -> String {
        match self {
            TestKind::CliffOrd => "cliff-ord".into(),
            TestKind::PointOptimal { rho_bar } => format!("poi(rho_bar={rho_bar})"),
            TestKind::LocallyBest => "lbi".into(),
            TestKind::Custom(_) => "custom".into(),
        }
    }
}

/// The statistic `T_B` for a fixed design.
#[derive(Debug, Clone)]
pub struct QuadFormTest {
    pub b: DMatrix<f64>,
    pub design: Design,
    pub eig_b: SymEig,
    /// `lambda_1(B) = lambda_{n-k}(B)`: the statistic is constant.
    pub degenerate: bool,
    pub kind: String,
}

impl QuadFormTest {
    pub fn new(b: DMatrix<f64>, design: Design) -> Result<QuadFormTest> {
        Self::with_kind(b, design, "custom".into())
    }

    fn with_kind(b: DMatrix<f64>, design: Design, kind: String) -> Result<QuadFormTest> {
        let m = design.m();
        if b.nrows() != m || b.ncols() != m {
            return Err(Error::ShapeError(format!(
                "B must be {m}x{m} (n - k), got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let eig_b = linalg::sym_eig(&b)?;
        let b = linalg::symmetrize(&b);
        let scale = linalg::spectral_norm(&b);
        let degenerate = eig_b.max() - eig_b.min() <= 1e-10 * scale;
        Ok(QuadFormTest {
            b,
            design,
            eig_b,
            degenerate,
            kind,
        })
    }

    pub fn lambda_min(&self) -> f64 {
        self.eig_b.min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eig_b.max()
    }

    /// Width of the band `|T_B(y) - kappa|` treated as the level set.
    pub fn level_tol(&self, rel: f64) -> f64 {
        rel * (self.lambda_max() - self.lambda_min())
    }

    /// `T_B(y)`, equal to `lambda_1(B)` on span(X).
    pub fn t_b(&self, y: &DVector<f64>) -> f64 {
        self.t_b_slice(y.as_slice())
    }

    pub fn t_b_slice(&self, y: &[f64]) -> f64 {
        let c = &self.design.c;
        let (m, n) = c.shape();
        let mut r = vec![0.0; m];
        for (i, ri) in r.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..n {
                acc += c[(i, j)] * y[j];
            }
            *ri = acc;
        }
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if !(rr > (tol::DEFAULT_SPAN * tol::DEFAULT_SPAN) * yy) || rr == 0.0 {
            return self.lambda_min();
        }
        let mut q = 0.0;
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += self.b[(i, j)] * r[j];
            }
            q += r[i] * acc;
        }
        (q / rr).clamp(self.lambda_min(), self.lambda_max())
    }

    /// `C' B C`, the n x n form matrix.
    pub fn form_matrix(&self) -> DMatrix<f64> {
        self.design.c.transpose() * &self.b * &self.design.c
    }

    /// Errors unless `{T_B > kappa}` is a proper nonempty subset of R^n.
    pub fn require_nontrivial(&self, kappa: f64) -> Result<()> {
        if self.degenerate {
            return Err(Error::DegenerateTest);
        }
        let (lo, hi) = (self.lambda_min(), self.lambda_max());
        if !(kappa >= lo && kappa < hi) {
            return Err(Error::TrivialRegion { kappa, lo, hi });
        }
        Ok(())
    }
}

/// Builds `B` for the requested construction.
pub fn build_b(design: &Design, model: &CovarianceModel, kind: &TestKind) -> Result<QuadFormTest> {
    if model.n != design.n() {
        return Err(Error::ModelMismatch(format!(
            "model has n = {}, design has n = {}",
            model.n,
            design.n()
        )));
    }
    let c = &design.c;
    let b = match kind {
        TestKind::CliffOrd => {
            let sem = model.sem.as_ref().ok_or_else(|| {
                Error::ModelMismatch("the Cliff-Ord test needs a spatial weights matrix".into())
            })?;
            c * (&sem.w + sem.w.transpose()) * c.transpose()
        }
        TestKind::PointOptimal { rho_bar } => {
            if !(*rho_bar > 0.0 && *rho_bar < model.a) {
                return Err(Error::ModelMismatch(format!(
                    "rho_bar = {rho_bar} must lie in (0, {})",
                    model.a
                )));
            }
            let inner = c * model.sigma(*rho_bar) * c.transpose();
            let inv = linalg::inverse(&linalg::symmetrize(&inner))
                .ok_or_else(|| Error::ModelMismatch("C Sigma(rho_bar) C' is singular".into()))?;
            -inv
        }
        TestKind::LocallyBest => c * model.sigma_dot_zero() * c.transpose(),
        TestKind::Custom(b) => b.clone(),
    };
    QuadFormTest::with_kind(linalg::symmetrize(&b), design.clone(), kind.tag())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Location {
    Interior,
    Boundary,
    Exterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    SpanX,
    LevelSet,
    ValueComparison,
    /// `kappa` outside `[lambda_1, lambda_{n-k})` or a constant statistic:
    /// the region is empty or all of R^n.
    TrivialRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionPoint {
    pub location: Location,
    pub reason: Reason,
}

/// Locates `y` relative to `{T_B > kappa}`.
pub fn region_classify(test: &QuadFormTest, kappa: f64, y: &DVector<f64>) -> RegionPoint {
    let lo = test.lambda_min();
    if test.degenerate || kappa < lo || kappa >= test.lambda_max() {
        let location = if kappa < lo {
            Location::Interior
        } else {
            Location::Exterior
        };
        return RegionPoint {
            location,
            reason: Reason::TrivialRegion,
        };
    }
    let yn = y.norm();
    if test.design.residual_norm(y) <= tol::DEFAULT_SPAN * yn || yn == 0.0 {
        return RegionPoint {
            location: Location::Boundary,
            reason: Reason::SpanX,
        };
    }
    let t = test.t_b(y);
    if (t - kappa).abs() <= test.level_tol(1e-9) {
        return RegionPoint {
            location: Location::Boundary,
            reason: Reason::LevelSet,
        };
    }
    RegionPoint {
        location: if t > kappa {
            Location::Interior
        } else {
            Location::Exterior
        },
        reason: Reason::ValueComparison,
    }
}

/// Maximal invariant of `y -> gamma y + X theta`: the normalized residual,
/// sign-fixed on its first nonzero coordinate; zero on span(X).
pub fn maximal_invariant(design: &Design, y: &DVector<f64>) -> DVector<f64> {
    let r = &design.p_perp * y;
    let rn = r.norm();
    if rn <= tol::DEFAULT_SPAN * y.norm() || rn == 0.0 {
        return DVector::zeros(y.len());
    }
    let mut out = r / rn;
    sign_fix(&mut out);
    out
}
