//! Limiting power of `T_B` tests as `rho -> a`.
//!
//! The classifier locates the concentration direction `e` relative to the
//! rejection region `{T_B > kappa}` and, on the boundary, evaluates the
//! Gaussian limit through the first- or second-order expansion of `T_B`
//! around `e`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::{
    concentration_direction, limit_lambda, offdiag_check, scaled_symmetric_root, CovarianceModel,
    SemSpec,
};
use crate::error::{Error, Result};
use crate::invariant::{region_classify, Location, QuadFormTest};
use crate::linalg;
use crate::quadform::{prob_positive, SignMethod};
use crate::tol::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LimitCase {
    Interior,
    Exterior,
    SpanXBoundary,
    EigvecBoundary,
    NoneigvecBoundary,
    Degenerate,
    /// Boundary point for a spatial-lag model, left open.
    Boundary,
}

/// Which checks were run and how they came out; `None` means not needed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Assumptions {
    pub concentration: Option<bool>,
    pub scaling: Option<bool>,
    pub limit_injective: Option<bool>,
    pub offdiag: Option<bool>,
    /// Recorded, not verified: the noise is spherically symmetric.
    pub elliptical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReport {
    pub case: LimitCase,
    /// `None` when the limit is not determined.
    pub limit: Option<f64>,
    /// Value reported alongside an undetermined limit.
    pub estimate: Option<f64>,
    /// Short description of the rule that produced the limit.
    pub rule: String,
    pub expansion_order: Option<u8>,
    pub kappa: f64,
    pub t_b_e: f64,
    pub e: Vec<f64>,
    pub method: Option<SignMethod>,
    pub assumptions: Assumptions,
    pub notes: Vec<String>,
}

impl LimitReport {
    fn new(case: LimitCase, limit: Option<f64>, rule: &str, kappa: f64) -> LimitReport {
        LimitReport {
            case,
            limit,
            estimate: None,
            rule: rule.into(),
            expansion_order: None,
            kappa,
            t_b_e: f64::NAN,
            e: vec![],
            method: None,
            assumptions: Assumptions {
                elliptical: true,
                ..Default::default()
            },
            notes: vec![],
        }
    }

    pub fn is_determined(&self) -> bool {
        self.limit.is_some()
    }
}

/// Leading term of `T_B(e + h) - T_B(e)`.
#[derive(Debug, Clone)]
pub struct Expansion {
    /// 1 for a linear leading term, 2 for a quadratic one.
    pub q: u8,
    /// Gradient `D_1` (n-vector) when `q = 1`.
    pub d1: Option<DVector<f64>>,
    /// Form matrix `D_2` (n x n) when `q = 2`.
    pub d2: Option<DMatrix<f64>>,
    /// `T_B(e)`, the Rayleigh quotient of `C e`.
    pub lambda: f64,
    /// `||B Ce - lambda Ce|| / (||B|| ||Ce||)`.
    pub eigvec_residual: f64,
    /// The residual sits between the eigenvector and ambiguity tolerances.
    pub ambiguous: bool,
}

pub fn expansion_order(test: &QuadFormTest, e: &DVector<f64>, tol: &Tolerances) -> Result<Expansion> {
    if test.degenerate {
        return Err(Error::DegenerateTest);
    }
    let c = &test.design.c;
    let ce = c * e;
    let nce = ce.norm();
    if nce <= tol.e_in_span * e.norm() {
        return Err(Error::EInSpanX);
    }
    let b = &test.b;
    let bce = b * &ce;
    let lambda = ce.dot(&bce) / (nce * nce);
    let bnorm = linalg::spectral_norm(b);
    let eigvec_residual = (&bce - &ce * lambda).norm() / (bnorm * nce);
    let ambiguous = eigvec_residual > tol.eigvec && eigvec_residual <= tol.ambiguous;
    if eigvec_residual <= tol.eigvec {
        let d2 = (test.form_matrix() - &test.design.p_perp * lambda) / (nce * nce);
        if linalg::max_abs(&d2) <= 1e-10 * bnorm {
            return Err(Error::DegenerateTest);
        }
        return Ok(Expansion {
            q: 2,
            d1: None,
            d2: Some(d2),
            lambda,
            eigvec_residual,
            ambiguous,
        });
    }
    let ct = c.transpose();
    let d1 = (&ct * &bce - &ct * &ce * lambda) * (2.0 / (nce * nce));
    Ok(Expansion {
        q: 1,
        d1: Some(d1),
        d2: None,
        lambda,
        eigvec_residual,
        ambiguous,
    })
}

/// `P(G' Lambda' (C'BC - lambda C'C) Lambda G > 0)`, the limit at a boundary
/// point where `C e` is an eigenvector with eigenvalue `lambda`.
pub fn eigvec_boundary_limit(
    test: &QuadFormTest,
    lambda: f64,
    lam: &DMatrix<f64>,
) -> Result<(f64, SignMethod)> {
    let form = test.form_matrix() - &test.design.p_perp * lambda;
    let a = linalg::symmetrize(&(lam.transpose() * form * lam));
    let p = prob_positive(&a)?;
    Ok((p.p, p.method))
}

/// Probability that `d' Lam G` and `e' G` share a sign, for standard
/// Gaussian `G`: `1/2 + asin(r)/pi` with `r` their correlation.
pub fn sign_agreement(d: &DVector<f64>, lam: &DMatrix<f64>, e: &DVector<f64>) -> f64 {
    let a = lam.transpose() * d;
    let an = a.norm();
    if an == 0.0 {
        return 0.5;
    }
    let r = (a.dot(e) / (an * e.norm())).clamp(-1.0, 1.0);
    0.5 + r.asin() / std::f64::consts::PI
}

/// Limiting rejection probability of `{T_B > kappa}` under `model`.
pub fn classify_limit(
    test: &QuadFormTest,
    kappa: f64,
    model: &CovarianceModel,
    grid: &[f64],
    tol: &Tolerances,
) -> Result<LimitReport> {
    if model.n != test.design.n() {
        return Err(Error::ModelMismatch(format!(
            "model has n = {}, test has n = {}",
            model.n,
            test.design.n()
        )));
    }
    if test.degenerate {
        let limit = if kappa < test.lambda_min() { 1.0 } else { 0.0 };
        let mut r = LimitReport::new(LimitCase::Degenerate, Some(limit), "constant statistic", kappa);
        r.notes.push("T_B is constant; the region is empty or everything".into());
        return Ok(r);
    }
    test.require_nontrivial(kappa)?;

    let conc = concentration_direction(model, grid, tol)?;
    if !conc.passed {
        return Err(Error::NotConcentrating(format!(
            "residual {:.3e} at the last grid point",
            conc.residuals.last().copied().unwrap_or(f64::NAN)
        )));
    }
    let e = conc.e.clone();
    let t_e = test.t_b(&e);
    let level = test.level_tol(tol.level);
    let in_span = test.design.residual_norm(&e) <= tol.e_in_span * e.norm();

    let finish = |mut r: LimitReport| {
        r.t_b_e = if in_span { test.lambda_min() } else { t_e };
        r.e = e.iter().copied().collect();
        r.assumptions.concentration = Some(true);
        r
    };

    if in_span {
        if (kappa - test.lambda_min()).abs() <= level {
            let mut r = LimitReport::new(LimitCase::SpanXBoundary, Some(1.0), "e in span(X), kappa at the bottom", kappa);
            r.notes.push("only span(X) is excluded from the region".into());
            return Ok(finish(r));
        }
        let lm = limit_lambda(model, grid, tol)?;
        let c = &test.design.c;
        let shifted = &test.b - DMatrix::identity(test.design.m(), test.design.m()) * kappa;
        let a = linalg::symmetrize(&(lm.lambda.transpose() * c.transpose() * shifted * c * &lm.lambda));
        let p = prob_positive(&a)?;
        let mut r = LimitReport::new(LimitCase::SpanXBoundary, Some(p.p), "Gaussian limit of the scaled residual", kappa);
        r.method = Some(p.method);
        r.assumptions.scaling = Some(true);
        r.assumptions.limit_injective = Some(true);
        if !(p.p > 0.0 && p.p < 1.0) {
            r.notes.push(format!("limit {} is not strictly inside (0, 1)", p.p));
        }
        return Ok(finish(r));
    }

    if t_e - kappa > level {
        return Ok(finish(LimitReport::new(LimitCase::Interior, Some(1.0), "e interior to the region", kappa)));
    }
    if kappa - t_e > level {
        return Ok(finish(LimitReport::new(LimitCase::Exterior, Some(0.0), "e exterior to the region", kappa)));
    }

    let exp = expansion_order(test, &e, tol)?;
    let mut notes = vec![];
    if exp.ambiguous {
        notes.push(format!(
            "eigenvector residual {:.3e} is between {:.0e} and {:.0e}; treated as not an eigenvector",
            exp.eigvec_residual, tol.eigvec, tol.ambiguous
        ));
    }
    let mut r = if exp.q == 2 {
        if (exp.lambda - test.lambda_min()).abs() <= level {
            LimitReport::new(LimitCase::EigvecBoundary, Some(1.0), "second-order boundary at the bottom eigenvalue", kappa)
        } else {
            let lm = limit_lambda(model, grid, tol)?;
            let (p, method) = eigvec_boundary_limit(test, exp.lambda, &lm.lambda)?;
            let mut r = LimitReport::new(LimitCase::EigvecBoundary, Some(p), "second-order boundary, Gaussian quadratic form", kappa);
            r.method = Some(method);
            r.assumptions.scaling = Some(true);
            r.assumptions.limit_injective = Some(true);
            r
        }
    } else {
        let off = offdiag_check(model, grid, tol)?;
        if off.passed {
            let mut r = LimitReport::new(LimitCase::NoneigvecBoundary, Some(0.5), "first-order boundary, symmetric limit", kappa);
            r.assumptions.offdiag = Some(true);
            r
        } else {
            let lam = scaled_symmetric_root(model, &e, grid)?;
            let est = sign_agreement(exp.d1.as_ref().unwrap(), &lam, &e);
            let mut r = LimitReport::new(LimitCase::NoneigvecBoundary, None, "first-order boundary, accumulation set", kappa);
            r.estimate = Some(est);
            r.assumptions.offdiag = Some(false);
            r.notes.push(format!(
                "off-diagonal part does not vanish (last residual {:.3e}); estimate is conditional on U_0 = I",
                off.residuals.last().copied().unwrap_or(f64::NAN)
            ));
            r
        }
    };
    r.expansion_order = Some(exp.q);
    r.notes.extend(notes);
    Ok(finish(r))
}

/// Limit for the spatial-lag model `y = (I - rho W)^{-1}(X beta + sigma eps)`:
/// decided by where `f_max` sits relative to the region.
pub fn slm_limit(test: &QuadFormTest, kappa: f64, sem: &SemSpec) -> Result<LimitReport> {
    if sem.n() != test.design.n() {
        return Err(Error::ModelMismatch("weights and design sizes differ".into()));
    }
    let f = &sem.f_max;
    let point = region_classify(test, kappa, f);
    let mut r = match point.location {
        Location::Interior => LimitReport::new(LimitCase::Interior, Some(1.0), "f_max interior to the region", kappa),
        Location::Exterior => LimitReport::new(LimitCase::Exterior, Some(0.0), "f_max exterior to the region", kappa),
        Location::Boundary => {
            let mut r = LimitReport::new(LimitCase::Boundary, None, "f_max on the boundary", kappa);
            r.notes.push("the spatial-lag boundary case is not resolved".into());
            r
        }
    };
    r.t_b_e = test.t_b(f);
    r.e = f.iter().copied().collect();
    Ok(r)
}
