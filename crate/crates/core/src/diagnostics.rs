//! Zero-power-trap diagnostics and indistinguishability of the null from
//! the alternative for invariant tests.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::{concentration_direction, sem_model_from_spec, CovarianceModel, SemSpec};
use crate::error::{Error, Result};
use crate::invariant::{build_b, QuadFormTest, TestKind};
use crate::linalg::{self, Design};
use crate::quadform::{null_rejection_prob, SignMethod};
use crate::tol::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Trichotomy {
    /// `C e` in the top eigenspace of `B`.
    Zero,
    /// `C e` in the bottom eigenspace of `B`.
    One,
    Interior,
    EInSpanx,
    /// Constant statistic; `alpha* = 1` by convention.
    Degenerate,
}

/// Relative eigen-residuals of `C e` against the extreme eigenvalues of `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenEvidence {
    pub top_residual: f64,
    pub bottom_residual: f64,
    /// A residual fell between the eigenvector and ambiguity tolerances.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaStarReport {
    pub alpha_star: f64,
    pub trichotomy: Trichotomy,
    pub kappa_star: Option<f64>,
    pub eigen_evidence: Option<EigenEvidence>,
    pub method: Option<SignMethod>,
}

fn eig_residual(b: &DMatrix<f64>, v: &DVector<f64>, lambda: f64, bnorm: f64) -> f64 {
    (b * v - v * lambda).norm() / (bnorm * v.norm())
}

/// Size below which every `T_B` test has limiting power zero.
pub fn alpha_star(
    test: &QuadFormTest,
    model: &CovarianceModel,
    grid: &[f64],
    tol: &Tolerances,
) -> Result<AlphaStarReport> {
    if test.degenerate {
        return Ok(AlphaStarReport {
            alpha_star: 1.0,
            trichotomy: Trichotomy::Degenerate,
            kappa_star: None,
            eigen_evidence: None,
            method: None,
        });
    }
    let conc = concentration_direction(model, grid, tol)?;
    if !conc.passed {
        return Err(Error::NotConcentrating(format!(
            "residual {:.3e} at the last grid point",
            conc.residuals.last().copied().unwrap_or(f64::NAN)
        )));
    }
    let e = conc.e;
    if test.design.residual_norm(&e) <= tol.e_in_span * e.norm() {
        return Ok(AlphaStarReport {
            alpha_star: 0.0,
            trichotomy: Trichotomy::EInSpanx,
            kappa_star: None,
            eigen_evidence: None,
            method: None,
        });
    }
    let ce = &test.design.c * &e;
    let bnorm = linalg::spectral_norm(&test.b);
    let top = eig_residual(&test.b, &ce, test.lambda_max(), bnorm);
    let bottom = eig_residual(&test.b, &ce, test.lambda_min(), bnorm);
    let near = |r: f64| r > tol.eigvec && r <= tol.ambiguous;
    let evidence = EigenEvidence {
        top_residual: top,
        bottom_residual: bottom,
        ambiguous: near(top) || near(bottom),
    };
    let fixed = |alpha_star: f64, trichotomy: Trichotomy| AlphaStarReport {
        alpha_star,
        trichotomy,
        kappa_star: None,
        eigen_evidence: Some(evidence),
        method: None,
    };
    if top <= tol.eigvec {
        return Ok(fixed(0.0, Trichotomy::Zero));
    }
    if bottom <= tol.eigvec {
        return Ok(fixed(1.0, Trichotomy::One));
    }
    let kappa = test.t_b(&e);
    let p = null_rejection_prob(test, kappa)?;
    Ok(AlphaStarReport {
        alpha_star: p.p,
        trichotomy: Trichotomy::Interior,
        kappa_star: Some(kappa),
        eigen_evidence: Some(evidence),
        method: Some(p.method),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrapVerdict {
    /// Limiting power one at every nontrivial size for the Cliff-Ord test.
    pub cliff_ord: bool,
    /// Same for the point-optimal test at `rho_bar`.
    pub point_optimal: bool,
    pub reason: String,
}

/// Top-eigenspace projector, grouping eigenvalues within `gap` of the top.
fn top_projector(a: &DMatrix<f64>, gap: f64) -> (DMatrix<f64>, usize) {
    let eig = linalg::sym_eig(&linalg::symmetrize(a)).expect("symmetric input");
    let top = eig.max();
    let scale = top.abs().max(eig.min().abs()).max(f64::MIN_POSITIVE);
    let n = eig.dim();
    let mut p = DMatrix::zeros(n, n);
    let mut mult = 0;
    for i in (0..n).rev() {
        if top - eig.values[i] > gap * scale {
            break;
        }
        let v = eig.vectors.column(i);
        p += v * v.transpose();
        mult += 1;
    }
    (p, mult)
}

/// Whether the Cliff-Ord and point-optimal tests escape the zero-power trap
/// with limiting power one at every size.
pub fn trap_for_cliff_ord_and_poi(
    sem: &SemSpec,
    design: &Design,
    rho_bar: f64,
    grid: &[f64],
    tol: &Tolerances,
) -> Result<TrapVerdict> {
    let model = sem_model_from_spec(sem.clone());
    if design.n() != model.n {
        return Err(Error::ModelMismatch("weights and design sizes differ".into()));
    }
    let co = build_b(design, &model, &TestKind::CliffOrd)?;
    let poi = build_b(design, &model, &TestKind::PointOptimal { rho_bar })?;
    let f = &sem.f_max;

    if design.k() == 0 {
        let on_top = |t: &QuadFormTest| {
            !t.degenerate
                && eig_residual(&t.b, f, t.lambda_max(), linalg::spectral_norm(&t.b)) <= tol.eigvec
        };
        let (a, b) = (on_top(&co), on_top(&poi));
        return Ok(TrapVerdict {
            cliff_ord: a,
            point_optimal: b,
            reason: if a && b {
                "f_max lies in the top eigenspace of B".into()
            } else {
                "f_max is not in the top eigenspace of B for every test".into()
            },
        });
    }
    if design.residual_norm(f) <= tol.e_in_span {
        return Ok(TrapVerdict {
            cliff_ord: false,
            point_optimal: false,
            reason: "f_max lies in span(X); limits are strictly between 0 and 1".into(),
        });
    }
    if design.m() <= 1 {
        return Ok(TrapVerdict {
            cliff_ord: false,
            point_optimal: false,
            reason: "n - k = 1 leaves a constant statistic".into(),
        });
    }
    let c = &design.c;
    let mut reference: Option<(DMatrix<f64>, usize)> = None;
    for &r in grid.iter().filter(|&&r| r > 0.0) {
        let (p, mult) = top_projector(&(c * model.sigma(r) * c.transpose()), 1e-8);
        match &reference {
            None => reference = Some((p, mult)),
            Some((p0, m0)) => {
                let drift = (&p - p0).norm();
                if mult != *m0 || drift > 1e-6 {
                    return Err(Error::ConditionUnverifiable(format!(
                        "top eigenspace of C Sigma(rho) C' moves along the grid (drift {drift:.3e} at rho = {r})"
                    )));
                }
            }
        }
    }
    if reference.is_none() {
        return Err(Error::InvalidArgument("grid has no point with rho > 0".into()));
    }
    Ok(TrapVerdict {
        cliff_ord: !co.degenerate,
        point_optimal: !poi.degenerate,
        reason: "f_max outside span(X) with a stable top eigenspace".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistinguishabilityReport {
    pub indistinguishable: bool,
    /// `(rho, delta(rho))` pairs, present when indistinguishable.
    pub delta: Option<Vec<(f64, f64)>>,
    /// For SEM: whether span(X)^perp is an eigenspace of W'.
    pub structural: Option<bool>,
    pub max_deviation: f64,
    pub deviations: Vec<(f64, f64)>,
    /// Recorded, not verified.
    pub assumes_elliptical: bool,
}

/// `a j / 10` for `j = 0..9` followed by `a (1 - 2^{-m})` for `m = 4..16`.
pub fn indistinguishability_grid(a: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..10).map(|j| a * j as f64 / 10.0).collect();
    g.extend((4..=16).map(|m| a * (1.0 - 2f64.powi(-m))));
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// `C Sigma(rho) C'`. For SEM this goes through `C (I - rho W)^{-1}`, solved
/// rather than multiplied out, which keeps the error relative to the
/// residual block instead of to the exploding `||Sigma||`.
fn residual_covariance(model: &CovarianceModel, c: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    match &model.sem {
        Some(sem) => {
            let n = sem.n();
            let a = (DMatrix::identity(n, n) - &sem.w * rho).transpose();
            let cl_t = a
                .lu()
                .solve(&c.transpose())
                .ok_or(Error::IllConditioned { rho, cond: f64::INFINITY })?;
            Ok(cl_t.transpose() * cl_t)
        }
        None => Ok(c * model.sigma(rho) * c.transpose()),
    }
}

/// Checks whether `C Sigma(rho) C'` is a multiple of the identity along the grid.
pub fn indistinguishability(
    model: &CovarianceModel,
    design: &Design,
    grid: &[f64],
    tol: &Tolerances,
) -> Result<DistinguishabilityReport> {
    if design.n() != model.n {
        return Err(Error::ModelMismatch("model and design sizes differ".into()));
    }
    let c = &design.c;
    let m = design.m() as f64;
    let mut deltas = Vec::with_capacity(grid.len());
    let mut deviations = Vec::with_capacity(grid.len());
    for &r in grid {
        let inner = residual_covariance(model, c, r)?;
        let delta = inner.trace() / m;
        let dev = (&inner - DMatrix::identity(design.m(), design.m()) * delta).norm() / delta;
        deltas.push((r, delta));
        deviations.push((r, dev));
    }
    let max_deviation = deviations.iter().fold(0.0_f64, |acc, d| acc.max(d.1));
    let indistinguishable = max_deviation <= tol.indist;
    let structural = model.sem.as_ref().map(|sem| {
        let p = &design.p_perp;
        let wt = sem.w.transpose();
        let lambda = (p * &wt * p).trace() / m;
        let scale = linalg::spectral_norm(&sem.w).max(1.0);
        (&wt * p - p * lambda).norm() <= tol.indist * scale
    });
    Ok(DistinguishabilityReport {
        indistinguishable,
        delta: indistinguishable.then_some(deltas),
        structural,
        max_deviation,
        deviations,
        assumes_elliptical: true,
    })
}
