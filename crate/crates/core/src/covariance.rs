//! Covariance families `rho -> Sigma(rho)` on `[0, a)`, their concentration
//! direction `e`, the scaled limit `Lambda` and the off-diagonal decay check.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, proj_onto, proj_perp, sign_fix, sym_eig_unchecked, SymEig};
use crate::tol::Tolerances;

type MatFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Ar1Case {
    /// `Sigma_ij = rho^|i-j|`, positive autocorrelation.
    I,
    /// `Sigma_ij = (-rho)^|i-j|`, negative autocorrelation.
    II,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Sem,
    Ar1(Ar1Case),
    Ex1,
    Ex2 { gamma: f64 },
    Stretch,
    Custom,
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Sem => "SEM",
            ModelKind::Ar1(Ar1Case::I) => "AR1_I",
            ModelKind::Ar1(Ar1Case::II) => "AR1_II",
            ModelKind::Ex1 => "EX1",
            ModelKind::Ex2 { .. } => "EX2",
            ModelKind::Stretch => "STRETCH",
            ModelKind::Custom => "Custom",
        }
    }
}

/// A validated spatial weights matrix with its dominant eigenpair.
#[derive(Debug, Clone)]
pub struct SemSpec {
    pub w: DMatrix<f64>,
    pub lambda_max: f64,
    /// Normalized eigenvector of `W` for `lambda_max`, sign-fixed.
    pub f_max: DVector<f64>,
    pub symmetric: bool,
}

const POWER_MAX_ITER: usize = 10_000;

impl SemSpec {
    pub fn new(w: DMatrix<f64>) -> Result<SemSpec> {
        let n = w.nrows();
        if w.ncols() != n {
            return Err(Error::ShapeError(format!("weights matrix is {}x{}", n, w.ncols())));
        }
        if n < 2 {
            return Err(Error::DimError(format!("need n >= 2, got {n}")));
        }
        linalg::check_finite(&w)?;
        let scale = linalg::max_abs(&w);
        if scale == 0.0 {
            return Err(Error::BadWeights("weights matrix is zero".into()));
        }
        if (0..n).any(|i| w[(i, i)].abs() > 1e-12 * scale) {
            return Err(Error::BadWeights("diagonal must be zero".into()));
        }
        let symmetric = linalg::check_symmetric(&w, 1e-12).is_ok();
        let (lambda_max, f_max) = if symmetric {
            Self::dominant_symmetric(&w)?
        } else {
            Self::dominant_general(&w)?
        };
        Ok(SemSpec {
            w,
            lambda_max,
            f_max,
            symmetric,
        })
    }

    fn gap_tol(lambda: f64) -> f64 {
        1e-8 * lambda.max(1.0)
    }

    fn dominant_symmetric(w: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
        let eig = sym_eig_unchecked(&linalg::symmetrize(w));
        let n = eig.dim();
        let lmax = eig.max();
        if lmax <= 0.0 {
            return Err(Error::BadWeights("no positive eigenvalue".into()));
        }
        if eig.values[n - 2] > lmax - Self::gap_tol(lmax) {
            return Err(Error::BadWeights(format!(
                "dominant eigenvalue {lmax} is not simple"
            )));
        }
        if eig.min().abs() > lmax * (1.0 + 1e-9) {
            return Err(Error::BadWeights(format!(
                "eigenvalue {} exceeds lambda_max = {lmax} in modulus",
                eig.min()
            )));
        }
        Ok((lmax, eig.top_vector()))
    }

    fn dominant_general(w: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
        let eigs = w.complex_eigenvalues();
        let scale = eigs.iter().fold(0.0_f64, |m, z| m.max(z.norm())).max(1e-300);
        let lmax = eigs
            .iter()
            .filter(|z| z.im.abs() <= 1e-9 * scale)
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if !(lmax > 0.0) {
            return Err(Error::BadWeights("no positive real eigenvalue".into()));
        }
        if eigs.iter().any(|z| z.norm() > lmax * (1.0 + 1e-9)) {
            return Err(Error::BadWeights(format!(
                "an eigenvalue exceeds lambda_max = {lmax} in modulus"
            )));
        }
        let gap = Self::gap_tol(lmax);
        let near = eigs.iter().filter(|z| (*z - lmax).norm() <= gap.sqrt()).count();
        if near > 1 {
            return Err(Error::BadWeights(format!(
                "dominant eigenvalue {lmax} has multiplicity > 1"
            )));
        }
        let mut f = dominant_vector(w, lmax);
        sign_fix(&mut f);
        Ok((lmax, f))
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Upper end of the parameter range, `1 / lambda_max`.
    pub fn a(&self) -> f64 {
        1.0 / self.lambda_max
    }

    /// `(I - rho W)^{-1}`, the natural square root factor of `Sigma_SEM(rho)`.
    pub fn l_factor(&self, rho: f64) -> DMatrix<f64> {
        let n = self.n();
        let m = DMatrix::identity(n, n) - &self.w * rho;
        linalg::inverse(&m).expect("I - rho W is nonsingular on [0, 1/lambda_max)")
    }

    /// `[(I - rho W')(I - rho W)]^{-1}`.
    pub fn sigma(&self, rho: f64) -> DMatrix<f64> {
        let l = self.l_factor(rho);
        linalg::symmetrize(&(&l * l.transpose()))
    }

    /// Closed form `(I - lambda_max^{-1} P W)^{-1} - Pi_f` with
    /// `P = Pi_{span(f)^perp}`.
    pub fn lambda_closed_form(&self) -> DMatrix<f64> {
        let n = self.n();
        let perp = proj_perp(&self.f_max);
        let m = DMatrix::identity(n, n) - &perp * &self.w / self.lambda_max;
        let inv = linalg::inverse(&m).expect("closed-form Lambda matrix is invertible");
        inv - proj_onto(&self.f_max)
    }

    /// Equal-weights matrix (`w_ij = 1` for `i != j`).
    pub fn equal_weights(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
    }
}

/// Shifted power iteration for the eigenvector of `lambda` (the dominant real
/// eigenvalue). The shift moves other eigenvalues on the spectral circle off
/// it. Falls back to the SVD null vector of `W - lambda I`.
fn dominant_vector(w: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let n = w.nrows();
    let shifted = w + DMatrix::identity(n, n) * lambda;
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    // perturb off any symmetric subspace
    for i in 0..n {
        v[i] += 1e-3 * (i as f64 + 1.0).sin();
    }
    v.normalize_mut();
    for _ in 0..POWER_MAX_ITER {
        let mut next = &shifted * &v;
        let nn = next.norm();
        if nn == 0.0 {
            break;
        }
        next /= nn;
        v = next;
        let res = (w * &v - &v * lambda).norm();
        if res <= 1e-10 * lambda {
            return v;
        }
    }
    let m = w - DMatrix::identity(n, n) * lambda;
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    vt.row(imin).transpose().normalize()
}

/// A covariance family on `[0, a)` with optional analytic limit quantities.
#[derive(Clone)]
pub struct CovarianceModel {
    pub kind: ModelKind,
    pub n: usize,
    pub a: f64,
    sigma_fn: MatFn,
    pub analytic_e: Option<DVector<f64>>,
    analytic_c: Option<ScalarFn>,
    pub analytic_lambda: Option<DMatrix<f64>>,
    /// Derivative of `Sigma` at 0 when known in closed form.
    pub analytic_sigma_dot: Option<DMatrix<f64>>,
    pub sem: Option<SemSpec>,
}

impl fmt::Debug for CovarianceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CovarianceModel")
            .field("kind", &self.kind)
            .field("n", &self.n)
            .field("a", &self.a)
            .field("analytic_e", &self.analytic_e.is_some())
            .field("analytic_c", &self.analytic_c.is_some())
            .field("analytic_lambda", &self.analytic_lambda.is_some())
            .finish()
    }
}

impl CovarianceModel {
    /// User-defined family. `Sigma(0)` must be the identity.
    pub fn custom(
        n: usize,
        a: f64,
        sigma_fn: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<CovarianceModel> {
        if n < 2 {
            return Err(Error::DimError(format!("need n >= 2, got {n}")));
        }
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidArgument(format!("boundary a must be positive, got {a}")));
        }
        let model = CovarianceModel {
            kind: ModelKind::Custom,
            n,
            a,
            sigma_fn: Arc::new(sigma_fn),
            analytic_e: None,
            analytic_c: None,
            analytic_lambda: None,
            analytic_sigma_dot: None,
            sem: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_e(mut self, e: DVector<f64>) -> Self {
        let mut e = e.normalize();
        sign_fix(&mut e);
        self.analytic_e = Some(e);
        self
    }

    pub fn with_c(mut self, c: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.analytic_c = Some(Arc::new(c));
        self
    }

    pub fn with_sigma_dot(mut self, d: DMatrix<f64>) -> Self {
        self.analytic_sigma_dot = Some(d);
        self
    }

    /// Checks `Sigma(0) = I` and positive definiteness at a few interior points.
    pub fn validate(&self) -> Result<()> {
        let s0 = self.sigma(0.0);
        if s0.nrows() != self.n || s0.ncols() != self.n {
            return Err(Error::ShapeError(format!(
                "Sigma(0) is {}x{}, expected {n}x{n}",
                s0.nrows(),
                s0.ncols(),
                n = self.n
            )));
        }
        let dev = linalg::max_abs(&(s0 - DMatrix::identity(self.n, self.n)));
        if dev > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "Sigma(0) must be the identity (deviation {dev:.3e})"
            )));
        }
        for frac in [0.25, 0.5, 0.9] {
            let s = self.sigma(frac * self.a);
            linalg::check_symmetric(&s, 1e-8)?;
            let eig = sym_eig_unchecked(&linalg::symmetrize(&s));
            if eig.min() <= 0.0 {
                return Err(Error::NotPsd(eig.min()));
            }
        }
        Ok(())
    }

    pub fn sigma(&self, rho: f64) -> DMatrix<f64> {
        (self.sigma_fn)(rho)
    }

    pub fn has_scaling(&self) -> bool {
        self.analytic_c.is_some()
    }

    pub fn c(&self, rho: f64) -> Option<f64> {
        self.analytic_c.as_ref().map(|c| c(rho))
    }

    /// `Sigma'(0)`: closed form when known, otherwise a forward difference
    /// with one Richardson step (`h = 1e-5 a` and `h/2`).
    pub fn sigma_dot_zero(&self) -> DMatrix<f64> {
        if let Some(d) = &self.analytic_sigma_dot {
            return d.clone();
        }
        let h = 1e-5 * self.a;
        let s0 = self.sigma(0.0);
        let d1 = (self.sigma(h) - &s0) / h;
        let d2 = (self.sigma(h / 2.0) - &s0) / (h / 2.0);
        linalg::symmetrize(&(d2 * 2.0 - d1))
    }
}

/// Spatial error model `Sigma(rho) = [(I - rho W')(I - rho W)]^{-1}`.
pub fn sem_model(w: &DMatrix<f64>) -> Result<CovarianceModel> {
    let spec = SemSpec::new(w.clone())?;
    Ok(sem_model_from_spec(spec))
}

pub fn sem_model_from_spec(spec: SemSpec) -> CovarianceModel {
    let n = spec.n();
    let a = spec.a();
    let lambda = spec.lambda_closed_form();
    let dot = &spec.w + spec.w.transpose();
    let for_sigma = spec.clone();
    CovarianceModel {
        kind: ModelKind::Sem,
        n,
        a,
        sigma_fn: Arc::new(move |rho| for_sigma.sigma(rho)),
        analytic_e: Some(spec.f_max.clone()),
        analytic_c: Some(Arc::new(|_| 1.0)),
        analytic_lambda: Some(lambda),
        analytic_sigma_dot: Some(dot),
        sem: Some(spec),
    }
}

/// Stationary AR(1) correlation matrices on `[0, 1)`.
pub fn ar1_model(n: usize, case: Ar1Case) -> Result<CovarianceModel> {
    if n < 2 {
        return Err(Error::DimError(format!("AR(1) needs n >= 2, got {n}")));
    }
    let sign = match case {
        Ar1Case::I => 1.0,
        Ar1Case::II => -1.0,
    };
    let sigma = move |rho: f64| {
        DMatrix::from_fn(n, n, |i, j| (sign * rho).powi(i.abs_diff(j) as i32))
    };
    let e = match case {
        Ar1Case::I => DVector::from_element(n, 1.0),
        Ar1Case::II => DVector::from_fn(n, |i, _| if i % 2 == 0 { -1.0 } else { 1.0 }),
    };
    let dot = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { sign } else { 0.0 });
    let mut model = CovarianceModel::custom(n, 1.0, sigma)?
        .with_e(e)
        .with_c(|rho| (1.0 - rho).powf(-0.5))
        .with_sigma_dot(dot);
    model.kind = ModelKind::Ar1(case);
    Ok(model)
}

/// `Sigma(rho) = I + rho/(1-rho) e e'` on `[0, 1)`.
pub fn ex1_model(e: &DVector<f64>) -> Result<CovarianceModel> {
    let n = e.len();
    if n < 2 {
        return Err(Error::DimError(format!("need n >= 2, got {n}")));
    }
    if !(e.norm() > 0.0) {
        return Err(Error::InvalidArgument("direction must be nonzero".into()));
    }
    let e = e.normalize();
    let eet = &e * e.transpose();
    let perp = proj_perp(&e);
    let sigma = move |rho: f64| DMatrix::identity(n, n) + &eet * (rho / (1.0 - rho));
    let mut model = CovarianceModel::custom(n, 1.0, sigma)?
        .with_e(e.clone())
        .with_c(|_| 1.0);
    model.analytic_lambda = Some(perp);
    model.kind = ModelKind::Ex1;
    Ok(model)
}

/// Angle path `phi(rho) = (pi/2)(1 - (1-rho)^gamma)` used by [`ex2_model`].
pub fn ex2_angle(rho: f64, gamma: f64) -> f64 {
    FRAC_PI_2 * (1.0 - (1.0 - rho).powf(gamma))
}

/// Two-dimensional family whose rank-one direction `e(rho)` rotates towards
/// `(0, 1)'`: `Sigma(rho) = I + rho/(1-rho) e(rho) e(rho)'`.
pub fn ex2_model(gamma: f64) -> Result<CovarianceModel> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let sigma = move |rho: f64| {
        let phi = ex2_angle(rho, gamma);
        let e = DVector::from_vec(vec![phi.cos(), phi.sin()]);
        DMatrix::identity(2, 2) + &e * e.transpose() * (rho / (1.0 - rho))
    };
    let mut model =
        CovarianceModel::custom(2, 1.0, sigma)?.with_e(DVector::from_vec(vec![0.0, 1.0]));
    model.kind = ModelKind::Ex2 { gamma };
    Ok(model)
}

/// `Sigma(rho) = diag(1, 1 - rho)`; concentrates on `(1, 0)'` although
/// `Sigma^{-1}` has no limit.
pub fn stretch_model() -> Result<CovarianceModel> {
    let sigma = |rho: f64| DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0 - rho]));
    let mut model = CovarianceModel::custom(2, 1.0, sigma)?
        .with_e(DVector::from_vec(vec![1.0, 0.0]))
        .with_c(|rho| (1.0 - rho).powf(-0.5));
    model.kind = ModelKind::Stretch;
    Ok(model)
}

/// Built-in example families.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleSpec {
    Ex1 { e: DVector<f64> },
    Ex2 { gamma: f64 },
    Stretch,
}

pub fn example_model(spec: &ExampleSpec) -> Result<CovarianceModel> {
    match spec {
        ExampleSpec::Ex1 { e } => ex1_model(e),
        ExampleSpec::Ex2 { gamma } => ex2_model(*gamma),
        ExampleSpec::Stretch => stretch_model(),
    }
}

/// Geometric grid `a (1 - 2^{-m})` for `m = 4..=16`.
pub fn default_grid(a: f64) -> Vec<f64> {
    geometric_grid(a, 4, 16)
}

pub fn geometric_grid(a: f64, m_from: i32, m_to: i32) -> Vec<f64> {
    (m_from..=m_to).map(|m| a * (1.0 - 2f64.powi(-m))).collect()
}

fn validate_grid(model: &CovarianceModel, grid: &[f64], need_near_boundary: bool) -> Result<()> {
    if grid.len() < 3 {
        return Err(Error::InvalidArgument("grid needs at least 3 points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
    }
    if grid[0] < 0.0 || *grid.last().unwrap() >= model.a {
        return Err(Error::InvalidArgument(format!(
            "grid must lie in [0, {})",
            model.a
        )));
    }
    if need_near_boundary && *grid.last().unwrap() < model.a * (1.0 - 1e-4) {
        return Err(Error::InvalidArgument(format!(
            "last grid point must be >= a(1 - 1e-4) = {}",
            model.a * (1.0 - 1e-4)
        )));
    }
    Ok(())
}

/// Outcome of the concentration check `Sigma(rho) / lambda_n -> e e'`.
#[derive(Debug, Clone)]
pub struct ConcentrationCheck {
    /// Leading eigenvector of `Sigma` at the last grid point, sign-fixed.
    pub e_hat: DVector<f64>,
    /// Direction used downstream: the analytic `e` when the model has one,
    /// otherwise `e_hat`.
    pub e: DVector<f64>,
    pub residuals: Vec<f64>,
    /// `|<e_hat, e>|` when an analytic direction exists.
    pub alignment: Option<f64>,
    pub passed: bool,
}

fn tail_nonincreasing(values: &[f64], len: usize) -> bool {
    let start = values.len().saturating_sub(len);
    values[start..].windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15)
}

pub fn concentration_direction(
    model: &CovarianceModel,
    grid: &[f64],
    tol: &Tolerances,
) -> Result<ConcentrationCheck> {
    validate_grid(model, grid, true)?;
    let eigs: Vec<SymEig> = grid
        .iter()
        .map(|&r| sym_eig_unchecked(&linalg::symmetrize(&model.sigma(r))))
        .collect();
    let last = eigs.last().unwrap();
    let mut e_hat = last.top_vector();
    sign_fix(&mut e_hat);
    let eet = &e_hat * e_hat.transpose();
    let residuals: Vec<f64> = grid
        .iter()
        .zip(&eigs)
        .map(|(&r, eig)| (model.sigma(r) / eig.max() - &eet).norm())
        .collect();
    if !tail_nonincreasing(&residuals, 3) {
        return Err(Error::NotConcentrating(format!(
            "residuals {:?} do not decrease towards the boundary",
            &residuals[residuals.len() - 3..]
        )));
    }
    let mut passed = *residuals.last().unwrap() <= tol.check;
    let alignment = model.analytic_e.as_ref().map(|e| e.dot(&e_hat).abs());
    if let Some(al) = alignment {
        passed &= al >= 1.0 - tol.direction;
    }
    let e = model.analytic_e.clone().unwrap_or_else(|| e_hat.clone());
    Ok(ConcentrationCheck {
        e_hat,
        e,
        residuals,
        alignment,
        passed,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub(crate) fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let m = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Where the scaling `c(rho)` came from.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum ScalingSource {
    Analytic,
    /// `c(rho) = (a - rho)^{-slope/2}` from a log-log fit.
    Detected { slope: f64 },
}

#[derive(Clone)]
pub struct Scaling {
    pub source: ScalingSource,
    a: f64,
    model: CovarianceModel,
}

impl Scaling {
    pub fn eval(&self, rho: f64) -> f64 {
        match self.source {
            ScalingSource::Analytic => self.model.c(rho).expect("analytic scaling present"),
            ScalingSource::Detected { slope } => (self.a - rho).powf(-slope / 2.0),
        }
    }
}

/// Analytic `c(rho)` if present, otherwise fits the decay exponent of
/// `||Pi_perp Sigma Pi_perp||` against `a - rho` over the last grid points.
pub fn scaling(model: &CovarianceModel, e: &DVector<f64>, grid: &[f64]) -> Result<Scaling> {
    if model.has_scaling() {
        return Ok(Scaling {
            source: ScalingSource::Analytic,
            a: model.a,
            model: model.clone(),
        });
    }
    let perp = proj_perp(e);
    let tail = &grid[grid.len().saturating_sub(6)..];
    let dist: Vec<f64> = tail.iter().map(|r| model.a - r).collect();
    let norms: Vec<f64> = tail
        .iter()
        .map(|&r| (&perp * model.sigma(r) * &perp).norm())
        .collect();
    let slope = log_log_slope(&dist, &norms);
    if !slope.is_finite() {
        return Err(Error::NoScaling(format!(
            "could not fit a decay exponent (norms {norms:?})"
        )));
    }
    Ok(Scaling {
        source: ScalingSource::Detected { slope },
        a: model.a,
        model: model.clone(),
    })
}

/// The scaled limit `Lambda` with its provenance.
#[derive(Debug, Clone)]
pub struct LimitMatrix {
    pub lambda: DMatrix<f64>,
    /// `V = Lambda Lambda'`.
    pub v: DMatrix<f64>,
    pub e: DVector<f64>,
    pub closed_form: bool,
    pub scaling: ScalingSource,
    /// Smallest singular value of `Lambda` on span(e)^perp.
    pub min_singular: f64,
}

/// `Lambda` for the model: the closed form for SEM, otherwise the symmetric
/// square root of `V = lim c^2 Pi Sigma Pi` with `Pi = Pi_{span(e)^perp}`,
/// linearly extrapolated to `rho = a` from the last two grid points.
pub fn limit_lambda(model: &CovarianceModel, grid: &[f64], tol: &Tolerances) -> Result<LimitMatrix> {
    let conc = concentration_direction(model, grid, tol)?;
    if !conc.passed {
        return Err(Error::NotConcentrating(format!(
            "residual {:.3e} at the last grid point",
            conc.residuals.last().unwrap()
        )));
    }
    let e = conc.e.clone();
    let basis = linalg::residual_basis(&DMatrix::from_column_slice(model.n, 1, e.as_slice()))?;
    let (lambda, v, scaling_source, closed_form) = if let Some(l) = &model.analytic_lambda {
        let v = l * l.transpose();
        (l.clone(), v, ScalingSource::Analytic, true)
    } else {
        let sc = scaling(model, &e, grid)?;
        let perp = proj_perp(&e);
        let scaled = |r: f64| {
            let c = sc.eval(r);
            linalg::symmetrize(&(&perp * model.sigma(r) * &perp)) * (c * c)
        };
        let rl = grid[grid.len() - 1];
        let rp = grid[grid.len() - 2];
        let vl = scaled(rl);
        let vp = scaled(rp);
        let (tl, tp) = (model.a - rl, model.a - rp);
        let v = &vl + (&vl - &vp) * (tl / (tp - tl));
        let change = (&vl - &vp).norm() / vl.norm().max(1e-300);
        if !change.is_finite() || change > 0.25 {
            return Err(Error::NoScaling(format!(
                "scaled limit does not settle (relative change {change:.3e})"
            )));
        }
        // square root taken on span(e)^perp so that Lambda e = 0 exactly
        let q = &basis.c;
        let inner = linalg::symmetrize(&(q * &v * q.transpose()));
        let root = linalg::sqrt_from_eig(&sym_eig_unchecked(&inner), 1e-6)?;
        let lambda = q.transpose() * root * q;
        let v = &lambda * &lambda;
        (lambda, v, sc.source, false)
    };
    let scale = linalg::max_abs(&lambda).max(1.0);
    if (&lambda * &e).norm() > 1e-8 * scale {
        return Err(Error::NotInjective(0.0));
    }
    // singular values of Lambda restricted to span(e)^perp
    let restricted = &lambda * basis.c.transpose();
    let sv = restricted.singular_values();
    let min_singular = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min_singular < 1e-8 {
        return Err(Error::NotInjective(min_singular));
    }
    Ok(LimitMatrix {
        lambda,
        v,
        e,
        closed_form,
        scaling: scaling_source,
        min_singular,
    })
}

/// Result of the off-diagonal decay check
/// `lambda_n^{-1/2} c Pi_{e perp} Sigma Pi_e -> 0`.
#[derive(Debug, Clone)]
pub struct OffdiagCheck {
    pub residuals: Vec<f64>,
    /// Fitted power-law exponent of the residuals in `a - rho`.
    pub decay_exponent: f64,
    pub passed: bool,
}

/// The check passes when the residual at the last grid point is below
/// `tol.check`, or when the residuals are nonincreasing over the tail with a
/// positive fitted decay exponent (at least 0.2), i.e. they vanish like a
/// power of `a - rho`.
pub fn offdiag_check(model: &CovarianceModel, grid: &[f64], tol: &Tolerances) -> Result<OffdiagCheck> {
    let conc = concentration_direction(model, grid, tol)?;
    let e = conc.e;
    let sc = scaling(model, &e, grid)?;
    let perp = proj_perp(&e);
    let along = proj_onto(&e);
    let residuals: Vec<f64> = grid
        .iter()
        .map(|&r| {
            let s = model.sigma(r);
            let ln = sym_eig_unchecked(&linalg::symmetrize(&s)).max();
            sc.eval(r) * (&perp * &s * &along).norm() / ln.sqrt()
        })
        .collect();
    let tail = &grid[grid.len().saturating_sub(6)..];
    let dist: Vec<f64> = tail.iter().map(|r| model.a - r).collect();
    let decay_exponent = log_log_slope(&dist, &residuals[residuals.len() - tail.len()..]);
    let last = *residuals.last().unwrap();
    let passed = last <= tol.check
        || (tail_nonincreasing(&residuals, 4) && decay_exponent.is_finite() && decay_exponent >= 0.2);
    Ok(OffdiagCheck {
        residuals,
        decay_exponent,
        passed,
    })
}

/// `c(rho) Pi_{e perp} Sigma^{1/2}(rho)` at the last grid point: the limit
/// map under the symmetric square-root convention.
pub fn scaled_symmetric_root(
    model: &CovarianceModel,
    e: &DVector<f64>,
    grid: &[f64],
) -> Result<DMatrix<f64>> {
    let sc = scaling(model, e, grid)?;
    let r = *grid.last().unwrap();
    let root = linalg::sqrt_from_eig(&sym_eig_unchecked(&linalg::symmetrize(&model.sigma(r))), 1e-10)?;
    Ok(proj_perp(e) * root * sc.eval(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    fn swap() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn sem_swap_matrix() {
        let m = sem_model(&swap()).unwrap();
        let s = m.sem.as_ref().unwrap();
        assert!((s.lambda_max - 1.0).abs() < 1e-14);
        assert!((m.a - 1.0).abs() < 1e-14);
        let h = 0.5_f64.sqrt();
        assert!((s.f_max[0] - h).abs() < 1e-12 && (s.f_max[1] - h).abs() < 1e-12);
        assert!(max_abs(&(m.sigma(0.0) - DMatrix::identity(2, 2))) < 1e-15);
    }

    #[test]
    fn sem_equal_weights() {
        for n in [3, 5, 6] {
            let m = sem_model(&SemSpec::equal_weights(n)).unwrap();
            let s = m.sem.unwrap();
            assert!((s.lambda_max - (n as f64 - 1.0)).abs() < 1e-10);
            let expect = DVector::from_element(n, 1.0 / (n as f64).sqrt());
            assert!((s.f_max - expect).norm() < 1e-10);
        }
    }

    #[test]
    fn sem_rejects_bad_weights() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert!(matches!(sem_model(&w), Err(Error::BadWeights(_))));
        // negative dominant eigenvalue only
        let w = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        // eigenvalues -1 and 1 with f = (1,-1)/sqrt2; lambda_max = 1 is valid
        assert!(sem_model(&w).is_ok());
        // eigenvalues are +-i: no positive real eigenvalue
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(matches!(sem_model(&w), Err(Error::BadWeights(_))));
        // block diagonal with repeated Perron root
        let mut w = DMatrix::zeros(4, 4);
        w[(0, 1)] = 1.0;
        w[(1, 0)] = 1.0;
        w[(2, 3)] = 1.0;
        w[(3, 2)] = 1.0;
        assert!(matches!(sem_model(&w), Err(Error::BadWeights(_))));
    }

    #[test]
    fn sem_nonsymmetric_perron_vector_positive() {
        // row-standardized ring with one extra link
        let w = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.5, 0.0, 0.5, //
                0.5, 0.0, 0.5, 0.0, //
                0.0, 0.3, 0.0, 0.7, //
                0.5, 0.2, 0.3, 0.0,
            ],
        );
        let s = SemSpec::new(w.clone()).unwrap();
        assert!(!s.symmetric);
        assert!((s.lambda_max - 1.0).abs() < 1e-10, "row sums are one");
        assert!(s.f_max.iter().all(|v| *v > 0.0));
        assert!((&w * &s.f_max - &s.f_max * s.lambda_max).norm() < 1e-9);
    }

    #[test]
    fn ar1_entries() {
        let m = ar1_model(3, Ar1Case::I).unwrap();
        let s = m.sigma(0.5);
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
        assert!(max_abs(&(s - expect)) < 1e-15);
        let m2 = ar1_model(2, Ar1Case::II).unwrap();
        assert!((m2.sigma(0.5)[(0, 1)] + 0.5).abs() < 1e-15);
        for n in [2, 5] {
            let m = ar1_model(n, Ar1Case::II).unwrap();
            assert!(max_abs(&(m.sigma(0.0) - DMatrix::identity(n, n))) == 0.0);
        }
        assert!(matches!(ar1_model(1, Ar1Case::I), Err(Error::DimError(_))));
    }

    #[test]
    fn example_models() {
        let m = ex1_model(&DVector::from_vec(vec![0.0, 1.0])).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert!(max_abs(&(m.sigma(0.5) - expect)) < 1e-14);
        let m = ex2_model(0.1).unwrap();
        assert!(max_abs(&(m.sigma(0.0) - DMatrix::identity(2, 2))) < 1e-15);
        let m = stretch_model().unwrap();
        let c = concentration_direction(&m, &default_grid(1.0), &tol()).unwrap();
        assert!(c.passed);
        assert!((c.e_hat - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn concentration_examples() {
        let m = sem_model(&swap()).unwrap();
        let c = concentration_direction(&m, &default_grid(m.a), &tol()).unwrap();
        assert!(c.passed);
        let h = 0.5_f64.sqrt();
        assert!((c.e_hat - DVector::from_vec(vec![h, h])).norm() < 1e-8);

        let m = ar1_model(4, Ar1Case::I).unwrap();
        let c = concentration_direction(&m, &default_grid(1.0), &tol()).unwrap();
        assert!(c.passed);
        assert!((c.e_hat - DVector::from_element(4, 0.5)).norm() < 1e-4);

        let m = ar1_model(5, Ar1Case::II).unwrap();
        let c = concentration_direction(&m, &default_grid(1.0), &tol()).unwrap();
        assert!(c.passed, "{:?}", c.residuals);
    }

    #[test]
    fn non_concentrating_model_is_rejected() {
        // scaled Sigma stays proportional to a rank-2 matrix
        let m = CovarianceModel::custom(2, 1.0, |r| {
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / (1.0 - r), 0.5 + 0.5 / (1.0 - r)]))
        })
        .unwrap();
        let out = concentration_direction(&m, &default_grid(1.0), &tol());
        match out {
            Err(Error::NotConcentrating(_)) => {}
            Ok(c) => assert!(!c.passed),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn grid_validation() {
        let m = ar1_model(3, Ar1Case::I).unwrap();
        let t = tol();
        assert!(concentration_direction(&m, &[0.1, 0.5, 0.9], &t).is_err());
        assert!(concentration_direction(&m, &[0.5, 0.1, 0.99999], &t).is_err());
        assert!(concentration_direction(&m, &[0.5, 0.9, 1.0], &t).is_err());
    }

    #[test]
    fn lambda_swap_sem() {
        let m = sem_model(&swap()).unwrap();
        let l = limit_lambda(&m, &default_grid(m.a), &tol()).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!(max_abs(&(&l.lambda - &expect)) < 1e-12);
        // cross-check: V = lim Pi Sigma Pi = Pi/4 so V^{1/2} = Pi/2
        let perp = proj_perp(&m.analytic_e.clone().unwrap());
        assert!(max_abs(&(linalg::sym_sqrt(&l.v).unwrap() - perp * 0.5)) < 1e-12);
    }

    fn random_symmetric_weights(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v: f64 = rng.random_range(0.1..1.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        w
    }

    #[test]
    fn sem_symmetric_properties() {
        for (n, seed) in [(3, 1), (5, 2), (8, 3), (10, 4)] {
            let w = random_symmetric_weights(n, seed);
            let m = sem_model(&w).unwrap();
            let s = m.sem.clone().unwrap();
            for rho in [0.0, 0.3 * m.a, 0.9 * m.a, 0.999 * m.a] {
                let sig = m.sigma(rho);
                let alt = linalg::inverse(&(DMatrix::identity(n, n) - &w * rho)).unwrap();
                let alt = &alt * &alt;
                assert!(max_abs(&(&sig - &alt)) <= 1e-9 * max_abs(&alt));
                let ev = (1.0 - rho * s.lambda_max).powi(-2);
                assert!((&sig * &s.f_max - &s.f_max * ev).norm() <= 1e-9 * ev);
            }
            // closed form vs the numeric V route
            let grid = default_grid(m.a);
            let closed = limit_lambda(&m, &grid, &tol()).unwrap();
            assert!(max_abs(&(&closed.lambda - closed.lambda.transpose())) < 1e-10);
            let mut numeric = m.clone();
            numeric.analytic_lambda = None;
            let num = limit_lambda(&numeric, &grid, &tol()).unwrap();
            assert!(
                max_abs(&(&num.lambda - &closed.lambda)) < 1e-4,
                "n = {n}: {}",
                max_abs(&(&num.lambda - &closed.lambda))
            );
            assert!(s.f_max.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn sem_identifiability() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = 3 + trial % 4;
            let w = random_symmetric_weights(n, 100 + trial as u64);
            let m = sem_model(&w).unwrap();
            let (r1, r2): (f64, f64) = (rng.random_range(0.0..0.99), rng.random_range(0.0..0.99));
            let (s1, s2): (f64, f64) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
            let a = m.sigma(r1 * m.a) * (s1 * s1);
            let b = m.sigma(r2 * m.a) * (s2 * s2);
            assert!(max_abs(&(a - b)) > 1e-8);
        }
    }

    #[test]
    fn ar1_scaling_exponent_is_one() {
        // log ||Pi Sigma Pi|| vs log(1 - rho) on [0.9, 0.9999]
        for (n, case) in [(3, Ar1Case::I), (6, Ar1Case::I), (5, Ar1Case::II)] {
            let mut m = ar1_model(n, case).unwrap();
            let e = m.analytic_e.clone().unwrap();
            let grid: Vec<f64> = (0..12).map(|i| 1.0 - 0.1 * 10f64.powf(-3.0 * i as f64 / 11.0)).collect();
            m.analytic_c = None;
            let sc = scaling(&m, &e, &grid).unwrap();
            match sc.source {
                ScalingSource::Detected { slope } => assert!((slope - 1.0).abs() < 0.01, "{slope}"),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn lambda_annihilates_e_and_offdiag() {
        let t = tol();
        let w = random_symmetric_weights(5, 9);
        let cases = vec![
            sem_model(&w).unwrap(),
            ar1_model(4, Ar1Case::I).unwrap(),
            ar1_model(5, Ar1Case::II).unwrap(),
            ex1_model(&DVector::from_vec(vec![1.0, 2.0, 2.0])).unwrap(),
            stretch_model().unwrap(),
        ];
        for m in cases {
            let grid = default_grid(m.a);
            let l = limit_lambda(&m, &grid, &t).unwrap();
            assert!((&l.lambda * &l.e).norm() < 1e-8, "{:?}", m.kind);
            let off = offdiag_check(&m, &grid, &t).unwrap();
            assert!(off.passed, "{:?}: {:?}", m.kind, off.residuals);
        }
    }

    #[test]
    fn offdiag_fails_for_nonsymmetric_sem() {
        let w = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, 0.2, 0.0, 0.8, 0.9, 0.1, 0.0],
        );
        let m = sem_model(&w).unwrap();
        let off = offdiag_check(&m, &default_grid(m.a), &tol()).unwrap();
        assert!(!off.passed, "{:?}", off.residuals);
    }

    #[test]
    fn sigma_dot_matches_closed_forms() {
        let w = random_symmetric_weights(4, 5);
        let m = sem_model(&w).unwrap();
        let mut numeric = m.clone();
        numeric.analytic_sigma_dot = None;
        let fd = numeric.sigma_dot_zero();
        assert!(max_abs(&(fd - (&w + w.transpose()))) < 1e-4);
        let a = ar1_model(4, Ar1Case::I).unwrap();
        let mut numeric = a.clone();
        numeric.analytic_sigma_dot = None;
        assert!(max_abs(&(numeric.sigma_dot_zero() - a.sigma_dot_zero())) < 1e-4);
    }
}
