//! Monte Carlo rejection probabilities under `y = X beta + sigma L(rho) z`.
//!
//! Replications are grouped in fixed-size blocks. Each block draws from its
//! own counter-based stream keyed by `(seed, rho, block)`, and the block hit
//! counts are summed, so estimates do not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::covariance::{ex1_model, ex2_angle, ex2_model, CovarianceModel, SemSpec};
use crate::error::{Error, Result};
use crate::invariant::QuadFormTest;
use crate::linalg::{self, sym_eig_unchecked};
use crate::rng::block_rng;

/// Largest condition number of `Sigma(rho)` accepted for simulation.
pub const MAX_CONDITION: f64 = 1e14;

/// Spherically symmetric noise with identity covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian,
    /// Multivariate t with `nu > 2` degrees of freedom, rescaled to unit variance.
    SphericalT { nu: f64 },
    /// `z = s g` with `s` drawn from a discrete law, normalized to `E s^2 = 1`.
    ScaleMixture { scales: Vec<f64>, probs: Vec<f64> },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Gaussian => Ok(()),
            NoiseSpec::SphericalT { nu } => {
                if *nu > 2.0 && nu.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("t noise needs nu > 2, got {nu}")))
                }
            }
            NoiseSpec::ScaleMixture { scales, probs } => {
                let ok = !scales.is_empty()
                    && scales.len() == probs.len()
                    && scales.iter().all(|s| *s > 0.0 && s.is_finite())
                    && probs.iter().all(|p| *p >= 0.0)
                    && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9;
                if ok {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(
                        "scale mixture needs positive scales and probabilities summing to 1".into(),
                    ))
                }
            }
        }
    }

    fn sampler(&self) -> NoiseSampler {
        match self {
            NoiseSpec::Gaussian => NoiseSampler::Gaussian,
            NoiseSpec::SphericalT { nu } => NoiseSampler::T {
                chi: ChiSquared::new(*nu).expect("validated nu"),
                nu: *nu,
                unit: ((nu - 2.0) / nu).sqrt(),
            },
            NoiseSpec::ScaleMixture { scales, probs } => {
                let norm = scales.iter().zip(probs).map(|(s, p)| p * s * s).sum::<f64>().sqrt();
                let mut acc = 0.0;
                let cumulative = probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                NoiseSampler::Mixture {
                    scales: scales.iter().map(|s| s / norm).collect(),
                    cumulative,
                }
            }
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSpec::Gaussian => write!(f, "gaussian"),
            NoiseSpec::SphericalT { nu } => write!(f, "t:{nu}"),
            NoiseSpec::ScaleMixture { scales, probs } => {
                let pairs: Vec<String> = scales.iter().zip(probs).map(|(s, p)| format!("{s}@{p}")).collect();
                write!(f, "mixture:{}", pairs.join(","))
            }
        }
    }
}

/// Parses `gaussian`, `t:<nu>` or `mixture:<s>@<p>,<s>@<p>,...`.
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<NoiseSpec> {
        let bad = || Error::InvalidArgument(format!("unknown noise spec '{s}'"));
        let spec = if s == "gaussian" {
            NoiseSpec::Gaussian
        } else if let Some(nu) = s.strip_prefix("t:") {
            NoiseSpec::SphericalT { nu: nu.parse().map_err(|_| bad())? }
        } else if let Some(rest) = s.strip_prefix("mixture:") {
            let mut scales = vec![];
            let mut probs = vec![];
            for item in rest.split(',') {
                let (sc, p) = item.split_once('@').ok_or_else(bad)?;
                scales.push(sc.trim().parse().map_err(|_| bad())?);
                probs.push(p.trim().parse().map_err(|_| bad())?);
            }
            NoiseSpec::ScaleMixture { scales, probs }
        } else {
            return Err(bad());
        };
        spec.validate()?;
        Ok(spec)
    }
}

enum NoiseSampler {
    Gaussian,
    T { chi: ChiSquared<f64>, nu: f64, unit: f64 },
    Mixture { scales: Vec<f64>, cumulative: Vec<f64> },
}

impl NoiseSampler {
    fn fill<R: Rng>(&self, rng: &mut R, z: &mut [f64]) {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let s = match self {
            NoiseSampler::Gaussian => return,
            NoiseSampler::T { chi, nu, unit } => unit / (chi.sample(rng) / nu).sqrt(),
            NoiseSampler::Mixture { scales, cumulative } => {
                let u: f64 = rng.random();
                let i = cumulative.iter().position(|c| u < *c).unwrap_or(scales.len() - 1);
                scales[i]
            }
        };
        for v in z.iter_mut() {
            *v *= s;
        }
    }
}

/// How `L(rho)` with `L L' = Sigma(rho)` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    SymmetricRoot,
    /// `(I - rho W)^{-1}`, SEM only.
    SemInverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Regression coefficients for the mean `X beta`; zeros when `None`.
    pub beta: Option<DVector<f64>>,
    pub sigma: f64,
    pub grid: Vec<f64>,
    pub reps: u64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub factor: FactorKind,
    /// Replications per random stream; part of the reproducibility key.
    pub block_size: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            beta: None,
            sigma: 1.0,
            grid: vec![],
            reps: 200_000,
            seed: 20_240_601,
            noise: NoiseSpec::Gaussian,
            factor: FactorKind::SymmetricRoot,
            block_size: 4096,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("block size must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        self.noise.validate()
    }
}

/// `0, a/2, 9a/10` then `a (1 - 2^{-m})` for `m = 4, 6, 8, 10, 12`.
pub fn default_power_grid(a: f64) -> Vec<f64> {
    let mut g = vec![0.0, 0.5 * a, 0.9 * a];
    g.extend([4, 6, 8, 10, 12].iter().map(|m| a * (1.0 - 2f64.powi(-m))));
    g
}

/// A rejection region `{y : y in Phi}`.
pub trait Region: Sync {
    fn contains(&self, y: &[f64]) -> bool;
    fn describe(&self) -> String;
}

/// `{T_B > kappa}`.
pub struct QuadRegion<'a> {
    pub test: &'a QuadFormTest,
    pub kappa: f64,
}

impl Region for QuadRegion<'_> {
    fn contains(&self, y: &[f64]) -> bool {
        self.test.t_b_slice(y) > self.kappa
    }

    fn describe(&self) -> String {
        format!("T_B[{}] > {}", self.test.kind, self.kappa)
    }
}

/// Double cone `|e'y| / ||y|| > t` with span(e) removed, or its complement.
#[derive(Debug, Clone)]
pub struct CapRegion {
    pub e: DVector<f64>,
    pub t: f64,
    pub complement: bool,
}

impl Region for CapRegion {
    fn contains(&self, y: &[f64]) -> bool {
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let ey: f64 = y.iter().zip(self.e.iter()).map(|(a, b)| a * b).sum();
        let off: f64 = y.iter().zip(self.e.iter()).map(|(a, b)| (a - ey * b).powi(2)).sum();
        let inside = yy > 0.0 && ey * ey > self.t * self.t * yy && off > 1e-24 * yy;
        inside != self.complement
    }

    fn describe(&self) -> String {
        let base = format!("|e'y|/||y|| > {} minus span(e)", self.t);
        if self.complement {
            format!("complement of ({base})")
        } else {
            base
        }
    }
}

/// `{y : y_1 y_2 >= 0}` in the plane.
#[derive(Debug, Clone, Copy)]
pub struct QuadrantRegion;

impl Region for QuadrantRegion {
    fn contains(&self, y: &[f64]) -> bool {
        y[0] * y[1] >= 0.0
    }

    fn describe(&self) -> String {
        "y1 * y2 >= 0".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerPoint {
    pub rho: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub reps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerCurve {
    pub points: Vec<PowerPoint>,
    pub seed: u64,
    pub noise: String,
    pub test: String,
    pub model: String,
}

impl PowerCurve {
    pub fn last(&self) -> &PowerPoint {
        self.points.last().expect("curve has points")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rho,estimate,stderr,reps\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.rho, p.estimate, p.stderr, p.reps));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes")
    }
}

fn condition_checked_sigma(model: &CovarianceModel, rho: f64) -> Result<linalg::SymEig> {
    if !(rho >= 0.0 && rho < model.a) {
        return Err(Error::InvalidArgument(format!("rho = {rho} outside [0, {})", model.a)));
    }
    let eig = sym_eig_unchecked(&linalg::symmetrize(&model.sigma(rho)));
    let cond = eig.max() / eig.min().max(0.0);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned { rho, cond });
    }
    Ok(eig)
}

/// `L(rho)` for the requested construction, refusing ill-conditioned `Sigma`.
pub fn noise_factor(model: &CovarianceModel, rho: f64, kind: FactorKind) -> Result<DMatrix<f64>> {
    let eig = condition_checked_sigma(model, rho)?;
    match kind {
        FactorKind::SymmetricRoot => {
            let floor = 1e-14 * eig.max();
            Ok(eig.map_values(|v| v.max(floor).sqrt()))
        }
        FactorKind::SemInverse => {
            let sem = model
                .sem
                .as_ref()
                .ok_or_else(|| Error::ModelMismatch("(I - rho W)^{-1} needs a SEM model".into()))?;
            Ok(sem.l_factor(rho))
        }
    }
}

/// Counts hits of `mean + sigma F z` in the region over `reps` draws.
fn count_hits(
    region: &dyn Region,
    mean: &[f64],
    factor: &DMatrix<f64>,
    lane: u64,
    config: &SimConfig,
) -> u64 {
    let n = mean.len();
    let rows: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| factor[(i, j)] * config.sigma)
        .collect();
    let sampler = config.noise.sampler();
    let block = config.block_size;
    let blocks = config.reps.div_ceil(block);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(config.seed, lane, b);
            let count = block.min(config.reps - b * block);
            let mut z = vec![0.0; n];
            let mut y = vec![0.0; n];
            let mut hits = 0u64;
            for _ in 0..count {
                sampler.fill(&mut rng, &mut z);
                for i in 0..n {
                    let row = &rows[i * n..(i + 1) * n];
                    y[i] = mean[i] + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                }
                hits += u64::from(region.contains(&y));
            }
            hits
        })
        .sum()
}

fn point(rho: f64, hits: u64, reps: u64) -> PowerPoint {
    let p = hits as f64 / reps as f64;
    PowerPoint {
        rho,
        estimate: p,
        stderr: (p * (1.0 - p) / reps as f64).sqrt(),
        reps,
    }
}

fn mean_vector(x: Option<&DMatrix<f64>>, config: &SimConfig, n: usize) -> Result<DVector<f64>> {
    match (x, &config.beta) {
        (Some(x), Some(beta)) => {
            if x.nrows() != n || x.ncols() != beta.len() {
                return Err(Error::ShapeError(format!(
                    "X is {}x{}, beta has length {}",
                    x.nrows(),
                    x.ncols(),
                    beta.len()
                )));
            }
            Ok(x * beta)
        }
        (None, Some(beta)) if !beta.is_empty() => {
            Err(Error::ShapeError("beta given without a design matrix".into()))
        }
        _ => Ok(DVector::zeros(n)),
    }
}

/// Rejection frequency of `region` at a single `rho`. The random stream is
/// keyed by `rho` itself, so the same `rho` gives the same draws in any grid.
pub fn estimate_rejection(
    region: &dyn Region,
    model: &CovarianceModel,
    x: Option<&DMatrix<f64>>,
    rho: f64,
    config: &SimConfig,
) -> Result<PowerPoint> {
    config.validate()?;
    let factor = noise_factor(model, rho, config.factor)?;
    let mean = mean_vector(x, config, model.n)?;
    let hits = count_hits(region, mean.as_slice(), &factor, rho.to_bits(), config);
    Ok(point(rho, hits, config.reps))
}

fn check_grid(grid: &[f64], a: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty rho grid".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] < 0.0 || *grid.last().unwrap() >= a {
        return Err(Error::InvalidArgument(format!(
            "grid must be strictly increasing within [0, {a})"
        )));
    }
    Ok(())
}

/// Power curve over `config.grid` (or [`default_power_grid`] when empty).
pub fn power_curve(
    region: &dyn Region,
    model: &CovarianceModel,
    x: Option<&DMatrix<f64>>,
    config: &SimConfig,
) -> Result<PowerCurve> {
    let grid = if config.grid.is_empty() {
        default_power_grid(model.a)
    } else {
        config.grid.clone()
    };
    check_grid(&grid, model.a)?;
    let points = grid
        .iter()
        .map(|&r| estimate_rejection(region, model, x, r, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(PowerCurve {
        points,
        seed: config.seed,
        noise: config.noise.to_string(),
        test: region.describe(),
        model: model.kind.tag().into(),
    })
}

/// Spatial-lag model `y = (I - rho W)^{-1}(X beta + sigma eps)`.
pub fn simulate_slm(
    region: &dyn Region,
    sem: &SemSpec,
    x: Option<&DMatrix<f64>>,
    config: &SimConfig,
) -> Result<PowerCurve> {
    config.validate()?;
    let model = crate::covariance::sem_model_from_spec(sem.clone());
    let grid = if config.grid.is_empty() {
        default_power_grid(model.a)
    } else {
        config.grid.clone()
    };
    check_grid(&grid, model.a)?;
    let base = mean_vector(x, config, model.n)?;
    let mut points = Vec::with_capacity(grid.len());
    for &r in &grid {
        condition_checked_sigma(&model, r)?;
        let l = sem.l_factor(r);
        let mean = &l * &base;
        let hits = count_hits(region, mean.as_slice(), &l, r.to_bits(), config);
        points.push(point(r, hits, config.reps));
    }
    Ok(PowerCurve {
        points,
        seed: config.seed,
        noise: config.noise.to_string(),
        test: region.describe(),
        model: "SLM".into(),
    })
}

/// Which counterexample to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "which", rename_all = "snake_case")]
pub enum Counterexample {
    /// Cap region around `e = 1/sqrt(n)` of null size `alpha`, span(e) removed.
    Ex1 { n: usize, alpha: f64 },
    /// Quadrant region with the direction rotating like `(1 - rho)^gamma`.
    Ex2 { gamma: f64 },
}

pub const EX1_DEFAULT: Counterexample = Counterexample::Ex1 { n: 3, alpha: 0.05 };
/// From a sweep over {0.05, 0.1, 0.2, 0.3, 0.5}: at `rho = 1 - 2^{-14}` the
/// exact values are 0.995, 0.995, 0.989, 0.971, 0.820, and 0.1 is the
/// largest gamma within 1e-4 of the best.
pub const EX2_DEFAULT_GAMMA: f64 = 0.1;

/// Evidence that `e` lies on the boundary of the region: `e` is on one side
/// while points `e + eps h` fall on the other for every tested `eps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryCertificate {
    pub e: Vec<f64>,
    pub e_in_region: bool,
    pub eps: Vec<f64>,
    /// For each `eps`, whether some `e + eps h` is on the other side.
    pub crossing: Vec<bool>,
    pub on_boundary: bool,
}

pub fn certify_boundary(region: &dyn Region, e: &DVector<f64>) -> BoundaryCertificate {
    let n = e.len();
    let inside = region.contains(e.as_slice());
    let eps: Vec<f64> = (1..=8).map(|k| 10f64.powi(-k)).collect();
    let crossing: Vec<bool> = eps
        .iter()
        .map(|&s| {
            (0..n).any(|i| {
                [-1.0, 1.0].iter().any(|sign| {
                    let mut y = e.clone();
                    y[i] += sign * s;
                    region.contains(y.as_slice()) != inside
                })
            })
        })
        .collect();
    let on_boundary = crossing.iter().all(|c| *c);
    BoundaryCertificate {
        e: e.iter().copied().collect(),
        e_in_region: inside,
        eps,
        crossing,
        on_boundary,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub which: Counterexample,
    pub curve: PowerCurve,
    /// Curve of the complement region (EX1 only).
    pub complement: Option<PowerCurve>,
    pub certificate: BoundaryCertificate,
    /// Exact rejection probability at each grid point (EX2 only).
    pub exact: Option<Vec<f64>>,
    /// Demo threshold for the last estimate.
    pub threshold: f64,
    pub exceeds_threshold: bool,
    pub narrative: String,
}

/// `1 - 2^{-m}` for `m = 2, 4, ..., 14` after `0` and `1/2`.
pub fn counterexample_grid() -> Vec<f64> {
    let mut g = vec![0.0, 0.5];
    g.extend((1..=7).map(|k| 1.0 - 2f64.powi(-2 * k)));
    g
}

/// Exact `P(y_1 y_2 >= 0)` for the EX2 family at `rho`.
pub fn ex2_exact(rho: f64, gamma: f64) -> f64 {
    let phi = ex2_angle(rho, gamma);
    let s = rho / (1.0 - rho);
    let (c, sn) = (phi.cos(), phi.sin());
    let r = s * c * sn / ((1.0 + s * c * c) * (1.0 + s * sn * sn)).sqrt();
    0.5 + r.clamp(-1.0, 1.0).asin() / std::f64::consts::PI
}

pub fn reproduce_counterexample(which: Counterexample, config: &SimConfig) -> Result<CounterexampleReport> {
    let mut cfg = config.clone();
    if cfg.grid.is_empty() {
        cfg.grid = counterexample_grid();
    }
    cfg.beta = None;
    match which {
        Counterexample::Ex1 { n, alpha } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidArgument(format!("alpha = {alpha} must lie in (0, 1)")));
            }
            let e = DVector::from_element(n, 1.0 / (n as f64).sqrt());
            let model = ex1_model(&e)?;
            // (e'y)^2 / ||y||^2 ~ Beta(1/2, (n-1)/2) under the null
            let beta = Beta::new(0.5, (n as f64 - 1.0) / 2.0)
                .map_err(|err| Error::InvalidArgument(err.to_string()))?;
            let t = beta.inverse_cdf(1.0 - alpha).sqrt();
            let region = CapRegion { e: e.clone(), t, complement: false };
            let complement = CapRegion { complement: true, ..region.clone() };
            let curve = power_curve(&region, &model, None, &cfg)?;
            let comp = power_curve(&complement, &model, None, &cfg)?;
            let certificate = certify_boundary(&region, &e);
            let threshold = 0.95;
            let last = curve.last().estimate;
            let narrative = format!(
                "e lies on the boundary of the region (e excluded, nearby points included) yet the \
                 rejection probability reaches {last:.4} at rho = {}; the complement, which contains e, \
                 drops to {:.4}",
                curve.last().rho,
                comp.last().estimate
            );
            Ok(CounterexampleReport {
                which,
                exceeds_threshold: last >= threshold,
                curve,
                complement: Some(comp),
                certificate,
                exact: None,
                threshold,
                narrative,
            })
        }
        Counterexample::Ex2 { gamma } => {
            let model = ex2_model(gamma)?;
            let region = QuadrantRegion;
            let curve = power_curve(&region, &model, None, &cfg)?;
            let e = DVector::from_vec(vec![0.0, 1.0]);
            let certificate = certify_boundary(&region, &e);
            let exact = curve.points.iter().map(|p| ex2_exact(p.rho, gamma)).collect();
            let threshold = 0.8;
            let last = curve.last().estimate;
            let narrative = format!(
                "e = (0, 1) lies on the boundary of the quadrant region; with gamma = {gamma} the \
                 rejection probability is {last:.4} at rho = {} (demo threshold {threshold}, not a bound \
                 from theory)",
                curve.last().rho
            );
            Ok(CounterexampleReport {
                which,
                exceeds_threshold: last >= threshold,
                curve,
                complement: None,
                certificate,
                exact: Some(exact),
                threshold,
                narrative,
            })
        }
    }
}
