//! Sign probabilities of centered Gaussian quadratic forms `G'AG`, the null
//! rejection probability of `T_B`, and critical values.
//!
//! The sign probability is obtained by inverting the characteristic
//! function (Imhof's formula at zero):
//! `P(sum w_i Z_i^2 > 0) = 1/2 + (1/pi) int_0^inf sin(theta(u)) / (u rho(u)) du`
//! with `theta(u) = 1/2 sum atan(w_i u)` and `rho(u) = prod (1 + w_i^2 u^2)^{1/4}`.
//! The integrand does not oscillate, so after the substitution `u = e^t`
//! on `[1, U]` plain adaptive Gauss-Kronrod converges quickly.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::invariant::QuadFormTest;
use crate::linalg;
use crate::rng::block_rng;

/// Relative threshold below which a weight counts as zero.
pub const ZERO_WEIGHT: f64 = 1e-12;
/// Absolute tolerance for the inversion integral.
const QUAD_TOL: f64 = 1e-10;
/// Draws used when integration fails.
pub const FALLBACK_REPS: u64 = 1_000_000;
const FALLBACK_SEED: u64 = 0x5157_1A1E;
const MC_BLOCK: u64 = 8192;

/// Law of `sum w_i Z_i^2` with the weights rescaled to `max |w_i| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedChiSq {
    pub weights: Vec<f64>,
}

impl WeightedChiSq {
    pub fn from_weights(w: &[f64]) -> Result<WeightedChiSq> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let scale = w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return Ok(WeightedChiSq { weights: vec![] });
        }
        let weights = w
            .iter()
            .filter(|v| v.abs() > ZERO_WEIGHT * scale)
            .map(|v| v / scale)
            .collect();
        Ok(WeightedChiSq { weights })
    }

    pub fn from_matrix(a: &DMatrix<f64>) -> Result<WeightedChiSq> {
        let eig = linalg::sym_eig(a)?;
        Self::from_weights(eig.values.as_slice())
    }

    pub fn is_zero(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMethod {
    /// All weights share a sign (or all vanish).
    Exact,
    Integration,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignProb {
    pub p: f64,
    pub method: SignMethod,
    /// Standard error, present for Monte Carlo results only.
    pub stderr: Option<f64>,
    /// Every weight was numerically zero; `p` is then the definitional 0.
    pub all_zero: bool,
}

impl SignProb {
    fn exact(p: f64) -> SignProb {
        SignProb {
            p,
            method: SignMethod::Exact,
            stderr: None,
            all_zero: false,
        }
    }
}

/// `P(G'AG > 0)` for a standard Gaussian `G`.
pub fn prob_positive(a: &DMatrix<f64>) -> Result<SignProb> {
    prob_positive_law(&WeightedChiSq::from_matrix(a)?)
}

pub fn prob_positive_weights(w: &[f64]) -> Result<SignProb> {
    prob_positive_law(&WeightedChiSq::from_weights(w)?)
}

fn prob_positive_law(law: &WeightedChiSq) -> Result<SignProb> {
    if law.is_zero() {
        return Ok(SignProb {
            all_zero: true,
            ..SignProb::exact(0.0)
        });
    }
    let w = &law.weights;
    if w.iter().all(|&v| v > 0.0) {
        return Ok(SignProb::exact(1.0));
    }
    if w.iter().all(|&v| v < 0.0) {
        return Ok(SignProb::exact(0.0));
    }
    match imhof_positive(w) {
        Ok(p) => Ok(SignProb {
            p,
            method: SignMethod::Integration,
            stderr: None,
            all_zero: false,
        }),
        Err(Error::IntegrationFailure(_)) => {
            let (p, se) = mc_prob_positive(w, FALLBACK_REPS, FALLBACK_SEED);
            Ok(SignProb {
                p,
                method: SignMethod::MonteCarlo,
                stderr: Some(se),
                all_zero: false,
            })
        }
        Err(e) => Err(e),
    }
}

/// Inversion integral for nonzero weights of mixed sign with `max |w| = 1`.
pub fn imhof_positive(w: &[f64]) -> Result<f64> {
    let m = w.len() as f64;
    let log_w: f64 = w.iter().map(|v| v.abs().ln()).sum();
    // tail of |integrand| beyond U is at most (2/m) U^{-m/2} / prod |w_i|^{1/2}
    let log_u = (2.0 / m) * ((2.0 / (m * std::f64::consts::PI * QUAD_TOL)).ln() - 0.5 * log_w);
    let log_u = log_u.max(1.0);

    let integrand = |u: f64| -> f64 {
        let mut theta = 0.0;
        let mut log_rho = 0.0;
        for &wi in w {
            let x = wi * u;
            theta += x.atan();
            log_rho += (x * x).ln_1p();
        }
        (0.5 * theta).sin() * (-0.25 * log_rho).exp()
    };
    let head = adaptive_gk(|u| integrand(u) / u, 0.0, 1.0, 0.5 * QUAD_TOL)?;
    let tail = adaptive_gk(|t| integrand(t.exp()), 0.0, log_u, 0.5 * QUAD_TOL)?;
    Ok((0.5 + (head + tail) / std::f64::consts::PI).clamp(0.0, 1.0))
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const G_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = GK_WEIGHTS[7] * fc;
    let mut gauss = G_WEIGHTS[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        kron += GK_WEIGHTS[i] * s;
        if i % 2 == 1 {
            gauss += G_WEIGHTS[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive 7/15-point Gauss-Kronrod with an absolute tolerance.
pub fn adaptive_gk(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    const MAX_INTERVALS: usize = 4000;
    let (v, e) = gk15(&f, a, b);
    let mut parts = vec![(a, b, v, e)];
    let mut total = v;
    let mut err = e;
    while err > tol {
        if parts.len() >= MAX_INTERVALS || !total.is_finite() {
            return Err(Error::IntegrationFailure(err));
        }
        let worst = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, v, e) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Err(Error::IntegrationFailure(err));
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        total += v1 + v2 - v;
        err += e1 + e2 - e;
        parts.push((lo, mid, v1, e1));
        parts.push((mid, hi, v2, e2));
    }
    // recompute the sum to shed accumulated rounding
    Ok(parts.iter().map(|p| p.2).sum())
}

/// Simulated `P(sum w_i Z_i^2 > 0)` and its standard error.
pub fn mc_prob_positive(w: &[f64], reps: u64, seed: u64) -> (f64, f64) {
    let blocks = reps.div_ceil(MC_BLOCK);
    let hits: u64 = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = block_rng(seed, 0, blk);
            let count = MC_BLOCK.min(reps - blk * MC_BLOCK);
            let mut hits = 0u64;
            for _ in 0..count {
                let q: f64 = w
                    .iter()
                    .map(|wi| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        wi * z * z
                    })
                    .sum();
                hits += u64::from(q > 0.0);
            }
            hits
        })
        .sum();
    let p = hits as f64 / reps as f64;
    (p, (p * (1.0 - p) / reps as f64).sqrt())
}

/// Gaussian null probability of `{T_B > kappa}`, i.e. `P(G'(B - kappa I)G > 0)`.
pub fn null_rejection_prob(test: &QuadFormTest, kappa: f64) -> Result<SignProb> {
    if kappa < test.lambda_min() {
        return Ok(SignProb::exact(1.0));
    }
    if kappa >= test.lambda_max() {
        return Ok(SignProb::exact(0.0));
    }
    let shifted: Vec<f64> = test.eig_b.values.iter().map(|l| l - kappa).collect();
    prob_positive_weights(&shifted)
}

/// `kappa` with null rejection probability `alpha`, by bisection.
pub fn critical_value(test: &QuadFormTest, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if test.degenerate {
        return Err(Error::DegenerateTest);
    }
    let (mut lo, mut hi) = (test.lambda_min(), test.lambda_max());
    let width = hi - lo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p = null_rejection_prob(test, mid)?.p;
        if (p - alpha).abs() <= 1e-8 || hi - lo <= 1e-14 * width {
            return Ok(mid);
        }
        if p > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
