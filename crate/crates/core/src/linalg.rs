//! Dense symmetric linear algebra: eigendecompositions, residual bases of a
//! design matrix, projectors and symmetric square roots.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tol;

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors, column `i` belongs to `values[i]`.
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Eigenvector belonging to the largest eigenvalue.
    pub fn top_vector(&self) -> DVector<f64> {
        self.vectors.column(self.dim() - 1).into_owned()
    }

    /// Rebuilds `V f(Lambda) V'`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DVector::from_iterator(self.dim(), self.values.iter().map(|&v| f(v)));
        let scaled = &self.vectors * DMatrix::from_diagonal(&d);
        &scaled * self.vectors.transpose()
    }
}

/// Largest absolute entry; used as the matrix scale in relative tolerances.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |m, v| m.max(*v))
}

pub fn check_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Fails unless `max |A_ij - A_ji| <= tol * max|A|`.
pub fn check_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::ShapeError(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a)?;
    let n = a.nrows();
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    let allowed = rel_tol * max_abs(a);
    if asym > allowed {
        return Err(Error::NonSymmetric { asym, allowed });
    }
    Ok(())
}

/// `(A + A') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<SymEig> {
    check_symmetric(a, tol::DEFAULT_SYM)?;
    Ok(sym_eig_unchecked(&symmetrize(a)))
}

pub(crate) fn sym_eig_unchecked(a: &DMatrix<f64>) -> SymEig {
    let m = a.nrows();
    if m == 0 {
        return SymEig {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        };
    }
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(m, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        sign_fix(&mut col);
        vectors.set_column(dst, &col);
    }
    SymEig { values, vectors }
}

/// Flips `v` so its first entry with `|v_i| > 1e-12 * max|v|` is positive.
pub fn sign_fix(v: &mut DVector<f64>) {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Orthogonal projector onto span(v).
pub fn proj_onto(v: &DVector<f64>) -> DMatrix<f64> {
    let nn = v.norm_squared();
    if nn == 0.0 {
        return DMatrix::zeros(v.len(), v.len());
    }
    v * v.transpose() / nn
}

/// Orthogonal projector onto span(v)^perp.
pub fn proj_perp(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::identity(v.len(), v.len()) - proj_onto(v)
}

/// A design matrix together with a fixed orthonormal basis of the residual
/// space.
#[derive(Debug, Clone)]
pub struct Design {
    /// `n x k` regressor matrix, `k` may be zero.
    pub x: DMatrix<f64>,
    /// `(n-k) x n`, rows form an orthonormal basis of span(X)^perp.
    pub c: DMatrix<f64>,
    /// Projector onto span(X)^perp, equal to `C'C`.
    pub p_perp: DMatrix<f64>,
}

impl Design {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    /// Dimension of the residual space, `n - k`.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    /// Design without regressors (`k = 0`), so `C = I_n`.
    pub fn empty(n: usize) -> Result<Design> {
        residual_basis(&DMatrix::zeros(n, 0))
    }

    /// `||C_X v||`, the length of the residual part of `v`.
    pub fn residual_norm(&self, v: &DVector<f64>) -> f64 {
        (&self.c * v).norm()
    }
}

/// Builds a [`Design`] with a deterministic residual basis `C_X`.
///
/// The basis comes from a Householder QR of `[X | I_n]`: the trailing
/// `n - k` columns of Q are orthonormal and orthogonal to span(X). Each row
/// of `C_X` is then sign-fixed so its first non-negligible entry is positive.
pub fn residual_basis(x: &DMatrix<f64>) -> Result<Design> {
    let n = x.nrows();
    let k = x.ncols();
    if n < 2 {
        return Err(Error::DimError(format!("need n >= 2 observations, got {n}")));
    }
    if k >= n {
        return Err(Error::DimError(format!("need k < n, got k = {k}, n = {n}")));
    }
    check_finite(x)?;
    if k > 0 {
        let sv = x.clone().singular_values();
        let smax = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
        let rank = sv
            .iter()
            .filter(|&&s| smax > 0.0 && s >= tol::DEFAULT_RANK * smax)
            .count();
        if rank < k {
            return Err(Error::RankDeficient { rank, k });
        }
    }
    let mut aug = DMatrix::zeros(n, k + n);
    aug.view_mut((0, 0), (n, k)).copy_from(x);
    aug.view_mut((0, k), (n, n)).fill_with_identity();
    let q = aug.qr().q();
    let mut c = DMatrix::zeros(n - k, n);
    for r in 0..(n - k) {
        let mut row = q.column(k + r).into_owned();
        sign_fix(&mut row);
        c.set_row(r, &row.transpose());
    }
    let p_perp = c.transpose() * &c;
    Ok(Design {
        x: x.clone(),
        c,
        p_perp,
    })
}

/// Symmetric nonnegative-definite square root.
///
/// Eigenvalues within `1e-10 * lambda_max` of zero (including slightly
/// negative ones) are clamped to zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eig(a)?;
    sqrt_from_eig(&eig, tol::DEFAULT_PSD)
}

pub(crate) fn sqrt_from_eig(eig: &SymEig, rel_tol: f64) -> Result<DMatrix<f64>> {
    if eig.dim() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let scale = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if eig.min() < -rel_tol * scale {
        return Err(Error::NotPsd(eig.min()));
    }
    // eigenvalues inside the tolerance band are zero
    let floor = rel_tol * scale;
    Ok(symmetrize(&eig.map_values(|v| if v <= floor { 0.0 } else { v.sqrt() })))
}

pub(crate) fn inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().try_inverse()
}
