use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{IvError, Result};

/// Matrices whose condition number exceeds this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

pub fn check_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IvError::Domain(format!("{what} has non-finite entries")))
    }
}

/// Largest singular value, from the symmetric eigendecomposition of the
/// smaller of `AᵀA` and `AAᵀ`.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    check_finite(a, "spectral_norm input")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    // Rescale so the Gram matrix neither overflows nor underflows.
    let scale = a.amax();
    if scale == 0.0 {
        return Ok(0.0);
    }
    let b = a / scale;
    let gram = if b.nrows() >= b.ncols() {
        b.tr_mul(&b)
    } else {
        &b * b.transpose()
    };
    let eig = SymmetricEigen::new(symmetrize(&gram));
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    Ok(scale * top.sqrt())
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Inverse of a square matrix together with its 2-norm condition number.
/// Fails with [`IvError::RankDeficient`] past [`CONDITION_LIMIT`].
pub fn inverse_checked(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if !a.is_square() {
        return Err(IvError::Shape(format!(
            "cannot invert a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a, "matrix to invert")?;
    let sv = a.singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= CONDITION_LIMIT) {
        return Err(IvError::RankDeficient { condition });
    }
    let inv = a
        .clone()
        .lu()
        .try_inverse()
        .ok_or(IvError::RankDeficient { condition })?;
    Ok((inv, condition))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from rounding are clamped to zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(a, |l| l.max(0.0).sqrt())
}

/// Inverse principal square root of a symmetric positive-definite matrix.
pub fn sym_inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(a, "sym_inv_sqrt input")?;
    let eig = SymmetricEigen::new(symmetrize(a));
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let bottom = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(bottom > 0.0) || top / bottom > CONDITION_LIMIT {
        let condition = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
        return Err(IvError::RankDeficient { condition });
    }
    Ok(recompose(&eig, |l| 1.0 / l.sqrt()))
}

fn spectral_map(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    check_finite(a, "symmetric matrix function input")?;
    if !a.is_square() {
        return Err(IvError::Shape("expected a square matrix".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    Ok(recompose(&eig, f))
}

fn recompose(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, l) in eig.eigenvalues.iter().enumerate() {
        let s = f(*l);
        scaled.column_mut(j).scale_mut(s);
    }
    symmetrize(&(scaled * q.transpose()))
}
