//! Symmetric-matrix helpers: eigendecomposition, spectral functions and the
//! weight-preserving packing used by the precision family.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Length of the packed upper triangle of a `d x d` symmetric matrix.
pub fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Inverse of [`packed_len`]; `None` when `m` is not triangular.
pub fn dim_from_packed(m: usize) -> Option<usize> {
    let d = (((8 * m + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d..=d + 1).find(|&k| packed_len(k) == m)
}

/// Packs the upper triangle row by row, scaling off-diagonal entries by
/// `sqrt(2)` so that the Euclidean inner product of packed vectors equals the
/// Frobenius inner product of the matrices.
pub fn pack(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(packed_len(d));
    for i in 0..d {
        for j in i..d {
            if i == j {
                out.push(m[(i, i)]);
            } else {
                out.push(SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
    }
    out
}

/// Inverse of [`pack`].
pub fn unpack(v: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), packed_len(d));
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    m
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let d = m.nrows();
    (0..d).all(|i| (i + 1..d).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix with eigenvalues in ascending
/// order; column `i` of the returned matrix is the eigenvector of value `i`.
pub fn sym_eig(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !is_symmetric(m, 1e-9) {
        return Err(Error::NotSymmetric);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sym_eig"));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = m.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// Applies `f` to the spectrum: `V diag(f(w)) V^T`.
pub fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let (w, v) = sym_eig(m)?;
    let fw = DVector::from_iterator(w.len(), w.iter().map(|&x| f(x)));
    Ok(&v * DMatrix::from_diagonal(&fw) * v.transpose())
}

fn require_pd(m: &DMatrix<f64>) -> Result<()> {
    let (w, _) = sym_eig(m)?;
    if w[0] > 0.0 {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite)
    }
}

/// `M^{-1/2}` for a positive definite `M`.
pub fn inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_pd(m)?;
    spectral_map(m, |x| 1.0 / x.sqrt())
}

/// `M^{1/2}` for a positive definite `M`.
pub fn sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_pd(m)?;
    spectral_map(m, f64::sqrt)
}

/// `M^{-1}` for a positive definite `M`, computed spectrally so the result
/// stays exactly symmetric.
pub fn inv_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_pd(m)?;
    spectral_map(m, |x| 1.0 / x)
}

/// Clamps every eigenvalue into `[lo, hi]`; this is the Frobenius projection
/// onto the spectral box `{lo I <= M <= hi I}`.
pub fn clamp_spectrum(m: &DMatrix<f64>, lo: f64, hi: f64) -> Result<DMatrix<f64>> {
    spectral_map(m, |x| x.clamp(lo, hi))
}

/// Spectral norm of a symmetric matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    let (w, _) = sym_eig(m)?;
    Ok(w[0].abs().max(w[w.len() - 1].abs()))
}
