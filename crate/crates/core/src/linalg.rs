//! Small dense helpers shared by the filters: symmetric square roots,
//! thresholded pseudo-inverses and PSD checks.

use nalgebra::{DMatrix, SymmetricEigen};

/// Relative threshold below which singular values / eigenvalues are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, rtol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.norm().max(f64::MIN_POSITIVE);
    (m - m.transpose()).norm() <= rtol * scale
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Apply `f` to the eigenvalues of a symmetric matrix.
pub fn sym_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut out = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let g = f(lambda);
        if g == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out += (v * v.transpose()) * g;
    }
    symmetrize(&out)
}

/// Principal square root of a PSD matrix. Eigenvalues below
/// `PINV_RTOL * λ_max` (including negative ones) are clipped to zero, so
/// rounding noise in the null space does not leak in as `√ε`. Also returns
/// the most negative eigenvalue seen (0 if none).
pub fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let ev = sym_eigenvalues(m);
    let min = ev.first().copied().unwrap_or(0.0).min(0.0);
    let floor = PINV_RTOL * ev.last().copied().unwrap_or(0.0).max(0.0);
    (sym_map(m, |l| if l > floor { l.sqrt() } else { 0.0 }), min)
}

/// Symmetric pseudo-inverse square root: eigenvalues below `PINV_RTOL * λ_max`
/// are mapped to zero.
pub fn pinv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let lmax = sym_eigenvalues(m).last().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return DMatrix::zeros(m.nrows(), m.ncols());
    }
    let floor = PINV_RTOL * lmax;
    sym_map(m, |l| if l > floor { 1.0 / l.sqrt() } else { 0.0 })
}

/// Orthogonal projector onto the range of a symmetric PSD matrix.
pub fn range_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let lmax = sym_eigenvalues(m).last().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return DMatrix::zeros(m.nrows(), m.ncols());
    }
    let floor = PINV_RTOL * lmax;
    sym_map(m, |l| if l > floor { 1.0 } else { 0.0 })
}

/// Thresholded Moore-Penrose pseudo-inverse via thin SVD.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return DMatrix::zeros(c, r);
    }
    let floor = PINV_RTOL * smax;
    let u = svd.u.as_ref().expect("u computed");
    let vt = svd.v_t.as_ref().expect("v_t computed");
    let mut out = DMatrix::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > floor {
            out += (vt.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    out
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
