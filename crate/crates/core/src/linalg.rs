//! Small dense linear algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Solve `A x = b` for symmetric positive definite `A`; `None` if Cholesky fails.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Inverse of a symmetric PSD matrix through its eigendecomposition. Eigenvalues
/// below `rel_tol · max` are treated as zero, giving the Moore–Penrose inverse.
/// The flag reports whether any eigenvalue was dropped.
pub fn sym_pinv(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, bool) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut dropped = false;
    let inv = eig.eigenvalues.map(|l| {
        if max > 0.0 && l > rel_tol * max {
            1.0 / l
        } else {
            dropped = true;
            0.0
        }
    });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&inv) * v.transpose(), dropped)
}

/// Ridge least squares `(XᵀX + ridge·I)⁻¹ Xᵀy`.
pub fn ridge_ls(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    let mut xtx = x.tr_mul(x);
    for i in 0..xtx.nrows() {
        xtx[(i, i)] += ridge;
    }
    spd_solve(&xtx, &x.tr_mul(y))
}

/// Orthogonal projector onto the column space of `x`, via SVD with a relative rank cutoff.
pub fn projector(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    if x.ncols() == 0 {
        return DMatrix::zeros(n, n);
    }
    let basis = column_basis(x);
    &basis * basis.transpose()
}

/// Orthonormal basis of the column space of `x`.
pub fn column_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    if x.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (n.max(x.ncols()) as f64);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    DMatrix::from_fn(n, keep.len(), |r, c| u[(r, keep[c])])
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).amax() <= tol * a.amax().max(1.0)
}
