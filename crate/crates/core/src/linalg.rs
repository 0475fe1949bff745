//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// In-place symmetrization, M <- (M + M')/2.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub(crate) fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub(crate) fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// x' M^{-1} x via a precomputed Cholesky factor.
pub(crate) fn quad_form_inv(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let y = chol.solve(x);
    x.dot(&y)
}

/// Numerical rank of a matrix from its singular values.
pub(crate) fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let tol = sv.max() * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}
