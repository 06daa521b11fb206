//! Small dense linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

/// Symmetric eigendecomposition with eigenvalues recomputed as Rayleigh
/// quotients of the returned eigenvectors. The upstream eigensolver can
/// mispair eigenvalues with eigenvector columns when values are close to
/// zero; the quotients `q_i' M q_i` are always paired correctly because the
/// columns themselves are accurate and orthonormal.
pub(crate) fn symmetric_eigen(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = m.clone().symmetric_eigen();
    let q = eig.eigenvectors;
    let n = m.nrows();
    let mut lambdas = DVector::zeros(n);
    for i in 0..n {
        let qi = q.column(i);
        lambdas[i] = (m * qi).dot(&qi);
    }
    (q, lambdas)
}
