//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Left-to-right dot product. The engine and its reference implementation
/// both rely on this exact summation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn relative_frobenius_error(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let denom = reference.norm();
    let diff = (estimate - reference).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (columns of the returned matrix follow the same order).
pub fn symmetric_eigen_desc(matrix: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = matrix.nrows();
    let eig = matrix.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetric_eigenvalues_desc(matrix: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = matrix.clone().symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

pub fn symmetrize(matrix: &mut DMatrix<f64>) {
    let n = matrix.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = avg;
            matrix[(j, i)] = avg;
        }
    }
}

/// Relative asymmetry `|A - A^T|_F / |A|_F`.
pub fn asymmetry(matrix: &DMatrix<f64>) -> f64 {
    let denom = matrix.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (matrix - matrix.transpose()).norm() / denom
}

/// Solves `A x = b` for symmetric positive definite `A` and checks the
/// relative residual against `tolerance`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, tolerance: f64) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solve("matrix is not positive definite".into()))?;
    let mut x = chol.solve(b);
    // One step of iterative refinement tightens the residual on
    // ill-conditioned sketched covariances.
    let r = b - a * &x;
    x += chol.solve(&r);
    let residual = (a * &x - b).norm();
    let scale = b.norm();
    let rel = if scale == 0.0 { residual } else { residual / scale };
    if !(rel <= tolerance) {
        return Err(Error::Solve(format!(
            "relative residual {rel:e} exceeds tolerance {tolerance:e}"
        )));
    }
    Ok(x)
}

/// Spectral condition number of a symmetric positive definite matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let values = symmetric_eigenvalues_desc(a);
    match (values.first(), values.last()) {
        (Some(&max), Some(&min)) if min > 0.0 => max / min,
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_desc_orders_values_and_vectors() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let (values, vectors) = symmetric_eigen_desc(&m);
        assert_eq!(values, vec![5.0, 2.0, 1.0]);
        assert!((vectors[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((vectors[(0, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(spd_solve(&m, &b, 1e-8).is_err());
    }
}
