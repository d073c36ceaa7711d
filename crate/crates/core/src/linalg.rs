//! Conversions between `ndarray` and `nalgebra` plus a few dense helpers.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Dense matrix serialised row-major with an explicit shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowMajor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMajor {
    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::InvalidInput(format!("matrix shape {}x{}: {e}", self.rows, self.cols)))
    }
}

impl From<&Array2<f64>> for RowMajor {
    fn from(a: &Array2<f64>) -> Self {
        RowMajor { rows: a.nrows(), cols: a.ncols(), data: a.iter().copied().collect() }
    }
}

/// Singular values in descending order.
pub fn singular_values(a: ArrayView2<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = to_dmatrix(a).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Numerical rank with relative tolerance `rtol` on singular values.
pub fn rank(a: ArrayView2<f64>, rtol: f64) -> usize {
    let s = singular_values(a);
    match s.first() {
        Some(&max) if max > 0.0 => s.iter().filter(|&&v| v > rtol * max).count(),
        _ => 0,
    }
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let m = to_dmatrix(a);
    let max_dim = m.nrows().max(m.ncols()) as f64;
    let svd = m.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = smax * max_dim * f64::EPSILON;
    let p = svd.pseudo_inverse(eps).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(from_dmatrix(&p))
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending with
/// matching eigenvector columns.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Column means of `[n_samples × n_channels]` data.
pub fn column_means(x: ArrayView2<f64>) -> Vec<f64> {
    let n = x.nrows().max(1) as f64;
    x.columns().into_iter().map(|c| c.sum() / n).collect()
}

/// Population covariance of the columns of `x` after removing column means.
pub fn covariance(x: ArrayView2<f64>) -> DMatrix<f64> {
    let means = column_means(x);
    let centred = Array2::from_shape_fn(x.dim(), |(i, j)| x[[i, j]] - means[j]);
    let n = x.nrows().max(1) as f64;
    let c = centred.t().dot(&centred) / n;
    to_dmatrix(c.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pinv_of_tall_matrix_is_left_inverse() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]];
        let p = pinv(a.view()).unwrap();
        let id = p.dot(&a);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_detects_dependent_columns() {
        let a = array![[1.0, 2.0, 3.0], [0.0, 1.0, 1.0], [2.0, 0.0, 2.0], [1.0, 1.0, 2.0]];
        assert_eq!(rank(a.view(), 1e-10), 2);
    }

    #[test]
    fn eigen_is_sorted() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals, vec![4.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }
}
