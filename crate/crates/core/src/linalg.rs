//! Dense linear-algebra helpers shared by the geometry modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Point = DVector<f64>;

/// Singular values in descending order. Empty matrices yield an empty list.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Spectral norm (largest singular value); zero for empty matrices.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

/// Flip each column so its largest-magnitude entry is positive.
fn canonical_signs(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        let (mut best, mut idx) = (0.0, 0);
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best + 1e-12 {
                best = v.abs();
                idx = i;
            }
        }
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
    m
}

/// Orthonormal basis for the column space of `a` via SVD.
///
/// Returns the basis and the ratio `sigma_min / sigma_max` over all columns,
/// which callers compare against their rank tolerance.
pub fn column_space(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (n, k) = a.shape();
    if k == 0 {
        return (DMatrix::zeros(n, 0), 1.0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let smax = svd.singular_values[order[0]];
    let smin = if k <= n { svd.singular_values[order[k - 1]] } else { 0.0 };
    let cols: Vec<DVector<f64>> = order.iter().take(k.min(n)).map(|&i| u.column(i).into_owned()).collect();
    let basis = DMatrix::from_columns(&cols);
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    (canonical_signs(basis), ratio)
}

/// Orthonormal basis of the orthogonal complement of the (orthonormal)
/// columns of `basis` in R^n.
pub fn complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.nrows();
    let k = basis.ncols();
    if k == 0 {
        return DMatrix::identity(n, n);
    }
    if k >= n {
        return DMatrix::zeros(n, 0);
    }
    let proj = DMatrix::identity(n, n) - basis * basis.transpose();
    let eig = SymmetricEigen::new(proj);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let cols: Vec<DVector<f64>> = order.iter().take(n - k).map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    canonical_signs(DMatrix::from_columns(&cols))
}

/// Modified Gram-Schmidt with one re-orthogonalisation pass. Vectors whose
/// residual norm falls below `tol` are dropped.
pub fn gram_schmidt(vectors: &[DVector<f64>], against: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        let scale = v.norm().max(1e-300);
        for _ in 0..2 {
            for q in against.iter().chain(out.iter()) {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let norm = w.norm();
        if norm > tol * scale {
            out.push(w / norm);
        }
    }
    out
}

/// Orthogonal projector `B B^T` onto the span of orthonormal columns.
pub fn projector(basis: &DMatrix<f64>) -> DMatrix<f64> {
    basis * basis.transpose()
}

pub fn to_vec(p: &DVector<f64>) -> Vec<f64> {
    p.iter().copied().collect()
}

pub fn dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm()
}

/// Solve a square system, falling back to least squares when singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(x) = a.clone().lu().solve(b) {
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-14).ok().filter(|x| x.iter().all(|v| v.is_finite()))
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let smax = op_norm(a);
    if smax == 0.0 {
        return Some(DVector::zeros(a.ncols()));
    }
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-13 * smax).ok().filter(|x| x.iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_spans_rest() {
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        let c = complement(&b);
        assert_eq!(c.shape(), (3, 2));
        assert!((b.transpose() * &c).norm() < 1e-14);
        assert!((c.transpose() * &c - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn column_space_reports_rank() {
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let (_, ratio) = column_space(&a);
        assert!(ratio < 1e-12);
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
        let (q, ratio) = column_space(&a);
        assert!((ratio - 1.0 / 3.0).abs() < 1e-12);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn gram_schmidt_drops_dependent() {
        let v = vec![
            DVector::from_vec(vec![1.0, 1.0, 0.0]),
            DVector::from_vec(vec![2.0, 2.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0, 0.0]),
        ];
        let q = gram_schmidt(&v, &[], 1e-10);
        assert_eq!(q.len(), 2);
        assert!(q[0].dot(&q[1]).abs() < 1e-15);
    }

    #[test]
    fn norms_of_empty_matrices() {
        assert_eq!(op_norm(&DMatrix::zeros(3, 0)), 0.0);
        assert_eq!(complement(&DMatrix::zeros(2, 0)).shape(), (2, 2));
        assert_eq!(complement(&DMatrix::identity(2, 2)).shape(), (2, 0));
    }
}
