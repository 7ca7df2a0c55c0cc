//! Distances between linear subspaces.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{column_space, singular_values};

/// A linear subspace of R^n given by orthonormal basis columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wrap orthonormal columns, rejecting bases off by more than 1e-10.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let k = basis.ncols();
        if k > basis.nrows() {
            return Err(Error::DimensionMismatch { expected: basis.nrows(), found: k });
        }
        if k > 0 {
            let defect = (basis.transpose() * &basis - DMatrix::identity(k, k)).abs().max();
            if defect > 1e-10 {
                return Err(Error::Invalid(format!("basis is not orthonormal (defect {defect:.3e})")));
            }
        }
        Ok(Self { basis })
    }

    /// Span of arbitrary (full-rank) columns.
    pub fn span(vectors: &DMatrix<f64>) -> Self {
        Self { basis: column_space(vectors).0 }
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
}

fn check(p: &Subspace, q: &Subspace) -> Result<()> {
    if p.ambient_dim() != q.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: p.ambient_dim(), found: q.ambient_dim() });
    }
    Ok(())
}

/// `sup_{a in P, |a| = 1} dist(a, Q)`: the largest singular value of
/// `(I - Q Q^T) P`. One-sided when the dimensions differ.
pub fn rho(p: &Subspace, q: &Subspace) -> Result<f64> {
    check(p, q)?;
    Ok(rho_bases(&p.basis, &q.basis))
}

/// `rho` on raw orthonormal bases, for hot loops that already hold them.
pub fn rho_bases(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    if p.ncols() == 0 {
        return 0.0;
    }
    let residual = p - q * (q.transpose() * p);
    singular_values(&residual).first().copied().unwrap_or(0.0).min(1.0)
}

/// Principal angles in nondecreasing order, `min(dim P, dim Q)` of them.
///
/// Cosines come from the SVD of `P^T Q` and sines from the SVD of the
/// residual `(I - Q Q^T) P`; each angle uses `asin` when small and `acos`
/// otherwise, which keeps full accuracy at both ends.
pub fn principal_angles(p: &Subspace, q: &Subspace) -> Result<Vec<f64>> {
    check(p, q)?;
    let (small, big) = if p.dim() <= q.dim() { (&p.basis, &q.basis) } else { (&q.basis, &p.basis) };
    let k = small.ncols();
    if k == 0 {
        return Ok(Vec::new());
    }
    let cos = singular_values(&(small.transpose() * big));
    let mut sin = singular_values(&(small - big * (big.transpose() * small)));
    sin.reverse();
    Ok((0..k)
        .map(|i| {
            let s = sin[i].min(1.0);
            if s * s <= 0.5 {
                s.asin()
            } else {
                cos[i].clamp(0.0, 1.0).acos()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cols(n: usize, k: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(n, k, data)
    }

    /// Brute-force `sup_a inf_b |a - b|` for a line or plane P, with unit
    /// `a` on a dense grid and `b` the orthogonal projection onto Q.
    fn grid_rho(p: &Subspace, q: &Subspace, steps: usize) -> f64 {
        let qb = q.basis();
        let mut best: f64 = 0.0;
        let eval = |a: nalgebra::DVector<f64>| (&a - qb * (qb.transpose() * &a)).norm();
        match p.dim() {
            1 => best = eval(p.basis().column(0).into_owned()),
            2 => {
                for i in 0..steps {
                    let t = PI * i as f64 / steps as f64;
                    let a = p.basis().column(0) * t.cos() + p.basis().column(1) * t.sin();
                    best = best.max(eval(a));
                }
            }
            _ => unreachable!(),
        }
        best
    }

    #[test]
    fn identical_and_orthogonal_lines() {
        let e1 = Subspace::new(cols(2, 1, &[1.0, 0.0])).unwrap();
        let e2 = Subspace::new(cols(2, 1, &[0.0, 1.0])).unwrap();
        assert_eq!(rho(&e1, &e1).unwrap(), 0.0);
        assert!((rho(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        assert!((grid_rho(&e1, &e2, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tilted_line() {
        let t = PI / 6.0;
        let p = Subspace::new(cols(2, 1, &[1.0, 0.0])).unwrap();
        let q = Subspace::new(cols(2, 1, &[t.cos(), t.sin()])).unwrap();
        let r = rho(&p, &q).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert!((grid_rho(&p, &q, 1) - r).abs() < 1e-12);
    }

    #[test]
    fn planted_rotation() {
        // plane span{e1, e2} against span{e1, cos t e2 + sin t e4} in R^5
        for t in [0.1, 0.5, 1.0, FRAC_PI_2] {
            let mut p = DMatrix::zeros(5, 2);
            p[(0, 0)] = 1.0;
            p[(1, 1)] = 1.0;
            let mut q = p.clone();
            q[(1, 1)] = f64::cos(t);
            q[(3, 1)] = f64::sin(t);
            let (p, q) = (Subspace::new(p).unwrap(), Subspace::new(q).unwrap());
            let ang = principal_angles(&p, &q).unwrap();
            assert!(ang[0].abs() < 1e-15);
            assert!((ang[1] - t).abs() < 1e-14);
            assert!((rho(&p, &q).unwrap() - t.sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn orthogonal_complements() {
        let mut p = DMatrix::zeros(4, 2);
        p[(0, 0)] = 1.0;
        p[(1, 1)] = 1.0;
        let mut q = DMatrix::zeros(4, 2);
        q[(2, 0)] = 1.0;
        q[(3, 1)] = 1.0;
        let ang = principal_angles(&Subspace::new(p).unwrap(), &Subspace::new(q).unwrap()).unwrap();
        assert!(ang.iter().all(|a| (a - FRAC_PI_2).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch() {
        let p = Subspace::new(cols(2, 1, &[1.0, 0.0])).unwrap();
        let q = Subspace::new(cols(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        assert!(matches!(rho(&p, &q), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(principal_angles(&p, &q), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn one_sided_for_unequal_dims() {
        let line = Subspace::new(cols(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        let plane = Subspace::new(cols(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(rho(&line, &plane).unwrap(), 0.0);
        assert!((rho(&plane, &line).unwrap() - 1.0).abs() < 1e-15);
    }

    fn random_subspace(n: usize, k: usize) -> impl Strategy<Value = Subspace> {
        proptest::collection::vec(-1.0f64..1.0, n * k).prop_filter_map("rank", move |v| {
            let a = DMatrix::from_vec(n, k, v);
            let (b, ratio) = column_space(&a);
            (ratio > 1e-3).then(|| Subspace::new(b).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rho_symmetric(p in random_subspace(5, 2), q in random_subspace(5, 2)) {
            prop_assert!((rho(&p, &q).unwrap() - rho(&q, &p).unwrap()).abs() < 1e-10);
            prop_assert!(rho(&p, &p).unwrap() < 1e-12);
        }

        #[test]
        fn rho_triangle(p in random_subspace(4, 2), q in random_subspace(4, 2), r in random_subspace(4, 2)) {
            let lhs = rho(&p, &r).unwrap();
            prop_assert!(lhs <= rho(&p, &q).unwrap() + rho(&q, &r).unwrap() + 1e-10);
        }

        #[test]
        fn rho_is_sine_of_largest_angle(p in random_subspace(5, 2), q in random_subspace(5, 2)) {
            let ang = principal_angles(&p, &q).unwrap();
            prop_assert!(ang.windows(2).all(|w| w[0] <= w[1] + 1e-15));
            prop_assert!((rho(&p, &q).unwrap() - ang[1].sin()).abs() < 1e-10);
        }

        #[test]
        fn grid_oracle_planes(p in random_subspace(4, 2), q in random_subspace(4, 2)) {
            // grid spacing pi/20000 bounds the under-estimate by ~ (pi/40000)^2
            prop_assert!((rho(&p, &q).unwrap() - grid_rho(&p, &q, 20_000)).abs() < 1e-6);
        }
    }
}
