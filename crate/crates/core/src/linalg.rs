//! Small dense helpers: semidefinite Cholesky and matrix comparisons.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Diagonally pivoted Cholesky factorization of a symmetric PSD matrix.
///
/// Returns `F` with `A = F Fᵀ` (F is lower triangular up to a row
/// permutation) and the numerical rank. Zero pivots are allowed, so
/// rank-deficient targets such as `u = m` factor without trouble.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("expected square matrix, got {}x{}", n, a.ncols())));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "overlap matrix", step: 0 });
    }
    let scale = a.diagonal().iter().map(|d| d.abs()).fold(1.0_f64, f64::max);
    let tol = 1e-12 * scale;

    let mut w = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut rank = n;

    for k in 0..n {
        let (j, &dmax) = (k..n)
            .map(|i| (i, &w[(i, i)]))
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("non-empty range");
        if dmax <= tol {
            let min_pivot = (k..n).map(|i| w[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_pivot < -1e-9 * scale {
                return Err(Error::NotPsd { min_pivot });
            }
            rank = k;
            break;
        }
        if j != k {
            w.swap_rows(j, k);
            w.swap_columns(j, k);
            l.swap_rows(j, k);
            perm.swap(j, k);
        }
        let pivot = w[(k, k)].sqrt();
        l[(k, k)] = pivot;
        for i in k + 1..n {
            l[(i, k)] = w[(i, k)] / pivot;
        }
        for i in k + 1..n {
            for c in k + 1..=i {
                let v = w[(i, c)] - l[(i, k)] * l[(c, k)];
                w[(i, c)] = v;
                w[(c, i)] = v;
            }
        }
    }

    let mut f = DMatrix::<f64>::zeros(n, n);
    for (row, &p) in perm.iter().enumerate() {
        for c in 0..n {
            f[(p, c)] = l[(row, c)];
        }
    }
    let residual = (a - &f * f.transpose()).amax();
    if residual > 1e-9 * scale {
        // A negative direction hidden behind the zero pivots.
        return Err(Error::NotPsd { min_pivot: -residual });
    }
    Ok((f, rank))
}

pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

/// ‖a − b‖_F / max(‖b‖_F, floor).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_full_rank() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 2.0, 0.5, 0.6, 0.5, 3.0]);
        let (f, rank) = psd_factor(&a).unwrap();
        assert_eq!(rank, 3);
        assert!((&f * f.transpose() - &a).amax() < 1e-14);
    }

    #[test]
    fn factors_rank_deficient() {
        // Rows 0 and 1 describe identical vectors.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.3, 1.0, 1.0, 0.3, 0.3, 0.3, 2.0]);
        let (f, rank) = psd_factor(&a).unwrap();
        assert_eq!(rank, 2);
        assert!((&f * f.transpose() - &a).amax() < 1e-14);
    }

    #[test]
    fn rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_factor(&a), Err(Error::NotPsd { .. })));
    }
}
