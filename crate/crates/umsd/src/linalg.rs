//! Small dense linear algebra: symmetric eigendecomposition via cyclic
//! Jacobi rotations and the PSD matrix square root built on it.
//!
//! Feature covariances are at most a few dozen columns wide, so the O(n^3)
//! per sweep cost of Jacobi is irrelevant and its accuracy (eigenvectors
//! orthogonal to machine precision) is exactly what the Frechet distance
//! computation needs.

use crate::error::{Error, Result};
use crate::mat::Mat;

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as (A + A^T)/2 before iterating, so tiny
/// asymmetries from accumulated roundoff are harmless. Returns eigenvalues
/// in ascending order and the matching eigenvectors as columns of an
/// orthogonal matrix V, with A = V diag(l) V^T.
pub fn symmetric_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("eigendecomposition input".into()));
    }
    let mut m = Mat::from_fn(n, n, |r, c| 0.5 * (a.at(r, c) + a.at(c, r)));
    let mut v = Mat::from_fn(n, n, |r, c| f64::from(r == c));
    let scale = m.max_abs().max(1.0);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m.at(p, q).abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                // Smaller-angle root of the 2x2 Schur problem; keeps the
                // rotation close to identity and the iteration stable.
                let tau = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    *m.at_mut(k, p) = c * mkp - s * mkq;
                    *m.at_mut(k, q) = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    *m.at_mut(p, k) = c * mpk - s * mqk;
                    *m.at_mut(q, k) = s * mpk + c * mqk;
                }
                *m.at_mut(p, q) = 0.0;
                *m.at_mut(q, p) = 0.0;
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    *v.at_mut(k, p) = c * vkp - s * vkq;
                    *v.at_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.at(i, i).total_cmp(&m.at(j, j)));
    let eig: Vec<f64> = order.iter().map(|&i| m.at(i, i)).collect();
    let vecs = Mat::from_fn(n, n, |r, c| v.at(r, order[c]));
    Ok((eig, vecs))
}

/// Square root of a symmetric positive semidefinite matrix.
///
/// Eigenvalues that roundoff pushed slightly negative clamp to zero, so the
/// result is always real and PSD.
pub fn sqrt_psd(a: &Mat) -> Result<Mat> {
    let (eig, v) = symmetric_eigen(a)?;
    let root: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let n = eig.len();
    Ok(Mat::from_fn(n, n, |r, c| {
        (0..n).map(|k| v.at(r, k) * root[k] * v.at(c, k)).sum()
    }))
}

pub fn trace(a: &Mat) -> f64 {
    (0..a.rows().min(a.cols())).map(|i| a.at(i, i)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> Mat {
        let raw = Mat::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
        Mat::from_fn(n, n, |r, c| 0.5 * (raw.at(r, c) + raw.at(c, r)))
    }

    fn random_psd(n: usize, rng: &mut impl Rng) -> Mat {
        let b = Mat::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
        b.transpose().matmul(&b).unwrap()
    }

    #[test]
    fn diagonal_matrix_recovers_sorted_entries() {
        let a = Mat::from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ])
        .unwrap();
        let (eig, v) = symmetric_eigen(&a).unwrap();
        assert_eq!(eig, vec![-1.0, 2.0, 3.0]);
        // Columns must be signed basis vectors matching the permutation.
        for (col, want_row) in [(0usize, 1usize), (1, 2), (2, 0)] {
            for r in 0..3 {
                let expect = f64::from(r == want_row);
                assert!((v.at(r, col).abs() - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (eig, v) = symmetric_eigen(&a).unwrap();
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
        let inv = 1.0 / 2.0f64.sqrt();
        // Eigenvector signs are arbitrary; compare up to sign.
        let dot0 = v.at(0, 0) * inv - v.at(1, 0) * inv;
        let dot1 = v.at(0, 1) * inv + v.at(1, 1) * inv;
        assert!((dot0.abs() - 1.0).abs() < 1e-12);
        assert!((dot1.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_symmetric_satisfies_eigen_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 5, 8] {
            let a = random_symmetric(n, &mut rng);
            let (eig, v) = symmetric_eigen(&a).unwrap();
            // A v_i = l_i v_i
            for i in 0..n {
                for r in 0..n {
                    let av: f64 = (0..n).map(|c| a.at(r, c) * v.at(c, i)).sum();
                    assert!((av - eig[i] * v.at(r, i)).abs() < 1e-9);
                }
            }
            // V^T V = I
            let vtv = v.transpose().matmul(&v).unwrap();
            for r in 0..n {
                for c in 0..n {
                    let expect = f64::from(r == c);
                    assert!((vtv.at(r, c) - expect).abs() < 1e-10);
                }
            }
            // V diag(l) V^T = A
            let recon = Mat::from_fn(n, n, |r, c| {
                (0..n).map(|k| v.at(r, k) * eig[k] * v.at(c, k)).sum()
            });
            assert!(recon.sub(&a).unwrap().max_abs() < 1e-9);
            // ascending order
            for w in eig.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn sqrt_squares_back_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [1, 3, 6] {
            let a = random_psd(n, &mut rng);
            let s = sqrt_psd(&a).unwrap();
            assert!(s.sub(&s.transpose()).unwrap().max_abs() < 1e-10);
            let ss = s.matmul(&s).unwrap();
            assert!(ss.sub(&a).unwrap().max_abs() < 1e-8);
        }
    }

    #[test]
    fn sqrt_of_diagonal_is_elementwise() {
        let a = Mat::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let s = sqrt_psd(&a).unwrap();
        let want = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert!(s.sub(&want).unwrap().max_abs() < 1e-12);
        let id = Mat::from_fn(4, 4, |r, c| f64::from(r == c));
        assert!(sqrt_psd(&id).unwrap().sub(&id).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sqrt_clamps_roundoff_negatives() {
        // Rank-1 PSD matrix has an exact zero eigenvalue; perturb it below
        // zero by an amount roundoff could produce.
        let a = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0 - 1e-14]]).unwrap();
        let s = sqrt_psd(&a).unwrap();
        assert!(s.all_finite());
        let ss = s.matmul(&s).unwrap();
        assert!(ss.sub(&a).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        let rect = Mat::zeros(2, 3);
        assert!(symmetric_eigen(&rect).is_err());
        let mut bad = Mat::zeros(2, 2);
        *bad.at_mut(0, 1) = f64::NAN;
        assert!(symmetric_eigen(&bad).is_err());
    }

    #[test]
    fn trace_sums_diagonal() {
        let a = Mat::from_rows(&[vec![1.0, 5.0], vec![7.0, 2.5]]).unwrap();
        assert_eq!(trace(&a), 3.5);
        assert_eq!(trace(&Mat::zeros(3, 3)), 0.0);
    }
}
