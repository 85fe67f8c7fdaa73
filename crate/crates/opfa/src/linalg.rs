//! Dense symmetric eigendecomposition (cyclic Jacobi) and the Moore-Penrose
//! pseudoinverse built from it.
//!
//! Every matrix this crate eigendecomposes is small (factor-count sized or a
//! stacked factor problem of a few hundred rows), so an exact, deterministic,
//! dependency-free Jacobi sweep beats linking a LAPACK backend.

use ndarray::{Array1, Array2};

use crate::error::{OpfaError, Result};

/// Eigendecomposition of a symmetric matrix: eigenvalues ascending, matching
/// eigenvectors as columns. Symmetry is enforced up to a small tolerance.
pub fn symmetric_eigen(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(OpfaError::ShapeMismatch(format!(
            "eigendecomposition needs a square matrix, got {}×{}",
            n,
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(OpfaError::NonFinite("eigendecomposition input".into()));
    }
    let scale = m.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    for i in 0..n {
        for j in i + 1..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * (1.0 + scale) {
                return Err(OpfaError::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut a = m.clone();
    // Force exact symmetry so rotations stay consistent.
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut v = Array2::eye(n);
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = 1e-15 * (1.0 + frob);

    for _sweep in 0..100 {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= stop {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let eigvals = Array1::from_iter(order.iter().map(|&i| a[(i, i)]));
    let mut eigvecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs[(k, dst)] = v[(k, src)];
        }
    }
    Ok((eigvals, eigvecs))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn largest_eigenvalue(m: &Array2<f64>) -> Result<f64> {
    let (vals, _) = symmetric_eigen(m)?;
    Ok(vals[vals.len() - 1])
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn smallest_eigenvalue(m: &Array2<f64>) -> Result<f64> {
    let (vals, _) = symmetric_eigen(m)?;
    Ok(vals[0])
}

/// Moore-Penrose pseudoinverse of a wide matrix `A` (rows ≤ columns) via the
/// eigendecomposition of the Gram matrix `AAᵀ`, together with the smallest
/// eigenvalue of `AAᵀ` (clamped at zero).
///
/// Rank is decided by the standard cutoff `rows · ε · λ_max`.
pub fn pseudoinverse_gram(a: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let gram = a.dot(&a.t());
    let (vals, vecs) = symmetric_eigen(&gram)?;
    let f = gram.nrows();
    let lam_max = vals[f - 1].max(0.0);
    let cutoff = f as f64 * f64::EPSILON * lam_max;
    // A† = Aᵀ V diag(1/λ over the numerical rank) Vᵀ
    let mut inv_diag = Array2::zeros((f, f));
    for i in 0..f {
        if vals[i] > cutoff && vals[i] > 0.0 {
            inv_diag[(i, i)] = 1.0 / vals[i];
        }
    }
    let gram_pinv = vecs.dot(&inv_diag).dot(&vecs.t());
    let pinv = a.t().dot(&gram_pinv);
    Ok((pinv, vals[0].max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix_eigenvalues_sorted() {
        let m = array![[3.0, 0.0], [0.0, -1.0]];
        let (vals, _) = symmetric_eigen(&m).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-14);
        assert!((vals[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn known_two_by_two() {
        let m = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        // eigenvector for λ=3 is (1,1)/√2 up to sign
        let r = (vecs[(0, 1)] / vecs[(1, 1)] - 1.0).abs();
        assert!(r < 1e-10);
    }

    #[test]
    fn reconstructs_random_symmetric_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1usize, 2, 3, 5, 8, 13] {
            let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let m = &b + &b.t();
            let (vals, vecs) = symmetric_eigen(&m).unwrap();
            let lam = Array2::from_diag(&vals);
            let rec = vecs.dot(&lam).dot(&vecs.t());
            for (x, y) in m.iter().zip(rec.iter()) {
                assert!((x - y).abs() < 1e-10, "reconstruction off: {x} vs {y}");
            }
            // orthonormal eigenvectors
            let gram = vecs.t().dot(&vecs);
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = array![[0.0, 1.0], [0.5, 0.0]];
        assert!(symmetric_eigen(&m).is_err());
    }

    #[test]
    fn pseudoinverse_satisfies_moore_penrose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let f = rng.gen_range(1..4);
            let p = rng.gen_range(f..8);
            let a = Array2::from_shape_fn((f, p), |_| rng.gen_range(-1.0..1.0));
            let (pinv, lam_min) = pseudoinverse_gram(&a).unwrap();
            assert!(lam_min >= 0.0);
            let apa = a.dot(&pinv).dot(&a);
            for (x, y) in apa.iter().zip(a.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
            let pap = pinv.dot(&a).dot(&pinv);
            for (x, y) in pap.iter().zip(pinv.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
            // A†A symmetric
            let proj = pinv.dot(&a);
            for i in 0..p {
                for j in 0..p {
                    assert!((proj[(i, j)] - proj[(j, i)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pseudoinverse_handles_rank_deficiency() {
        // duplicated row → rank 1
        let a = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let (pinv, lam_min) = pseudoinverse_gram(&a).unwrap();
        assert!(lam_min.abs() < 1e-12);
        let apa = a.dot(&pinv).dot(&a);
        for (x, y) in apa.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
