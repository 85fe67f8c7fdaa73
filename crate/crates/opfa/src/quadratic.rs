//! Quadratic surrogate `x·Qx − 2·q·x + c` shared by the factor and score
//! subproblems.
//!
//! The factor problem carries a dense `Q`; each subject's score problem is
//! exactly block-diagonal (one `f × f` block per variable), which the solver
//! exploits — a block matvec is two orders of magnitude cheaper than the dense
//! one at typical sizes.

use ndarray::{Array1, Array2};

use crate::error::{OpfaError, Result};

/// Symmetric PSD matrix in either dense or block-diagonal form.
#[derive(Debug, Clone)]
pub enum QMatrix {
    Dense(Array2<f64>),
    /// Blocks of equal size along the diagonal; block `j` acts on
    /// coordinates `[j·k, (j+1)·k)` where `k` is the block size.
    BlockDiag {
        block_size: usize,
        blocks: Vec<Array2<f64>>,
    },
}

impl QMatrix {
    pub fn dim(&self) -> usize {
        match self {
            QMatrix::Dense(m) => m.nrows(),
            QMatrix::BlockDiag { block_size, blocks } => block_size * blocks.len(),
        }
    }

    pub fn matvec(&self, x: &Array1<f64>) -> Array1<f64> {
        match self {
            QMatrix::Dense(m) => m.dot(x),
            QMatrix::BlockDiag { block_size, blocks } => {
                let k = *block_size;
                let mut out = Array1::zeros(x.len());
                for (j, b) in blocks.iter().enumerate() {
                    for r in 0..k {
                        let mut acc = 0.0;
                        for c in 0..k {
                            acc += b[(r, c)] * x[j * k + c];
                        }
                        out[j * k + r] = acc;
                    }
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            QMatrix::Dense(m) => m.clone(),
            QMatrix::BlockDiag { block_size, blocks } => {
                let k = *block_size;
                let n = self.dim();
                let mut out = Array2::zeros((n, n));
                for (j, b) in blocks.iter().enumerate() {
                    for r in 0..k {
                        for c in 0..k {
                            out[(j * k + r, j * k + c)] = b[(r, c)];
                        }
                    }
                }
                out
            }
        }
    }
}

/// The quadratic `x·Qx − 2·q·x + c`; for the subproblems here `c` is the
/// masked data energy so the value equals the true residual objective.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub matrix: QMatrix,
    pub linear: Array1<f64>,
    pub constant: f64,
}

impl QuadraticForm {
    pub fn new(matrix: QMatrix, linear: Array1<f64>, constant: f64) -> Result<Self> {
        if matrix.dim() != linear.len() {
            return Err(OpfaError::ShapeMismatch(format!(
                "quadratic matrix dim {} vs linear term {}",
                matrix.dim(),
                linear.len()
            )));
        }
        Ok(QuadraticForm {
            matrix,
            linear,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn objective(&self, x: &Array1<f64>) -> f64 {
        let qx = self.matrix.matvec(x);
        x.dot(&qx) - 2.0 * self.linear.dot(x) + self.constant
    }

    /// `∇(x·Qx − 2q·x) = 2Qx − 2q`.
    pub fn gradient(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut g = self.matrix.matvec(x);
        g.mapv_inplace(|v| 2.0 * v);
        g - &(2.0 * &self.linear)
    }

    /// Largest-eigenvalue estimate by a fixed number of power iterations with
    /// a deterministic start vector. Slightly underestimates; callers add a
    /// safety factor on top.
    pub fn max_eigenvalue(&self, iters: usize) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        let mut v = Array1::from_shape_fn(n, |i| 1.0 + 1e-3 * (i as f64));
        let norm = v.dot(&v).sqrt();
        v /= norm;
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = self.matrix.matvec(&v);
            let nw = w.dot(&w).sqrt();
            if nw <= 1e-300 {
                return 0.0;
            }
            lambda = v.dot(&w);
            v = w / nw;
        }
        lambda.max(0.0)
    }

    /// Cheap sanity check that the form has no clearly negative curvature.
    pub fn check_psd(&self) -> Result<()> {
        if self.linear.iter().any(|v| !v.is_finite()) || !self.constant.is_finite() {
            return Err(OpfaError::NonFinite("quadratic form".into()));
        }
        let finite = match &self.matrix {
            QMatrix::Dense(m) => m.iter().all(|v| v.is_finite()),
            QMatrix::BlockDiag { blocks, .. } => {
                blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
            }
        };
        if !finite {
            return Err(OpfaError::NonFinite("quadratic form".into()));
        }
        let lam_max = self.max_eigenvalue(50);
        let sigma = lam_max * 1.01 + 1e-9;
        // Power iteration on σI − Q exposes the smallest eigenvalue of Q.
        let n = self.dim();
        let mut v = Array1::from_shape_fn(n, |i| 1.0 + 1e-3 * (i as f64));
        let norm = v.dot(&v).sqrt();
        v /= norm;
        let mut top = 0.0;
        for _ in 0..50 {
            let w = &v * sigma - self.matrix.matvec(&v);
            let nw = w.dot(&w).sqrt();
            if nw <= 1e-300 {
                break;
            }
            top = v.dot(&w);
            v = w / nw;
        }
        let lam_min = sigma - top;
        if lam_min < -1e-8 * (1.0 + lam_max.abs()) {
            return Err(OpfaError::NotPsd(format!(
                "smallest eigenvalue ≈ {lam_min:.3e}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::largest_eigenvalue;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        b.t().dot(&b)
    }

    #[test]
    fn block_diag_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blocks: Vec<Array2<f64>> = (0..4).map(|_| random_psd(3, &mut rng)).collect();
        let qm = QMatrix::BlockDiag {
            block_size: 3,
            blocks,
        };
        let dense = qm.to_dense();
        let x = Array1::from_shape_fn(12, |i| (i as f64) * 0.3 - 1.0);
        let via_blocks = qm.matvec(&x);
        let via_dense = dense.dot(&x);
        for (a, b) in via_blocks.iter().zip(via_dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_and_gradient_are_consistent() {
        let q = array![[2.0, 0.5], [0.5, 1.0]];
        let form = QuadraticForm::new(
            QMatrix::Dense(q.clone()),
            array![1.0, -1.0],
            3.0,
        )
        .unwrap();
        let x = array![0.7, -0.2];
        // x'Qx − 2(1·0.7 + (−1)(−0.2)) + 3
        let want = x.dot(&q.dot(&x)) - 2.0 * (0.7 + 0.2) + 3.0;
        assert!((form.objective(&x) - want).abs() < 1e-14);
        let g = form.gradient(&x);
        let gwant = q.dot(&x) * 2.0 - array![2.0, -2.0];
        for (a, b) in g.iter().zip(gwant.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn power_iteration_approximates_top_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [2usize, 5, 10] {
            let q = random_psd(n, &mut rng);
            let form =
                QuadraticForm::new(QMatrix::Dense(q.clone()), Array1::zeros(n), 0.0).unwrap();
            let est = form.max_eigenvalue(50);
            let exact = largest_eigenvalue(&q).unwrap();
            assert!(est <= exact * (1.0 + 1e-9), "estimate must not exceed");
            assert!(est >= exact * 0.99, "estimate too loose: {est} vs {exact}");
        }
    }

    #[test]
    fn psd_check_accepts_gram_and_rejects_indefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let good = random_psd(6, &mut rng);
        let ok = QuadraticForm::new(QMatrix::Dense(good), Array1::zeros(6), 0.0).unwrap();
        assert!(ok.check_psd().is_ok());

        let bad = array![[1.0, 0.0], [0.0, -0.5]];
        let nope = QuadraticForm::new(QMatrix::Dense(bad), Array1::zeros(2), 0.0).unwrap();
        assert!(nope.check_psd().is_err());
    }

    #[test]
    fn zero_matrix_has_zero_top_eigenvalue() {
        let form = QuadraticForm::new(
            QMatrix::Dense(Array2::zeros((3, 3))),
            Array1::zeros(3),
            0.0,
        )
        .unwrap();
        assert_eq!(form.max_eigenvalue(50), 0.0);
    }
}
