//! Score step: per-subject masked least-squares quadratics plus a group-lasso
//! penalty tying each score coefficient across subjects, solved by proximal
//! gradient descent over the nonnegative orthant.

use ndarray::{Array1, Array2};

use crate::data::Variant;
use crate::error::{OpfaError, Result};
use crate::penalty::{group_lasso_penalty, nonneg_group_prox};
use crate::quadratic::{QMatrix, QuadraticForm};

/// Stacks score columns: `x[j·f + i] = A[i, j]`, matching the block-diagonal
/// layout of [`assemble_score_quadratic`] (one block per variable).
fn vec_scores(a: &Array2<f64>) -> Array1<f64> {
    let (f, p) = a.dim();
    let mut x = Array1::zeros(f * p);
    for j in 0..p {
        for i in 0..f {
            x[j * f + i] = a[(i, j)];
        }
    }
    x
}

fn unvec_scores(x: &Array1<f64>, f: usize, p: usize) -> Array2<f64> {
    let mut a = Array2::zeros((f, p));
    for j in 0..p {
        for i in 0..f {
            a[(i, j)] = x[j * f + i];
        }
    }
    a
}

/// Builds the quadratic in `vec(A)` equal to `‖[X − M_w A]_Ω‖²` for one
/// subject, where `M_w` is that subject's shifted, windowed factor matrix
/// (`n × f`). The matrix is block diagonal with one `f × f` block per
/// variable; without a mask all blocks share the factor Gram matrix.
///
/// Masks must be binary. Masked-out entries are multiplied away before any
/// accumulation, so their stored values cannot influence the result.
pub fn assemble_score_quadratic(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    windowed_factors: &Array2<f64>,
) -> Result<QuadraticForm> {
    let (n, p) = x.dim();
    let (n_m, f) = windowed_factors.dim();
    if n_m != n {
        return Err(OpfaError::ShapeMismatch(format!(
            "{n} data rows vs {n_m} factor rows"
        )));
    }
    if f == 0 || p == 0 {
        return Err(OpfaError::InvalidInput("empty score problem".into()));
    }
    if let Some(m) = mask {
        if m.dim() != (n, p) {
            return Err(OpfaError::ShapeMismatch("mask shape".into()));
        }
    }

    let mut linear = Array1::<f64>::zeros(f * p);
    let mut constant = 0.0;
    let blocks: Vec<Array2<f64>> = match mask {
        None => {
            let gram = windowed_factors.t().dot(windowed_factors);
            let cross = windowed_factors.t().dot(x); // f × p
            for j in 0..p {
                for i in 0..f {
                    linear[j * f + i] = cross[(i, j)];
                }
            }
            constant = x.iter().map(|v| v * v).sum();
            (0..p).map(|_| gram.clone()).collect()
        }
        Some(m) => {
            let mut blocks = vec![Array2::<f64>::zeros((f, f)); p];
            for j in 0..p {
                let block = &mut blocks[j];
                for t in 0..n {
                    let w = m[(t, j)];
                    if w == 0.0 {
                        continue;
                    }
                    let xv = w * x[(t, j)];
                    constant += xv * xv;
                    for i in 0..f {
                        let mi = windowed_factors[(t, i)];
                        linear[j * f + i] += mi * xv;
                        for i2 in i..f {
                            block[(i, i2)] += mi * windowed_factors[(t, i2)];
                        }
                    }
                }
                for i in 0..f {
                    for i2 in (i + 1)..f {
                        block[(i2, i)] = block[(i, i2)];
                    }
                }
            }
            blocks
        }
    };

    QuadraticForm::new(
        QMatrix::BlockDiag {
            block_size: f,
            blocks,
        },
        linear,
        constant,
    )
}

/// Largest eigenvalue of a sum of quadratic matrices, by power iteration with
/// the same deterministic start as [`QuadraticForm::max_eigenvalue`].
fn summed_max_eigenvalue(quads: &[QuadraticForm], iters: usize) -> f64 {
    let dim = quads[0].dim();
    let mut v = Array1::from_shape_fn(dim, |i| 1.0 + 1e-3 * i as f64);
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut rayleigh = 0.0;
    for _ in 0..iters {
        let mut w = Array1::<f64>::zeros(dim);
        for q in quads {
            w += &q.matrix.matvec(&v);
        }
        rayleigh = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn <= f64::MIN_POSITIVE {
            return 0.0;
        }
        v = w / wn;
    }
    rayleigh.max(0.0)
}

/// Minimizes the score subproblem by monotone proximal gradient descent.
///
/// Per-subject variant: `init` holds one `f × p` matrix per quadratic and the
/// penalty is `λ Σ_{i,j} ‖(A_1[i,j], …, A_S[i,j])‖₂`. Common-scores variant:
/// `init` holds a single matrix shared by every subject and the penalty
/// reduces to `λ √S Σ_{i,j} A[i,j]`.
///
/// Returns the scores and the achieved subproblem objective (masked residual
/// plus penalty); the objective never exceeds its value at `init`.
pub fn estimate_scores(
    quads: &[QuadraticForm],
    init: &[Array2<f64>],
    lambda: f64,
    variant: Variant,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<Array2<f64>>, f64)> {
    if quads.is_empty() {
        return Err(OpfaError::InvalidInput("no subjects".into()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(OpfaError::InvalidInput(
            "lambda must be finite and nonnegative".into(),
        ));
    }
    let dim = quads[0].dim();
    if quads.iter().any(|q| q.dim() != dim) {
        return Err(OpfaError::ShapeMismatch(
            "subject quadratics differ in dimension".into(),
        ));
    }
    let expected = match variant {
        Variant::Opfa => quads.len(),
        Variant::OpfaC => 1,
    };
    if init.len() != expected {
        return Err(OpfaError::ShapeMismatch(format!(
            "{} initial score matrices, expected {expected}",
            init.len()
        )));
    }
    let (f, p) = init[0].dim();
    if f * p != dim || init.iter().any(|a| a.dim() != (f, p)) {
        return Err(OpfaError::ShapeMismatch(
            "score matrices must be f × p matching the quadratics".into(),
        ));
    }
    for q in quads {
        q.check_psd()?;
    }
    let s_count = quads.len();

    match variant {
        Variant::Opfa => {
            let mut xs: Vec<Array1<f64>> =
                init.iter().map(|a| vec_scores(&a.mapv(|v| v.max(0.0)))).collect();
            let penalty_of = |xs: &[Array1<f64>]| -> f64 {
                let mats: Vec<Array2<f64>> =
                    xs.iter().map(|x| unvec_scores(x, f, p)).collect();
                group_lasso_penalty(&mats).expect("uniform shapes")
            };
            let smooth_of = |xs: &[Array1<f64>]| -> f64 {
                quads.iter().zip(xs).map(|(q, x)| q.objective(x)).sum()
            };
            let mut obj = smooth_of(&xs) + lambda * penalty_of(&xs);
            if !obj.is_finite() {
                return Err(OpfaError::NonFinite("score objective at start".into()));
            }
            let mut lip = (2.0
                * quads
                    .iter()
                    .map(|q| q.max_eigenvalue(50))
                    .fold(0.0, f64::max)
                * (1.0 + 1e-3))
                .max(1e-12);
            let mut doublings = 0;
            for _ in 0..max_iters {
                let mut vs: Vec<Array1<f64>> = Vec::with_capacity(s_count);
                for (q, x) in quads.iter().zip(&xs) {
                    vs.push(x - &(q.gradient(x) / lip));
                }
                // group prox: one group per score coefficient, across subjects
                let threshold = lambda / lip;
                let mut group = Array1::<f64>::zeros(s_count);
                for k in 0..dim {
                    for (s, v) in vs.iter().enumerate() {
                        group[s] = v[k];
                    }
                    let shrunk = nonneg_group_prox(group.view(), threshold)?;
                    for (s, v) in vs.iter_mut().enumerate() {
                        v[k] = shrunk[s];
                    }
                }
                let cand = smooth_of(&vs) + lambda * penalty_of(&vs);
                if !cand.is_finite() {
                    return Err(OpfaError::NonFinite("score objective".into()));
                }
                if cand > obj {
                    lip *= 2.0;
                    doublings += 1;
                    if doublings > 60 {
                        return Err(OpfaError::NonFinite(
                            "score step cannot find a descent step size".into(),
                        ));
                    }
                    continue;
                }
                let decrease = obj - cand;
                xs = vs;
                obj = cand;
                if decrease <= tol * obj.abs().max(1.0) {
                    break;
                }
            }
            Ok((xs.iter().map(|x| unvec_scores(x, f, p)).collect(), obj))
        }
        Variant::OpfaC => {
            let mut x = vec_scores(&init[0].mapv(|v| v.max(0.0)));
            let scale = lambda * (s_count as f64).sqrt();
            let smooth_of =
                |x: &Array1<f64>| -> f64 { quads.iter().map(|q| q.objective(x)).sum() };
            let penalty_of = |x: &Array1<f64>| -> f64 { scale * x.iter().map(|v| v.abs()).sum::<f64>() };
            let mut obj = smooth_of(&x) + penalty_of(&x);
            if !obj.is_finite() {
                return Err(OpfaError::NonFinite("score objective at start".into()));
            }
            let mut lip = (2.0 * summed_max_eigenvalue(quads, 50) * (1.0 + 1e-3)).max(1e-12);
            let mut doublings = 0;
            for _ in 0..max_iters {
                let mut grad = Array1::<f64>::zeros(dim);
                for q in quads {
                    grad += &q.gradient(&x);
                }
                let threshold = scale / lip;
                let v = (&x - &(grad / lip)).mapv(|v| (v - threshold).max(0.0));
                let cand = smooth_of(&v) + penalty_of(&v);
                if !cand.is_finite() {
                    return Err(OpfaError::NonFinite("score objective".into()));
                }
                if cand > obj {
                    lip *= 2.0;
                    doublings += 1;
                    if doublings > 60 {
                        return Err(OpfaError::NonFinite(
                            "score step cannot find a descent step size".into(),
                        ));
                    }
                    continue;
                }
                let decrease = obj - cand;
                x = v;
                obj = cand;
                if decrease <= tol * obj.abs().max(1.0) {
                    break;
                }
            }
            Ok((vec![unvec_scores(&x, f, p)], obj))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
        f: usize,
        with_mask: bool,
    ) -> (Array2<f64>, Option<Array2<f64>>, Array2<f64>) {
        let x = Array2::from_shape_fn((n, p), |_| rng.gen_range(-1.0..1.0));
        let mask = if with_mask {
            Some(Array2::from_shape_fn((n, p), |_| {
                if rng.gen_bool(0.3) {
                    0.0
                } else {
                    1.0
                }
            }))
        } else {
            None
        };
        let m_w = Array2::from_shape_fn((n, f), |_| rng.gen_range(0.0..1.0));
        (x, mask, m_w)
    }

    fn direct_residual(
        x: &Array2<f64>,
        mask: Option<&Array2<f64>>,
        m_w: &Array2<f64>,
        a: &Array2<f64>,
    ) -> f64 {
        let pred = m_w.dot(a);
        crate::solvers::masked_residual(x, &pred, mask)
    }

    /// The assembled quadratic must reproduce the masked residual at random
    /// score matrices.
    #[test]
    fn quadratic_matches_direct_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..12 {
            let (n, p, f) = (6, 5, 3);
            let (x, mask, m_w) = random_instance(&mut rng, n, p, f, trial % 2 == 0);
            let quad = assemble_score_quadratic(&x, mask.as_ref(), &m_w).unwrap();
            for _ in 0..4 {
                let a = Array2::from_shape_fn((f, p), |_| rng.gen_range(0.0..1.0));
                let via_quad = quad.objective(&vec_scores(&a));
                let direct = direct_residual(&x, mask.as_ref(), &m_w, &a);
                let denom = direct.abs().max(1.0);
                assert!(
                    ((via_quad - direct) / denom).abs() < 1e-9,
                    "quad {via_quad} vs direct {direct}"
                );
            }
        }
    }

    /// An all-ones mask must give the same quadratic as no mask, up to
    /// accumulation-order rounding.
    #[test]
    fn all_ones_mask_matches_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (x, _, m_w) = random_instance(&mut rng, 7, 4, 2, false);
        let ones = Array2::from_elem((7, 4), 1.0);
        let q_none = assemble_score_quadratic(&x, None, &m_w).unwrap();
        let q_ones = assemble_score_quadratic(&x, Some(&ones), &m_w).unwrap();
        for _ in 0..5 {
            let a = Array2::from_shape_fn((2, 4), |_| rng.gen_range(0.0..1.0));
            let v = vec_scores(&a);
            let (o1, o2) = (q_none.objective(&v), q_ones.objective(&v));
            assert!((o1 - o2).abs() <= 1e-10 * o1.abs().max(1.0));
        }
    }

    /// With an identity factor matrix and no penalty the minimizer is the
    /// nonnegative part of the data.
    #[test]
    fn identity_factors_give_clipped_data() {
        let x = array![[1.0, -0.5], [-2.0, 0.25]];
        let m_w = Array2::eye(2);
        let quad = assemble_score_quadratic(&x, None, &m_w).unwrap();
        let init = vec![Array2::zeros((2, 2))];
        let (fit, _) =
            estimate_scores(&[quad], &init, 0.0, Variant::Opfa, 1e-14, 5000).unwrap();
        let want = x.mapv(|v: f64| v.max(0.0));
        for (a, b) in fit[0].iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    /// A strong enough group weight must zero a coefficient in every subject
    /// at once.
    #[test]
    fn group_penalty_zeroes_across_subjects() {
        // identity factors, two subjects; factor 1 barely explains anything
        let x1 = array![[1.0, 0.9], [0.05, 0.04]];
        let x2 = array![[0.95, 1.1], [0.03, 0.06]];
        let m_w = Array2::eye(2);
        let quads = vec![
            assemble_score_quadratic(&x1, None, &m_w).unwrap(),
            assemble_score_quadratic(&x2, None, &m_w).unwrap(),
        ];
        let init = vec![Array2::from_elem((2, 2), 0.5); 2];
        let (fit, _) =
            estimate_scores(&quads, &init, 0.4, Variant::Opfa, 1e-14, 8000).unwrap();
        for s in 0..2 {
            for j in 0..2 {
                assert_eq!(fit[s][(1, j)], 0.0, "weak factor row must vanish");
                assert!(fit[s][(0, j)] > 0.3, "strong factor row must survive");
            }
        }
    }

    /// Scalar closed form for the common-scores variant: with S identical
    /// one-dimensional quadratics `a² − 2qa + c` and weight λ the minimizer is
    /// `q − λ/(2√S)` clipped at zero.
    #[test]
    fn common_scores_match_scalar_closed_form() {
        let q_form = || {
            QuadraticForm::new(
                QMatrix::Dense(array![[1.0]]),
                array![1.0],
                1.0,
            )
            .unwrap()
        };
        let quads = vec![q_form(), q_form(), q_form(), q_form()];
        let init = vec![Array2::from_elem((1, 1), 0.0)];
        let (fit, _) =
            estimate_scores(&quads, &init, 0.8, Variant::OpfaC, 1e-14, 5000).unwrap();
        let want = 1.0 - 0.8 / (2.0 * 4.0_f64.sqrt());
        assert!((fit[0][(0, 0)] - want).abs() < 1e-9, "{}", fit[0][(0, 0)]);

        // heavy weight clips to zero
        let quads = vec![q_form(), q_form(), q_form(), q_form()];
        let (fit, _) =
            estimate_scores(&quads, &init, 10.0, Variant::OpfaC, 1e-14, 5000).unwrap();
        assert_eq!(fit[0][(0, 0)], 0.0);
    }

    /// The solver must match a long small-step proximal-gradient run
    /// (independent oracle) on random problems.
    #[test]
    fn matches_long_proximal_gradient_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for trial in 0..4 {
            let (n, p, f, s_count) = (6, 3, 2, 3);
            let mut quads = Vec::new();
            let mut inits = Vec::new();
            for _ in 0..s_count {
                let (x, mask, m_w) = random_instance(&mut rng, n, p, f, trial % 2 == 0);
                quads.push(assemble_score_quadratic(&x, mask.as_ref(), &m_w).unwrap());
                inits.push(Array2::from_shape_fn((f, p), |_| rng.gen_range(0.0..0.5)));
            }
            let lambda = 0.3;
            let (_, obj) =
                estimate_scores(&quads, &inits, lambda, Variant::Opfa, 1e-14, 20_000).unwrap();

            // oracle: quarter-length steps, many iterations
            let lip = 4.0
                * (2.0
                    * quads
                        .iter()
                        .map(|q| q.max_eigenvalue(100))
                        .fold(0.0, f64::max)
                    * 1.001)
                    .max(1e-12);
            let mut xs: Vec<Array1<f64>> = inits.iter().map(vec_scores).collect();
            for _ in 0..40_000 {
                let mut vs: Vec<Array1<f64>> = quads
                    .iter()
                    .zip(&xs)
                    .map(|(q, x)| x - &(q.gradient(x) / lip))
                    .collect();
                let mut group = Array1::<f64>::zeros(s_count);
                for k in 0..(f * p) {
                    for (s, v) in vs.iter().enumerate() {
                        group[s] = v[k];
                    }
                    let shrunk = nonneg_group_prox(group.view(), lambda / lip).unwrap();
                    for (s, v) in vs.iter_mut().enumerate() {
                        v[k] = shrunk[s];
                    }
                }
                xs = vs;
            }
            let mats: Vec<Array2<f64>> = xs.iter().map(|x| unvec_scores(x, f, p)).collect();
            let oracle = quads
                .iter()
                .zip(&xs)
                .map(|(q, x)| q.objective(x))
                .sum::<f64>()
                + lambda * group_lasso_penalty(&mats).unwrap();
            assert!(
                (obj - oracle) / oracle.abs().max(1.0) < 1e-6,
                "solver {obj} vs oracle {oracle}"
            );
        }
    }

    /// The returned objective never exceeds the objective at the initializer.
    #[test]
    fn never_worse_than_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..6 {
            let (n, p, f) = (5, 4, 2);
            let (x, mask, m_w) = random_instance(&mut rng, n, p, f, true);
            let quad = assemble_score_quadratic(&x, mask.as_ref(), &m_w).unwrap();
            let init = vec![Array2::from_shape_fn((f, p), |_| rng.gen_range(0.0..2.0))];
            let start = quad.objective(&vec_scores(&init[0]))
                + 0.7 * group_lasso_penalty(&init).unwrap();
            let (_, obj) =
                estimate_scores(&[quad], &init, 0.7, Variant::Opfa, 1e-10, 40).unwrap();
            assert!(obj <= start + 1e-12 * start.abs(), "{obj} vs {start}");
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let x = Array2::<f64>::zeros((4, 3));
        let m_w = Array2::<f64>::zeros((5, 2));
        assert!(assemble_score_quadratic(&x, None, &m_w).is_err());

        let m_w = Array2::<f64>::from_elem((4, 2), 0.5);
        let quad = assemble_score_quadratic(&x, None, &m_w).unwrap();
        let init = vec![Array2::zeros((2, 3)); 2];
        assert!(matches!(
            estimate_scores(&[quad], &init, 0.1, Variant::Opfa, 1e-9, 10),
            Err(OpfaError::ShapeMismatch(_))
        ));
    }
}
