//! Penalty terms and the proximal/projection operators the solvers rely on.
//!
//! * group lasso over scores: one group per (factor, variable) pair collects
//!   that coefficient across all subjects, so a group that dies is zero for
//!   every subject at once;
//! * squared smoothness penalty on factors through an injectable difference
//!   operator `W` (first differences by default);
//! * the prox of the nonnegativity-constrained group norm (clip, then shrink
//!   the surviving norm);
//! * Euclidean projection onto the feasible factor set
//!   `{F : F ≥ 0, ‖F‖_F ≤ bound}` (clip, then radial scaling).

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{OpfaError, Result};
use crate::shift::FactorMatrix;

/// Linear operator applied to each factor column inside the smoothness
/// penalty `Σ_i ‖W F_i‖²`.
#[derive(Debug, Clone)]
pub struct DifferenceOperator {
    w: Array2<f64>,
    gram: Array2<f64>,
}

impl DifferenceOperator {
    /// First-difference matrix: row t maps a column x to x[t+1] - x[t].
    pub fn first_difference(n_rows: usize) -> Self {
        assert!(n_rows >= 2, "difference operator needs at least two rows");
        let mut w = Array2::zeros((n_rows - 1, n_rows));
        for t in 0..n_rows - 1 {
            w[(t, t)] = -1.0;
            w[(t, t + 1)] = 1.0;
        }
        Self::from_matrix(w)
    }

    /// Wraps an arbitrary operator; the Gram matrix `WᵀW` is precomputed.
    pub fn from_matrix(w: Array2<f64>) -> Self {
        let gram = w.t().dot(&w);
        DifferenceOperator { w, gram }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    /// `WᵀW`, the block added once per factor to the factor-step quadratic.
    pub fn gram(&self) -> &Array2<f64> {
        &self.gram
    }

    pub fn n_cols(&self) -> usize {
        self.w.ncols()
    }
}

/// Group-lasso penalty on scores: `Σ_{i,j} ‖([A_1]_{i,j}, …, [A_S]_{i,j})‖₂`.
pub fn group_lasso_penalty(scores: &[Array2<f64>]) -> Result<f64> {
    let first = scores
        .first()
        .ok_or_else(|| OpfaError::InvalidInput("no score matrices".into()))?;
    let dim = first.dim();
    if scores.iter().any(|a| a.dim() != dim) {
        return Err(OpfaError::ShapeMismatch(
            "score matrices differ in shape across subjects".into(),
        ));
    }
    let (f, p) = dim;
    let mut total = 0.0;
    for i in 0..f {
        for j in 0..p {
            let sq: f64 = scores.iter().map(|a| a[(i, j)] * a[(i, j)]).sum();
            total += sq.sqrt();
        }
    }
    Ok(total)
}

/// Smoothness penalty `Σ_i ‖W F_i‖²`.
pub fn tv_penalty(factors: &FactorMatrix, op: &DifferenceOperator) -> Result<f64> {
    if op.n_cols() != factors.n_rows() {
        return Err(OpfaError::ShapeMismatch(format!(
            "difference operator acts on {} rows but factors have {}",
            op.n_cols(),
            factors.n_rows()
        )));
    }
    let wf = op.matrix().dot(factors.values());
    Ok(wf.iter().map(|v| v * v).sum())
}

/// Prox of `threshold · ‖·‖₂` restricted to the nonnegative orthant:
/// clip to `≥ 0`, then scale the clipped vector by `max(0, 1 - threshold / ‖v₊‖)`.
pub fn nonneg_group_prox(v: ArrayView1<'_, f64>, threshold: f64) -> Result<Array1<f64>> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(OpfaError::InvalidInput(format!(
            "prox threshold must be a nonnegative real, got {threshold}"
        )));
    }
    let clipped = v.mapv(|x| x.max(0.0));
    let norm = clipped.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= threshold || norm == 0.0 {
        return Ok(Array1::zeros(v.len()));
    }
    let scale = 1.0 - threshold / norm;
    Ok(clipped * scale)
}

/// Euclidean projection onto `{F : F ≥ 0, ‖F‖_F ≤ bound}`:
/// clip negatives, then radially scale by `min(1, bound / ‖F₊‖_F)`.
pub fn project_factor_set(values: &Array2<f64>, frobenius_bound: f64) -> Result<FactorMatrix> {
    if !frobenius_bound.is_finite() || frobenius_bound <= 0.0 {
        return Err(OpfaError::InvalidInput(format!(
            "Frobenius bound must be positive, got {frobenius_bound}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(OpfaError::NonFinite("projection input".into()));
    }
    let mut clipped = values.mapv(|x| x.max(0.0));
    let norm = clipped.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > frobenius_bound {
        clipped *= frobenius_bound / norm;
    }
    Ok(FactorMatrix::from_feasible(clipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_penalty_is_sum_of_cross_subject_norms() {
        let a1 = array![[3.0]];
        let a2 = array![[4.0]];
        let p = group_lasso_penalty(&[a1, a2]).unwrap();
        assert!((p - 5.0).abs() < 1e-15);
    }

    #[test]
    fn group_penalty_single_subject_is_entrywise_l1_of_magnitudes() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let p = group_lasso_penalty(&[a]).unwrap();
        assert!((p - 10.0).abs() < 1e-15);
    }

    #[test]
    fn group_penalty_rejects_mismatched_subjects() {
        let a1 = Array2::<f64>::zeros((2, 3));
        let a2 = Array2::<f64>::zeros((2, 4));
        assert!(group_lasso_penalty(&[a1, a2]).is_err());
    }

    #[test]
    fn tv_penalty_counts_squared_increments() {
        let f = FactorMatrix::new(array![[0.0], [1.0], [0.0]], 10.0).unwrap();
        let op = DifferenceOperator::first_difference(3);
        let p = tv_penalty(&f, &op).unwrap();
        assert!((p - 2.0).abs() < 1e-15);
    }

    #[test]
    fn tv_penalty_zero_for_constant_column() {
        let f = FactorMatrix::new(array![[2.0], [2.0], [2.0], [2.0]], 10.0).unwrap();
        let op = DifferenceOperator::first_difference(4);
        assert_eq!(tv_penalty(&f, &op).unwrap(), 0.0);
    }

    #[test]
    fn tv_penalty_rejects_wrong_operator_width() {
        let f = FactorMatrix::new(array![[0.0], [1.0]], 10.0).unwrap();
        let op = DifferenceOperator::first_difference(3);
        assert!(tv_penalty(&f, &op).is_err());
    }

    #[test]
    fn prox_kills_group_at_critical_threshold() {
        let out = nonneg_group_prox(array![3.0, 4.0].view(), 5.0).unwrap();
        assert_eq!(out, array![0.0, 0.0]);
    }

    #[test]
    fn prox_shrinks_surviving_group() {
        let out = nonneg_group_prox(array![3.0, 4.0].view(), 2.5).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert!((out[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn prox_clips_negative_coordinates_first() {
        let out = nonneg_group_prox(array![-3.0, 4.0].view(), 2.0).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn prox_with_zero_threshold_is_clipping() {
        let v = array![-1.0, 0.5, 2.0];
        let out = nonneg_group_prox(v.view(), 0.0).unwrap();
        assert_eq!(out, array![0.0, 0.5, 2.0]);
    }

    #[test]
    fn prox_rejects_negative_threshold() {
        assert!(nonneg_group_prox(array![1.0].view(), -0.5).is_err());
    }

    /// The prox output must beat every feasible candidate on the prox
    /// objective ½‖x − v‖² + t‖x‖.
    #[test]
    fn prox_beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let objective = |x: &Array1<f64>, v: &Array1<f64>, t: f64| {
            let diff: f64 = x
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            0.5 * diff + t * x.iter().map(|a| a * a).sum::<f64>().sqrt()
        };
        for _ in 0..25 {
            let k = rng.gen_range(1..6);
            let v = Array1::from_iter((0..k).map(|_| rng.gen_range(-2.0..2.0)));
            let t = rng.gen_range(0.0..2.0);
            let out = nonneg_group_prox(v.view(), t).unwrap();
            let best = objective(&out, &v, t);
            for _ in 0..400 {
                let cand = Array1::from_iter((0..k).map(|_| rng.gen_range(0.0..3.0)));
                assert!(best <= objective(&cand, &v, t) + 1e-12);
            }
        }
    }

    #[test]
    fn projection_keeps_feasible_points() {
        let vals = array![[0.5, 0.0], [0.25, 0.1]];
        let out = project_factor_set(&vals, 10.0).unwrap();
        assert_eq!(out.values(), &vals);
    }

    #[test]
    fn projection_scales_onto_sphere() {
        let vals = Array2::from_elem((4, 1), 1.0);
        let out = project_factor_set(&vals, 1.0).unwrap();
        for v in out.values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    /// Idempotent up to roundoff: re-projecting a boundary point may rescale
    /// it by a factor within one ulp of 1.
    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let vals = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-2.0..2.0));
            let once = project_factor_set(&vals, 1.5).unwrap();
            let twice = project_factor_set(once.values(), 1.5).unwrap();
            for (a, b) in once.values().iter().zip(twice.values().iter()) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }

    /// Euclidean projections are nonexpansive: ‖P(x) − P(y)‖ ≤ ‖x − y‖.
    #[test]
    fn projection_is_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-3.0..3.0));
            let y = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-3.0..3.0));
            let px = project_factor_set(&x, 2.0).unwrap();
            let py = project_factor_set(&y, 2.0).unwrap();
            let d_in: f64 = (&x - &y).iter().map(|v| v * v).sum::<f64>().sqrt();
            let d_out: f64 = (px.values() - py.values())
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!(d_out <= d_in + 1e-12);
        }
    }

    #[test]
    fn projection_rejects_bad_bound() {
        let vals = Array2::<f64>::zeros((2, 2));
        assert!(project_factor_set(&vals, 0.0).is_err());
        assert!(project_factor_set(&vals, f64::NAN).is_err());
    }
}
