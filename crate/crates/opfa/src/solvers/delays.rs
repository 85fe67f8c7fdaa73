//! Exact delay search: for one subject, minimize the masked residual over the
//! set of order-respecting integer delay vectors by branch and bound on boxes
//! `[lo, hi] ⊆ {0, …, d_max}^f`, with separable lower bounds.
//!
//! Exactness does not depend on the bound quality: every candidate box keeps a
//! rigorous lower bound (with a small safety margin against rounding), boxes
//! are only discarded when that bound meets the incumbent, and each box's
//! cone witness is evaluated with the same arithmetic as the brute-force
//! reference. All global minimizers therefore survive pruning, and the
//! lexicographically smallest one is returned — identical to brute force.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;

use crate::error::{OpfaError, Result};
use crate::linalg::{pseudoinverse_gram, smallest_eigenvalue};
use crate::shift::{predict_subject, DelayVector, FactorMatrix, Window};
use crate::solvers::{masked_energy, masked_residual};

/// Hard cap on branch-and-bound nodes; beyond this the search space is
/// declared too large rather than returning an inexact answer.
const NODE_CAP: usize = 5_000_000;

/// Hard cap on brute-force enumeration size.
const BRUTE_CAP: u128 = 2_000_000;

/// Relative safety margin subtracted from every computed lower bound so that
/// floating-point rounding can never produce a bound above the true box
/// minimum.
fn safe_bound(raw: f64) -> f64 {
    raw - 1e-9 * (1.0 + raw.abs())
}

/// Masked residual `‖[X − window(M(F, d)) A]_Ω‖²` for one subject.
pub fn delay_objective(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    factors: &FactorMatrix,
    delays: &DelayVector,
    scores: &Array2<f64>,
    window: Window,
) -> Result<f64> {
    let pred = predict_subject(factors, delays, scores, window)?;
    if pred.dim() != x.dim() {
        return Err(OpfaError::ShapeMismatch(format!(
            "prediction {:?} vs data {:?}",
            pred.dim(),
            x.dim()
        )));
    }
    if let Some(m) = mask {
        if m.dim() != x.dim() {
            return Err(OpfaError::ShapeMismatch("mask shape".into()));
        }
    }
    Ok(masked_residual(x, &pred, mask))
}

/// One node of the branch-and-bound search, as recorded in the trace.
#[derive(Clone, Debug)]
pub struct BBNode {
    /// Coordinatewise lower corner of the box.
    pub lower: Vec<usize>,
    /// Coordinatewise upper corner of the box (inclusive).
    pub upper: Vec<usize>,
    /// Safety-margined lower bound on the objective over order-respecting
    /// delay vectors inside the box.
    pub bound: f64,
    /// Objective at the box's order-respecting witness point — a feasible
    /// point inside the box, hence an upper bound on the box minimum.
    pub upper_bound: f64,
    /// Number of splits from the root.
    pub depth: usize,
    /// Creation index (the root is 0).
    pub id: usize,
}

/// Smallest order-respecting vector dominating `lo`: the running maximum.
/// A box contains an order-respecting vector iff this witness fits under `hi`.
fn cone_witness(lo: &[usize]) -> Vec<usize> {
    let mut w = lo.to_vec();
    for i in 1..w.len() {
        if w[i] < w[i - 1] {
            w[i] = w[i - 1];
        }
    }
    w
}

/// Precomputed per-factor, per-delay bound contributions. The box bound is
/// `base + Σ_i min_{δ ∈ [lo_i, hi_i]} contrib[i, δ]`, a valid lower bound on
/// the objective at every delay vector in the box (order-respecting or not).
struct BoundTables {
    contrib: Array2<f64>, // f × (d_max + 1)
    base: f64,
}

impl BoundTables {
    /// Complete-data path: with `P = X A⁺` and `R = X − P A`, rows of the
    /// residual split orthogonally, giving
    /// `‖X − M_w A‖² = ‖(P − M_w) A‖² + ‖R‖² ≥ λ_min(AAᵀ) ‖P − M_w‖² + ‖R‖²`,
    /// and `‖P − M_w‖²` separates over factor columns, each depending only on
    /// its own delay.
    fn complete(
        x: &Array2<f64>,
        factors: &FactorMatrix,
        scores: &Array2<f64>,
        window: Window,
        d_max: usize,
    ) -> Result<Self> {
        let (n, _p) = x.dim();
        let f = factors.n_factors();
        let n_f = factors.n_rows();
        let fv = factors.values();
        let (pinv, lambda_min) = pseudoinverse_gram(scores)?;
        let profiles = x.dot(&pinv); // n × f
        let recon = profiles.dot(scores);
        let mut resid_const = 0.0;
        for (a, b) in x.iter().zip(recon.iter()) {
            let d = a - b;
            resid_const += d * d;
        }
        let mut contrib = Array2::zeros((f, d_max + 1));
        for i in 0..f {
            for delta in 0..=d_max {
                let mut cost = 0.0;
                for t in 0..n {
                    let r = (window.start + t + n_f - delta) % n_f;
                    let d = profiles[(t, i)] - fv[(r, i)];
                    cost += d * d;
                }
                contrib[(i, delta)] = lambda_min * cost;
            }
        }
        let base = resid_const;
        if !base.is_finite() || contrib.iter().any(|v| !v.is_finite()) {
            return Err(OpfaError::NonFinite("delay bound tables".into()));
        }
        Ok(Self { contrib, base })
    }

    /// Missing-data path: viewing the residual as a quadratic in the full
    /// shifted factor matrix `Y` (whose norm equals `‖F‖` for every delay),
    /// `‖[X − M_w A]_Ω‖² ≥ λ_K ‖F‖² + ‖X‖²_Ω − 2 Σ_i ⟨B_i, shifted F_i⟩`,
    /// where `B = (mask ⊙ X) Aᵀ` and `λ_K` is the smallest eigenvalue of the
    /// block-diagonal Gram over observed entries — zero whenever the factor
    /// matrix has rows outside the window.
    fn missing(
        x: &Array2<f64>,
        mask: &Array2<f64>,
        factors: &FactorMatrix,
        scores: &Array2<f64>,
        window: Window,
        d_max: usize,
    ) -> Result<Self> {
        let (n, p) = x.dim();
        let f = factors.n_factors();
        let n_f = factors.n_rows();
        let fv = factors.values();

        // B[t, i] = Σ_j mask[t,j]·X[t,j]·A[i,j]
        let mut b = Array2::<f64>::zeros((n, f));
        for t in 0..n {
            for j in 0..p {
                let w = mask[(t, j)];
                if w == 0.0 {
                    continue;
                }
                let xv = w * x[(t, j)];
                for i in 0..f {
                    b[(t, i)] += xv * scores[(i, j)];
                }
            }
        }

        let lambda_k = if n_f == n {
            let mut min_eig = f64::INFINITY;
            for t in 0..n {
                let mut g = Array2::<f64>::zeros((f, f));
                for j in 0..p {
                    let w = mask[(t, j)];
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..f {
                        let ai = w * scores[(i, j)];
                        for i2 in 0..f {
                            g[(i, i2)] += ai * scores[(i2, j)];
                        }
                    }
                }
                min_eig = min_eig.min(smallest_eigenvalue(&g)?);
            }
            min_eig.max(0.0)
        } else {
            0.0
        };

        let frob_sq = fv.iter().map(|v| v * v).sum::<f64>();
        let base = masked_energy(x, Some(mask)) + lambda_k * frob_sq;

        let mut contrib = Array2::zeros((f, d_max + 1));
        for i in 0..f {
            for delta in 0..=d_max {
                let mut corr = 0.0;
                for t in 0..n {
                    let r = (window.start + t + n_f - delta) % n_f;
                    corr += b[(t, i)] * fv[(r, i)];
                }
                contrib[(i, delta)] = -2.0 * corr;
            }
        }
        if !base.is_finite() || contrib.iter().any(|v| !v.is_finite()) {
            return Err(OpfaError::NonFinite("delay bound tables".into()));
        }
        Ok(Self { contrib, base })
    }

    fn build(
        x: &Array2<f64>,
        mask: Option<&Array2<f64>>,
        factors: &FactorMatrix,
        scores: &Array2<f64>,
        window: Window,
        d_max: usize,
    ) -> Result<Self> {
        match mask {
            None => Self::complete(x, factors, scores, window, d_max),
            Some(m) => Self::missing(x, m, factors, scores, window, d_max),
        }
    }

    fn bound(&self, lo: &[usize], hi: &[usize]) -> f64 {
        let mut total = self.base;
        for (i, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            let mut best = f64::INFINITY;
            for delta in l..=h {
                best = best.min(self.contrib[(i, delta)]);
            }
            total += best;
        }
        safe_bound(total)
    }
}

fn validate_inputs(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    factors: &FactorMatrix,
    scores: &Array2<f64>,
    window: Window,
    d_max: usize,
) -> Result<()> {
    let (n, p) = x.dim();
    let f = factors.n_factors();
    let n_f = factors.n_rows();
    if f == 0 {
        return Err(OpfaError::InvalidInput("no factors".into()));
    }
    if scores.dim() != (f, p) {
        return Err(OpfaError::ShapeMismatch(format!(
            "scores {:?} vs {f} factors × {p} variables",
            scores.dim()
        )));
    }
    if let Some(m) = mask {
        if m.dim() != (n, p) {
            return Err(OpfaError::ShapeMismatch("mask shape".into()));
        }
    }
    window.validate(n_f)?;
    if window.len != n {
        return Err(OpfaError::ShapeMismatch(format!(
            "window length {} vs {n} data rows",
            window.len
        )));
    }
    if d_max >= n_f {
        return Err(OpfaError::InvalidInput(format!(
            "maximum delay {d_max} must be below the {n_f} factor rows"
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(OpfaError::NonFinite("scores".into()));
    }
    Ok(())
}

/// Safety-margined lower bound on the delay objective over all
/// order-respecting delay vectors inside the box `[lower, upper]`.
pub fn delay_lower_bound(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    factors: &FactorMatrix,
    scores: &Array2<f64>,
    window: Window,
    lower: &[usize],
    upper: &[usize],
) -> Result<f64> {
    let f = factors.n_factors();
    if lower.len() != f || upper.len() != f {
        return Err(OpfaError::ShapeMismatch(format!(
            "box dimensions {}/{} vs {f} factors",
            lower.len(),
            upper.len()
        )));
    }
    if lower.iter().zip(upper).any(|(l, h)| l > h) {
        return Err(OpfaError::InvalidInput("empty box".into()));
    }
    let d_max = upper.iter().copied().max().unwrap_or(0);
    validate_inputs(x, mask, factors, scores, window, d_max)?;
    let tables = BoundTables::build(x, mask, factors, scores, window, d_max)?;
    Ok(tables.bound(lower, upper))
}

struct HeapEntry {
    bound: f64,
    depth: usize,
    id: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    /// `BinaryHeap` pops the maximum, so "greater" means "explore first":
    /// smaller bound, then greater depth, then smaller id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(self.depth.cmp(&other.depth))
            .then(other.id.cmp(&self.id))
    }
}

struct Search<'a> {
    x: &'a Array2<f64>,
    mask: Option<&'a Array2<f64>>,
    factors: &'a FactorMatrix,
    scores: &'a Array2<f64>,
    window: Window,
    d_max: usize,
    tables: BoundTables,
    heap: BinaryHeap<HeapEntry>,
    trace: Vec<BBNode>,
    best_d: Vec<usize>,
    best_obj: f64,
}

impl<'a> Search<'a> {
    /// Registers a box: records its bound in the trace, evaluates its cone
    /// witness against the incumbent, and queues it for splitting. Boxes with
    /// no order-respecting point are dropped silently.
    fn add_box(&mut self, lo: Vec<usize>, hi: Vec<usize>, depth: usize) -> Result<()> {
        let witness = cone_witness(&lo);
        if witness.iter().zip(&hi).any(|(w, h)| w > h) {
            return Ok(());
        }
        if self.trace.len() >= NODE_CAP {
            return Err(OpfaError::SearchSpaceTooLarge(format!(
                "delay search exceeded {NODE_CAP} nodes"
            )));
        }
        let bound = self.tables.bound(&lo, &hi);
        let dvec = DelayVector::new(witness.clone(), self.d_max)?;
        let obj = delay_objective(self.x, self.mask, self.factors, &dvec, self.scores, self.window)?;
        let id = self.trace.len();
        self.trace.push(BBNode {
            lower: lo.clone(),
            upper: hi.clone(),
            bound,
            upper_bound: obj,
            depth,
            id,
        });
        if obj < self.best_obj || (obj == self.best_obj && witness < self.best_d) {
            self.best_obj = obj;
            self.best_d = witness;
        }
        self.heap.push(HeapEntry {
            bound,
            depth,
            id,
            lo,
            hi,
        });
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        while let Some(entry) = self.heap.pop() {
            if entry.bound >= self.best_obj {
                continue; // no strictly better point can live here
            }
            if entry.lo == entry.hi {
                continue; // singleton: its only point was the witness
            }
            // split the widest coordinate at its midpoint
            let (mut k, mut span) = (0, 0);
            for (i, (&l, &h)) in entry.lo.iter().zip(&entry.hi).enumerate() {
                if h - l > span {
                    span = h - l;
                    k = i;
                }
            }
            let mid = entry.lo[k] + span / 2;
            let mut hi_left = entry.hi.clone();
            hi_left[k] = mid;
            let mut lo_right = entry.lo.clone();
            lo_right[k] = mid + 1;
            self.add_box(entry.lo.clone(), hi_left, entry.depth + 1)?;
            self.add_box(lo_right, entry.hi.clone(), entry.depth + 1)?;
        }
        Ok(())
    }
}

fn bb_search(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    factors: &FactorMatrix,
    scores: &Array2<f64>,
    window: Window,
    d_max: usize,
) -> Result<(DelayVector, f64, Vec<BBNode>)> {
    validate_inputs(x, mask, factors, scores, window, d_max)?;
    let f = factors.n_factors();
    let tables = BoundTables::build(x, mask, factors, scores, window, d_max)?;
    let mut search = Search {
        x,
        mask,
        factors,
        scores,
        window,
        d_max,
        tables,
        heap: BinaryHeap::new(),
        trace: Vec::new(),
        best_d: vec![0; f],
        best_obj: f64::INFINITY,
    };
    search.add_box(vec![0; f], vec![d_max; f], 0)?;
    search.run()?;
    let delays = DelayVector::new(search.best_d.clone(), d_max)?;
    Ok((delays, search.best_obj, std::mem::take(&mut search.trace)))
}

/// Exact delay estimate for one subject by branch and bound. Returns the
/// lexicographically smallest minimizer and its objective — identical to
/// [`estimate_delays_bruteforce`] on the same inputs.
pub fn estimate_delays_bb(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    factors: &FactorMatrix,
    scores: &Array2<f64>,
    window: Window,
    d_max: usize,
) -> Result<(DelayVector, f64)> {
    let (delays, obj, _) = bb_search(x, mask, factors, scores, window, d_max)?;
    Ok((delays, obj))
}

/// Branch and bound with the full node trace (every box ever created, with
/// its safety-margined lower bound), for auditing bound validity.
pub fn estimate_delays_bb_traced(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    factors: &FactorMatrix,
    scores: &Array2<f64>,
    window: Window,
    d_max: usize,
) -> Result<(DelayVector, f64, Vec<BBNode>)> {
    bb_search(x, mask, factors, scores, window, d_max)
}

fn count_cone_points(f: usize, d_max: usize) -> u128 {
    // nondecreasing f-tuples over {0..d_max}: C(d_max + f, f)
    let mut c: u128 = 1;
    for i in 0..f {
        c = c.saturating_mul((d_max + f - i) as u128) / (i as u128 + 1);
        if c > BRUTE_CAP {
            return c;
        }
    }
    c
}

/// Reference delay estimate by exhaustive enumeration of all order-respecting
/// vectors in lexicographic order, keeping the first minimizer.
pub fn estimate_delays_bruteforce(
    x: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    factors: &FactorMatrix,
    scores: &Array2<f64>,
    window: Window,
    d_max: usize,
) -> Result<(DelayVector, f64)> {
    validate_inputs(x, mask, factors, scores, window, d_max)?;
    let f = factors.n_factors();
    if count_cone_points(f, d_max) > BRUTE_CAP {
        return Err(OpfaError::SearchSpaceTooLarge(format!(
            "exhaustive search over {f} factors with delays up to {d_max} is too large"
        )));
    }
    let mut current = vec![0usize; f];
    let mut best_d: Option<Vec<usize>> = None;
    let mut best_obj = f64::INFINITY;
    loop {
        let dvec = DelayVector::new(current.clone(), d_max)?;
        let obj = delay_objective(x, mask, factors, &dvec, scores, window)?;
        if obj < best_obj {
            best_obj = obj;
            best_d = Some(current.clone());
        }
        // next order-respecting vector in lexicographic order
        let mut k = f;
        for i in (0..f).rev() {
            if current[i] < d_max {
                k = i;
                break;
            }
        }
        if k == f {
            break;
        }
        current[k] += 1;
        let v = current[k];
        for item in current.iter_mut().skip(k + 1) {
            *item = v;
        }
    }
    let d = best_d.expect("cone is never empty");
    Ok((DelayVector::new(d, d_max)?, best_obj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::{build_shifted_factors, window_restrict};
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_factors(rng: &mut ChaCha8Rng, n_f: usize, f: usize) -> FactorMatrix {
        let raw = Array2::from_shape_fn((n_f, f), |_| rng.gen_range(0.0..1.0));
        FactorMatrix::new(raw, 1e3).unwrap()
    }

    fn random_case(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
        f: usize,
        d_max: usize,
        with_mask: bool,
    ) -> (
        Array2<f64>,
        Option<Array2<f64>>,
        FactorMatrix,
        Array2<f64>,
        Window,
    ) {
        let n_f = n + d_max;
        let factors = random_factors(rng, n_f, f);
        let scores = Array2::from_shape_fn((f, p), |_| rng.gen_range(0.0..1.0));
        let x = Array2::from_shape_fn((n, p), |_| rng.gen_range(-1.0..1.0));
        let mask = if with_mask {
            Some(Array2::from_shape_fn((n, p), |_| {
                if rng.gen_bool(0.25) {
                    0.0
                } else {
                    1.0
                }
            }))
        } else {
            None
        };
        let start = rng.gen_range(0..=(n_f - n));
        (x, mask, factors, scores, Window::new(start, n))
    }

    #[test]
    fn objective_matches_manual_computation() {
        let factors =
            FactorMatrix::new(array![[1.0, 0.0], [0.0, 2.0], [0.5, 0.5]], 10.0).unwrap();
        let delays = DelayVector::new(vec![0, 1], 1).unwrap();
        let scores = array![[1.0, 0.0], [0.0, 1.0]];
        let x = array![[0.9, 0.6], [0.1, 0.1]];
        // shifted factor columns: col0 unshifted, col1 delayed by 1:
        // col1 = [0.5, 0.0, 2.0]; window rows 1..3 → M_w = [[0,0],[0.5,2]]
        let window = Window::new(1, 2);
        let obj = delay_objective(&x, None, &factors, &delays, &scores, window).unwrap();
        let want = (0.9 - 0.0f64).powi(2)
            + (0.6 - 0.0f64).powi(2)
            + (0.1 - 0.5f64).powi(2)
            + (0.1 - 2.0f64).powi(2);
        assert!((obj - want).abs() < 1e-12, "{obj} vs {want}");
    }

    /// Values stored in masked-out entries must not change the objective at
    /// all.
    #[test]
    fn masked_entries_cannot_influence_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut x, mask, factors, scores, window) = random_case(&mut rng, 6, 4, 2, 2, true);
        let mask = mask.unwrap();
        let delays = DelayVector::new(vec![1, 2], 2).unwrap();
        let before =
            delay_objective(&x, Some(&mask), &factors, &delays, &scores, window).unwrap();
        for t in 0..6 {
            for j in 0..4 {
                if mask[(t, j)] == 0.0 {
                    x[(t, j)] = 1e9;
                }
            }
        }
        let after =
            delay_objective(&x, Some(&mask), &factors, &delays, &scores, window).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    /// Branch and bound must agree with exhaustive search bit for bit, on the
    /// objective and on the minimizer, masked or not.
    #[test]
    fn agrees_with_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..40 {
            let f = 1 + trial % 3;
            let d_max = 1 + trial % 4;
            let with_mask = trial % 2 == 0;
            let (x, mask, factors, scores, window) =
                random_case(&mut rng, 7, 4, f, d_max, with_mask);
            let (d_bb, o_bb) =
                estimate_delays_bb(&x, mask.as_ref(), &factors, &scores, window, d_max).unwrap();
            let (d_bf, o_bf) =
                estimate_delays_bruteforce(&x, mask.as_ref(), &factors, &scores, window, d_max)
                    .unwrap();
            assert_eq!(o_bb.to_bits(), o_bf.to_bits(), "trial {trial}");
            assert_eq!(d_bb.delays(), d_bf.delays(), "trial {trial}");
        }
    }

    /// Every traced node's bound must hold: no order-respecting vector inside
    /// the node's box may score below the recorded bound.
    #[test]
    fn traced_bounds_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for trial in 0..10 {
            let f = 1 + trial % 3;
            let d_max = 2 + trial % 3;
            let with_mask = trial % 2 == 1;
            let (x, mask, factors, scores, window) =
                random_case(&mut rng, 6, 3, f, d_max, with_mask);
            let (_, _, trace) =
                estimate_delays_bb_traced(&x, mask.as_ref(), &factors, &scores, window, d_max)
                    .unwrap();
            assert!(!trace.is_empty());
            assert_eq!(trace[0].lower, vec![0; f]);
            assert_eq!(trace[0].upper, vec![d_max; f]);
            for node in &trace {
                // enumerate the box, keep order-respecting points
                let mut box_min = f64::INFINITY;
                let mut stack = vec![Vec::new()];
                while let Some(prefix) = stack.pop() {
                    let i = prefix.len();
                    if i == f {
                        let dvec = DelayVector::new(prefix.clone(), d_max).unwrap();
                        let obj = delay_objective(
                            &x,
                            mask.as_ref(),
                            &factors,
                            &dvec,
                            &scores,
                            window,
                        )
                        .unwrap();
                        assert!(
                            node.bound <= obj,
                            "node {} bound {} exceeds objective {obj} at {prefix:?}",
                            node.id,
                            node.bound
                        );
                        box_min = box_min.min(obj);
                        continue;
                    }
                    let floor = prefix.last().copied().unwrap_or(0);
                    for v in node.lower[i].max(floor)..=node.upper[i] {
                        let mut next = prefix.clone();
                        next.push(v);
                        stack.push(next);
                    }
                }
                assert!(
                    box_min <= node.upper_bound,
                    "node {} witness objective {} is below the box minimum {box_min}",
                    node.id,
                    node.upper_bound
                );
            }
        }
    }

    /// The standalone box bound must match the behavior of the traced search
    /// bound: never above the best objective in the box.
    #[test]
    fn standalone_bound_is_valid_on_sub_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (x, mask, factors, scores, window) = random_case(&mut rng, 6, 4, 2, 3, true);
        for (lo, hi) in [
            (vec![0, 0], vec![3, 3]),
            (vec![1, 2], vec![2, 3]),
            (vec![0, 2], vec![0, 2]),
        ] {
            let lb = delay_lower_bound(&x, mask.as_ref(), &factors, &scores, window, &lo, &hi)
                .unwrap();
            for a in lo[0]..=hi[0] {
                for b in lo[1]..=hi[1].min(3) {
                    if b < a || b < lo[1] {
                        continue;
                    }
                    let dvec = DelayVector::new(vec![a, b], 3).unwrap();
                    let obj =
                        delay_objective(&x, mask.as_ref(), &factors, &dvec, &scores, window)
                            .unwrap();
                    assert!(lb <= obj, "bound {lb} vs objective {obj} at [{a},{b}]");
                }
            }
        }
    }

    /// Zero maximum delay returns the all-zeros vector with the plain
    /// residual.
    #[test]
    fn zero_max_delay_short_circuits() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let (x, mask, factors, scores, window) = random_case(&mut rng, 5, 3, 2, 0, false);
        let (d, obj) =
            estimate_delays_bb(&x, mask.as_ref(), &factors, &scores, window, 0).unwrap();
        assert_eq!(d.delays(), &[0, 0]);
        let direct = delay_objective(&x, None, &factors, &d, &scores, window).unwrap();
        assert_eq!(obj.to_bits(), direct.to_bits());
    }

    /// Noiseless data generated at known delays must be recovered exactly.
    #[test]
    fn recovers_planted_delays() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (n, p, f, d_max) = (10, 5, 2, 3);
        let n_f = n + d_max;
        let factors = random_factors(&mut rng, n_f, f);
        let scores = Array2::from_shape_fn((f, p), |_| rng.gen_range(0.2..1.0));
        let truth = DelayVector::new(vec![1, 3], d_max).unwrap();
        let window = Window::new(2, n);
        let shifted = build_shifted_factors(&factors, &truth).unwrap();
        let x = window_restrict(shifted.view(), window).unwrap().dot(&scores);
        let (d, obj) = estimate_delays_bb(&x, None, &factors, &scores, window, d_max).unwrap();
        assert_eq!(d.delays(), truth.delays());
        assert!(obj < 1e-18, "objective {obj}");
    }

    #[test]
    fn bruteforce_rejects_huge_search_spaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let n = 4;
        let d_max = 60;
        let f = 12;
        let n_f = n + d_max;
        let factors = random_factors(&mut rng, n_f, f);
        let scores = Array2::from_shape_fn((f, 3), |_| rng.gen_range(0.0..1.0));
        let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let window = Window::new(0, n);
        assert!(matches!(
            estimate_delays_bruteforce(&x, None, &factors, &scores, window, d_max),
            Err(OpfaError::SearchSpaceTooLarge(_))
        ));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let (x, _, factors, scores, window) = random_case(&mut rng, 5, 3, 2, 2, false);
        let bad_scores = Array2::<f64>::zeros((3, 3));
        assert!(estimate_delays_bb(&x, None, &factors, &bad_scores, window, 2).is_err());
        let bad_mask = Array2::<f64>::zeros((4, 3));
        assert!(
            estimate_delays_bb(&x, Some(&bad_mask), &factors, &scores, window, 2).is_err()
        );
        // delay cap must stay below the factor row count
        assert!(estimate_delays_bb(&x, None, &factors, &scores, window, 7).is_err());
    }
}
