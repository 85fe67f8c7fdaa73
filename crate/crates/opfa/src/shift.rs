//! Circularly shifted factor matrices, observation windows and the
//! order-preserving delay cone.
//!
//! Delay convention: a positive delay moves a waveform later in time, i.e.
//! `circular_shift(x, d)[t] = x[(t - d) mod n]`. Delays act circularly on the
//! full factor length `n_F`; the observed rows are the `n` consecutive rows
//! selected by a [`Window`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{OpfaError, Result};

/// Contiguous block of factor rows that the data actually observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Window {
    /// First observed factor row.
    pub start: usize,
    /// Number of observed rows (`n`).
    pub len: usize,
}

impl Window {
    pub fn new(start: usize, len: usize) -> Self {
        Window { start, len }
    }

    /// Window covering all `n` factor rows.
    pub fn full(n: usize) -> Self {
        Window { start: 0, len: n }
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.len == 0 {
            return Err(OpfaError::InvalidInput("window length is zero".into()));
        }
        if self.start + self.len > n_rows {
            return Err(OpfaError::InvalidInput(format!(
                "window [{}, {}) exceeds factor length {}",
                self.start,
                self.start + self.len,
                n_rows
            )));
        }
        Ok(())
    }
}

/// Nonnegative factor matrix (`n_F × f`), columns are temporal motifs.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    pub(crate) values: Array2<f64>,
}

impl FactorMatrix {
    /// Validates entrywise nonnegativity and the Frobenius-norm budget.
    pub fn new(values: Array2<f64>, frobenius_bound: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OpfaError::NonFinite("factor matrix".into()));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(OpfaError::Infeasible(
                "factor matrix has negative entries".into(),
            ));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Tiny slack: radial projection can land a hair outside the ball.
        if norm > frobenius_bound * (1.0 + 1e-9) {
            return Err(OpfaError::Infeasible(format!(
                "factor Frobenius norm {norm:.6e} exceeds bound {frobenius_bound:.6e}"
            )));
        }
        Ok(FactorMatrix { values })
    }

    /// Wraps values already known to satisfy the constraints.
    pub(crate) fn from_feasible(values: Array2<f64>) -> Self {
        FactorMatrix { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Factor length `n_F`.
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    /// Number of factors `f`.
    pub fn n_factors(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-subject integer delays, one per factor, sorted nondecreasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DelayVector {
    pub(crate) delays: Vec<usize>,
}

impl DelayVector {
    /// Validates membership in the order-preserving cone for the given budget.
    pub fn new(delays: Vec<usize>, d_max: usize) -> Result<Self> {
        if !in_order_cone(&delays, d_max) {
            return Err(OpfaError::Infeasible(format!(
                "delays {delays:?} are not nondecreasing within [0, {d_max}]"
            )));
        }
        Ok(DelayVector { delays })
    }

    pub fn zeros(f: usize) -> Self {
        DelayVector {
            delays: vec![0; f],
        }
    }

    pub fn delays(&self) -> &[usize] {
        &self.delays
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }
}

/// `true` when `d` is nondecreasing with every entry at most `d_max`.
pub fn in_order_cone(delays: &[usize], d_max: usize) -> bool {
    delays.windows(2).all(|w| w[0] <= w[1]) && delays.iter().all(|&d| d <= d_max)
}

/// Circularly shifts `x` so that `out[t] = x[(t - delay) mod n]`.
///
/// A positive delay moves the waveform later; the delay is reduced modulo the
/// signal length, so negative and out-of-range delays are accepted.
pub fn circular_shift(x: ArrayView1<'_, f64>, delay: i64) -> Array1<f64> {
    let n = x.len();
    assert!(n > 0, "cannot shift an empty signal");
    let d = delay.rem_euclid(n as i64) as usize;
    let mut out = Array1::zeros(n);
    for t in 0..n {
        out[t] = x[(t + n - d) % n];
    }
    out
}

/// Stacks circularly shifted factor columns: `M[:, i] = circular_shift(F[:, i], d_i)`.
pub fn build_shifted_factors(factors: &FactorMatrix, delays: &DelayVector) -> Result<Array2<f64>> {
    if delays.len() != factors.n_factors() {
        return Err(OpfaError::ShapeMismatch(format!(
            "{} delays for {} factors",
            delays.len(),
            factors.n_factors()
        )));
    }
    Ok(shift_columns(factors.values(), delays.delays()))
}

/// Shifts each column of a raw matrix by its own delay (no feasibility checks).
pub(crate) fn shift_columns(values: &Array2<f64>, delays: &[usize]) -> Array2<f64> {
    let (n_rows, f) = values.dim();
    let mut out = Array2::zeros((n_rows, f));
    for (i, &d) in delays.iter().enumerate() {
        let d = d % n_rows.max(1);
        for t in 0..n_rows {
            out[(t, i)] = values[((t + n_rows - d) % n_rows, i)];
        }
    }
    out
}

/// Selects the observed rows `[start, start + len)` of a stacked factor matrix.
pub fn window_restrict(shifted: ArrayView2<'_, f64>, window: Window) -> Result<Array2<f64>> {
    window.validate(shifted.nrows())?;
    Ok(shifted
        .slice_axis(
            Axis(0),
            ndarray::Slice::from(window.start..window.start + window.len),
        )
        .to_owned())
}

/// Model prediction for one subject: `window(M(F, d)) · A` with shape `n × p`.
pub fn predict_subject(
    factors: &FactorMatrix,
    delays: &DelayVector,
    scores: &Array2<f64>,
    window: Window,
) -> Result<Array2<f64>> {
    if scores.nrows() != factors.n_factors() {
        return Err(OpfaError::ShapeMismatch(format!(
            "scores have {} rows but there are {} factors",
            scores.nrows(),
            factors.n_factors()
        )));
    }
    let shifted = build_shifted_factors(factors, delays)?;
    let observed = window_restrict(shifted.view(), window)?;
    Ok(observed.dot(scores))
}
