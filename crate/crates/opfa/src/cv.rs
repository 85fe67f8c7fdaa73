//! Model selection by entrywise-holdout cross-validation: hide a random
//! subset of entries, fit on the rest, and score each configuration by its
//! squared error on the hidden entries.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ModelConfig, ObservationSet};
use crate::error::{OpfaError, Result};
use crate::fit::{fit_opfa, fit_opfa_warm, OpfaFit};

const RESAMPLE_ATTEMPTS: usize = 100;

fn default_holdout_fraction() -> f64 {
    0.1
}

/// Grid search settings. The base model configuration supplies everything the
/// grid does not vary (delay budget, variant, window, tolerances, restarts,
/// fit seed); its factor count and penalty weights are replaced by the grid
/// values row by row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvConfig {
    pub f_values: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
    /// Seed for the holdout draw (independent of the fit seed).
    pub seed: u64,
}

/// One evaluated grid point. Errors are average-per-subject sums of squares:
/// `(1/S) Σ_s ‖X_s − X̂_s‖²` over training entries and held-out entries
/// respectively.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvRow {
    pub f: usize,
    pub lambda: f64,
    pub beta: f64,
    pub cv_error: f64,
    pub train_error: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    /// One row per grid point, factors outermost, then lambda, then beta.
    pub rows: Vec<CvRow>,
    /// Index into `rows` of the selected configuration.
    pub selected: usize,
    /// The training-split fit at the selected configuration.
    pub selected_fit: OpfaFit,
    /// Per-subject holdout indicators (0 = held out for validation).
    pub holdout: Vec<Array2<f64>>,
}

impl CvResult {
    pub fn selected_row(&self) -> &CvRow {
        &self.rows[self.selected]
    }
}

/// Draws per-subject holdout indicator matrices from shapes alone — the data
/// values are never consulted. Each subject gets an `n×p` binary matrix in
/// which exactly `round(fraction·n·p)` entries are 0 (held out) and the rest
/// are 1; a draw that would leave some row or column with no training entry
/// is resampled, up to a fixed number of attempts.
pub fn holdout_masks(
    n: usize,
    p: usize,
    s_count: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    if n == 0 || p == 0 || s_count == 0 {
        return Err(OpfaError::InvalidInput(
            "holdout masks need n, p and the subject count to be positive".into(),
        ));
    }
    if !fraction.is_finite() || fraction <= 0.0 || fraction >= 1.0 {
        return Err(OpfaError::InvalidInput(
            "holdout fraction must lie strictly between 0 and 1".into(),
        ));
    }
    let k = (fraction * (n * p) as f64).round() as usize;
    if k == 0 {
        return Err(OpfaError::InvalidInput(format!(
            "holdout fraction {fraction} rounds to zero held-out entries"
        )));
    }
    if k >= n * p {
        return Err(OpfaError::InvalidInput(format!(
            "holdout fraction {fraction} would hold out every entry"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let mut mask = None;
        for _ in 0..RESAMPLE_ATTEMPTS {
            let mut cells: Vec<usize> = (0..n * p).collect();
            for i in 0..k {
                let j = rng.gen_range(i..cells.len());
                cells.swap(i, j);
            }
            let mut h = Array2::ones((n, p));
            for &c in cells.iter().take(k) {
                h[(c / p, c % p)] = 0.0;
            }
            if split_keeps_coverage(&h) {
                mask = Some(h);
                break;
            }
        }
        match mask {
            Some(h) => result.push(h),
            None => {
                return Err(OpfaError::Infeasible(format!(
                    "could not draw a holdout split for subject {s} that keeps every \
                     row and column represented in training"
                )))
            }
        }
    }
    Ok(result)
}

/// True when every row and every column keeps at least one training entry
/// (a 1 in the holdout indicator).
fn split_keeps_coverage(holdout: &Array2<f64>) -> bool {
    let (n, p) = holdout.dim();
    (0..n).all(|t| (0..p).any(|j| holdout[(t, j)] != 0.0))
        && (0..p).all(|j| (0..n).any(|t| holdout[(t, j)] != 0.0))
}

/// The training view of a dataset: same matrices, with observation masks
/// intersected with the holdout indicators so held-out entries are invisible
/// to the fit.
pub fn training_set(data: &ObservationSet, holdout: &[Array2<f64>]) -> Result<ObservationSet> {
    if holdout.len() != data.n_subjects() {
        return Err(OpfaError::ShapeMismatch(format!(
            "{} holdout masks for {} subjects",
            holdout.len(),
            data.n_subjects()
        )));
    }
    let (n, p) = (data.n(), data.p());
    let mut masks = Vec::with_capacity(holdout.len());
    let mut matrices = Vec::with_capacity(holdout.len());
    for s in 0..data.n_subjects() {
        if holdout[s].dim() != (n, p) {
            return Err(OpfaError::ShapeMismatch(format!(
                "holdout mask {s} has shape {:?}, expected ({n}, {p})",
                holdout[s].dim()
            )));
        }
        let mut w = match data.mask(s) {
            Some(m) => m.clone(),
            None => Array2::ones((n, p)),
        };
        w.zip_mut_with(&holdout[s], |wv, hv| {
            if *hv == 0.0 {
                *wv = 0.0;
            }
        });
        masks.push(w);
        matrices.push(data.matrix(s).clone());
    }
    ObservationSet::new(matrices, Some(masks), data.subject_ids().to_vec())
}

/// Average-per-subject sum of squared residuals over the entries selected by
/// `weights` (nonzero = included): `(1/S) Σ_s Σ_{tj} w_{tj} ≠ 0 ⟹ (x−x̂)²`.
fn masked_error(data: &ObservationSet, weights: &[Array2<f64>], fit: &OpfaFit) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..data.n_subjects() {
        let pred = fit.predict(s)?;
        let x = data.matrix(s);
        for ((xv, pv), wv) in x.iter().zip(pred.iter()).zip(weights[s].iter()) {
            if *wv != 0.0 {
                let r = xv - pv;
                total += r * r;
            }
        }
    }
    Ok(total / data.n_subjects() as f64)
}

/// Validation error of a fit: average-per-subject sum of squared residuals on
/// the held-out entries (0 in the holdout indicator) that are also observed
/// in the original data.
pub fn heldout_error(
    data: &ObservationSet,
    holdout: &[Array2<f64>],
    fit: &OpfaFit,
) -> Result<f64> {
    let weights = test_weights(data, holdout);
    masked_error(data, &weights, fit)
}

fn test_weights(data: &ObservationSet, holdout: &[Array2<f64>]) -> Vec<Array2<f64>> {
    (0..data.n_subjects())
        .map(|s| {
            let mut w = match data.mask(s) {
                Some(m) => m.clone(),
                None => Array2::ones((data.n(), data.p())),
            };
            w.zip_mut_with(&holdout[s], |wv, hv| {
                if *hv != 0.0 {
                    *wv = 0.0;
                }
            });
            w
        })
        .collect()
}

fn train_weights(data: &ObservationSet, holdout: &[Array2<f64>]) -> Vec<Array2<f64>> {
    (0..data.n_subjects())
        .map(|s| {
            let mut w = match data.mask(s) {
                Some(m) => m.clone(),
                None => Array2::ones((data.n(), data.p())),
            };
            w.zip_mut_with(&holdout[s], |wv, hv| {
                if *hv == 0.0 {
                    *wv = 0.0;
                }
            });
            w
        })
        .collect()
}

/// Index of the row with the smallest validation error; earlier rows win
/// ties, so with factor counts listed in increasing order a tie resolves to
/// the simpler model.
fn select_row(rows: &[CvRow]) -> usize {
    let mut best = 0;
    for (i, row) in rows.iter().enumerate().skip(1) {
        if row.cv_error < rows[best].cv_error {
            best = i;
        }
    }
    best
}

/// Runs the full grid. Within each factor count, the first grid point is fit
/// from scratch (with restarts) and later points are warm-started from the
/// previous point's solution, walking the penalty grid in order.
pub fn cross_validate(
    data: &ObservationSet,
    base: &ModelConfig,
    config: &CvConfig,
) -> Result<CvResult> {
    if config.f_values.is_empty() || config.lambda_grid.is_empty() || config.beta_grid.is_empty()
    {
        return Err(OpfaError::InvalidInput(
            "every cross-validation grid needs at least one value".into(),
        ));
    }
    let holdout = holdout_masks(
        data.n(),
        data.p(),
        data.n_subjects(),
        config.holdout_fraction,
        config.seed,
    )?;
    let train = training_set(data, &holdout)?;
    let train_w = train_weights(data, &holdout);

    let mut rows: Vec<CvRow> = Vec::new();
    let mut best: Option<(usize, OpfaFit)> = None;
    for &f in &config.f_values {
        let mut previous: Option<OpfaFit> = None;
        for &lambda in &config.lambda_grid {
            for &beta in &config.beta_grid {
                let mut point = base.clone();
                point.f = f;
                point.lambda = lambda;
                point.beta = beta;
                let fit = match previous {
                    None => fit_opfa(&train, &point)?,
                    Some(ref prev) => fit_opfa_warm(
                        &train,
                        &point,
                        prev.factors.clone(),
                        prev.scores.clone(),
                        prev.delays.clone(),
                    )?,
                };
                rows.push(CvRow {
                    f,
                    lambda,
                    beta,
                    cv_error: heldout_error(data, &holdout, &fit)?,
                    train_error: masked_error(data, &train_w, &fit)?,
                    converged: fit.converged,
                });
                let better = match best {
                    None => true,
                    Some((i, _)) => rows.last().unwrap().cv_error < rows[i].cv_error,
                };
                if better {
                    best = Some((rows.len() - 1, fit.clone()));
                }
                previous = Some(fit);
            }
        }
    }
    let (selected, selected_fit) = best.expect("grid is nonempty");
    debug_assert_eq!(selected, select_row(&rows));
    Ok(CvResult {
        rows,
        selected,
        selected_fit,
        holdout,
    })
}

/// Writes the grid results as CSV with one row per evaluated configuration.
pub fn write_cv_table(path: &Path, rows: &[CvRow]) -> Result<()> {
    let wrap = |source| OpfaError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    writeln!(out, "f,lambda,beta,cv_error,train_error").map_err(wrap)?;
    for r in rows {
        writeln!(
            out,
            "{},{:.11e},{:.11e},{:.11e},{:.11e}",
            r.f, r.lambda, r.beta, r.cv_error, r.train_error
        )
        .map_err(wrap)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::{DelayVector, FactorMatrix};
    use crate::synth::{generate, Dictionary, SynthConfig};

    fn toy_data(seed: u64) -> ObservationSet {
        generate(&SynthConfig {
            subjects: 2,
            n: 8,
            p: 5,
            f: 1,
            sigma_d_sq: 0.0,
            d_max: None,
            n_f: None,
            window_start: 0,
            sigma_eps_sq: 0.0025,
            snr_db: None,
            sparsity: 1.0,
            dictionary: Dictionary::Bump,
            seed,
        })
        .unwrap()
        .data
    }

    #[test]
    fn holdout_counts_are_exact() {
        let masks = holdout_masks(8, 5, 2, 0.2, 7).unwrap();
        assert_eq!(masks.len(), 2);
        for h in &masks {
            let zeros = h.iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, (0.2f64 * 40.0).round() as usize);
            assert!(h.iter().all(|v| *v == 0.0 || *v == 1.0));
        }
        // default fraction: round(0.1·40) = 4 held out
        let masks = holdout_masks(8, 5, 1, default_holdout_fraction(), 7).unwrap();
        assert_eq!(masks[0].iter().filter(|v| **v == 0.0).count(), 4);
    }

    #[test]
    fn holdout_depends_only_on_shapes() {
        let a = holdout_masks(8, 5, 2, 0.2, 5).unwrap();
        let b = holdout_masks(8, 5, 2, 0.2, 5).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        let c = holdout_masks(8, 5, 2, 0.2, 6).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
        // subjects draw different splits from one stream
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn every_row_and_column_keeps_a_training_entry() {
        for seed in 0..30 {
            let masks = holdout_masks(8, 5, 2, 0.45, seed).unwrap();
            for h in &masks {
                for t in 0..8 {
                    assert!((0..5).any(|j| h[(t, j)] != 0.0), "row {t} fully held out");
                }
                for j in 0..5 {
                    assert!((0..8).any(|t| h[(t, j)] != 0.0), "column {j} fully held out");
                }
            }
        }
    }

    #[test]
    fn training_set_keeps_values_and_hides_entries() {
        let data = toy_data(4);
        let masks = holdout_masks(8, 5, 2, 0.2, 9).unwrap();
        let train = training_set(&data, &masks).unwrap();
        for s in 0..2 {
            for (a, b) in data.matrix(s).iter().zip(train.matrix(s).iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            let w = train.mask(s).unwrap();
            for (wv, hv) in w.iter().zip(masks[s].iter()) {
                assert_eq!(*wv, *hv); // unmasked data: training weight is the indicator
            }
        }
    }

    #[test]
    fn holdout_intersects_existing_masks() {
        let data = toy_data(2);
        let mut w0 = Array2::ones((8, 5));
        for t in 0..8 {
            w0[(t, 0)] = 0.0; // column 0 never observed for subject 0
        }
        let masked = ObservationSet::new(
            vec![data.matrix(0).clone(), data.matrix(1).clone()],
            Some(vec![w0.clone(), Array2::ones((8, 5))]),
            data.subject_ids().to_vec(),
        )
        .unwrap();
        let holdout = holdout_masks(8, 5, 2, 0.2, 3).unwrap();
        let train = training_set(&masked, &holdout).unwrap();
        let w = train.mask(0).unwrap();
        for t in 0..8 {
            assert_eq!(w[(t, 0)], 0.0, "unobserved entries stay unobserved");
        }
        for t in 0..8 {
            for j in 1..5 {
                assert_eq!(w[(t, j)], holdout[0][(t, j)]);
            }
        }
        // test weights exclude unobserved entries too
        let tw = test_weights(&masked, &holdout);
        for t in 0..8 {
            assert_eq!(tw[0][(t, 0)], 0.0);
        }
    }

    /// The validation error of the zero model is the average held-out energy
    /// `(1/S) Σ_s ‖X_s‖²` over held-out entries — per-subject sums, not
    /// per-entry means.
    #[test]
    fn zero_model_error_is_average_heldout_energy() {
        let data = toy_data(5);
        let holdout = holdout_masks(8, 5, 2, 0.2, 1).unwrap();
        let mut config = ModelConfig::new(1, 0, 0.0, 0.0);
        config.n_f = Some(8);
        let zero = OpfaFit {
            factors: FactorMatrix::new(Array2::zeros((8, 1)), 1e3).unwrap(),
            scores: vec![Array2::zeros((1, 5)); 2],
            delays: vec![DelayVector::new(vec![0], 0).unwrap(); 2],
            objective_trace: vec![0.0],
            converged: true,
            iterations: 0,
            n: 8,
            subject_ids: data.subject_ids().to_vec(),
            config,
        };
        let err = heldout_error(&data, &holdout, &zero).unwrap();
        let mut want = 0.0;
        for s in 0..2 {
            for (xv, hv) in data.matrix(s).iter().zip(holdout[s].iter()) {
                if *hv == 0.0 {
                    want += xv * xv;
                }
            }
        }
        want /= 2.0;
        assert!((err - want).abs() <= 1e-12 * want.max(1.0));
        assert!(err > 0.0);
    }

    #[test]
    fn heldout_error_matches_manual_sum() {
        let data = toy_data(5);
        let masks = holdout_masks(8, 5, 2, 0.2, 1).unwrap();
        let train = training_set(&data, &masks).unwrap();
        let mut config = ModelConfig::new(1, 0, 1e-3, 1e-3);
        config.n_f = Some(8);
        config.restarts = 1;
        config.max_outer_iters = 20;
        config.seed = 0;
        let fit = fit_opfa(&train, &config).unwrap();
        let err = heldout_error(&data, &masks, &fit).unwrap();

        let mut total = 0.0;
        for s in 0..2 {
            let pred = fit.predict(s).unwrap();
            for ((xv, pv), hv) in data
                .matrix(s)
                .iter()
                .zip(pred.iter())
                .zip(masks[s].iter())
            {
                if *hv == 0.0 {
                    total += (xv - pv) * (xv - pv);
                }
            }
        }
        assert!((err - total / 2.0).abs() < 1e-12);
        assert!(err.is_finite() && err >= 0.0);
    }

    #[test]
    fn selection_prefers_earlier_rows_on_ties() {
        let row = |f: usize, cv: f64| CvRow {
            f,
            lambda: 0.1,
            beta: 0.1,
            cv_error: cv,
            train_error: 0.0,
            converged: true,
        };
        assert_eq!(select_row(&[row(1, 0.5), row(2, 0.5), row(3, 0.4)]), 2);
        assert_eq!(select_row(&[row(1, 0.4), row(2, 0.4), row(3, 0.4)]), 0);
        assert_eq!(select_row(&[row(1, 0.6), row(2, 0.2), row(3, 0.2)]), 1);
    }

    #[test]
    fn grid_runs_in_order_and_selects_minimum() {
        let data = toy_data(6);
        let mut base = ModelConfig::new(1, 1, 1e-3, 1e-3);
        base.n_f = Some(8);
        base.restarts = 1;
        base.max_outer_iters = 15;
        base.seed = 2;
        let config = CvConfig {
            f_values: vec![1, 2],
            lambda_grid: vec![1e-3, 1e-2],
            beta_grid: vec![1e-3],
            holdout_fraction: 0.2,
            seed: 11,
        };
        let result = cross_validate(&data, &base, &config).unwrap();
        assert_eq!(result.rows.len(), 4);
        let order: Vec<(usize, f64)> = result.rows.iter().map(|r| (r.f, r.lambda)).collect();
        assert_eq!(order, vec![(1, 1e-3), (1, 1e-2), (2, 1e-3), (2, 1e-2)]);
        let min = result
            .rows
            .iter()
            .map(|r| r.cv_error)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(result.selected_row().cv_error, min);
        // the retained fit matches the selected hyperparameters
        assert_eq!(result.selected_fit.config.f, result.selected_row().f);
        assert_eq!(
            result.selected_fit.config.lambda,
            result.selected_row().lambda
        );
        for r in &result.rows {
            assert!(r.cv_error.is_finite() && r.train_error.is_finite());
        }
    }

    /// Held-out entries must not leak into the fit: perturbing them leaves
    /// every evaluated model bit-identical (only the validation error moves).
    #[test]
    fn perturbing_heldout_entries_leaves_fits_bit_identical() {
        let data = toy_data(8);
        let holdout = holdout_masks(8, 5, 2, 0.2, 4).unwrap();
        // find one held-out cell of subject 0 and perturb it hard
        let (mut t0, mut j0) = (usize::MAX, usize::MAX);
        'outer: for t in 0..8 {
            for j in 0..5 {
                if holdout[0][(t, j)] == 0.0 {
                    (t0, j0) = (t, j);
                    break 'outer;
                }
            }
        }
        let mut perturbed_m = data.matrix(0).clone();
        perturbed_m[(t0, j0)] += 1e6;
        let perturbed = ObservationSet::new(
            vec![perturbed_m, data.matrix(1).clone()],
            None,
            data.subject_ids().to_vec(),
        )
        .unwrap();

        let mut base = ModelConfig::new(1, 0, 1e-3, 1e-3);
        base.n_f = Some(8);
        base.restarts = 1;
        base.max_outer_iters = 10;
        let config = CvConfig {
            f_values: vec![1],
            lambda_grid: vec![1e-3],
            beta_grid: vec![1e-3],
            holdout_fraction: 0.2,
            seed: 4,
        };
        let a = cross_validate(&data, &base, &config).unwrap();
        let b = cross_validate(&perturbed, &base, &config).unwrap();
        for (fa, fb) in a
            .selected_fit
            .factors
            .values()
            .iter()
            .zip(b.selected_fit.factors.values().iter())
        {
            assert_eq!(fa.to_bits(), fb.to_bits());
        }
        for s in 0..2 {
            assert_eq!(a.selected_fit.delays[s].delays(), b.selected_fit.delays[s].delays());
            for (x, y) in a.selected_fit.scores[s].iter().zip(b.selected_fit.scores[s].iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(
            a.rows[0].train_error.to_bits(),
            b.rows[0].train_error.to_bits()
        );
        assert!(b.rows[0].cv_error > a.rows[0].cv_error);
    }

    #[test]
    fn cv_table_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cv_table.csv");
        let rows = vec![
            CvRow {
                f: 1,
                lambda: 0.1,
                beta: 0.01,
                cv_error: 2.5,
                train_error: 1.25,
                converged: true,
            },
            CvRow {
                f: 2,
                lambda: 0.2,
                beta: 0.02,
                cv_error: 1.5,
                train_error: 0.75,
                converged: true,
            },
        ];
        write_cv_table(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "f,lambda,beta,cv_error,train_error");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "1");
        assert!((first[1].parse::<f64>().unwrap() - 0.1).abs() < 1e-12);
        assert!((first[3].parse::<f64>().unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(holdout_masks(8, 5, 2, 0.0, 1).is_err());
        assert!(holdout_masks(8, 5, 2, 1.0, 1).is_err());
        assert!(holdout_masks(8, 5, 2, 1e-9, 1).is_err()); // rounds to zero entries
        assert!(holdout_masks(0, 5, 2, 0.2, 1).is_err());
        let data = toy_data(7);
        let base = ModelConfig::new(1, 0, 1e-3, 1e-3);
        let config = CvConfig {
            f_values: vec![],
            lambda_grid: vec![0.1],
            beta_grid: vec![0.1],
            holdout_fraction: 0.2,
            seed: 1,
        };
        assert!(cross_validate(&data, &base, &config).is_err());
    }
}
