//! Block coordinate descent driver: alternates the exact delay search, the
//! proximal score step and the projected-gradient factor step, restarting
//! from several initializations and keeping the best run.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::{average_linkage, column_distances};
use crate::data::{ModelConfig, ObservationSet, Variant};
use crate::error::{OpfaError, Result};
use crate::penalty::{group_lasso_penalty, project_factor_set, tv_penalty, DifferenceOperator};
use crate::quadratic::QuadraticForm;
use crate::shift::{
    predict_subject, shift_columns, window_restrict, DelayVector, FactorMatrix, Window,
};
use crate::solvers::{
    assemble_factor_quadratic, assemble_score_quadratic, estimate_delays_bb, estimate_factors,
    estimate_scores, masked_residual,
};

/// Iteration budget for each inner factor/score solve.
const INNER_ITERS: usize = 2000;

/// Seed offset for the stream that reseeds dead factors, kept separate from
/// the initialization streams.
const RESEED_STREAM: u64 = 0x7365_6564;

/// How a single run chooses its starting factor matrix.
#[derive(Clone, Debug)]
pub enum InitStrategy {
    /// Average-linkage clusters of variable time courses, averaged per
    /// cluster. Falls back to a seeded random start when there are more
    /// factors than variables.
    Cluster,
    /// Seeded uniform random factors (projected onto the feasible set).
    Random { seed: u64 },
}

/// Result of a fit: the model blocks plus the per-iteration objective trace.
#[derive(Clone, Debug)]
pub struct OpfaFit {
    pub factors: FactorMatrix,
    /// One score matrix per subject, or a single shared matrix for the
    /// common-scores variant.
    pub scores: Vec<Array2<f64>>,
    pub delays: Vec<DelayVector>,
    /// Objective after initialization and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Number of data rows per subject (the window length).
    pub n: usize,
    pub subject_ids: Vec<String>,
    pub config: ModelConfig,
}

impl OpfaFit {
    /// The score matrix used for subject `s`.
    pub fn score_matrix(&self, s: usize) -> &Array2<f64> {
        match self.config.variant {
            Variant::Opfa => &self.scores[s],
            Variant::OpfaC => &self.scores[0],
        }
    }

    /// Model prediction for subject `s`.
    pub fn predict(&self, s: usize) -> Result<Array2<f64>> {
        predict_subject(
            &self.factors,
            &self.delays[s],
            self.score_matrix(s),
            self.config.window(self.n),
        )
    }
}

fn score_for<'a>(scores: &'a [Array2<f64>], variant: Variant, s: usize) -> &'a Array2<f64> {
    match variant {
        Variant::Opfa => &scores[s],
        Variant::OpfaC => &scores[0],
    }
}

/// Full model objective: masked residual over all subjects, plus the group
/// penalty on scores, plus the smoothness penalty on factors. For the
/// common-scores variant the group penalty reduces to `√S Σ_{i,j} |A[i,j]|`.
pub fn opfa_objective(
    data: &ObservationSet,
    config: &ModelConfig,
    factors: &FactorMatrix,
    delays: &[DelayVector],
    scores: &[Array2<f64>],
) -> Result<f64> {
    let s_count = data.n_subjects();
    if delays.len() != s_count {
        return Err(OpfaError::ShapeMismatch(format!(
            "{} delay vectors for {s_count} subjects",
            delays.len()
        )));
    }
    let expected = match config.variant {
        Variant::Opfa => s_count,
        Variant::OpfaC => 1,
    };
    if scores.len() != expected {
        return Err(OpfaError::ShapeMismatch(format!(
            "{} score matrices, expected {expected}",
            scores.len()
        )));
    }
    let window = config.window(data.n());
    let mut residual = 0.0;
    for s in 0..s_count {
        let pred = predict_subject(
            factors,
            &delays[s],
            score_for(scores, config.variant, s),
            window,
        )?;
        residual += masked_residual(data.matrix(s), &pred, data.mask(s));
    }
    let group = match config.variant {
        Variant::Opfa => group_lasso_penalty(scores)?,
        Variant::OpfaC => {
            (s_count as f64).sqrt() * scores[0].iter().map(|v| v.abs()).sum::<f64>()
        }
    };
    let op = DifferenceOperator::first_difference(factors.n_rows());
    let smooth = tv_penalty(factors, &op)?;
    let total = residual + config.lambda * group + config.beta * smooth;
    if !total.is_finite() {
        return Err(OpfaError::NonFinite("model objective".into()));
    }
    Ok(total)
}

/// Per-variable time courses averaged across subjects, observed entries only.
/// Unobserved positions fall back to zero.
fn masked_mean_profiles(data: &ObservationSet) -> Array2<f64> {
    let (n, p) = (data.n(), data.p());
    let mut num = Array2::<f64>::zeros((n, p));
    let mut den = Array2::<f64>::zeros((n, p));
    for s in 0..data.n_subjects() {
        let x = data.matrix(s);
        match data.mask(s) {
            None => {
                for t in 0..n {
                    for j in 0..p {
                        num[(t, j)] += x[(t, j)];
                        den[(t, j)] += 1.0;
                    }
                }
            }
            Some(m) => {
                for t in 0..n {
                    for j in 0..p {
                        let w = m[(t, j)];
                        num[(t, j)] += w * x[(t, j)];
                        den[(t, j)] += w;
                    }
                }
            }
        }
    }
    Array2::from_shape_fn((n, p), |(t, j)| {
        if den[(t, j)] > 0.0 {
            num[(t, j)] / den[(t, j)]
        } else {
            0.0
        }
    })
}

fn random_factors(n_f: usize, f: usize, bound: f64, seed: u64) -> Result<FactorMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Array2::from_shape_fn((n_f, f), |_| rng.gen_range(0.0..1.0));
    project_factor_set(&raw, bound)
}

/// Builds a starting point. The cluster strategy groups variables by their
/// average time courses and uses each group's mean profile, positioned at the
/// window with zero delay. Either way, the starting scores come from a
/// nonnegative least-squares regression of the factors onto each subject, so
/// the first delay search already has signal to align against.
pub fn init_factors(
    data: &ObservationSet,
    config: &ModelConfig,
    strategy: &InitStrategy,
) -> Result<(FactorMatrix, Vec<Array2<f64>>)> {
    config.validate(data.n())?;
    let (n, p) = (data.n(), data.p());
    let n_f = config.factor_rows(n);
    let window = config.window(n);
    let factors = match strategy {
        InitStrategy::Random { seed } => {
            random_factors(n_f, config.f, config.frobenius_bound, *seed)?
        }
        InitStrategy::Cluster => {
            if config.f > p {
                random_factors(n_f, config.f, config.frobenius_bound, config.seed)?
            } else {
                let profiles = masked_mean_profiles(data);
                let labels = average_linkage(&column_distances(&profiles), config.f)?;
                let mut counts = vec![0usize; config.f];
                for &c in &labels {
                    counts[c] += 1;
                }
                let mut raw = Array2::<f64>::zeros((n_f, config.f));
                for (j, &c) in labels.iter().enumerate() {
                    for t in 0..n {
                        raw[(window.start + t, c)] += profiles[(t, j)];
                    }
                }
                for c in 0..config.f {
                    let k = counts[c] as f64;
                    for t in 0..n {
                        raw[(window.start + t, c)] /= k;
                    }
                }
                project_factor_set(&raw, config.frobenius_bound)?
            }
        }
    };
    let scores = regress_scores(data, config, &factors, window)?;
    Ok((factors, scores))
}

/// Nonnegative least-squares fit of the windowed, unshifted factors onto each
/// subject (one shared matrix for the common-scores variant).
fn regress_scores(
    data: &ObservationSet,
    config: &ModelConfig,
    factors: &FactorMatrix,
    window: Window,
) -> Result<Vec<Array2<f64>>> {
    let p = data.p();
    let s_count = data.n_subjects();
    let f_w = window_restrict(factors.values().view(), window)?;
    let quads: Vec<QuadraticForm> = (0..s_count)
        .map(|s| assemble_score_quadratic(data.matrix(s), data.mask(s), &f_w))
        .collect::<Result<_>>()?;
    let n_scores = match config.variant {
        Variant::Opfa => s_count,
        Variant::OpfaC => 1,
    };
    let zeros = vec![Array2::<f64>::zeros((config.f, p)); n_scores];
    let (scores, _) = estimate_scores(&quads, &zeros, 0.0, config.variant, config.inner_tol, INNER_ITERS)?;
    Ok(scores)
}

struct RestartRun {
    factors: FactorMatrix,
    scores: Vec<Array2<f64>>,
    delays: Vec<DelayVector>,
    trace: Vec<f64>,
    converged: bool,
}

/// Revives factor columns that died together with their score rows: such a
/// pair receives zero gradient from every block and would stay dead forever.
/// Each column is revived at most once, with an amplitude small enough that
/// the objective can rise by at most ~1e-12 per column.
fn reseed_dead_pairs(
    factors: &mut FactorMatrix,
    scores: &mut [Array2<f64>],
    reseeded: &mut [bool],
    rng: &mut ChaCha8Rng,
    config: &ModelConfig,
    n_f: usize,
) -> bool {
    let f = config.f;
    let fv = factors.values().clone();
    let fnorm = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let amp = (1e-6 * fnorm.max(1.0))
        .min((1e-12 / (4.0 * config.beta * n_f as f64 + 1.0)).sqrt());
    let mut new_values = fv;
    let mut revived = false;
    for i in 0..f {
        if reseeded[i] {
            continue;
        }
        let col_dead = (0..n_f).all(|r| new_values[(r, i)].abs() < 1e-14);
        let rows_dead = scores
            .iter()
            .all(|a| a.row(i).iter().all(|v| v.abs() < 1e-14));
        if !(col_dead && rows_dead) {
            continue;
        }
        let mut candidate = new_values.clone();
        for r in 0..n_f {
            candidate[(r, i)] = amp * rng.gen_range(0.0..1.0);
        }
        let norm = candidate.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > config.frobenius_bound {
            continue; // no headroom; leave the column dead
        }
        new_values = candidate;
        for a in scores.iter_mut() {
            a.row_mut(i).fill(0.0);
        }
        reseeded[i] = true;
        revived = true;
    }
    if revived {
        *factors = FactorMatrix::from_feasible(new_values);
    }
    revived
}

fn single_run(
    data: &ObservationSet,
    config: &ModelConfig,
    strategy: &InitStrategy,
) -> Result<RestartRun> {
    let s_count = data.n_subjects();
    let (factors, scores) = init_factors(data, config, strategy)?;
    let delays: Vec<DelayVector> = vec![DelayVector::zeros(config.f); s_count];
    run_from_state(data, config, factors, scores, delays)
}

fn run_from_state(
    data: &ObservationSet,
    config: &ModelConfig,
    mut factors: FactorMatrix,
    mut scores: Vec<Array2<f64>>,
    mut delays: Vec<DelayVector>,
) -> Result<RestartRun> {
    let n = data.n();
    let s_count = data.n_subjects();
    let n_f = config.factor_rows(n);
    let window = config.window(n);
    let op = DifferenceOperator::first_difference(n_f);

    let mut obj = opfa_objective(data, config, &factors, &delays, &scores)?;
    let mut trace = vec![obj];
    let eps = config.outer_tol * obj;
    let mut converged = false;
    let mut reseeded = vec![false; config.f];
    let mut reseed_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(RESEED_STREAM));

    for _ in 0..config.max_outer_iters {
        // delay step: exact per-subject search; it can only lower the
        // residual, and the penalties do not depend on the delays
        if config.d_max > 0 {
            let candidates: Vec<Result<DelayVector>> = (0..s_count)
                .into_par_iter()
                .map(|s| {
                    estimate_delays_bb(
                        data.matrix(s),
                        data.mask(s),
                        &factors,
                        score_for(&scores, config.variant, s),
                        window,
                        config.d_max,
                    )
                    .map(|(d, _)| d)
                })
                .collect();
            let mut cand_delays = Vec::with_capacity(s_count);
            for c in candidates {
                cand_delays.push(c?);
            }
            let cand_obj = opfa_objective(data, config, &factors, &cand_delays, &scores)?;
            if cand_obj <= obj {
                delays = cand_delays;
                obj = cand_obj;
            }
        }

        // score step
        {
            let quads: Vec<QuadraticForm> = (0..s_count)
                .map(|s| {
                    let shifted = shift_columns(factors.values(), delays[s].delays());
                    let m_w = window_restrict(shifted.view(), window)?;
                    assemble_score_quadratic(data.matrix(s), data.mask(s), &m_w)
                })
                .collect::<Result<_>>()?;
            let (cand_scores, _) = estimate_scores(
                &quads,
                &scores,
                config.lambda,
                config.variant,
                config.inner_tol,
                INNER_ITERS,
            )?;
            let cand_obj = opfa_objective(data, config, &factors, &delays, &cand_scores)?;
            if cand_obj <= obj {
                scores = cand_scores;
                obj = cand_obj;
            }
        }

        // factor step
        {
            let per_subject: Vec<Array2<f64>> = match config.variant {
                Variant::Opfa => scores.clone(),
                Variant::OpfaC => vec![scores[0].clone(); s_count],
            };
            let quad = assemble_factor_quadratic(
                data,
                &per_subject,
                &delays,
                n_f,
                window,
                config.beta,
                &op,
            )?;
            let (cand_factors, _) = estimate_factors(
                &quad,
                &factors,
                config.frobenius_bound,
                config.inner_tol,
                INNER_ITERS,
            )?;
            let cand_obj = opfa_objective(data, config, &cand_factors, &delays, &scores)?;
            if cand_obj <= obj {
                factors = cand_factors;
                obj = cand_obj;
            }
        }

        trace.push(obj);
        let k = trace.len() - 1;
        if trace[k - 1] - trace[k] <= eps {
            if reseed_dead_pairs(
                &mut factors,
                &mut scores,
                &mut reseeded,
                &mut reseed_rng,
                config,
                n_f,
            ) {
                obj = opfa_objective(data, config, &factors, &delays, &scores)?;
                continue;
            }
            converged = true;
            break;
        }
    }

    Ok(RestartRun {
        factors,
        scores,
        delays,
        trace,
        converged,
    })
}

/// Continues block coordinate descent from an explicit starting state, with
/// no restarts. Used for warm starts across nearby hyperparameter settings.
pub fn fit_opfa_warm(
    data: &ObservationSet,
    config: &ModelConfig,
    factors: FactorMatrix,
    scores: Vec<Array2<f64>>,
    delays: Vec<DelayVector>,
) -> Result<OpfaFit> {
    config.validate(data.n())?;
    let n_f = config.factor_rows(data.n());
    if factors.values().dim() != (n_f, config.f) {
        return Err(OpfaError::ShapeMismatch(format!(
            "warm-start factors {:?}, expected ({n_f}, {})",
            factors.values().dim(),
            config.f
        )));
    }
    let expected = match config.variant {
        Variant::Opfa => data.n_subjects(),
        Variant::OpfaC => 1,
    };
    if scores.len() != expected
        || scores.iter().any(|a| a.dim() != (config.f, data.p()))
        || delays.len() != data.n_subjects()
        || delays.iter().any(|d| d.len() != config.f)
    {
        return Err(OpfaError::ShapeMismatch(
            "warm-start scores or delays do not match the configuration".into(),
        ));
    }
    if delays
        .iter()
        .any(|d| d.delays().iter().any(|&v| v > config.d_max))
    {
        return Err(OpfaError::InvalidInput(
            "warm-start delays exceed the configured maximum".into(),
        ));
    }
    let run = run_from_state(data, config, factors, scores, delays)?;
    Ok(OpfaFit {
        factors: run.factors,
        scores: run.scores,
        delays: run.delays,
        iterations: run.trace.len() - 1,
        objective_trace: run.trace,
        converged: run.converged,
        n: data.n(),
        subject_ids: data.subject_ids().to_vec(),
        config: config.clone(),
    })
}

/// Fits the model by block coordinate descent with restarts. The first
/// restart starts from cluster profiles, the rest from seeded random factors;
/// the run with the lowest final objective wins (earliest run on ties).
pub fn fit_opfa(data: &ObservationSet, config: &ModelConfig) -> Result<OpfaFit> {
    config.validate(data.n())?;
    let runs: Vec<Result<RestartRun>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let strategy = if r == 0 {
                InitStrategy::Cluster
            } else {
                InitStrategy::Random {
                    seed: config.seed.wrapping_add(r as u64),
                }
            };
            single_run(data, config, &strategy)
        })
        .collect();

    let mut best: Option<RestartRun> = None;
    for run in runs {
        let run = run?;
        let obj = *run.trace.last().expect("trace is never empty");
        let replace = match &best {
            None => true,
            Some(b) => obj < *b.trace.last().expect("trace is never empty"),
        };
        if replace {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");

    Ok(OpfaFit {
        factors: best.factors,
        scores: best.scores,
        delays: best.delays,
        iterations: best.trace.len() - 1,
        objective_trace: best.trace,
        converged: best.converged,
        n: data.n(),
        subject_ids: data.subject_ids().to_vec(),
        config: config.clone(),
    })
}
