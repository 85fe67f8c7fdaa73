//! Monte-Carlo benchmark harness: sweep one generator axis (delay variance or
//! SNR), fit competing models to each synthetic dataset, and summarize factor
//! and signal recovery with 95% confidence intervals.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ModelConfig, Variant};
use crate::error::{OpfaError, Result};
use crate::fit::fit_opfa;
use crate::shift::FactorMatrix;
use crate::svg::{line_chart, palette, Series};
use crate::synth::{
    dictionary_distance, generate, mean_squared_error, Dictionary, SynthConfig, SyntheticDataset,
};

/// Competing models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchModel {
    /// Shift-aware fit with per-subject scores.
    Opfa,
    /// Shift-aware fit with one score matrix shared by all subjects.
    OpfaC,
    /// Shift-free baseline: alternating nonnegative least squares (the delay
    /// budget pinned to zero and both penalties off).
    Sfa,
}

impl BenchModel {
    pub fn label(self) -> &'static str {
        match self {
            BenchModel::Opfa => "opfa",
            BenchModel::OpfaC => "opfa-c",
            BenchModel::Sfa => "sfa",
        }
    }
}

/// Sweep settings: generator shape, exactly one axis, the competing models,
/// and the trial count. The `fit` settings supply penalties, restarts,
/// tolerances and the fit seed; factor count, delay budget, canvas and window
/// are forced to match the generator in every trial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    pub subjects: usize,
    pub n: usize,
    pub p: usize,
    pub f: usize,
    /// Axis 1: delay variances σ_d², swept at the fixed `snr_db`.
    #[serde(default)]
    pub sigma_d_grid: Vec<f64>,
    /// Axis 2: target SNRs in dB, swept at the fixed `sigma_d_sq`.
    #[serde(default)]
    pub snr_grid: Vec<f64>,
    /// Fixed SNR for the delay-variance axis (absent = noiseless).
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Fixed delay variance for the SNR axis.
    #[serde(default)]
    pub sigma_d_sq: Option<f64>,
    pub sparsity: f64,
    #[serde(default)]
    pub dictionary: Dictionary,
    pub models: Vec<BenchModel>,
    pub trials: usize,
    /// Generator seed; trial t draws with `seed + t`.
    pub seed: u64,
    pub fit: ModelConfig,
}

enum Axis {
    DelayVariance,
    Snr,
}

impl BenchConfig {
    fn axis(&self) -> Result<(Axis, &[f64])> {
        match (self.sigma_d_grid.is_empty(), self.snr_grid.is_empty()) {
            (false, true) => Ok((Axis::DelayVariance, &self.sigma_d_grid)),
            (true, false) => {
                if self.sigma_d_sq.is_none() {
                    return Err(OpfaError::InvalidInput(
                        "an SNR sweep needs the fixed delay variance sigma_d_sq".into(),
                    ));
                }
                Ok((Axis::Snr, &self.snr_grid))
            }
            (true, true) => Err(OpfaError::InvalidInput(
                "the sweep needs an axis: sigma_d_grid or snr_grid".into(),
            )),
            (false, false) => Err(OpfaError::InvalidInput(
                "choose one sweep axis, not both sigma_d_grid and snr_grid".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (_, values) = self.axis()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OpfaError::InvalidInput("axis values must be finite".into()));
        }
        if self.models.is_empty() {
            return Err(OpfaError::InvalidInput(
                "the sweep needs at least one model".into(),
            ));
        }
        if self.trials == 0 {
            return Err(OpfaError::InvalidInput(
                "the sweep needs at least one trial".into(),
            ));
        }
        Ok(())
    }

    fn synth_config(&self, axis: &Axis, value: f64, trial: usize) -> SynthConfig {
        let (sigma_d_sq, snr_db) = match axis {
            Axis::DelayVariance => (value, self.snr_db),
            Axis::Snr => (self.sigma_d_sq.unwrap(), Some(value)),
        };
        // The benchmark uses the periodic model: the factor canvas equals the
        // observed window, so shifts wrap around and every row is observed.
        SynthConfig {
            subjects: self.subjects,
            n: self.n,
            p: self.p,
            f: self.f,
            sigma_d_sq,
            d_max: None,
            n_f: Some(self.n),
            window_start: 0,
            sigma_eps_sq: 0.0,
            snr_db,
            sparsity: self.sparsity,
            dictionary: self.dictionary,
            seed: self.seed.wrapping_add(trial as u64),
        }
    }
}

/// Mean, standard deviation, and normal-approximation 95% half-width of a
/// sample.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub std_dev: f64,
    pub ci_half_width: f64,
    pub n: usize,
}

impl SummaryStats {
    pub fn from_samples(samples: &[f64]) -> SummaryStats {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var: f64 = if n > 1 {
            samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let std_dev = var.sqrt();
        SummaryStats {
            mean,
            std_dev,
            ci_half_width: 1.96 * std_dev / (n as f64).sqrt(),
            n,
        }
    }

    /// True when the two 95% intervals do not overlap.
    pub fn separated_from(&self, other: &SummaryStats) -> bool {
        let (lo, hi) = (self.mean - self.ci_half_width, self.mean + self.ci_half_width);
        let (olo, ohi) = (
            other.mean - other.ci_half_width,
            other.mean + other.ci_half_width,
        );
        hi < olo || ohi < lo
    }
}

/// One fitted model on one generated dataset.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub axis_value: f64,
    pub model: BenchModel,
    pub trial: usize,
    pub mse: f64,
    pub dtf: f64,
}

/// Aggregate over trials for one grid point and model.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub axis_value: f64,
    pub model: BenchModel,
    pub mse: SummaryStats,
    pub dtf: SummaryStats,
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    /// Which generator knob the axis values set.
    pub axis_name: String,
    /// One record per (grid point, trial, model), grid outermost.
    pub records: Vec<TrialRecord>,
    /// One row per (grid point, model), grid outermost — the results table.
    pub summary: Vec<SummaryRow>,
}

impl BenchResult {
    pub fn summary_for(&self, axis_value: f64, model: BenchModel) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.axis_value == axis_value && r.model == model)
    }
}

/// Embeds an `n×f` factor matrix into an `n_f`-row canvas at the window
/// offset (zeros elsewhere) so shift-free fits compare against canvas truth.
fn embed_factors(factors: &FactorMatrix, n_f: usize, window_start: usize) -> Result<FactorMatrix> {
    let v = factors.values();
    if v.nrows() == n_f && window_start == 0 {
        return Ok(factors.clone());
    }
    let mut out = Array2::zeros((n_f, v.ncols()));
    for r in 0..v.nrows() {
        for c in 0..v.ncols() {
            out[(window_start + r, c)] = v[(r, c)];
        }
    }
    FactorMatrix::new(out, f64::INFINITY)
}

/// Fit configuration for one model arm on one dataset: geometry comes from
/// the generator, everything else from the sweep's fit settings.
fn arm_config(base: &ModelConfig, model: BenchModel, ds: &SyntheticDataset) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.f = ds.config.f;
    match model {
        BenchModel::Opfa | BenchModel::OpfaC => {
            cfg.variant = if model == BenchModel::Opfa {
                Variant::Opfa
            } else {
                Variant::OpfaC
            };
            cfg.d_max = ds.d_max;
            cfg.n_f = Some(ds.factors.n_rows());
            cfg.window_start = ds.window.start;
        }
        BenchModel::Sfa => {
            cfg.variant = Variant::Opfa;
            cfg.d_max = 0;
            cfg.lambda = 0.0;
            cfg.beta = 0.0;
            cfg.n_f = Some(ds.data.n());
            cfg.window_start = 0;
        }
    }
    cfg
}

fn run_arm(config: &BenchConfig, ds: &SyntheticDataset, model: BenchModel) -> Result<(f64, f64)> {
    let cfg = arm_config(&config.fit, model, ds);
    let fit = fit_opfa(&ds.data, &cfg)?;
    let mse = mean_squared_error(&ds.clean, &fit)?;
    let estimate = match model {
        BenchModel::Sfa => embed_factors(&fit.factors, ds.factors.n_rows(), ds.window.start)?,
        _ => fit.factors.clone(),
    };
    let dtf = dictionary_distance(&ds.factors, &estimate)?;
    Ok((mse, dtf))
}

/// Runs the full sweep: for every grid point and Monte-Carlo trial, generate
/// one dataset and fit every model to it. Trials are independent (given
/// derived seeds) and run in parallel; output order is deterministic.
pub fn run_sweep(config: &BenchConfig) -> Result<BenchResult> {
    config.validate()?;
    let (axis, values) = config.axis()?;
    let axis_name = match axis {
        Axis::DelayVariance => "sigma_d_sq",
        Axis::Snr => "snr_db",
    };

    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &value in values {
        let per_trial: Vec<Vec<TrialRecord>> = (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                let ds = generate(&config.synth_config(&axis, value, trial))?;
                config
                    .models
                    .iter()
                    .map(|&model| {
                        let (mse, dtf) = run_arm(config, &ds, model)?;
                        Ok(TrialRecord {
                            axis_value: value,
                            model,
                            trial,
                            mse,
                            dtf,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for &model in &config.models {
            let mse: Vec<f64> = per_trial
                .iter()
                .flatten()
                .filter(|r| r.model == model)
                .map(|r| r.mse)
                .collect();
            let dtf: Vec<f64> = per_trial
                .iter()
                .flatten()
                .filter(|r| r.model == model)
                .map(|r| r.dtf)
                .collect();
            summary.push(SummaryRow {
                axis_value: value,
                model,
                mse: SummaryStats::from_samples(&mse),
                dtf: SummaryStats::from_samples(&dtf),
            });
        }
        records.extend(per_trial.into_iter().flatten());
    }
    Ok(BenchResult {
        axis_name: axis_name.to_string(),
        records,
        summary,
    })
}

/// Writes one row per (grid point, trial, model).
pub fn write_results_csv(path: &Path, result: &BenchResult) -> Result<()> {
    let wrap = |source| OpfaError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    writeln!(out, "axis_name,axis_value,model,trial,mse,dtf").map_err(wrap)?;
    for r in &result.records {
        writeln!(
            out,
            "{},{:.11e},{},{},{:.11e},{:.11e}",
            result.axis_name,
            r.axis_value,
            r.model.label(),
            r.trial,
            r.mse,
            r.dtf
        )
        .map_err(wrap)?;
    }
    Ok(())
}

/// Writes one row per (grid point, model) with means and 95% half-widths.
pub fn write_summary_csv(path: &Path, result: &BenchResult) -> Result<()> {
    let wrap = |source| OpfaError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    writeln!(
        out,
        "axis_name,axis_value,model,trials,mse_mean,mse_ci95,dtf_mean,dtf_ci95"
    )
    .map_err(wrap)?;
    for r in &result.summary {
        writeln!(
            out,
            "{},{:.11e},{},{},{:.11e},{:.11e},{:.11e},{:.11e}",
            result.axis_name,
            r.axis_value,
            r.model.label(),
            r.mse.n,
            r.mse.mean,
            r.mse.ci_half_width,
            r.dtf.mean,
            r.dtf.ci_half_width
        )
        .map_err(wrap)?;
    }
    Ok(())
}

/// Renders one line chart per metric (mean ± 95% CI per model) and returns
/// the `(metric, svg)` pairs.
pub fn metric_charts(result: &BenchResult) -> Result<Vec<(&'static str, String)>> {
    let models: Vec<BenchModel> = {
        let mut seen = Vec::new();
        for r in &result.summary {
            if !seen.contains(&r.model) {
                seen.push(r.model);
            }
        }
        seen
    };
    let chart = |metric: &str, pick: fn(&SummaryRow) -> SummaryStats| {
        let series: Vec<Series> = models
            .iter()
            .enumerate()
            .map(|(i, &m)| Series {
                label: m.label().to_string(),
                color: palette(i).to_string(),
                points: result
                    .summary
                    .iter()
                    .filter(|r| r.model == m)
                    .map(|r| {
                        let s = pick(r);
                        (r.axis_value, s.mean, s.ci_half_width)
                    })
                    .collect(),
            })
            .collect();
        line_chart(
            &format!("{metric} vs {}", result.axis_name),
            &result.axis_name,
            metric,
            &series,
        )
    };
    Ok(vec![
        ("mse", chart("mse", |r| r.mse)?),
        ("dtf", chart("dtf", |r| r.dtf)?),
    ])
}
