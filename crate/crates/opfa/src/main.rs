//! Command-line interface: fit, cross-validate, simulate, benchmark, align.
//!
//! Exit codes: 0 on success, 1 on any usage or input error, 2 when a fit ran
//! out of iterations before converging (the fit artifacts are still written).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ndarray::Array2;

use opfa::cv::{cross_validate, write_cv_table, CvConfig};
use opfa::data::{
    column_sum_normalize, load_dataset, load_fit, write_dataset, write_fit, write_matrix_csv,
    ModelConfig, ObservationSet, Variant,
};
use opfa::error::OpfaError;
use opfa::fit::fit_opfa;
use opfa::sweep::{metric_charts, run_sweep, write_results_csv, write_summary_csv, BenchConfig};
use opfa::synth::{absolute_onset_times, generate, Dictionary, SynthConfig};

#[derive(Parser)]
#[command(
    name = "opfa",
    version,
    about = "Order-preserving factor analysis for misaligned time-course data"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a dataset and write the result as a directory.
    Fit(FitArgs),
    /// Grid-search factor count and penalties by entrywise holdout.
    Cv(CvArgs),
    /// Generate a synthetic dataset with known ground truth.
    Simulate(SimulateArgs),
    /// Monte-Carlo sweep comparing models across delay variance or SNR.
    Bench(BenchArgs),
    /// Report each subject's absolute occurrence time of a factor feature.
    Align(AlignArgs),
}

#[derive(clap::Args)]
struct ModelFlags {
    /// Number of factors.
    #[arg(long)]
    factors: Option<usize>,
    /// Largest admissible delay.
    #[arg(long)]
    d_max: Option<usize>,
    /// Group-sparsity weight on scores.
    #[arg(long)]
    lambda: Option<f64>,
    /// Smoothness weight on factors.
    #[arg(long)]
    beta: Option<f64>,
    /// Factor length (defaults to n + d_max).
    #[arg(long)]
    n_f: Option<usize>,
    /// First factor row covered by the data window.
    #[arg(long)]
    window_start: Option<usize>,
    /// "opfa" (per-subject scores) or "opfa-c" (shared scores).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Frobenius-norm budget for the factor matrix.
    #[arg(long)]
    frobenius_bound: Option<f64>,
    /// Number of initializations per fit.
    #[arg(long)]
    restarts: Option<usize>,
    /// Cap on outer coordinate-descent rounds.
    #[arg(long)]
    max_outer_iters: Option<usize>,
    /// Outer stopping tolerance (relative to the initial objective).
    #[arg(long)]
    outer_tol: Option<f64>,
    /// Inner solver tolerance.
    #[arg(long)]
    inner_tol: Option<f64>,
    /// Root random seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelFlags {
    fn apply(&self, config: &mut ModelConfig) {
        if let Some(v) = self.factors {
            config.f = v;
        }
        if let Some(v) = self.d_max {
            config.d_max = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.beta {
            config.beta = v;
        }
        if let Some(v) = self.n_f {
            config.n_f = Some(v);
        }
        if let Some(v) = self.window_start {
            config.window_start = v;
        }
        if let Some(v) = self.variant {
            config.variant = v;
        }
        if let Some(v) = self.frobenius_bound {
            config.frobenius_bound = v;
        }
        if let Some(v) = self.restarts {
            config.restarts = v;
        }
        if let Some(v) = self.max_outer_iters {
            config.max_outer_iters = v;
        }
        if let Some(v) = self.outer_tol {
            config.outer_tol = v;
        }
        if let Some(v) = self.inner_tol {
            config.inner_tol = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
    }

    /// Builds a config from scratch when no config file was given; the four
    /// core settings have no sensible defaults and must be present.
    fn require_core(&self) -> Result<ModelConfig, OpfaError> {
        match (self.factors, self.d_max, self.lambda, self.beta) {
            (Some(f), Some(d), Some(l), Some(b)) => {
                let mut config = ModelConfig::new(f, d, l, b);
                self.apply(&mut config);
                Ok(config)
            }
            _ => Err(OpfaError::InvalidInput(
                "without --config, the flags --factors, --d-max, --lambda and --beta \
                 are all required"
                    .into(),
            )),
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, OpfaError> {
    s.parse()
}

fn parse_dictionary(s: &str) -> Result<Dictionary, OpfaError> {
    match s {
        "bump" => Ok(Dictionary::Bump),
        "sigmoid-updown" | "sigmoid_updown" => Ok(Dictionary::SigmoidUpdown),
        other => Err(OpfaError::InvalidInput(format!(
            "unknown dictionary {other:?}; expected \"bump\" or \"sigmoid-updown\""
        ))),
    }
}

#[derive(clap::Args)]
struct FitArgs {
    /// Dataset manifest (JSON file, or a directory containing manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Model settings as JSON; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the fitted model.
    #[arg(long)]
    out: PathBuf,
    /// Normalize each subject's columns to unit sum before fitting.
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(clap::Args)]
struct CvArgs {
    /// Dataset manifest (JSON file, or a directory containing manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Base model settings as JSON; individual flags override its fields.
    #[arg(long)]
    config: PathBuf,
    /// Grid settings as JSON: f_values, lambda_grid, beta_grid,
    /// holdout_fraction (default 0.1), seed.
    #[arg(long)]
    grid: PathBuf,
    /// Output directory for cv_table.csv and the fitted models.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of entries to hold out (overrides the grid file).
    #[arg(long)]
    holdout_fraction: Option<f64>,
    /// Seed for the holdout draw (overrides the grid file).
    #[arg(long)]
    cv_seed: Option<u64>,
    /// Normalize each subject's columns to unit sum before fitting.
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Generator settings as JSON; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (dataset at the top level, ground truth in truth/).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    /// Time points per subject.
    #[arg(long)]
    n: Option<usize>,
    /// Variables per subject.
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    factors: Option<usize>,
    /// Variance of the integer delays.
    #[arg(long)]
    sigma_d_sq: Option<f64>,
    /// Hard cap on generated delays (default: what the draw needs).
    #[arg(long)]
    d_max: Option<usize>,
    /// Factor canvas length (default: window_start + n + d_max).
    #[arg(long)]
    n_f: Option<usize>,
    /// First canvas row the data observes.
    #[arg(long)]
    window_start: Option<usize>,
    /// Entrywise noise variance.
    #[arg(long)]
    sigma_eps_sq: Option<f64>,
    /// Target signal-to-noise ratio in dB (overrides --sigma-eps-sq).
    #[arg(long)]
    snr_db: Option<f64>,
    /// Fraction of active score cells.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Factor shapes: "bump" or "sigmoid-updown".
    #[arg(long, value_parser = parse_dictionary)]
    dictionary: Option<Dictionary>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Sweep description as JSON (generator shape, axis, models, trials, fit).
    #[arg(long)]
    sweep: PathBuf,
    /// Output directory for results.csv, summary.csv and SVG charts.
    #[arg(long)]
    out: PathBuf,
    /// Independent datasets per grid point (overrides the sweep file).
    #[arg(long)]
    trials: Option<usize>,
    /// Generator seed (overrides the sweep file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct AlignArgs {
    /// Directory holding a fit written by `opfa fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Canvas row of the feature of interest within the unshifted factor.
    #[arg(long)]
    t_i: usize,
    /// Factor index to report (repeatable; default: all factors).
    #[arg(long = "factor")]
    factors: Vec<usize>,
    /// Output CSV path: one row per subject, one column per chosen factor.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version land here too; only real usage errors fail
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .ok();
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Fit(args) => run_fit(args),
        Command::Cv(args) => run_cv(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Bench(args) => run_bench(args),
        Command::Align(args) => run_align(args),
    }
}

/// Accepts either the manifest file itself or the directory holding it.
fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, OpfaError> {
    let text =
        fs::read_to_string(path).map_err(|e| OpfaError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| OpfaError::parse(path.display().to_string(), e.to_string()))
}

fn load_data(path: &Path, normalize: bool) -> anyhow::Result<ObservationSet> {
    let mut data = load_dataset(&resolve_manifest(path))?;
    if normalize {
        column_sum_normalize(&mut data)?;
    }
    Ok(data)
}

fn run_fit(args: FitArgs) -> anyhow::Result<u8> {
    let data = load_data(&args.data, args.normalize)?;
    let config = match &args.config {
        Some(path) => {
            let mut c: ModelConfig = read_json(path)?;
            args.model.apply(&mut c);
            c
        }
        None => args.model.require_core()?,
    };
    let fit = fit_opfa(&data, &config)?;
    write_fit(&args.out, &fit)?;
    let last = *fit.objective_trace.last().unwrap();
    println!(
        "fitted {} factors ({}) to {} subjects of {}x{}",
        config.f,
        config.variant,
        data.n_subjects(),
        data.n(),
        data.p()
    );
    println!(
        "objective {last:.6e} after {} iterations ({})",
        fit.iterations,
        if fit.converged {
            "converged"
        } else {
            "iteration cap reached"
        }
    );
    println!("wrote {}", args.out.display());
    Ok(if fit.converged { 0 } else { 2 })
}

fn run_cv(args: CvArgs) -> anyhow::Result<u8> {
    let data = load_data(&args.data, args.normalize)?;
    let mut base: ModelConfig = read_json(&args.config)?;
    args.model.apply(&mut base);
    let mut grid: CvConfig = read_json(&args.grid)?;
    if let Some(v) = args.holdout_fraction {
        grid.holdout_fraction = v;
    }
    if let Some(v) = args.cv_seed {
        grid.seed = v;
    }
    let result = cross_validate(&data, &base, &grid)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_cv_table(&args.out.join("cv_table.csv"), &result.rows)?;

    // the model fitted on the training split at the selected grid point …
    write_fit(&args.out.join("selected_training"), &result.selected_fit)?;

    // … and the refit on all data with the selected hyperparameters
    let best = result.selected_row().clone();
    let mut chosen = base.clone();
    chosen.f = best.f;
    chosen.lambda = best.lambda;
    chosen.beta = best.beta;
    let refit = fit_opfa(&data, &chosen)?;
    write_fit(&args.out.join("refit"), &refit)?;

    eprintln!(
        "evaluated {} grid points; selected f = {}, lambda = {}, beta = {} \
         (validation error {:.6e}); wrote {}",
        result.rows.len(),
        best.f,
        best.lambda,
        best.beta,
        best.cv_error,
        args.out.display()
    );
    // machine-readable result: the selected row alone on standard output
    println!("{}", serde_json::to_string(&best)?);
    Ok(if refit.converged { 0 } else { 2 })
}

fn run_simulate(args: SimulateArgs) -> anyhow::Result<u8> {
    let mut config = match &args.config {
        Some(path) => read_json::<SynthConfig>(path)?,
        None => SynthConfig {
            subjects: 8,
            n: 20,
            p: 30,
            f: 2,
            sigma_d_sq: 2.0,
            d_max: None,
            n_f: None,
            window_start: 0,
            sigma_eps_sq: 0.0,
            snr_db: None,
            sparsity: 0.5,
            dictionary: Dictionary::Bump,
            seed: 0,
        },
    };
    if let Some(v) = args.subjects {
        config.subjects = v;
    }
    if let Some(v) = args.n {
        config.n = v;
    }
    if let Some(v) = args.p {
        config.p = v;
    }
    if let Some(v) = args.factors {
        config.f = v;
    }
    if let Some(v) = args.sigma_d_sq {
        config.sigma_d_sq = v;
    }
    if let Some(v) = args.d_max {
        config.d_max = Some(v);
    }
    if let Some(v) = args.n_f {
        config.n_f = Some(v);
    }
    if let Some(v) = args.window_start {
        config.window_start = v;
    }
    if let Some(v) = args.sigma_eps_sq {
        config.sigma_eps_sq = v;
    }
    if let Some(v) = args.snr_db {
        config.snr_db = Some(v);
    }
    if let Some(v) = args.sparsity {
        config.sparsity = v;
    }
    if let Some(v) = args.dictionary {
        config.dictionary = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let dataset = generate(&config)?;
    write_dataset(&args.out, &dataset.data)?;

    let truth_dir = args.out.join("truth");
    fs::create_dir_all(&truth_dir)
        .with_context(|| format!("creating {}", truth_dir.display()))?;
    write_matrix_csv(&truth_dir.join("factors.csv"), dataset.factors.values())?;
    let mut delay_text = String::new();
    for d in &dataset.delays {
        let line: Vec<String> = d.delays().iter().map(|v| v.to_string()).collect();
        delay_text.push_str(&line.join(","));
        delay_text.push('\n');
    }
    fs::write(truth_dir.join("delays.csv"), delay_text)?;
    for (s, id) in dataset.data.subject_ids().iter().enumerate() {
        write_matrix_csv(&truth_dir.join(format!("scores_{id}.csv")), &dataset.scores[s])?;
    }
    let meta = serde_json::json!({
        "sigma": dataset.sigma,
        "snr_db": if dataset.snr_db.is_finite() { Some(dataset.snr_db) } else { None },
        "d_max": dataset.d_max,
        "n_f": dataset.factors.n_rows(),
        "window_start": dataset.window.start,
        "config": dataset.config,
    });
    fs::write(
        truth_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;

    println!(
        "wrote {} subjects of {}x{} to {} (canvas {} rows, largest delay {}, noise sigma {:.4e})",
        config.subjects,
        config.n,
        config.p,
        args.out.display(),
        dataset.factors.n_rows(),
        dataset.d_max,
        dataset.sigma
    );
    if dataset.snr_db.is_finite() {
        println!("realized SNR {:.2} dB", dataset.snr_db);
    }
    Ok(0)
}

fn run_bench(args: BenchArgs) -> anyhow::Result<u8> {
    let mut config: BenchConfig = read_json(&args.sweep)?;
    if let Some(v) = args.trials {
        config.trials = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let result = run_sweep(&config)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_results_csv(&args.out.join("results.csv"), &result)?;
    write_summary_csv(&args.out.join("summary.csv"), &result)?;
    for (metric, svg) in metric_charts(&result)? {
        fs::write(args.out.join(format!("{metric}.svg")), svg)?;
    }

    println!(
        "{:>12} {:>8} {:>22} {:>22}",
        result.axis_name, "model", "mse", "dtf"
    );
    for row in &result.summary {
        println!(
            "{:>12} {:>8} {:>14.4e} ±{:>6.1e} {:>14.4e} ±{:>6.1e}",
            row.axis_value,
            row.model.label(),
            row.mse.mean,
            row.mse.ci_half_width,
            row.dtf.mean,
            row.dtf.ci_half_width
        );
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn run_align(args: AlignArgs) -> anyhow::Result<u8> {
    let fit = load_fit(&args.fit)?;
    let chosen: Vec<usize> = if args.factors.is_empty() {
        (0..fit.config.f).collect()
    } else {
        args.factors.clone()
    };
    let n_f = fit.factors.n_rows();
    let s_count = fit.delays.len();
    let mut table = Array2::zeros((s_count, chosen.len()));
    for (k, &factor) in chosen.iter().enumerate() {
        let col = absolute_onset_times(
            &fit.delays,
            args.t_i,
            factor,
            n_f,
            fit.config.window_start,
        )?;
        for (s, v) in col.iter().enumerate() {
            table[(s, k)] = *v;
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    write_matrix_csv(&args.out, &table)?;
    println!(
        "wrote occurrence times at canvas row {} for {} subjects × {} factors to {}",
        args.t_i,
        s_count,
        chosen.len(),
        args.out.display()
    );
    Ok(0)
}
