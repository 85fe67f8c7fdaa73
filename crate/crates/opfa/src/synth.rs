//! Synthetic data generator with known ground truth, plus evaluation metrics
//! against that truth.
//!
//! The generated model is the windowed embedding: factors live on an `n_F`-row
//! canvas, each subject shifts them circularly by its delay vector, and the
//! data observes `n` consecutive canvas rows starting at `window_start`. With
//! `n_F = window_start + n + d_max` (the default) shifted content never wraps
//! back into the window; setting `n_f = n` with `window_start = 0` gives the
//! fully periodic special case.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::error::{OpfaError, Result};
use crate::fit::OpfaFit;
use crate::shift::{build_shifted_factors, window_restrict, DelayVector, FactorMatrix, Window};

/// Factor shape vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dictionary {
    /// Gaussian bumps (transient peak motifs), one per factor.
    Bump,
    /// Smoothed steps, alternating up-regulation and down-regulation motifs.
    SigmoidUpdown,
}

impl Default for Dictionary {
    fn default() -> Self {
        Dictionary::Bump
    }
}

/// Settings for the synthetic generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: usize,
    /// Observed time points per subject.
    pub n: usize,
    /// Variables per subject.
    pub p: usize,
    /// Number of factors.
    pub f: usize,
    /// Target variance of the integer delays.
    pub sigma_d_sq: f64,
    /// Hard cap on generated delays. Defaults to the smallest cap the delay
    /// draw needs, `⌈√(12 σ_d² + 1)⌉ − 1`; a lower value clips the draws.
    #[serde(default)]
    pub d_max: Option<usize>,
    /// Factor canvas length; defaults to `window_start + n + d_max`.
    #[serde(default)]
    pub n_f: Option<usize>,
    /// First canvas row the data observes.
    #[serde(default)]
    pub window_start: usize,
    /// Entrywise noise variance σ_ε².
    #[serde(default)]
    pub sigma_eps_sq: f64,
    /// Optional target signal-to-noise ratio in dB; when set it overrides
    /// `sigma_eps_sq` by resolving the noise level against the clean signal.
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Fraction of score cells that are active (shared across subjects).
    pub sparsity: f64,
    #[serde(default)]
    pub dictionary: Dictionary,
    pub seed: u64,
}

impl SynthConfig {
    /// Largest delay the draw can produce after clipping.
    pub fn delay_cap(&self) -> usize {
        let natural = natural_delay_cap(self.sigma_d_sq);
        match self.d_max {
            Some(cap) => natural.min(cap),
            None => natural,
        }
    }

    /// Canvas length actually used.
    pub fn canvas_rows(&self) -> usize {
        self.n_f
            .unwrap_or(self.window_start + self.n + self.delay_cap())
    }

    pub fn window(&self) -> Window {
        Window::new(self.window_start, self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(OpfaError::InvalidInput("need at least one subject".into()));
        }
        if self.n < 2 || self.p == 0 || self.f == 0 {
            return Err(OpfaError::InvalidInput(
                "need n ≥ 2 time points, p ≥ 1 variables and f ≥ 1 factors".into(),
            ));
        }
        if !self.sigma_d_sq.is_finite() || self.sigma_d_sq < 0.0 {
            return Err(OpfaError::InvalidInput(
                "delay variance must be finite and nonnegative".into(),
            ));
        }
        if !self.sparsity.is_finite() || self.sparsity <= 0.0 || self.sparsity > 1.0 {
            return Err(OpfaError::InvalidInput(
                "sparsity must lie in (0, 1]".into(),
            ));
        }
        if !self.sigma_eps_sq.is_finite() || self.sigma_eps_sq < 0.0 {
            return Err(OpfaError::InvalidInput(
                "noise variance must be finite and nonnegative".into(),
            ));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(OpfaError::InvalidInput("target SNR must be finite".into()));
            }
        }
        let n_f = self.canvas_rows();
        if self.window_start + self.n > n_f {
            return Err(OpfaError::InvalidInput(format!(
                "window [{}, {}) does not fit in the {n_f}-row canvas",
                self.window_start,
                self.window_start + self.n
            )));
        }
        if self.delay_cap() >= n_f {
            return Err(OpfaError::InvalidInput(format!(
                "delays up to {} do not fit the {n_f}-row canvas",
                self.delay_cap()
            )));
        }
        Ok(())
    }
}

/// A generated dataset together with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub data: ObservationSet,
    /// Noise-free observations `D_s`.
    pub clean: Vec<Array2<f64>>,
    pub factors: FactorMatrix,
    pub scores: Vec<Array2<f64>>,
    pub delays: Vec<DelayVector>,
    /// Largest delay the draw could have produced (a valid fit `d_max`).
    pub d_max: usize,
    pub window: Window,
    /// Noise standard deviation actually applied.
    pub sigma: f64,
    /// Realized signal-to-noise ratio in dB (`+∞` when noiseless).
    pub snr_db: f64,
    pub config: SynthConfig,
}

/// Delay cap implied by a target variance: delays are floors of uniform draws
/// on `[0, b)` with `b = √(12 σ² + 1)`, so they never exceed `⌈b⌉ − 1`. When
/// `b` is an integer the floor is uniform on `{0, …, b−1}` with variance
/// exactly `σ²`; at `σ² = 0` every delay is zero.
fn natural_delay_cap(sigma_d_sq: f64) -> usize {
    let b = (12.0 * sigma_d_sq + 1.0).sqrt();
    (b.ceil() as usize).saturating_sub(1)
}

/// Deterministic dictionary: factor `i` is centered at
/// `window_start + (i+1)·n/(f+1)` with width `n/8` and a unit-norm column.
/// Step shapes are supported on `[0, window_start + n)` only, so on a canvas
/// with slack rows their shifted copies never wrap back into the window.
fn dictionary_factors(config: &SynthConfig) -> FactorMatrix {
    let (n, f, ws) = (config.n, config.f, config.window_start);
    let n_f = config.canvas_rows();
    let width = n as f64 / 8.0;
    let mut raw = Array2::zeros((n_f, f));
    for i in 0..f {
        let center = ws as f64 + (i + 1) as f64 * n as f64 / (f + 1) as f64;
        for r in 0..n_f {
            let z = (r as f64 - center) / width;
            raw[(r, i)] = match config.dictionary {
                Dictionary::Bump => (-0.5 * z * z).exp(),
                Dictionary::SigmoidUpdown => {
                    if r >= ws + n {
                        0.0
                    } else if i % 2 == 0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        1.0 / (1.0 + z.exp())
                    }
                }
            };
        }
        let norm = (0..n_f)
            .map(|r| raw[(r, i)] * raw[(r, i)])
            .sum::<f64>()
            .sqrt();
        for r in 0..n_f {
            raw[(r, i)] /= norm;
        }
    }
    FactorMatrix::new(raw, 1e3).expect("dictionary factors are feasible")
}

fn generate_with_sigma(config: &SynthConfig, sigma: f64) -> Result<SyntheticDataset> {
    let (s_count, p, f) = (config.subjects, config.p, config.f);
    let d_cap = config.delay_cap();
    let b = (12.0 * config.sigma_d_sq + 1.0).sqrt();
    let window = config.window();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Draw order is fixed: delays, then the shared sparsity pattern, then
    // score values, then (last) noise — so the structure is identical across
    // noise levels at the same seed.
    let mut delays = Vec::with_capacity(s_count);
    for _ in 0..s_count {
        let mut d: Vec<usize> = (0..f)
            .map(|_| {
                let t: f64 = rng.gen_range(0.0..b);
                (t.floor() as usize).min(d_cap)
            })
            .collect();
        d.sort_unstable();
        delays.push(DelayVector::new(d, d_cap)?);
    }

    let k_active = ((config.sparsity * (f * p) as f64).round() as usize).max(1);
    let mut cells: Vec<usize> = (0..f * p).collect();
    for i in 0..k_active {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    let mut active = vec![false; f * p];
    for &c in cells.iter().take(k_active) {
        active[c] = true;
    }

    let mut scores = Vec::with_capacity(s_count);
    for _ in 0..s_count {
        let mut a = Array2::zeros((f, p));
        for i in 0..f {
            for j in 0..p {
                if active[i * p + j] {
                    let z: f64 = rng.sample(StandardNormal);
                    a[(i, j)] = z.abs();
                }
            }
        }
        scores.push(a);
    }

    let factors = dictionary_factors(config);
    let mut clean = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let shifted = build_shifted_factors(&factors, &delays[s])?;
        clean.push(window_restrict(shifted.view(), window)?.dot(&scores[s]));
    }

    let matrices: Vec<Array2<f64>> = if sigma > 0.0 {
        clean
            .iter()
            .map(|d| {
                let mut x = d.clone();
                for v in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sigma * z;
                }
                x
            })
            .collect()
    } else {
        clean.clone()
    };

    let ids = (0..s_count).map(|s| format!("s{s}")).collect();
    let data = ObservationSet::new(matrices, None, ids)?;
    let snr = snr_db(&clean, sigma);

    Ok(SyntheticDataset {
        data,
        clean,
        factors,
        scores,
        delays,
        d_max: d_cap,
        window,
        sigma,
        snr_db: snr,
        config: config.clone(),
    })
}

/// Generates a dataset. With a target SNR, the clean signal is generated
/// first (noiselessly, same seed) to resolve the noise level, then the final
/// dataset is drawn; because noise is drawn last, the structure is identical.
pub fn generate(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let sigma = match config.snr_db {
        Some(snr) => {
            let noiseless = generate_with_sigma(config, 0.0)?;
            let mean_energy = noiseless
                .clean
                .iter()
                .map(|d| d.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / config.subjects as f64;
            let sigma_sq =
                mean_energy / (config.n as f64 * config.p as f64 * 10f64.powf(snr / 10.0));
            sigma_sq.sqrt()
        }
        None => config.sigma_eps_sq.sqrt(),
    };
    generate_with_sigma(config, sigma)
}

/// Realized signal-to-noise ratio in dB for a noise level against clean
/// signals: `10·log10(mean_s ‖D_s‖² / (n·p·σ²))`, `+∞` when `σ = 0`.
pub fn snr_db(clean: &[Array2<f64>], sigma: f64) -> f64 {
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    let (n, p) = clean[0].dim();
    let mean_energy = clean
        .iter()
        .map(|d| d.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / clean.len() as f64;
    10.0 * (mean_energy / (n as f64 * p as f64 * sigma * sigma)).log10()
}

/// Mean squared reconstruction error against the clean signals:
/// `(1/S) Σ_s ‖D_s − D̂_s‖²`.
pub fn mean_squared_error(clean: &[Array2<f64>], fit: &OpfaFit) -> Result<f64> {
    if clean.len() != fit.delays.len() {
        return Err(OpfaError::ShapeMismatch(format!(
            "{} clean matrices vs {} fitted subjects",
            clean.len(),
            fit.delays.len()
        )));
    }
    let mut total = 0.0;
    for (s, d) in clean.iter().enumerate() {
        let pred = fit.predict(s)?;
        if pred.dim() != d.dim() {
            return Err(OpfaError::ShapeMismatch("prediction shape".into()));
        }
        total += d
            .iter()
            .zip(pred.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / clean.len() as f64)
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(OpfaError::InvalidInput(
            "cosine similarity of an all-zero factor column is undefined".into(),
        ));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Dictionary recovery distance: `1 − (1/f)·max_π Σ_i cos(truth_i, est_π(i))`
/// over factor permutations `π`. Zero means perfect recovery up to column
/// order and scale; supports up to 8 factors.
pub fn dictionary_distance(truth: &FactorMatrix, estimate: &FactorMatrix) -> Result<f64> {
    let tv = truth.values();
    let ev = estimate.values();
    if tv.dim() != ev.dim() {
        return Err(OpfaError::ShapeMismatch(format!(
            "factor shapes {:?} vs {:?}",
            tv.dim(),
            ev.dim()
        )));
    }
    let f = truth.n_factors();
    if f > 8 {
        return Err(OpfaError::InvalidInput(
            "permutation matching supports at most 8 factors".into(),
        ));
    }
    let mut sims = Array2::zeros((f, f));
    for i in 0..f {
        let ti = tv.column(i).to_owned();
        for j in 0..f {
            sims[(i, j)] = cosine(&ti, &ev.column(j).to_owned())?;
        }
    }
    // exhaustive assignment over f! permutations
    fn best(sims: &Array2<f64>, i: usize, used: &mut [bool]) -> f64 {
        let f = sims.nrows();
        if i == f {
            return 0.0;
        }
        let mut top = f64::NEG_INFINITY;
        for j in 0..f {
            if used[j] {
                continue;
            }
            used[j] = true;
            let v = sims[(i, j)] + best(sims, i + 1, used);
            used[j] = false;
            if v > top {
                top = v;
            }
        }
        top
    }
    let mut used = vec![false; f];
    Ok(1.0 - best(&sims, 0, &mut used) / f as f64)
}

/// Absolute occurrence times of one factor's feature of interest, one value
/// per subject: the feature sits at canvas row `t_i` of the unshifted factor,
/// so subject `s` observes it at `(d^s + t_i) mod n_F − window_start` on the
/// common clock.
pub fn absolute_onset_times(
    delays: &[DelayVector],
    t_i: usize,
    factor: usize,
    n_f: usize,
    window_start: usize,
) -> Result<Vec<f64>> {
    if t_i >= n_f {
        return Err(OpfaError::InvalidInput(format!(
            "feature time {t_i} is outside the {n_f}-row canvas"
        )));
    }
    delays
        .iter()
        .map(|d| {
            if factor >= d.len() {
                return Err(OpfaError::InvalidInput(format!(
                    "factor index {factor} out of range for {} factors",
                    d.len()
                )));
            }
            Ok(((d.delays()[factor] + t_i) % n_f) as f64 - window_start as f64)
        })
        .collect()
}
