//! Datasets, model configuration and file formats.
//!
//! A dataset is a JSON manifest naming per-subject CSV matrices (time ×
//! variable, no header) plus optional 0/1 mask CSVs for partially observed
//! entries. Fits are written back as a directory of CSVs plus a `fit.json`
//! manifest, with floats serialized to 12 significant digits.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{OpfaError, Result};
use crate::fit::OpfaFit;
use crate::shift::{DelayVector, FactorMatrix, Window};

/// Whether each subject gets its own score matrix or all subjects share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Opfa,
    OpfaC,
}

impl Default for Variant {
    fn default() -> Self {
        Variant::Opfa
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Opfa => write!(f, "opfa"),
            Variant::OpfaC => write!(f, "opfa-c"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = OpfaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opfa" => Ok(Variant::Opfa),
            "opfa-c" | "opfac" | "opfa_c" => Ok(Variant::OpfaC),
            other => Err(OpfaError::InvalidInput(format!(
                "unknown variant '{other}' (expected 'opfa' or 'opfa-c')"
            ))),
        }
    }
}

fn default_frobenius_bound() -> f64 {
    1e3
}
fn default_max_outer_iters() -> usize {
    200
}
fn default_outer_tol() -> f64 {
    1e-6
}
fn default_inner_tol() -> f64 {
    1e-9
}
fn default_restarts() -> usize {
    4
}

/// Everything a fit needs besides the data itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of factors.
    pub f: usize,
    /// Largest admissible delay.
    #[serde(default)]
    pub d_max: usize,
    /// Group-lasso weight on scores.
    #[serde(default)]
    pub lambda: f64,
    /// Smoothness weight on factors.
    #[serde(default)]
    pub beta: f64,
    /// Factor length `n_F`; defaults to `n + d_max`.
    #[serde(default)]
    pub n_f: Option<usize>,
    /// First factor row the data observes.
    #[serde(default)]
    pub window_start: usize,
    /// Frobenius-norm budget for the factor matrix. The scale ambiguity
    /// between factors and scores makes its exact value immaterial as long as
    /// it doesn't bind, so the default is generous.
    #[serde(default = "default_frobenius_bound")]
    pub frobenius_bound: f64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_max_outer_iters")]
    pub max_outer_iters: usize,
    /// Outer stopping threshold, relative to the initial objective.
    #[serde(default = "default_outer_tol")]
    pub outer_tol: f64,
    /// Relative objective-decrease tolerance of the inner solvers.
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    /// Number of initializations (first clustering-based, rest random).
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Root seed; restart r derives its own stream from `seed + r`.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(f: usize, d_max: usize, lambda: f64, beta: f64) -> Self {
        ModelConfig {
            f,
            d_max,
            lambda,
            beta,
            n_f: None,
            window_start: 0,
            frobenius_bound: default_frobenius_bound(),
            variant: Variant::Opfa,
            max_outer_iters: default_max_outer_iters(),
            outer_tol: default_outer_tol(),
            inner_tol: default_inner_tol(),
            restarts: default_restarts(),
            seed: 0,
        }
    }

    /// Factor length for data with `n` observed rows.
    pub fn factor_rows(&self, n: usize) -> usize {
        self.n_f.unwrap_or(n + self.d_max)
    }

    /// Observation window for data with `n` observed rows.
    pub fn window(&self, n: usize) -> Window {
        Window::new(self.window_start, n)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.f == 0 {
            return Err(OpfaError::InvalidInput("f must be at least 1".into()));
        }
        let n_f = self.factor_rows(n);
        if self.window_start + n > n_f {
            return Err(OpfaError::InvalidInput(format!(
                "window [{}, {}) does not fit in n_F = {}",
                self.window_start,
                self.window_start + n,
                n_f
            )));
        }
        if self.d_max >= n_f {
            return Err(OpfaError::InvalidInput(format!(
                "d_max = {} must be smaller than n_F = {}",
                self.d_max, n_f
            )));
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return Err(OpfaError::InvalidInput(
                "penalty weights must be nonnegative".into(),
            ));
        }
        if !(self.frobenius_bound > 0.0) {
            return Err(OpfaError::InvalidInput(
                "frobenius_bound must be positive".into(),
            ));
        }
        if !(self.outer_tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(OpfaError::InvalidInput(
                "tolerances must be positive".into(),
            ));
        }
        if self.restarts == 0 || self.max_outer_iters == 0 {
            return Err(OpfaError::InvalidInput(
                "restarts and max_outer_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A collection of subject matrices over a common time grid and variable set.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    matrices: Vec<Array2<f64>>,
    masks: Option<Vec<Array2<f64>>>,
    subject_ids: Vec<String>,
    time_points: Vec<f64>,
    variable_ids: Vec<String>,
}

impl ObservationSet {
    pub fn new(
        matrices: Vec<Array2<f64>>,
        masks: Option<Vec<Array2<f64>>>,
        subject_ids: Vec<String>,
    ) -> Result<Self> {
        let s = matrices.len();
        if s == 0 {
            return Err(OpfaError::InvalidInput("no subjects".into()));
        }
        let (n, p) = matrices[0].dim();
        if n < 2 || p < 1 {
            return Err(OpfaError::InvalidInput(format!(
                "need at least 2 time points and 1 variable, got {n}×{p}"
            )));
        }
        if matrices.iter().any(|m| m.dim() != (n, p)) {
            return Err(OpfaError::ShapeMismatch(
                "subject matrices differ in shape".into(),
            ));
        }
        if matrices
            .iter()
            .any(|m| m.iter().any(|v| !v.is_finite()))
        {
            return Err(OpfaError::NonFinite("subject matrix".into()));
        }
        if subject_ids.len() != s {
            return Err(OpfaError::ShapeMismatch(format!(
                "{} subject ids for {} matrices",
                subject_ids.len(),
                s
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &subject_ids {
            if id.is_empty() || !seen.insert(id) {
                return Err(OpfaError::InvalidInput(format!(
                    "subject ids must be unique and nonempty, offending id '{id}'"
                )));
            }
        }
        if let Some(ms) = &masks {
            if ms.len() != s {
                return Err(OpfaError::ShapeMismatch(format!(
                    "{} masks for {} subjects",
                    ms.len(),
                    s
                )));
            }
            for (k, m) in ms.iter().enumerate() {
                if m.dim() != (n, p) {
                    return Err(OpfaError::ShapeMismatch(format!(
                        "mask {k} has shape {:?}, expected ({n}, {p})",
                        m.dim()
                    )));
                }
                if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(OpfaError::InvalidInput(format!(
                        "mask {k} has entries other than 0 and 1"
                    )));
                }
            }
        }
        let time_points = (0..n).map(|t| t as f64).collect();
        let variable_ids = (0..p).map(|j| format!("v{j}")).collect();
        Ok(ObservationSet {
            matrices,
            masks,
            subject_ids,
            time_points,
            variable_ids,
        })
    }

    pub fn with_time_points(mut self, time_points: Vec<f64>) -> Result<Self> {
        if time_points.len() != self.n() {
            return Err(OpfaError::ShapeMismatch(format!(
                "{} time points for {} rows",
                time_points.len(),
                self.n()
            )));
        }
        self.time_points = time_points;
        Ok(self)
    }

    pub fn with_variable_ids(mut self, variable_ids: Vec<String>) -> Result<Self> {
        if variable_ids.len() != self.p() {
            return Err(OpfaError::ShapeMismatch(format!(
                "{} variable ids for {} columns",
                variable_ids.len(),
                self.p()
            )));
        }
        self.variable_ids = variable_ids;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn p(&self) -> usize {
        self.matrices[0].ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.matrices
    }

    pub fn matrix(&self, s: usize) -> &Array2<f64> {
        &self.matrices[s]
    }

    /// Mask for subject `s`; `None` means fully observed.
    pub fn mask(&self, s: usize) -> Option<&Array2<f64>> {
        self.masks.as_ref().map(|ms| &ms[s])
    }

    pub fn masks(&self) -> Option<&[Array2<f64>]> {
        self.masks.as_deref()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn time_points(&self) -> &[f64] {
        &self.time_points
    }

    pub fn variable_ids(&self) -> &[String] {
        &self.variable_ids
    }

    /// Replaces the masks (used by cross-validation to hide holdout entries).
    pub fn with_masks(mut self, masks: Option<Vec<Array2<f64>>>) -> Result<Self> {
        let validated = ObservationSet::new(
            std::mem::take(&mut self.matrices),
            masks,
            std::mem::take(&mut self.subject_ids),
        )?;
        Ok(ObservationSet {
            time_points: self.time_points,
            variable_ids: self.variable_ids,
            ..validated
        })
    }
}

/// Divides every column of every subject matrix by its column sum, the usual
/// normalization for strictly positive abundance-style data.
pub fn column_sum_normalize(data: &mut ObservationSet) -> Result<()> {
    for (s, m) in data.matrices.iter().enumerate() {
        for j in 0..m.ncols() {
            let sum: f64 = m.column(j).sum();
            if !(sum > 0.0) {
                return Err(OpfaError::InvalidInput(format!(
                    "subject {} column {} has non-positive sum {}",
                    data.subject_ids[s], j, sum
                )));
            }
        }
    }
    for m in data.matrices.iter_mut() {
        for j in 0..m.ncols() {
            let sum: f64 = m.column(j).sum();
            m.column_mut(j).mapv_inplace(|v| v / sum);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV helpers (no headers, 12 significant digits)
// ---------------------------------------------------------------------------

fn format_float(v: f64) -> String {
    format!("{v:.11e}")
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| OpfaError::io(path.display().to_string(), e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text =
        fs::read_to_string(path).map_err(|e| OpfaError::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (c, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                OpfaError::parse(
                    path.display().to_string(),
                    format!("row {r}, column {c}: '{}' is not a number", field.trim()),
                )
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(OpfaError::parse(
                    path.display().to_string(),
                    format!("row {r} has {} fields, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(OpfaError::parse(
            path.display().to_string(),
            "empty matrix",
        ));
    }
    let n = rows.len();
    let p = rows[0].len();
    Ok(Array2::from_shape_vec((n, p), rows.into_iter().flatten().collect()).unwrap())
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SubjectEntry {
    id: String,
    matrix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    n: usize,
    p: usize,
    #[serde(rename = "S")]
    s: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_points: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variable_ids: Option<Vec<String>>,
    subjects: Vec<SubjectEntry>,
}

/// Loads a dataset from a JSON manifest; CSV paths are resolved relative to
/// the manifest's directory. Subjects without a mask file are fully observed.
pub fn load_dataset(manifest_path: &Path) -> Result<ObservationSet> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| OpfaError::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| OpfaError::parse(manifest_path.display().to_string(), e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    if manifest.subjects.len() != manifest.s {
        return Err(OpfaError::parse(
            manifest_path.display().to_string(),
            format!(
                "manifest declares S = {} but lists {} subjects",
                manifest.s,
                manifest.subjects.len()
            ),
        ));
    }

    let mut matrices = Vec::with_capacity(manifest.s);
    let mut masks: Vec<Option<Array2<f64>>> = Vec::with_capacity(manifest.s);
    let mut ids = Vec::with_capacity(manifest.s);
    for entry in &manifest.subjects {
        let m = read_matrix_csv(&dir.join(&entry.matrix))?;
        if m.dim() != (manifest.n, manifest.p) {
            return Err(OpfaError::ShapeMismatch(format!(
                "subject {}: matrix is {:?}, manifest says ({}, {})",
                entry.id,
                m.dim(),
                manifest.n,
                manifest.p
            )));
        }
        matrices.push(m);
        masks.push(match &entry.mask {
            Some(rel) => Some(read_matrix_csv(&dir.join(rel))?),
            None => None,
        });
        ids.push(entry.id.clone());
    }

    let any_mask = masks.iter().any(|m| m.is_some());
    let masks = if any_mask {
        Some(
            masks
                .into_iter()
                .map(|m| m.unwrap_or_else(|| Array2::ones((manifest.n, manifest.p))))
                .collect(),
        )
    } else {
        None
    };

    let mut data = ObservationSet::new(matrices, masks, ids)?;
    if let Some(tp) = manifest.time_points {
        data = data.with_time_points(tp)?;
    }
    if let Some(vi) = manifest.variable_ids {
        data = data.with_variable_ids(vi)?;
    }
    Ok(data)
}

/// Writes a dataset as `manifest.json` plus per-subject CSVs inside `dir`.
pub fn write_dataset(dir: &Path, data: &ObservationSet) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| OpfaError::io(dir.display().to_string(), e))?;
    let mut subjects = Vec::new();
    for (s, id) in data.subject_ids().iter().enumerate() {
        let matrix_name = format!("{id}.csv");
        write_matrix_csv(&dir.join(&matrix_name), data.matrix(s))?;
        let mask_name = match data.mask(s) {
            Some(mask) => {
                let name = format!("{id}_mask.csv");
                write_matrix_csv(&dir.join(&name), mask)?;
                Some(name)
            }
            None => None,
        };
        subjects.push(SubjectEntry {
            id: id.clone(),
            matrix: matrix_name,
            mask: mask_name,
        });
    }
    let manifest = DatasetManifest {
        n: data.n(),
        p: data.p(),
        s: data.n_subjects(),
        time_points: Some(data.time_points().to_vec()),
        variable_ids: Some(data.variable_ids().to_vec()),
        subjects,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    fs::write(&path, text).map_err(|e| OpfaError::io(path.display().to_string(), e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Fit directory
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct FitManifest {
    config: ModelConfig,
    subject_ids: Vec<String>,
    converged: bool,
    iterations: usize,
    n: usize,
    factors_file: String,
    delays_file: String,
    score_files: Vec<String>,
    objective_trace_file: String,
}

/// Writes a fit as a directory of CSVs plus `fit.json`.
///
/// Per-subject variants produce one `scores_<subject>.csv` per subject; the
/// common-scores variant produces a single `scores.csv`.
pub fn write_fit(dir: &Path, fit: &OpfaFit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OpfaError::io(dir.display().to_string(), e))?;
    write_matrix_csv(&dir.join("factors.csv"), fit.factors.values())?;

    let mut delay_text = String::new();
    for d in &fit.delays {
        let line: Vec<String> = d.delays().iter().map(|v| v.to_string()).collect();
        delay_text.push_str(&line.join(","));
        delay_text.push('\n');
    }
    let delays_path = dir.join("delays.csv");
    fs::write(&delays_path, delay_text)
        .map_err(|e| OpfaError::io(delays_path.display().to_string(), e))?;

    let score_files: Vec<String> = match fit.config.variant {
        Variant::Opfa => fit
            .subject_ids
            .iter()
            .map(|id| format!("scores_{id}.csv"))
            .collect(),
        Variant::OpfaC => vec!["scores.csv".to_string()],
    };
    for (file, scores) in score_files.iter().zip(fit.scores.iter()) {
        write_matrix_csv(&dir.join(file), scores)?;
    }

    let trace_path = dir.join("objective_trace.csv");
    let trace_text: String = fit
        .objective_trace
        .iter()
        .map(|&v| format!("{}\n", format_float(v)))
        .collect();
    fs::write(&trace_path, trace_text)
        .map_err(|e| OpfaError::io(trace_path.display().to_string(), e))?;

    let manifest = FitManifest {
        config: fit.config.clone(),
        subject_ids: fit.subject_ids.clone(),
        converged: fit.converged,
        iterations: fit.iterations,
        n: fit.n,
        factors_file: "factors.csv".into(),
        delays_file: "delays.csv".into(),
        score_files,
        objective_trace_file: "objective_trace.csv".into(),
    };
    let path = dir.join("fit.json");
    let text = serde_json::to_string_pretty(&manifest).expect("fit manifest serialization");
    fs::write(&path, text).map_err(|e| OpfaError::io(path.display().to_string(), e))
}

/// Reads back a fit directory written by [`write_fit`].
pub fn load_fit(dir: &Path) -> Result<OpfaFit> {
    let manifest_path = dir.join("fit.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| OpfaError::io(manifest_path.display().to_string(), e))?;
    let manifest: FitManifest = serde_json::from_str(&text)
        .map_err(|e| OpfaError::parse(manifest_path.display().to_string(), e.to_string()))?;

    let factors_raw = read_matrix_csv(&dir.join(&manifest.factors_file))?;
    let factors = FactorMatrix::new(factors_raw, manifest.config.frobenius_bound)?;

    let delays_path = dir.join(&manifest.delays_file);
    let delay_text = fs::read_to_string(&delays_path)
        .map_err(|e| OpfaError::io(delays_path.display().to_string(), e))?;
    let mut delays = Vec::new();
    for line in delay_text.lines().filter(|l| !l.trim().is_empty()) {
        let mut d = Vec::new();
        for field in line.split(',') {
            let v: usize = field.trim().parse().map_err(|_| {
                OpfaError::parse(
                    delays_path.display().to_string(),
                    format!("'{}' is not a delay", field.trim()),
                )
            })?;
            d.push(v);
        }
        delays.push(DelayVector::new(d, manifest.config.d_max)?);
    }

    let mut scores = Vec::new();
    for file in &manifest.score_files {
        scores.push(read_matrix_csv(&dir.join(file))?);
    }

    let trace_path = dir.join(&manifest.objective_trace_file);
    let trace_text = fs::read_to_string(&trace_path)
        .map_err(|e| OpfaError::io(trace_path.display().to_string(), e))?;
    let mut objective_trace = Vec::new();
    for line in trace_text.lines().filter(|l| !l.trim().is_empty()) {
        let v: f64 = line.trim().parse().map_err(|_| {
            OpfaError::parse(
                trace_path.display().to_string(),
                format!("'{}' is not a number", line.trim()),
            )
        })?;
        objective_trace.push(v);
    }

    Ok(OpfaFit {
        factors,
        scores,
        delays,
        objective_trace,
        converged: manifest.converged,
        iterations: manifest.iterations,
        n: manifest.n,
        subject_ids: manifest.subject_ids,
        config: manifest.config,
    })
}
