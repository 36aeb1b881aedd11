//! Multi-view datasets: the in-memory model, on-disk format, a synthetic
//! generator with a known Bayes oracle, and stratified train/test splits.
//!
//! Matrices are stored sample-major: view `i` is an `n x d_i` matrix whose
//! rows are samples.
//!
//! # On-disk layout
//!
//! A dataset directory holds a TOML manifest plus one matrix file per view and
//! a labels file:
//!
//! ```toml
//! name = "msrc-v1"
//! m = 7
//! n = 210                      # optional, checked when present
//! labels = "labels.txt"        # one integer per line
//! views = ["v0.csv", "v1.bin"] # ordered
//! dims = [24, 576]             # optional, checked when present
//! ```
//!
//! View files ending in `.bin` use the binary container: the 8 magic bytes
//! `CIMLMAT1`, then `rows` and `cols` as little-endian `u64`, then
//! `rows * cols` little-endian `f64` values in row-major order. Any other
//! extension is delimited text, one sample per line, fields separated by
//! commas, tabs or spaces. Lines starting with `#` are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CimlError, Result};
use crate::rng::{self, Rng};
use crate::tape::Mat;

pub const MATRIX_MAGIC: &[u8; 8] = b"CIMLMAT1";

/// Features of `v` views for `n` samples, plus labels in `[0, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    name: String,
    views: Vec<Mat>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl MultiViewDataset {
    pub fn new(name: impl Into<String>, views: Vec<Mat>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if views.is_empty() {
            return Err(CimlError::Data("a dataset needs at least one view".into()));
        }
        if num_classes == 0 {
            return Err(CimlError::Data("class count m must be at least 1".into()));
        }
        let n = labels.len();
        for (i, view) in views.iter().enumerate() {
            if view.nrows() != n {
                return Err(CimlError::view(
                    i,
                    format!("has {} samples but there are {n} labels", view.nrows()),
                ));
            }
            if view.ncols() == 0 {
                return Err(CimlError::view(i, "has zero feature columns"));
            }
            if let Some(pos) = view.iter().position(|x| !x.is_finite()) {
                return Err(CimlError::view(
                    i,
                    format!("non-finite entry at sample {}, feature {}", pos / view.ncols(), pos % view.ncols()),
                ));
            }
        }
        if let Some((k, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(CimlError::Data(format!(
                "label {y} of sample {k} is out of range for m = {num_classes}"
            )));
        }
        Ok(Self {
            name: name.into(),
            views,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn m(&self) -> usize {
        self.num_classes
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(Mat::ncols).collect()
    }

    pub fn view(&self, i: usize) -> &Mat {
        &self.views[i]
    }

    pub fn views(&self) -> &[Mat] {
        &self.views
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `idx` of every view.
    pub fn select_views(&self, idx: &[usize]) -> Vec<Mat> {
        self.views.iter().map(|v| v.select(Axis(0), idx)).collect()
    }

    pub fn select_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&k| self.labels[k]).collect()
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// All views side by side, `n x sum(d_i)`.
    pub fn concatenated(&self) -> Mat {
        let views: Vec<_> = self.views.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("views share the sample count")
    }
}

// ---------------------------------------------------------------------------
// Matrix files

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    #[default]
    Text,
    Binary,
}

impl MatrixFormat {
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => MatrixFormat::Binary,
            _ => MatrixFormat::Text,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Text => "csv",
            MatrixFormat::Binary => "bin",
        }
    }
}

pub fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    let bytes = match MatrixFormat::for_path(path) {
        MatrixFormat::Binary => {
            let mut out = Vec::with_capacity(24 + 8 * m.len());
            out.extend_from_slice(MATRIX_MAGIC);
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
        MatrixFormat::Text => {
            let mut out = String::new();
            for row in m.rows() {
                let fields: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&fields.join(","));
                out.push('\n');
            }
            out.into_bytes()
        }
    };
    fs::write(path, bytes).map_err(|e| CimlError::io(path, e))
}

/// Parse a matrix file. Errors are plain messages; callers attach context.
fn parse_matrix(path: &Path) -> std::result::Result<Mat, String> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    match MatrixFormat::for_path(path) {
        MatrixFormat::Binary => {
            if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
                return Err(format!("{} is not a CIMLMAT1 container", path.display()));
            }
            let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
            let body = &bytes[24..];
            if body.len() != rows * cols * 8 {
                return Err(format!(
                    "{} declares {rows}x{cols} but holds {} values",
                    path.display(),
                    body.len() / 8
                ));
            }
            let data = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Mat::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())
        }
        MatrixFormat::Text => {
            let text = String::from_utf8(bytes).map_err(|_| format!("{} is not UTF-8", path.display()))?;
            let mut data = Vec::new();
            let mut cols = None;
            let mut rows = 0;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let before = data.len();
                for field in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()) {
                    let x: f64 = field
                        .parse()
                        .map_err(|_| format!("{}:{}: cannot parse `{field}`", path.display(), lineno + 1))?;
                    data.push(x);
                }
                let width = data.len() - before;
                match cols {
                    None => cols = Some(width),
                    Some(c) if c != width => {
                        return Err(format!(
                            "{}:{}: row has {width} fields, expected {c}",
                            path.display(),
                            lineno + 1
                        ))
                    }
                    _ => {}
                }
                rows += 1;
            }
            Mat::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| e.to_string())
        }
    }
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    parse_matrix(path).map_err(CimlError::Data)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| CimlError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let t = l.trim();
            // Tolerate integral floats such as `3.0`.
            t.parse::<usize>()
                .ok()
                .or_else(|| t.parse::<f64>().ok().filter(|x| x.fract() == 0.0 && *x >= 0.0).map(|x| x as usize))
                .ok_or_else(|| CimlError::Data(format!("{}:{}: bad label `{t}`", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for y in labels {
        out.push_str(&y.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CimlError::io(path, e))
}

/// Dataset manifest as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub labels: PathBuf,
    pub views: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CimlError::io(manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| CimlError::Data(format!("manifest {}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    if let Some(dims) = &manifest.dims {
        if dims.len() != manifest.views.len() {
            return Err(CimlError::Data(format!(
                "manifest lists {} views but {} dims",
                manifest.views.len(),
                dims.len()
            )));
        }
    }
    let labels = read_labels(&base.join(&manifest.labels))?;
    if let Some(n) = manifest.n {
        if labels.len() != n {
            return Err(CimlError::Data(format!(
                "labels file has {} entries, manifest declares n = {n}",
                labels.len()
            )));
        }
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    for (i, file) in manifest.views.iter().enumerate() {
        let view = parse_matrix(&base.join(file)).map_err(|msg| CimlError::view(i, msg))?;
        if view.nrows() != labels.len() {
            return Err(CimlError::view(
                i,
                format!("has {} samples but the labels file has {}", view.nrows(), labels.len()),
            ));
        }
        if let Some(dims) = &manifest.dims {
            if view.ncols() != dims[i] {
                return Err(CimlError::view(
                    i,
                    format!("has {} features, manifest declares {}", view.ncols(), dims[i]),
                ));
            }
        }
        views.push(view);
    }
    MultiViewDataset::new(manifest.name, views, labels, manifest.m)
}

/// Write `dataset` into `dir` (created if needed); returns the manifest path.
pub fn save_dataset(dataset: &MultiViewDataset, dir: &Path, format: MatrixFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CimlError::io(dir, e))?;
    let views: Vec<PathBuf> = (0..dataset.num_views())
        .map(|i| PathBuf::from(format!("view{i}.{}", format.extension())))
        .collect();
    for (file, view) in views.iter().zip(dataset.views()) {
        write_matrix(&dir.join(file), view)?;
    }
    write_labels(&dir.join("labels.txt"), dataset.labels())?;
    let manifest = Manifest {
        name: dataset.name().to_string(),
        m: dataset.m(),
        n: Some(dataset.n()),
        labels: PathBuf::from("labels.txt"),
        views,
        dims: Some(dataset.view_dims()),
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| CimlError::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CimlError::io(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Synthetic data

fn default_view_dim() -> Vec<usize> {
    Vec::new()
}

fn default_label_scale() -> f64 {
    1.0
}

/// Generative model parameters for a synthetic multi-view dataset.
///
/// Latents: common `c ~ N(0, I_dc)` and per-view `u_i ~ N(0, I_du)`. View `i`
/// observes `[c, u_i] A_i^T + noise_std * eps`. Labels are drawn from
/// `softmax(label_scale * (mix_0 c W_c + sum_i mix_i u_i W_i))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub v: usize,
    pub m: usize,
    pub dim_common: usize,
    pub dim_unique: usize,
    /// Observed dimension of each view; empty means `2 * (dim_common + dim_unique)`.
    #[serde(default = "default_view_dim")]
    pub view_dims: Vec<usize>,
    pub noise_std: f64,
    /// Weights for (common, unique_1, ..., unique_v).
    pub label_mix: Vec<f64>,
    #[serde(default = "default_label_scale")]
    pub label_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(CimlError::Config(format!("synthetic.{field}: {why}")));
        if self.v == 0 {
            return bad("v", "need at least one view");
        }
        if self.m == 0 {
            return bad("m", "need at least one class");
        }
        if self.n < self.m {
            return bad("n", "must be at least m");
        }
        if self.dim_common == 0 {
            return bad("dim_common", "must be at least 1");
        }
        if self.dim_unique == 0 {
            return bad("dim_unique", "must be at least 1");
        }
        if !self.view_dims.is_empty() && self.view_dims.len() != self.v {
            return bad("view_dims", "needs one entry per view");
        }
        if self.view_dims.contains(&0) {
            return bad("view_dims", "dimensions must be positive");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std", "must be finite and non-negative");
        }
        if self.label_mix.len() != self.v + 1 {
            return bad("label_mix", "needs v + 1 weights (common first)");
        }
        if self.label_mix.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("label_mix", "weights must lie in [0, 1]");
        }
        if !(self.label_scale.is_finite() && self.label_scale > 0.0) {
            return bad("label_scale", "must be finite and positive");
        }
        Ok(())
    }

    pub fn resolved_view_dims(&self) -> Vec<usize> {
        if self.view_dims.is_empty() {
            vec![2 * (self.dim_common + self.dim_unique); self.v]
        } else {
            self.view_dims.clone()
        }
    }
}

/// Fixed random maps of a synthetic generative model.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel {
    /// `d_i x (dim_common + dim_unique)` observation maps.
    pub view_maps: Vec<Mat>,
    /// `dim_common x m` label weights for the common latent.
    pub common_weights: Mat,
    /// `dim_unique x m` label weights per view.
    pub unique_weights: Vec<Mat>,
    pub label_mix: Vec<f64>,
    pub label_scale: f64,
}

impl SyntheticModel {
    /// Label logits contributed by common latents (`rows x m`).
    pub fn common_logits(&self, common: &Mat) -> Mat {
        common.dot(&self.common_weights) * (self.label_scale * self.label_mix[0])
    }

    /// Label logits contributed by all unique latents (`rows x m`).
    pub fn unique_logits(&self, unique: &[Mat]) -> Mat {
        let mut out = Mat::zeros((unique[0].nrows(), self.common_weights.ncols()));
        for (i, (u, w)) in unique.iter().zip(&self.unique_weights).enumerate() {
            out.scaled_add(self.label_scale * self.label_mix[i + 1], &u.dot(w));
        }
        out
    }
}

/// Ground truth for a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleInfo {
    pub model: SyntheticModel,
    pub latent_common: Mat,
    pub latent_unique: Vec<Mat>,
    /// Bayes accuracy given only the common latent.
    pub bayes_common: f64,
    /// Bayes accuracy given only the unique latents (all views).
    pub bayes_unique: f64,
    /// Bayes accuracy given every latent.
    pub bayes_joint: f64,
    /// Number of (common, unique) latent pairs behind the estimates.
    pub oracle_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub spec: SyntheticSpec,
    pub bayes_common: f64,
    pub bayes_unique: f64,
    pub bayes_joint: f64,
    pub oracle_samples: usize,
    pub class_counts: Vec<usize>,
}

/// Side length of the latent grid used by the Bayes oracle (grid² pairs).
pub const ORACLE_GRID: usize = 1000;

fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn softmax_into(logits: impl Iterator<Item = f64>, out: &mut [f64]) {
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l;
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Bayes accuracies `(common-only, unique-only, joint)` from a grid of
/// independent common and unique latent draws.
///
/// Each estimate is `E[max_y p(y | information)]`. The three share one grid of
/// logits, so `joint >= max(common, unique)` holds exactly.
pub fn bayes_accuracies(model: &SyntheticModel, common_logits: &Mat, unique_logits: &Mat) -> (f64, f64, f64) {
    let a = common_logits.nrows();
    let b = unique_logits.nrows();
    let m = model.common_weights.ncols();
    let mut per_common = Mat::zeros((a, m));
    let mut per_unique = Mat::zeros((b, m));
    let mut joint = 0.0;
    let mut probs = vec![0.0; m];
    for i in 0..a {
        let lc = common_logits.row(i);
        for j in 0..b {
            let lu = unique_logits.row(j);
            softmax_into(lc.iter().zip(lu.iter()).map(|(x, y)| x + y), &mut probs);
            joint += probs.iter().cloned().fold(0.0, f64::max);
            for (k, p) in probs.iter().enumerate() {
                per_common[[i, k]] += p;
                per_unique[[j, k]] += p;
            }
        }
    }
    let best = |m: &Mat, count: usize| {
        m.rows()
            .into_iter()
            .map(|r| r.iter().cloned().fold(0.0, f64::max) / count as f64)
            .sum::<f64>()
            / m.nrows() as f64
    };
    (best(&per_common, b), best(&per_unique, a), joint / (a * b) as f64)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(MultiViewDataset, OracleInfo)> {
    spec.validate()?;
    let dims = spec.resolved_view_dims();
    let latent = spec.dim_common + spec.dim_unique;

    let mut model_rng = rng::substream(spec.seed, "synthetic-model", 0);
    let view_maps: Vec<Mat> = dims
        .iter()
        .map(|&d| gaussian(&mut model_rng, d, latent) / (latent as f64).sqrt())
        .collect();
    let common_weights = gaussian(&mut model_rng, spec.dim_common, spec.m) / (spec.dim_common as f64).sqrt();
    let unique_weights: Vec<Mat> = (0..spec.v)
        .map(|_| gaussian(&mut model_rng, spec.dim_unique, spec.m) / (spec.dim_unique as f64).sqrt())
        .collect();
    let model = SyntheticModel {
        view_maps,
        common_weights,
        unique_weights,
        label_mix: spec.label_mix.clone(),
        label_scale: spec.label_scale,
    };

    let mut latent_rng = rng::substream(spec.seed, "synthetic-latent", 0);
    let common = gaussian(&mut latent_rng, spec.n, spec.dim_common);
    let unique: Vec<Mat> = (0..spec.v)
        .map(|_| gaussian(&mut latent_rng, spec.n, spec.dim_unique))
        .collect();

    let mut noise_rng = rng::substream(spec.seed, "synthetic-noise", 0);
    let views: Vec<Mat> = (0..spec.v)
        .map(|i| {
            let z = ndarray::concatenate(Axis(1), &[common.view(), unique[i].view()]).unwrap();
            let mut x = z.dot(&model.view_maps[i].t());
            if spec.noise_std > 0.0 {
                x.scaled_add(spec.noise_std, &gaussian(&mut noise_rng, spec.n, dims[i]));
            }
            x
        })
        .collect();

    let logits = model.common_logits(&common) + model.unique_logits(&unique);
    let mut label_rng = rng::substream(spec.seed, "synthetic-label", 0);
    let mut probs = vec![0.0; spec.m];
    let labels: Vec<usize> = logits
        .rows()
        .into_iter()
        .map(|row| {
            softmax_into(row.iter().cloned(), &mut probs);
            let u: f64 = label_rng.random();
            let mut acc = 0.0;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return k;
                }
            }
            spec.m - 1
        })
        .collect();

    let mut oracle_rng = rng::substream(spec.seed, "synthetic-oracle", 0);
    let grid_common = gaussian(&mut oracle_rng, ORACLE_GRID, spec.dim_common);
    let grid_unique: Vec<Mat> = (0..spec.v)
        .map(|_| gaussian(&mut oracle_rng, ORACLE_GRID, spec.dim_unique))
        .collect();
    let (bayes_common, bayes_unique, bayes_joint) = bayes_accuracies(
        &model,
        &model.common_logits(&grid_common),
        &model.unique_logits(&grid_unique),
    );

    let dataset = MultiViewDataset::new(format!("synthetic-{}", spec.seed), views, labels, spec.m)?;
    let oracle = OracleInfo {
        model,
        latent_common: common,
        latent_unique: unique,
        bayes_common,
        bayes_unique,
        bayes_joint,
        oracle_samples: ORACLE_GRID * ORACLE_GRID,
    };
    Ok((dataset, oracle))
}

impl OracleInfo {
    pub fn report(&self, spec: &SyntheticSpec, dataset: &MultiViewDataset) -> OracleReport {
        OracleReport {
            spec: spec.clone(),
            bayes_common: self.bayes_common,
            bayes_unique: self.bayes_unique,
            bayes_joint: self.bayes_joint,
            oracle_samples: self.oracle_samples,
            class_counts: dataset.class_counts(),
        }
    }
}

// ---------------------------------------------------------------------------
// Splits and standardisation

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub trial_seed: u64,
}

/// Stratified split: each class contributes `floor(count * train_fraction)`
/// samples to training, clamped so both sides get at least one.
pub fn make_splits(dataset: &MultiViewDataset, train_fraction: f64, trial_seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CimlError::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &y) in dataset.labels().iter().enumerate() {
        by_class.entry(y).or_default().push(k);
    }
    let mut rng = rng::substream(trial_seed, rng::SPLITS, 0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(CimlError::Data(format!(
                "class {class} has a single sample and cannot be stratified"
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * train_fraction).floor() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices {
        train,
        test,
        trial_seed,
    })
}

/// Per-view feature means and standard deviations from a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub means: Vec<Mat>,
    pub stds: Vec<Mat>,
}

impl Standardizer {
    pub fn fit(dataset: &MultiViewDataset, train: &[usize]) -> Self {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for view in dataset.views() {
            let x = view.select(Axis(0), train);
            let mean = x.mean_axis(Axis(0)).expect("non-empty train split").insert_axis(Axis(0));
            let mut std = x.var_axis(Axis(0), 0.0).mapv(f64::sqrt).insert_axis(Axis(0));
            std.mapv_inplace(|s| if s > 1e-12 { s } else { 1.0 });
            means.push(mean);
            stds.push(std);
        }
        Self { means, stds }
    }

    pub fn apply(&self, view: usize, x: &Mat) -> Mat {
        let mut out = x - &self.means[view];
        Zip::from(out.rows_mut()).for_each(|mut row| row /= &self.stds[view].row(0));
        out
    }

    pub fn apply_all(&self, views: &[Mat]) -> Vec<Mat> {
        views.iter().enumerate().map(|(i, x)| self.apply(i, x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn toy(n_per_class: usize, m: usize) -> MultiViewDataset {
        let n = n_per_class * m;
        let labels: Vec<usize> = (0..n).map(|k| k % m).collect();
        let view = Mat::from_shape_fn((n, 2), |(r, c)| (r * 2 + c) as f64);
        MultiViewDataset::new("toy", vec![view], labels, m).unwrap()
    }

    #[test]
    fn invariants_are_enforced() {
        let ok = MultiViewDataset::new("x", vec![array![[1.0]]], vec![0], 1);
        assert!(ok.is_ok());
        let short = MultiViewDataset::new("x", vec![array![[1.0], [2.0]]], vec![0], 1);
        assert!(matches!(short, Err(CimlError::View { view: 0, .. })));
        let nan = MultiViewDataset::new("x", vec![array![[1.0]], array![[f64::NAN]]], vec![0], 1);
        assert!(matches!(nan, Err(CimlError::View { view: 1, .. })));
        let label = MultiViewDataset::new("x", vec![array![[1.0]]], vec![3], 2);
        assert!(matches!(label, Err(CimlError::Data(_))));
    }

    #[test]
    fn split_small_balanced() {
        let d = toy(5, 2);
        let s = make_splits(&d, 0.8, 11).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.test.len(), 2);
        let test_classes: Vec<usize> = s.test.iter().map(|&k| d.labels()[k]).collect();
        assert!(test_classes.contains(&0) && test_classes.contains(&1));
        assert_eq!(s, make_splits(&d, 0.8, 11).unwrap());
    }

    #[test]
    fn split_msrc_shape() {
        let d = toy(30, 7);
        let s = make_splits(&d, 0.8, 3).unwrap();
        // Direct count: 7 classes x floor(30 * 0.8).
        let expected: usize = (0..7).map(|_| (30.0f64 * 0.8).floor() as usize).sum();
        assert_eq!(s.train.len(), expected);
        assert_eq!(s.train.len(), 168);
    }

    #[test]
    fn split_rejects_singleton_class_and_bad_fraction() {
        let d = MultiViewDataset::new("x", vec![Mat::zeros((3, 1))], vec![0, 0, 1], 2).unwrap();
        assert!(matches!(make_splits(&d, 0.5, 0), Err(CimlError::Data(_))));
        assert!(matches!(make_splits(&toy(3, 2), 1.0, 0), Err(CimlError::Config(_))));
    }

    #[test]
    fn standardizer_uses_training_statistics() {
        let d = MultiViewDataset::new("x", vec![array![[1.0], [3.0], [100.0]]], vec![0, 0, 0], 1).unwrap();
        let s = Standardizer::fit(&d, &[0, 1]);
        let out = s.apply(0, d.view(0));
        assert_eq!(out, array![[-1.0], [1.0], [98.0]]);
    }

    #[test]
    fn bayes_grid_orders_estimates() {
        let spec = SyntheticSpec {
            n: 50,
            v: 2,
            m: 3,
            dim_common: 2,
            dim_unique: 2,
            view_dims: vec![],
            noise_std: 0.1,
            label_mix: vec![0.5, 0.3, 0.9],
            label_scale: 4.0,
            seed: 5,
        };
        let (_, o) = generate_synthetic(&spec).unwrap();
        assert!(o.bayes_joint >= o.bayes_common.max(o.bayes_unique));
        assert!(o.bayes_common >= 1.0 / 3.0 - 1e-12);
    }
}
