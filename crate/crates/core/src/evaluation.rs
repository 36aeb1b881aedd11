//! Metrics, the multi-trial protocol, ablations, sweeps, and post-hoc probes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{make_splits, save_dataset, MatrixFormat, MultiViewDataset, SplitIndices};
use crate::error::{CimlError, Result};
use crate::info::{MineProbe, MineProbeConfig};
use crate::losses::Hyperparams;
use crate::nn::{Adam, Linear, ParamStore};
use crate::rng;
use crate::tape::{log_softmax_rows, Mat, Tape};
use crate::trainer::{self, TrainConfig, TrainHistory, TrainState};

/// Accuracy, macro and support-weighted precision and F1, all in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub precision: f64,
    pub f1: f64,
    pub weighted_precision: f64,
    pub weighted_f1: f64,
}

/// Macro averages run over every class seen in `y_true` or `y_pred`.
/// A class that is never predicted has precision 0.
pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], m: usize) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(CimlError::Shape(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&y) = y_true.iter().chain(y_pred).find(|&&y| y >= m) {
        return Err(CimlError::Data(format!("label {y} out of range for {m} classes")));
    }
    if y_true.is_empty() {
        return Err(CimlError::Data("cannot score an empty prediction set".into()));
    }
    let mut tp = vec![0usize; m];
    let mut predicted = vec![0usize; m];
    let mut support = vec![0usize; m];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let classes: BTreeSet<usize> = y_true.iter().chain(y_pred).copied().collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut f_sum, mut wp, mut wf) = (0.0, 0.0, 0.0, 0.0);
    for &c in &classes {
        let p = ratio(tp[c], predicted[c]);
        // Harmonic mean of precision and recall as one exact ratio.
        let f = ratio(2 * tp[c], support[c] + predicted[c]);
        p_sum += p;
        f_sum += f;
        let w = support[c] as f64 / y_true.len() as f64;
        wp += w * p;
        wf += w * f;
    }
    let k = classes.len() as f64;
    Ok(Metrics {
        acc: 100.0 * ratio(tp.iter().sum(), y_true.len()),
        precision: 100.0 * p_sum / k,
        f1: 100.0 * f_sum / k,
        weighted_precision: 100.0 * wp,
        weighted_f1: 100.0 * wf,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub trial_seed: u64,
    pub metrics: Metrics,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Summary,
    pub precision: Summary,
    pub f1: Summary,
    pub weighted_precision: Summary,
    pub weighted_f1: Summary,
    pub trials: Vec<TrialResult>,
}

impl MetricsReport {
    pub fn from_trials(trials: Vec<TrialResult>) -> Self {
        let pick = |f: fn(&Metrics) -> f64| Summary::of(&trials.iter().map(|t| f(&t.metrics)).collect::<Vec<_>>());
        Self {
            acc: pick(|m| m.acc),
            precision: pick(|m| m.precision),
            f1: pick(|m| m.f1),
            weighted_precision: pick(|m| m.weighted_precision),
            weighted_f1: pick(|m| m.weighted_f1),
            trials,
        }
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        self.trials.iter().map(|t| t.trial_seed).collect()
    }

    /// `acc  precision  f1  w-precision  w-f1` as `mean±std` columns.
    pub fn table_row(&self) -> String {
        [self.acc, self.precision, self.f1, self.weighted_precision, self.weighted_f1]
            .iter()
            .map(|s| format!("{:6.2}±{:5.2}", s.mean, s.std))
            .collect::<Vec<_>>()
            .join("  ")
    }
}

pub const TABLE_HEADER: &str = "acc           precision     f1            w-precision   w-f1";

/// Seed for trial `t`; it drives both the split and the model.
pub fn trial_seed(root: u64, t: usize) -> u64 {
    rng::derive_seed(root, rng::TRIAL, t as u64)
}

/// Everything produced by one trial.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub result: TrialResult,
    pub splits: SplitIndices,
    pub state: TrainState,
    pub history: TrainHistory,
}

pub fn evaluate_state(state: &TrainState, dataset: &MultiViewDataset, indices: &[usize]) -> Result<Metrics> {
    let pred = trainer::predict(state, &dataset.select_views(indices))?;
    compute_metrics(&dataset.select_labels(indices), &pred, dataset.m())
}

pub fn run_trial(config: &TrainConfig, dataset: &MultiViewDataset, t: usize) -> Result<TrialOutcome> {
    let seed = trial_seed(config.seed, t);
    let splits = make_splits(dataset, config.train_fraction, seed)?;
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let (state, history) = trainer::fit(&config, dataset, &splits)?;
    let metrics = evaluate_state(&state, dataset, &splits.test)?;
    Ok(TrialOutcome {
        result: TrialResult {
            trial: t,
            trial_seed: seed,
            metrics,
            epochs: history.len(),
            final_loss: history.records.last().map(|r| r.loss.total),
        },
        splits,
        state,
        history,
    })
}

pub fn run_trials(config: &TrainConfig, dataset: &MultiViewDataset, n_trials: usize) -> Result<MetricsReport> {
    if n_trials == 0 {
        return Err(CimlError::Config("trials must be >= 1".into()));
    }
    let trials = (0..n_trials)
        .map(|t| run_trial(config, dataset, t).map(|o| o.result))
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_trials(trials))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CIML")]
    Full,
    /// Common loss removed.
    #[serde(rename = "CIML-v1")]
    V1,
    /// Unique loss removed.
    #[serde(rename = "CIML-v2")]
    V2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::V1, Variant::V2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "CIML",
            Variant::V1 => "CIML-v1",
            Variant::V2 => "CIML-v2",
        }
    }

    pub fn apply(self, hyper: Hyperparams) -> Hyperparams {
        match self {
            Variant::Full => hyper,
            Variant::V1 => Hyperparams { beta3: 0.0, ..hyper },
            Variant::V2 => Hyperparams { beta4: 0.0, ..hyper },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub hyper: Hyperparams,
    pub report: MetricsReport,
}

/// Full trial outcomes per variant, sharing trial seeds and splits.
pub fn run_ablation_detailed(
    config: &TrainConfig,
    dataset: &MultiViewDataset,
    n_trials: usize,
) -> Result<Vec<(Variant, Vec<TrialOutcome>)>> {
    if n_trials == 0 {
        return Err(CimlError::Config("trials must be >= 1".into()));
    }
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                hyper: variant.apply(config.hyper),
                ..config.clone()
            };
            let outcomes = (0..n_trials).map(|t| run_trial(&cfg, dataset, t)).collect::<Result<_>>()?;
            Ok((variant, outcomes))
        })
        .collect()
}

pub fn run_ablation(config: &TrainConfig, dataset: &MultiViewDataset, n_trials: usize) -> Result<Vec<AblationResult>> {
    Ok(run_ablation_detailed(config, dataset, n_trials)?
        .into_iter()
        .map(|(variant, outcomes)| AblationResult {
            variant,
            hyper: variant.apply(config.hyper),
            report: MetricsReport::from_trials(outcomes.into_iter().map(|o| o.result).collect()),
        })
        .collect())
}

/// Two-axis grid; each axis lists the values to try.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepGrid {
    Beta12 { beta1: Vec<f64>, beta2: Vec<f64> },
    Beta34 { beta3: Vec<f64>, beta4: Vec<f64> },
    Dims { dim_common: Vec<usize>, dim_unique: Vec<usize> },
}

impl SweepGrid {
    /// Cell configurations with their labelled coordinates.
    pub fn cells(&self, base: &TrainConfig) -> Vec<(BTreeMap<String, f64>, TrainConfig)> {
        fn product<A: Copy, B: Copy>(a: &[A], b: &[B]) -> Vec<(A, B)> {
            a.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).collect()
        }
        let label = |k1: &str, x: f64, k2: &str, y: f64| BTreeMap::from([(k1.to_string(), x), (k2.to_string(), y)]);
        match self {
            SweepGrid::Beta12 { beta1, beta2 } => product(beta1, beta2)
                .into_iter()
                .map(|(a, b)| {
                    let mut c = base.clone();
                    c.hyper.beta1 = a;
                    c.hyper.beta2 = b;
                    (label("beta1", a, "beta2", b), c)
                })
                .collect(),
            SweepGrid::Beta34 { beta3, beta4 } => product(beta3, beta4)
                .into_iter()
                .map(|(a, b)| {
                    let mut c = base.clone();
                    c.hyper.beta3 = a;
                    c.hyper.beta4 = b;
                    (label("beta3", a, "beta4", b), c)
                })
                .collect(),
            SweepGrid::Dims { dim_common, dim_unique } => product(dim_common, dim_unique)
                .into_iter()
                .map(|(a, b)| {
                    let mut c = base.clone();
                    c.dim_common = a;
                    c.dim_unique = b;
                    (label("dim_common", a as f64, "dim_unique", b as f64), c)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub params: BTreeMap<String, f64>,
    pub report: MetricsReport,
}

/// One [`run_trials`] per grid cell. Cells share the root seed, so trial `t`
/// uses the same split everywhere.
pub fn sweep(config: &TrainConfig, dataset: &MultiViewDataset, grid: &SweepGrid, n_trials: usize) -> Result<Vec<SweepCell>> {
    let cells = grid.cells(config);
    if cells.is_empty() {
        return Err(CimlError::Config("sweep grid is empty".into()));
    }
    cells
        .into_iter()
        .map(|(params, cfg)| {
            Ok(SweepCell {
                params,
                report: run_trials(&cfg, dataset, n_trials)?,
            })
        })
        .collect()
}

/// Largest minus smallest mean accuracy across cells.
pub fn accuracy_spread(cells: &[SweepCell]) -> f64 {
    let accs = cells.iter().map(|c| c.report.acc.mean);
    let max = accs.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = accs.fold(f64::INFINITY, f64::min);
    max - min
}

// ---------------------------------------------------------------------------
// Probes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.05 }
    }
}

fn standardize_pair(train: &Mat, test: &Mat) -> (Mat, Mat) {
    let mean = train.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let std = train
        .var_axis(ndarray::Axis(0), 0.0)
        .mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    ((train - &mean) / &std, (test - &mean) / &std)
}

/// Fit a softmax regression on `(x_train, y_train)` with full-batch Adam and
/// return its mean cross-entropy on the test rows.
pub fn linear_probe_ce(
    x_train: &Mat,
    y_train: &[usize],
    x_test: &Mat,
    y_test: &[usize],
    m: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    let (xtr, xte) = standardize_pair(x_train, x_test);
    let mut store = ParamStore::new();
    let layer = Linear::zeros(&mut store, "probe", xtr.ncols(), m);
    let mut opt = Adam::new(&store, config.lr);
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(xtr.clone());
        let logits = layer.forward(&mut tape, &bind, x);
        let loss = tape.softmax_nll(logits, y_train);
        let grads = bind.grads(&tape.backward(loss));
        opt.apply(&mut store, &grads);
    }
    let mut logits = xte.dot(store.get(layer.weight));
    logits += &store.get(layer.bias).row(0);
    let lsm = log_softmax_rows(&logits);
    let ce = -y_test.iter().enumerate().map(|(k, &y)| lsm[[k, y]]).sum::<f64>() / y_test.len().max(1) as f64;
    if !ce.is_finite() {
        return Err(CimlError::NonFinite("probe cross-entropy".into()));
    }
    Ok(ce)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    /// Test cross-entropy of a probe on `Z`, a proxy for `H(Y|Z)`.
    pub ce_representation: f64,
    /// Test cross-entropy of a probe on the concatenated views, a proxy for `H(Y|X)`.
    pub ce_views: f64,
    pub gap: f64,
}

pub fn sufficiency_from_features(
    z_train: &Mat,
    z_test: &Mat,
    x_train: &Mat,
    x_test: &Mat,
    y_train: &[usize],
    y_test: &[usize],
    m: usize,
    config: &ProbeConfig,
) -> Result<SufficiencyReport> {
    let ce_representation = linear_probe_ce(z_train, y_train, z_test, y_test, m, config)?;
    let ce_views = linear_probe_ce(x_train, y_train, x_test, y_test, m, config)?;
    Ok(SufficiencyReport {
        ce_representation,
        ce_views,
        gap: ce_representation - ce_views,
    })
}

pub fn sufficiency_check(
    state: &TrainState,
    dataset: &MultiViewDataset,
    splits: &SplitIndices,
    config: &ProbeConfig,
) -> Result<SufficiencyReport> {
    let z = |idx: &[usize]| trainer::infer_representation(state, &dataset.select_views(idx)).map(|r| r.joint());
    let x = dataset.concatenated();
    let rows = |idx: &[usize]| x.select(ndarray::Axis(0), idx);
    sufficiency_from_features(
        &z(&splits.train)?,
        &z(&splits.test)?,
        &rows(&splits.train),
        &rows(&splits.test),
        &dataset.select_labels(&splits.train),
        &dataset.select_labels(&splits.test),
        dataset.m(),
        config,
    )
}

/// Write `Z` for every sample plus the labels as a one-view dataset.
pub fn export_embeddings(state: &TrainState, dataset: &MultiViewDataset, dir: &Path, format: MatrixFormat) -> Result<PathBuf> {
    let z = trainer::infer_representation(state, dataset.views())?.joint();
    let out = MultiViewDataset::new(format!("{}-embeddings", dataset.name()), vec![z], dataset.labels().to_vec(), dataset.m())?;
    save_dataset(&out, dir, format)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Held-out MINE estimates between representation blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// `I(Zu_i; Zc)` per view.
    pub unique_common: Vec<f64>,
    /// `I(Zu_i; Zu_j)` for `i < j`.
    pub unique_pairs: Vec<PairEstimate>,
}

impl AuditReport {
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .unique_common
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("I(Zu{i};Zc)"), v))
            .collect();
        out.extend(self.unique_pairs.iter().map(|p| (format!("I(Zu{};Zu{})", p.i, p.j), p.value)));
        out
    }

    pub fn max(&self) -> f64 {
        self.entries().iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fresh MINE probes fit on training representations and evaluated on the
/// test split.
pub fn independence_audit(
    state: &TrainState,
    dataset: &MultiViewDataset,
    splits: &SplitIndices,
    config: &MineProbeConfig,
    seed: u64,
) -> Result<AuditReport> {
    let train = trainer::infer_representation(state, &dataset.select_views(&splits.train))?;
    let test = trainer::infer_representation(state, &dataset.select_views(&splits.test))?;
    let probe_seed = |k: u64| rng::derive_seed(seed, rng::PROBE, k);
    let estimate = |a_tr: &Mat, b_tr: &Mat, a_te: &Mat, b_te: &Mat, k: u64| -> Result<f64> {
        let probe = MineProbe::fit(a_tr, b_tr, config, probe_seed(k))?;
        probe.estimate(a_te, b_te, config.eval_shuffles, probe_seed(k))
    };
    let v = train.unique.len();
    let mut k = 0;
    let mut unique_common = Vec::new();
    for i in 0..v {
        unique_common.push(estimate(&train.unique[i], &train.common, &test.unique[i], &test.common, k)?);
        k += 1;
    }
    let mut unique_pairs = Vec::new();
    for i in 0..v {
        for j in i + 1..v {
            let value = estimate(&train.unique[i], &train.unique[j], &test.unique[i], &test.unique[j], k)?;
            unique_pairs.push(PairEstimate { i, j, value });
            k += 1;
        }
    }
    Ok(AuditReport {
        unique_common,
        unique_pairs,
    })
}
