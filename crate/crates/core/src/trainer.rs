//! Joint training of the view encoders, the common variable, the posterior
//! heads, the classifier, and the adversarial MINE networks.
//!
//! Every source of randomness is a named substream of the root seed indexed
//! by epoch, so the epoch counter together with the optimiser and
//! moving-average state fully determines how training continues.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiViewDataset, SplitIndices, Standardizer};
use crate::encoder::{reparameterize, standard_normal, CommonVariable, Encoder, EncoderSpec, LogvarClamp};
use crate::error::{CimlError, Result};
use crate::info::{self, Denominator, MineNetwork, MovingAverage};
use crate::losses::{self, Hyperparams, LossBreakdown};
use crate::nn::{Activation, Adam, Binding, Linear, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
}

/// Estimator for the entropy of the common variable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonEntropy {
    /// Gaussian entropy of the common head's posterior on each row of `C`.
    #[default]
    Posterior,
    /// Gaussian fitted to the spread of the batch rows of `C`.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hyper: Hyperparams,
    pub dim_common: usize,
    pub dim_unique: usize,
    /// Hidden widths of the view encoders (both branches).
    pub hidden_dims: Vec<usize>,
    /// Hidden widths of the head applied to the common variable.
    pub head_hidden_dims: Vec<usize>,
    pub mine_hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mine_lr: f64,
    pub seed: u64,
    /// Noise draws per example for the sampled terms.
    pub mc_samples: usize,
    pub logvar_clamp: LogvarClamp,
    pub common_entropy: CommonEntropy,
    /// MINE maximisation steps per main step.
    pub mine_steps: usize,
    pub mine_decay: f64,
    pub train_fraction: f64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            dim_common: 8,
            dim_unique: 8,
            hidden_dims: vec![64, 64],
            head_hidden_dims: vec![64, 64],
            mine_hidden_dims: vec![32, 32],
            activation: Activation::Tanh,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            mine_lr: 1e-3,
            seed: 0,
            mc_samples: 1,
            logvar_clamp: LogvarClamp::default(),
            common_entropy: CommonEntropy::Posterior,
            mine_steps: 1,
            mine_decay: 0.99,
            train_fraction: 0.8,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CimlError::Config(msg));
        self.hyper.validate()?;
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.dim_common == 0 || self.dim_unique == 0 {
            return bad("train.dim_common and train.dim_unique must be >= 1".into());
        }
        for (name, dims) in [
            ("hidden_dims", &self.hidden_dims),
            ("head_hidden_dims", &self.head_hidden_dims),
            ("mine_hidden_dims", &self.mine_hidden_dims),
        ] {
            if dims.contains(&0) {
                return bad(format!("train.{name} must not contain 0"));
            }
        }
        if !(self.lr > 0.0) || !(self.mine_lr > 0.0) {
            return bad("train.lr and train.mine_lr must be > 0".into());
        }
        if self.mc_samples == 0 {
            return bad("train.mc_samples must be >= 1".into());
        }
        if !(self.logvar_clamp.min < self.logvar_clamp.max) {
            return bad("train.logvar_clamp.min must be below max".into());
        }
        if !(self.mine_decay > 0.0 && self.mine_decay < 1.0) {
            return bad(format!("train.mine_decay must lie in (0, 1), got {}", self.mine_decay));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train.train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    /// Width of the joint representation for `v` views.
    pub fn joint_width(&self, v: usize) -> usize {
        self.dim_common + v * self.dim_unique
    }
}

/// Parameter handles for every main-model component.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub view_dims: Vec<usize>,
    pub num_classes: usize,
    /// Deterministic `f_i`, one per view.
    pub view_encoders: Vec<Encoder>,
    pub common_head: Encoder,
    pub unique_encoders: Vec<Encoder>,
    pub classifier: Linear,
    pub common_decoder: Linear,
    pub unique_decoders: Vec<Linear>,
    pub common: CommonVariable,
}

/// Statistics networks for `(Zu_i, Zc)` and for each pair `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MineSet {
    pub common: Vec<MineNetwork>,
    pub pairs: Vec<(usize, usize, MineNetwork)>,
}

impl MineSet {
    fn averages(&self) -> Vec<MovingAverage> {
        self.common
            .iter()
            .chain(self.pairs.iter().map(|(_, _, n)| n))
            .map(|n| n.average)
            .collect()
    }

    fn set_averages(&mut self, values: &[MovingAverage]) -> Result<()> {
        let nets: Vec<&mut MineNetwork> = self
            .common
            .iter_mut()
            .chain(self.pairs.iter_mut().map(|(_, _, n)| n))
            .collect();
        if nets.len() != values.len() {
            return Err(CimlError::Data("checkpoint MINE state does not match the model".into()));
        }
        for (n, v) in nets.into_iter().zip(values) {
            n.average = *v;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub mine_params: ParamStore,
    pub mines: MineSet,
    pub optimizer: Adam,
    pub mine_optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub standardizer: Standardizer,
    /// Dataset indices of the rows of the common variable.
    pub train_indices: Vec<usize>,
}

/// Standardised train and test matrices for one split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train_views: Vec<Mat>,
    pub train_labels: Vec<usize>,
    pub test_views: Vec<Mat>,
    pub test_labels: Vec<usize>,
}

impl PreparedData {
    pub fn new(dataset: &MultiViewDataset, splits: &SplitIndices, standardizer: &Standardizer) -> Self {
        Self {
            train_views: standardizer.apply_all(&dataset.select_views(&splits.train)),
            train_labels: dataset.select_labels(&splits.train),
            test_views: standardizer.apply_all(&dataset.select_views(&splits.test)),
            test_labels: dataset.select_labels(&splits.test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub wall_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }
}

/// `Z = [Zc, Zu_1, .., Zu_v]` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBundle {
    pub common: Mat,
    pub unique: Vec<Mat>,
}

impl RepresentationBundle {
    pub fn joint(&self) -> Mat {
        let mut parts = vec![self.common.view()];
        parts.extend(self.unique.iter().map(|u| u.view()));
        ndarray::concatenate(Axis(1), &parts).expect("rows agree")
    }

    pub fn width(&self) -> usize {
        self.common.ncols() + self.unique.iter().map(Mat::ncols).sum::<usize>()
    }

    pub fn rows(&self) -> usize {
        self.common.nrows()
    }
}

/// Loss whose gradient is requested from [`objective_and_grads`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ce,
    Common,
    Unique,
    Total,
}

/// Noise and shuffle used by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNoise {
    pub common: Mat,
    pub unique: Vec<Mat>,
    pub perm: Vec<usize>,
}

impl FrozenNoise {
    pub fn draw(config: &TrainConfig, views: usize, batch: usize, noise: &mut Rng, shuffle: &mut Rng) -> Self {
        let rows = batch * config.mc_samples;
        let common = standard_normal(noise, rows, config.dim_common);
        let unique = (0..views).map(|_| standard_normal(noise, rows, config.dim_unique)).collect();
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.shuffle(shuffle);
        Self { common, unique, perm }
    }
}

// ---------------------------------------------------------------------------
// Initialisation

fn build_state(
    config: &TrainConfig,
    view_dims: &[usize],
    num_classes: usize,
    standardizer: Standardizer,
    train_indices: Vec<usize>,
    common_init: impl FnOnce(&ParamStore, &[Encoder]) -> Result<Mat>,
) -> Result<TrainState> {
    config.validate()?;
    if view_dims.is_empty() || num_classes == 0 || train_indices.len() < 2 {
        return Err(CimlError::Data("training needs at least one view, one class and two samples".into()));
    }
    let mut init = rng::substream(config.seed, rng::INIT, 0);
    let mut params = ParamStore::new();
    let (dc, du) = (config.dim_common, config.dim_unique);
    let spec = |input_dim, hidden: &[usize], output_dim, stochastic| EncoderSpec {
        input_dim,
        hidden_dims: hidden.to_vec(),
        output_dim,
        activation: config.activation,
        stochastic,
    };
    let mut view_encoders = Vec::new();
    for (i, &d) in view_dims.iter().enumerate() {
        view_encoders.push(Encoder::new(&mut params, &format!("f{i}"), spec(d, &config.hidden_dims, dc, false), &mut init)?);
    }
    let common_head = Encoder::new(&mut params, "common_head", spec(dc, &config.head_hidden_dims, dc, true), &mut init)?;
    let mut unique_encoders = Vec::new();
    for (i, &d) in view_dims.iter().enumerate() {
        unique_encoders.push(Encoder::new(&mut params, &format!("unique{i}"), spec(d, &config.hidden_dims, du, true), &mut init)?);
    }
    let v = view_dims.len();
    let classifier = Linear::new(&mut params, "classifier", dc + v * du, num_classes, &mut init);
    let common_decoder = Linear::new(&mut params, "decoder_common", dc, num_classes, &mut init);
    let unique_decoders = (0..v)
        .map(|i| Linear::new(&mut params, &format!("decoder_unique{i}"), du, num_classes, &mut init))
        .collect();
    let c0 = common_init(&params, &view_encoders)?;
    if c0.dim() != (train_indices.len(), dc) {
        return Err(CimlError::Shape(format!("common variable init has shape {:?}", c0.dim())));
    }
    let common = CommonVariable::new(&mut params, c0)?;

    let mut mine_params = ParamStore::new();
    let mine = |store: &mut ParamStore, name: String, a, b, rng: &mut Rng| {
        MineNetwork::new(store, &name, a, b, &config.mine_hidden_dims, config.activation, config.mine_decay, rng)
    };
    let common_mines = (0..v).map(|i| mine(&mut mine_params, format!("mine_common{i}"), du, dc, &mut init)).collect();
    let mut pairs = Vec::new();
    for i in 0..v {
        for j in i + 1..v {
            pairs.push((i, j, mine(&mut mine_params, format!("mine_pair{i}_{j}"), du, du, &mut init)));
        }
    }
    let optimizer = Adam::new(&params, config.lr);
    let mine_optimizer = Adam::new(&mine_params, config.mine_lr);
    Ok(TrainState {
        config: config.clone(),
        model: Model {
            view_dims: view_dims.to_vec(),
            num_classes,
            view_encoders,
            common_head,
            unique_encoders,
            classifier,
            common_decoder,
            unique_decoders,
            common,
        },
        params,
        mine_params,
        mines: MineSet {
            common: common_mines,
            pairs,
        },
        optimizer,
        mine_optimizer,
        epoch: 0,
        standardizer,
        train_indices,
    })
}

/// Cross-view mean of the `f_i` encodings.
fn mean_view_encoding(params: &ParamStore, encoders: &[Encoder], views: &[Mat]) -> Result<Mat> {
    let mut total: Option<Mat> = None;
    for (enc, x) in encoders.iter().zip(views) {
        let f = crate::encoder::encode_view(params, enc, x)?;
        total = Some(match total {
            Some(t) => t + f,
            None => f,
        });
    }
    Ok(total.expect("at least one view") / encoders.len() as f64)
}

/// Seeded initialisation; `C` starts at the cross-view mean of the initial
/// view encodings of each training sample.
pub fn init_state(config: &TrainConfig, dataset: &MultiViewDataset, splits: &SplitIndices) -> Result<TrainState> {
    let standardizer = Standardizer::fit(dataset, &splits.train);
    let train_views = standardizer.apply_all(&dataset.select_views(&splits.train));
    build_state(
        config,
        &dataset.view_dims(),
        dataset.m(),
        standardizer,
        splits.train.clone(),
        |params, encoders| mean_view_encoding(params, encoders, &train_views),
    )
}

// ---------------------------------------------------------------------------
// Forward graph

struct Graph {
    ce: Var,
    l_common: Var,
    l_unique: Var,
    total: Var,
    terms: Vec<(String, Var)>,
    zc: Var,
    zu: Vec<Var>,
}

impl Graph {
    fn objective(&self, objective: Objective) -> Var {
        match objective {
            Objective::Ce => self.ce,
            Objective::Common => self.l_common,
            Objective::Unique => self.l_unique,
            Objective::Total => self.total,
        }
    }

    fn breakdown(&self, tape: &Tape, hyper: &Hyperparams) -> LossBreakdown {
        let mut b = losses::total_loss(
            tape.scalar(self.ce),
            tape.scalar(self.l_common),
            tape.scalar(self.l_unique),
            hyper.beta3,
            hyper.beta4,
        );
        // Keep the value computed on the tape so logs match what was optimised.
        b.total = tape.scalar(self.total);
        b.terms = self.terms.iter().map(|(k, v)| (k.clone(), tape.scalar(*v))).collect();
        b
    }
}

/// Variance floor for [`CommonEntropy::Batch`].
const ENTROPY_FLOOR: f64 = 1e-6;

#[allow(clippy::too_many_arguments)]
fn build_graph(
    model: &Model,
    config: &TrainConfig,
    mines: &mut MineSet,
    tape: &mut Tape,
    bind: &Binding,
    mine_bind: &Binding,
    positions: &[usize],
    views: &[Mat],
    labels: &[usize],
    noise: &FrozenNoise,
    denominator: Denominator,
) -> Graph {
    let hyper = &config.hyper;
    let clamp = config.logvar_clamp;
    let b = positions.len();
    let mc = config.mc_samples;
    let replicate: Vec<usize> = (0..mc).flat_map(|_| 0..b).collect();
    let rep_labels: Vec<usize> = replicate.iter().map(|&k| labels[k]).collect();
    let rep = |tape: &mut Tape, x: Var| if mc == 1 { x } else { tape.gather_rows(x, &replicate) };
    let mut terms = Vec::new();

    let xs: Vec<Var> = views.iter().map(|x| tape.leaf(x.clone())).collect();
    let fs: Vec<Var> = model
        .view_encoders
        .iter()
        .zip(&xs)
        .map(|(e, &x)| e.forward(tape, bind, x))
        .collect();
    let c = tape.gather_rows(bind.var(model.common.id), positions);
    let alignment = info::alignment_on(tape, &fs, c);

    let (mu_c, lv_c) = model.common_head.forward_stochastic(tape, bind, c, clamp);
    let h_c = match config.common_entropy {
        CommonEntropy::Posterior => info::entropy_on(tape, lv_c),
        CommonEntropy::Batch => info::batch_entropy_on(tape, c, ENTROPY_FLOOR),
    };
    let i_zc_c = info::kl_on(tape, mu_c, lv_c);
    let (mu_r, lv_r) = (rep(tape, mu_c), rep(tape, lv_c));
    let (zc, _) = reparameterize(tape, mu_r, lv_r, noise.common.clone());
    let qc = model.common_decoder.forward(tape, bind, zc);
    let i_zc_y = info::predictive_bound_on(tape, qc, &rep_labels);
    terms.push(("h_c".to_string(), h_c));
    terms.push(("alignment".to_string(), alignment));
    terms.push(("i_zc_y".to_string(), i_zc_y));
    terms.push(("i_zc_c".to_string(), i_zc_c));

    let mut zu = Vec::new();
    let mut per_view = Vec::new();
    for (i, enc) in model.unique_encoders.iter().enumerate() {
        let (mu, lv) = enc.forward_stochastic(tape, bind, xs[i], clamp);
        let i_zu_x = info::kl_on(tape, mu, lv);
        let (mu_r, lv_r) = (rep(tape, mu), rep(tape, lv));
        let (z, _) = reparameterize(tape, mu_r, lv_r, noise.unique[i].clone());
        let q = model.unique_decoders[i].forward(tape, bind, z);
        let i_zu_y = info::predictive_bound_on(tape, q, &rep_labels);
        let i_zu_zc = mines.common[i].dv_on(tape, mine_bind, z, zc, &noise.perm, denominator);
        terms.push((format!("i_zu{i}_y"), i_zu_y));
        terms.push((format!("i_zu{i}_x"), i_zu_x));
        terms.push((format!("i_zu{i}_zc"), i_zu_zc));
        per_view.push((i_zu_y, i_zu_x, i_zu_zc));
        zu.push(z);
    }
    let mut pairs = Vec::new();
    for (i, j, net) in mines.pairs.iter_mut() {
        let p = net.dv_on(tape, mine_bind, zu[*i], zu[*j], &noise.perm, denominator);
        terms.push((format!("i_zu{i}_zu{j}"), p));
        pairs.push(p);
    }

    let l_common = losses::common_loss_on(tape, h_c, alignment, i_zc_y, i_zc_c, hyper.beta1);
    let l_unique = losses::unique_loss_on(tape, &per_view, &pairs, hyper.beta2);
    let mut parts = vec![zc];
    parts.extend(&zu);
    let z = tape.concat_cols(&parts);
    let logits = model.classifier.forward(tape, bind, z);
    let ce = tape.softmax_nll(logits, &rep_labels);
    let total = losses::total_loss_on(tape, ce, l_common, l_unique, hyper.beta3, hyper.beta4);
    Graph {
        ce,
        l_common,
        l_unique,
        total,
        terms,
        zc,
        zu,
    }
}

fn batch_rows(views: &[Mat], labels: &[usize], positions: &[usize]) -> (Vec<Mat>, Vec<usize>) {
    (
        views.iter().map(|x| x.select(Axis(0), positions)).collect(),
        positions.iter().map(|&k| labels[k]).collect(),
    )
}

fn check_finite(b: &LossBreakdown, epoch: usize) -> Result<()> {
    match b.non_finite() {
        Some(term) => Err(CimlError::NonFinite(format!("loss term `{term}` at epoch {}", epoch + 1))),
        None => Ok(()),
    }
}

/// Value of `objective` and its gradient for every main parameter, with the
/// exact MINE gradient. Training-time moving averages are left untouched.
pub fn objective_and_grads(
    state: &TrainState,
    data: &PreparedData,
    positions: &[usize],
    noise: &FrozenNoise,
    objective: Objective,
) -> Result<(f64, Vec<Mat>)> {
    let (views, labels) = batch_rows(&data.train_views, &data.train_labels, positions);
    let mut mines = state.mines.clone();
    let mut tape = Tape::new();
    let bind = state.params.bind(&mut tape);
    let mine_bind = state.mine_params.bind(&mut tape);
    let g = build_graph(
        &state.model,
        &state.config,
        &mut mines,
        &mut tape,
        &bind,
        &mine_bind,
        positions,
        &views,
        &labels,
        noise,
        Denominator::Exact,
    );
    let out = g.objective(objective);
    let grads = bind.grads(&tape.backward(out));
    Ok((tape.scalar(out), grads))
}

/// Breakdown of one forward pass, without updating anything.
pub fn evaluate_batch(state: &TrainState, data: &PreparedData, positions: &[usize], noise: &FrozenNoise) -> LossBreakdown {
    let (views, labels) = batch_rows(&data.train_views, &data.train_labels, positions);
    let mut mines = state.mines.clone();
    let mut tape = Tape::new();
    let bind = state.params.bind(&mut tape);
    let mine_bind = state.mine_params.bind(&mut tape);
    let g = build_graph(
        &state.model,
        &state.config,
        &mut mines,
        &mut tape,
        &bind,
        &mine_bind,
        positions,
        &views,
        &labels,
        noise,
        Denominator::Exact,
    );
    g.breakdown(&tape, &state.config.hyper)
}

// ---------------------------------------------------------------------------
// Training

fn main_step(
    state: &mut TrainState,
    positions: &[usize],
    views: &[Mat],
    labels: &[usize],
    noise: &FrozenNoise,
) -> (LossBreakdown, Mat, Vec<Mat>) {
    let mut tape = Tape::new();
    let bind = state.params.bind(&mut tape);
    let mine_bind = state.mine_params.bind(&mut tape);
    let g = build_graph(
        &state.model,
        &state.config,
        &mut state.mines,
        &mut tape,
        &bind,
        &mine_bind,
        positions,
        views,
        labels,
        noise,
        Denominator::Average { update: false },
    );
    let breakdown = g.breakdown(&tape, &state.config.hyper);
    let grads = bind.grads(&tape.backward(g.total));
    state.optimizer.apply(&mut state.params, &grads);
    let zc = tape.value(g.zc).clone();
    let zu = g.zu.iter().map(|&z| tape.value(z).clone()).collect();
    (breakdown, zc, zu)
}

/// Ascend every DV bound on fixed (detached) representations.
fn mine_step(state: &mut TrainState, zc: &Mat, zu: &[Mat], perm: &[usize]) {
    let mut tape = Tape::new();
    let bind = state.mine_params.bind(&mut tape);
    let zc = tape.leaf(zc.clone());
    let zu: Vec<Var> = zu.iter().map(|z| tape.leaf(z.clone())).collect();
    let mut objective = tape.scalar_leaf(0.0);
    let avg = Denominator::Average { update: true };
    for (i, net) in state.mines.common.iter_mut().enumerate() {
        let dv = net.dv_on(&mut tape, &bind, zu[i], zc, perm, avg);
        objective = tape.sub(objective, dv);
    }
    for (i, j, net) in state.mines.pairs.iter_mut() {
        let dv = net.dv_on(&mut tape, &bind, zu[*i], zu[*j], perm, avg);
        objective = tape.sub(objective, dv);
    }
    let grads = bind.grads(&tape.backward(objective));
    state.mine_optimizer.apply(&mut state.mine_params, &grads);
}

/// Batch positions (into the training split) for an epoch.
pub fn epoch_batches(config: &TrainConfig, n_train: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut rng::substream(config.seed, rng::BATCHING, epoch as u64));
    order
        .chunks(config.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// One pass over the training split; returns the sample-weighted mean breakdown.
pub fn train_epoch(state: &mut TrainState, data: &PreparedData) -> Result<LossBreakdown> {
    let n_train = data.train_labels.len();
    if n_train != state.train_indices.len() {
        return Err(CimlError::Shape(format!(
            "prepared data has {n_train} training rows, the model expects {}",
            state.train_indices.len()
        )));
    }
    let epoch = state.epoch;
    let config = state.config.clone();
    let v = state.model.view_dims.len();
    let mut noise_rng = rng::substream(config.seed, rng::NOISE, epoch as u64);
    let mut shuffle_rng = rng::substream(config.seed, rng::MINE_SHUFFLE, epoch as u64);
    let mut mean = LossBreakdown::default();
    for positions in epoch_batches(&config, n_train, epoch) {
        let (views, labels) = batch_rows(&data.train_views, &data.train_labels, &positions);
        let noise = FrozenNoise::draw(&config, v, positions.len(), &mut noise_rng, &mut shuffle_rng);
        let (breakdown, zc, zu) = main_step(state, &positions, &views, &labels, &noise);
        check_finite(&breakdown, epoch)?;
        mean.add_scaled(&breakdown, positions.len() as f64 / n_train as f64);
        for s in 0..config.mine_steps {
            if s == 0 {
                mine_step(state, &zc, &zu, &noise.perm);
            } else {
                let mut perm = noise.perm.clone();
                perm.shuffle(&mut shuffle_rng);
                mine_step(state, &zc, &zu, &perm);
            }
        }
    }
    // Batches of one sample are skipped, so renormalise.
    let covered: usize = epoch_batches(&config, n_train, epoch).iter().map(Vec::len).sum();
    if covered != n_train {
        let w = n_train as f64 / covered as f64;
        let mut scaled = LossBreakdown::default();
        scaled.add_scaled(&mean, w);
        mean = scaled;
    }
    state.epoch += 1;
    Ok(mean)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// True once `patience` epochs have passed without beating the earlier best
/// total loss by `min_delta`.
pub fn stop_early(rule: &EarlyStop, records: &[EpochRecord]) -> bool {
    let best_before = |end: usize| records[..end].iter().map(|r| r.loss.total).fold(f64::INFINITY, f64::min);
    let n = records.len();
    n > rule.patience && {
        let reference = best_before(n - rule.patience);
        records[n - rule.patience..]
            .iter()
            .all(|r| r.loss.total > reference - rule.min_delta)
    }
}

/// Continue training `state` until `config.epochs` epochs are complete,
/// appending to `history`.
pub fn fit_from(state: &mut TrainState, data: &PreparedData, history: &mut TrainHistory) -> Result<()> {
    while state.epoch < state.config.epochs {
        let start = Instant::now();
        let loss = train_epoch(state, data)?;
        let train_acc = accuracy(&predict_standardized(state, &data.train_views)?, &data.train_labels);
        let test_acc = accuracy(&predict_standardized(state, &data.test_views)?, &data.test_labels);
        history.records.push(EpochRecord {
            epoch: state.epoch,
            loss,
            train_acc,
            test_acc,
        });
        history.wall_seconds.push(start.elapsed().as_secs_f64());
        if let Some(rule) = &state.config.early_stop {
            if stop_early(rule, &history.records) {
                break;
            }
        }
    }
    Ok(())
}

pub fn fit(config: &TrainConfig, dataset: &MultiViewDataset, splits: &SplitIndices) -> Result<(TrainState, TrainHistory)> {
    let mut state = init_state(config, dataset, splits)?;
    let data = PreparedData::new(dataset, splits, &state.standardizer);
    let mut history = TrainHistory::default();
    fit_from(&mut state, &data, &mut history)?;
    Ok((state, history))
}

// ---------------------------------------------------------------------------
// Inference

fn check_views(state: &TrainState, views: &[Mat]) -> Result<()> {
    if views.len() != state.model.view_dims.len() {
        return Err(CimlError::Shape(format!(
            "model has {} views, got {}",
            state.model.view_dims.len(),
            views.len()
        )));
    }
    let n = views[0].nrows();
    for (i, (x, &d)) in views.iter().zip(&state.model.view_dims).enumerate() {
        if x.ncols() != d {
            return Err(CimlError::view(i, format!("expected {d} features, got {}", x.ncols())));
        }
        if x.nrows() != n {
            return Err(CimlError::view(i, format!("expected {n} rows, got {}", x.nrows())));
        }
    }
    Ok(())
}

/// Posterior means on already standardised views.
pub fn represent_standardized(state: &TrainState, views: &[Mat]) -> Result<RepresentationBundle> {
    check_views(state, views)?;
    let m = &state.model;
    let c = mean_view_encoding(&state.params, &m.view_encoders, views)?;
    let common = crate::encoder::encode_view(&state.params, &m.common_head, &c)?;
    let unique = m
        .unique_encoders
        .iter()
        .zip(views)
        .map(|(e, x)| crate::encoder::encode_view(&state.params, e, x))
        .collect::<Result<_>>()?;
    Ok(RepresentationBundle { common, unique })
}

/// Deterministic representation of raw (unstandardised) views.
pub fn infer_representation(state: &TrainState, views: &[Mat]) -> Result<RepresentationBundle> {
    check_views(state, views)?;
    represent_standardized(state, &state.standardizer.apply_all(views))
}

fn classify(state: &TrainState, z: &Mat) -> Mat {
    let cls = &state.model.classifier;
    let mut out = z.dot(state.params.get(cls.weight));
    out += &state.params.get(cls.bias).row(0);
    out
}

fn argmax_rows(logits: &Mat) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &x)| if x > best.1 { (j, x) } else { best })
                .0
        })
        .collect()
}

fn predict_standardized(state: &TrainState, views: &[Mat]) -> Result<Vec<usize>> {
    let z = represent_standardized(state, views)?.joint();
    Ok(argmax_rows(&classify(state, &z)))
}

/// Classifier logits for raw views.
pub fn predict_logits(state: &TrainState, views: &[Mat]) -> Result<Mat> {
    Ok(classify(state, &infer_representation(state, views)?.joint()))
}

pub fn predict(state: &TrainState, views: &[Mat]) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_logits(state, views)?))
}

/// Mean Euclidean distance between the learned rows of `C` and the
/// cross-view mean encoding used in their place at inference.
pub fn common_consistency(state: &TrainState, dataset: &MultiViewDataset) -> Result<f64> {
    let views = state
        .standardizer
        .apply_all(&dataset.select_views(&state.train_indices));
    let approx = mean_view_encoding(&state.params, &state.model.view_encoders, &views)?;
    let c = state.model.common.value(&state.params);
    let d = (&approx - c).mapv(|x| x * x).sum_axis(Axis(1)).mapv(f64::sqrt);
    Ok(d.mean().unwrap_or(0.0))
}

/// Operation counts for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub main_parameters: usize,
    pub mine_parameters: usize,
    /// Multiply-adds of one training forward pass per sample.
    pub forward_macs_per_sample: usize,
    /// Rough multiply-adds per epoch: forward plus a backward of twice the cost.
    pub epoch_macs: usize,
}

pub fn complexity(state: &TrainState, n_train: usize) -> ComplexityEstimate {
    let macs: usize = state
        .params
        .values()
        .iter()
        .zip(state.params.names())
        .filter(|(v, name)| v.nrows() > 1 && name.ends_with(".weight"))
        .map(|(v, _)| v.len())
        .sum();
    let mine_macs: usize = state
        .mine_params
        .values()
        .iter()
        .zip(state.mine_params.names())
        .filter(|(_, name)| name.ends_with(".weight"))
        .map(|(v, _)| v.len())
        .sum::<usize>()
        * 2;
    let per_sample = (macs + mine_macs) * state.config.mc_samples.max(1);
    ComplexityEstimate {
        main_parameters: state.params.num_scalars(),
        mine_parameters: state.mine_params.num_scalars(),
        forward_macs_per_sample: per_sample,
        epoch_macs: 3 * per_sample * n_train,
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"CIMLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: TrainConfig,
    view_dims: Vec<usize>,
    num_classes: usize,
    epoch: usize,
    train_indices: Vec<usize>,
    param_names: Vec<String>,
    mine_param_names: Vec<String>,
    moving_averages: Vec<MovingAverage>,
    adam_step: u64,
    mine_adam_step: u64,
}

fn write_mats(out: &mut Vec<u8>, mats: &[Mat]) {
    for m in mats {
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CimlError::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mats(&mut self, count: usize) -> Result<Vec<Mat>> {
        (0..count)
            .map(|_| {
                let r = self.u64()? as usize;
                let c = self.u64()? as usize;
                let len = r.checked_mul(c).ok_or_else(|| CimlError::Data("bad matrix shape".into()))?;
                let raw = self.take(len.checked_mul(8).ok_or_else(|| CimlError::Data("bad matrix shape".into()))?)?;
                let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Ok(Mat::from_shape_vec((r, c), data).expect("length checked"))
            })
            .collect()
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        view_dims: state.model.view_dims.clone(),
        num_classes: state.model.num_classes,
        epoch: state.epoch,
        train_indices: state.train_indices.clone(),
        param_names: state.params.names().to_vec(),
        mine_param_names: state.mine_params.names().to_vec(),
        moving_averages: state.mines.averages(),
        adam_step: state.optimizer.step,
        mine_adam_step: state.mine_optimizer.step,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CimlError::Data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    write_mats(&mut out, state.params.values());
    write_mats(&mut out, &state.optimizer.first);
    write_mats(&mut out, &state.optimizer.second);
    write_mats(&mut out, state.mine_params.values());
    write_mats(&mut out, &state.mine_optimizer.first);
    write_mats(&mut out, &state.mine_optimizer.second);
    write_mats(&mut out, &state.standardizer.means);
    write_mats(&mut out, &state.standardizer.stds);
    let mut f = std::fs::File::create(path).map_err(|e| CimlError::io(path, e))?;
    f.write_all(&out).map_err(|e| CimlError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CimlError::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(CimlError::Data(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CimlError::Data(format!("unsupported checkpoint version {version}")));
    }
    let len = cur.u64()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(cur.take(len)?).map_err(|e| CimlError::Data(format!("checkpoint header: {e}")))?;
    let np = header.param_names.len();
    let nm = header.mine_param_names.len();
    let v = header.view_dims.len();
    let params = cur.mats(np)?;
    let first = cur.mats(np)?;
    let second = cur.mats(np)?;
    let mine_params = cur.mats(nm)?;
    let mine_first = cur.mats(nm)?;
    let mine_second = cur.mats(nm)?;
    let means = cur.mats(v)?;
    let stds = cur.mats(v)?;
    let standardizer = Standardizer { means, stds };
    let dc = header.config.dim_common;
    let n_train = header.train_indices.len();
    let mut state = build_state(
        &header.config,
        &header.view_dims,
        header.num_classes,
        standardizer,
        header.train_indices,
        |_, _| Ok(Mat::zeros((n_train, dc))),
    )?;
    state.params.replace_values(&header.param_names, params)?;
    state.mine_params.replace_values(&header.mine_param_names, mine_params)?;
    state.optimizer.first = first;
    state.optimizer.second = second;
    state.optimizer.step = header.adam_step;
    state.mine_optimizer.first = mine_first;
    state.mine_optimizer.second = mine_second;
    state.mine_optimizer.step = header.mine_adam_step;
    state.mines.set_averages(&header.moving_averages)?;
    state.epoch = header.epoch;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, make_splits, SyntheticSpec};

    fn tiny() -> (MultiViewDataset, SplitIndices, TrainConfig) {
        let spec = SyntheticSpec {
            n: 60,
            v: 2,
            m: 2,
            dim_common: 2,
            dim_unique: 2,
            view_dims: vec![4, 5],
            noise_std: 0.1,
            label_mix: vec![1.0, 0.5, 0.5],
            label_scale: 3.0,
            seed: 4,
        };
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let splits = make_splits(&ds, 0.8, 1).unwrap();
        let config = TrainConfig {
            dim_common: 2,
            dim_unique: 2,
            hidden_dims: vec![8],
            head_hidden_dims: vec![8],
            mine_hidden_dims: vec![8, 8],
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        (ds, splits, config)
    }

    #[test]
    fn init_is_deterministic_and_structural() {
        let (ds, splits, config) = tiny();
        let a = init_state(&config, &ds, &splits).unwrap();
        let b = init_state(&config, &ds, &splits).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.mine_params, b.mine_params);
        assert_eq!(a.model.view_encoders.len(), 2);
        assert_eq!(a.model.unique_encoders.len(), 2);
        assert_eq!(a.model.common.value(&a.params).dim(), (splits.train.len(), 2));
        assert_eq!(a.mines.common.len(), 2);
        assert_eq!(a.mines.pairs.len(), 1);
        // C starts at the cross-view mean, so the consistency gap is zero.
        assert!(common_consistency(&a, &ds).unwrap() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { dim_unique: 0, ..Default::default() },
            TrainConfig { mc_samples: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(CimlError::Config(_))));
        }
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn steps_respect_the_parameter_partition() {
        let (ds, splits, config) = tiny();
        let mut state = init_state(&config, &ds, &splits).unwrap();
        let data = PreparedData::new(&ds, &splits, &state.standardizer);
        let positions: Vec<usize> = (0..16).collect();
        let (views, labels) = batch_rows(&data.train_views, &data.train_labels, &positions);
        let mut r1 = rng::substream(0, "a", 0);
        let mut r2 = rng::substream(0, "b", 0);
        let noise = FrozenNoise::draw(&config, 2, 16, &mut r1, &mut r2);

        let mine_before = state.mine_params.clone();
        let main_before = state.params.clone();
        let (_, zc, zu) = main_step(&mut state, &positions, &views, &labels, &noise);
        assert_eq!(state.mine_params, mine_before);
        assert_ne!(state.params, main_before);

        let main_after = state.params.clone();
        mine_step(&mut state, &zc, &zu, &noise.perm);
        assert_eq!(state.params, main_after);
        assert_ne!(state.mine_params, mine_before);
    }

    #[test]
    fn fit_history_and_shapes() {
        let (ds, splits, config) = tiny();
        let (state, history) = fit(&config, &ds, &splits).unwrap();
        assert_eq!(history.len(), 3);
        assert_eq!(state.epoch, 3);
        let rep = infer_representation(&state, &ds.select_views(&splits.test)).unwrap();
        assert_eq!(rep.width(), 2 + 2 * 2);
        assert_eq!(rep.rows(), splits.test.len());
        assert!(infer_representation(&state, &ds.views()[..1]).is_err());
        for r in &history.records {
            assert!((r.loss.total - (r.loss.ce + r.loss.beta3 * r.loss.l_common + r.loss.beta4 * r.loss.l_unique)).abs() < 1e-9 * (1.0 + r.loss.total.abs()));
        }
    }

    #[test]
    fn single_view_common_is_the_encoding() {
        let (ds, splits, config) = tiny();
        let one = MultiViewDataset::new("one", vec![ds.view(0).clone()], ds.labels().to_vec(), ds.m()).unwrap();
        let state = init_state(&config, &one, &splits).unwrap();
        assert!(state.mines.pairs.is_empty());
        let x = state.standardizer.apply_all(&one.select_views(&splits.test));
        let f = crate::encoder::encode_view(&state.params, &state.model.view_encoders[0], &x[0]).unwrap();
        let direct = crate::encoder::encode_view(&state.params, &state.model.common_head, &f).unwrap();
        let rep = represent_standardized(&state, &x).unwrap();
        assert_eq!(rep.common, direct);
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let (ds, splits, config) = tiny();
        let (full, full_hist) = fit(&config, &ds, &splits).unwrap();

        let mut state = init_state(&config, &ds, &splits).unwrap();
        let data = PreparedData::new(&ds, &splits, &state.standardizer);
        let mut hist = TrainHistory::default();
        state.config.epochs = 1;
        fit_from(&mut state, &data, &mut hist).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, state.params);
        assert_eq!(loaded.mines, state.mines);
        loaded.config.epochs = 3;
        fit_from(&mut loaded, &data, &mut hist).unwrap();
        assert_eq!(loaded.params, full.params);
        assert_eq!(hist.records, full_hist.records);
    }

    #[test]
    fn mc_samples_replicate_rows() {
        let (ds, splits, mut config) = tiny();
        config.mc_samples = 3;
        let state = init_state(&config, &ds, &splits).unwrap();
        let data = PreparedData::new(&ds, &splits, &state.standardizer);
        let mut r1 = rng::substream(0, "a", 0);
        let mut r2 = rng::substream(0, "b", 0);
        let noise = FrozenNoise::draw(&config, 2, 5, &mut r1, &mut r2);
        assert_eq!(noise.common.nrows(), 15);
        let b = evaluate_batch(&state, &data, &[0, 1, 2, 3, 4], &noise);
        assert!(b.non_finite().is_none());
    }

    #[test]
    fn common_entropy_modes() {
        let (ds, splits, mut config) = tiny();
        let positions = [0, 1, 2, 3, 4, 5];
        let mut h = Vec::new();
        for mode in [CommonEntropy::Posterior, CommonEntropy::Batch] {
            config.common_entropy = mode;
            let state = init_state(&config, &ds, &splits).unwrap();
            let data = PreparedData::new(&ds, &splits, &state.standardizer);
            let mut r1 = rng::substream(0, "a", 0);
            let mut r2 = rng::substream(0, "b", 0);
            let noise = FrozenNoise::draw(&config, 2, positions.len(), &mut r1, &mut r2);
            let b = evaluate_batch(&state, &data, &positions, &noise);
            let c = state.model.common.value(&state.params).select(Axis(0), &positions);
            if mode == CommonEntropy::Batch {
                let oracle = info::batch_entropy(&c, ENTROPY_FLOOR).unwrap();
                assert!((b.terms["h_c"] - oracle).abs() < 1e-12);
            }
            h.push(b.terms["h_c"]);
        }
        assert_ne!(h[0], h[1]);
        let text = toml::to_string(&TrainConfig { common_entropy: CommonEntropy::Batch, ..Default::default() }).unwrap();
        assert!(text.contains("common_entropy = \"batch\""));
    }
}
