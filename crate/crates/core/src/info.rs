//! Mutual-information and entropy estimators.
//!
//! Each estimator has a value-level form on plain matrices and a tape-level
//! form used inside the training objective. All quantities are in nats.
//!
//! * alignment: `sum_i mean_k ||f_i(x_k) - c_k||^2`
//! * Gaussian entropy of a diagonal posterior: `mean_k sum_j 0.5 ln(2 pi e s_kj^2)`
//! * KL to the standard normal prior: `mean_k sum_j 0.5 (s^2 + mu^2 - 1 - ln s^2)`
//! * predictive lower bound: `mean_k ln q(y_k | z_k)`
//! * MINE: the Donsker-Varadhan bound `E_joint[T] - ln E_marginal[e^T]`

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::encoder::StochasticEncoding;
use crate::error::{CimlError, Result};
use crate::nn::{Activation, Adam, Binding, Mlp, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{log_softmax_rows, Mat, Tape, Var};

/// `0.5 * ln(2 pi e)`, the differential entropy of N(0, 1).
pub const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiKind {
    LowerBoundY,
    KlUpperBound,
    Mine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub value: f64,
    pub kind: MiKind,
}

// ---------------------------------------------------------------------------
// Value-level estimators

pub fn gk_alignment(view_encodings: &[Mat], common: &Mat) -> Result<f64> {
    let mut total = 0.0;
    for (i, f) in view_encodings.iter().enumerate() {
        if f.dim() != common.dim() {
            return Err(CimlError::Shape(format!(
                "encoding of view {i} is {:?}, common batch is {:?}",
                f.dim(),
                common.dim()
            )));
        }
        let n = f.nrows().max(1) as f64;
        total += (f - common).mapv(|d| d * d).sum() / n;
    }
    Ok(total)
}

pub fn gaussian_entropy(std: &Mat) -> Result<f64> {
    if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(CimlError::Data("gaussian_entropy needs finite, positive std".into()));
    }
    let n = std.nrows().max(1) as f64;
    Ok(std.iter().map(|s| HALF_LN_2PI_E + s.ln()).sum::<f64>() / n)
}

/// Entropy of a Gaussian fitted to the rows of `samples`, one independent
/// dimension per column, using the population variance plus `floor`.
pub fn batch_entropy(samples: &Mat, floor: f64) -> Result<f64> {
    if samples.nrows() < 2 {
        return Err(CimlError::Data("batch_entropy needs at least 2 rows".into()));
    }
    let var = samples.var_axis(ndarray::Axis(0), 0.0).mapv(|v| v + floor);
    let std = var.mapv(f64::sqrt).insert_axis(ndarray::Axis(0));
    gaussian_entropy(&std)
}

pub fn kl_to_standard_normal(enc: &StochasticEncoding) -> f64 {
    let n = enc.mean.nrows().max(1) as f64;
    let total: f64 = enc
        .mean
        .iter()
        .zip(enc.std.iter())
        .map(|(mu, s)| {
            let var = s * s;
            0.5 * (var + mu * mu - 1.0 - var.ln())
        })
        .sum();
    total / n
}

fn check_labels(logits: &Mat, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(CimlError::Shape(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.ncols()) {
        return Err(CimlError::Data(format!(
            "label {y} out of range for {} classes",
            logits.ncols()
        )));
    }
    Ok(())
}

/// `mean_k ln q(y_k | z_k)` with `q = softmax(logits)`; always `<= 0`.
pub fn predictive_lower_bound(logits: &Mat, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let lsm = log_softmax_rows(logits);
    let n = labels.len().max(1) as f64;
    Ok(labels.iter().enumerate().map(|(k, &y)| lsm[[k, y]]).sum::<f64>() / n)
}

// ---------------------------------------------------------------------------
// Tape-level estimators

pub fn alignment_on(tape: &mut Tape, view_encodings: &[Var], common: Var) -> Var {
    let mut total: Option<Var> = None;
    for &f in view_encodings {
        let d = tape.sub(f, common);
        let sq = tape.square(d);
        let per_row = tape.row_sum(sq);
        let term = tape.mean(per_row);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.unwrap_or_else(|| tape.scalar_leaf(0.0))
}

/// Gaussian entropy written in terms of the (clamped) log-variance.
pub fn entropy_on(tape: &mut Tape, logvar: Var) -> Var {
    let half = tape.scale(logvar, 0.5);
    let shifted = tape.add_scalar(half, HALF_LN_2PI_E);
    let per_row = tape.row_sum(shifted);
    tape.mean(per_row)
}

/// Tape version of [`batch_entropy`].
pub fn batch_entropy_on(tape: &mut Tape, samples: Var, floor: f64) -> Var {
    let rows = tape.shape(samples).0;
    let avg = tape.leaf(Mat::from_elem((1, rows), 1.0 / rows as f64));
    let mean = tape.matmul(avg, samples);
    let neg_mean = tape.neg(mean);
    let centred = tape.add_bias(samples, neg_mean);
    let sq = tape.square(centred);
    let var = tape.matmul(avg, sq);
    let var = tape.add_scalar(var, floor);
    let log_var = tape.ln(var);
    entropy_on(tape, log_var)
}

pub fn kl_on(tape: &mut Tape, mean: Var, logvar: Var) -> Var {
    let var = tape.exp(logvar);
    let mu2 = tape.square(mean);
    let a = tape.add(var, mu2);
    let b = tape.sub(a, logvar);
    let c = tape.add_scalar(b, -1.0);
    let c = tape.scale(c, 0.5);
    let per_row = tape.row_sum(c);
    tape.mean(per_row)
}

pub fn predictive_bound_on(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let nll = tape.softmax_nll(logits, labels);
    tape.neg(nll)
}

// ---------------------------------------------------------------------------
// MINE

/// Exponential moving average of `E_marginal[e^T]` with bias correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingAverage {
    pub decay: f64,
    pub value: f64,
    pub steps: u64,
}

impl MovingAverage {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            value: 0.0,
            steps: 0,
        }
    }

    pub fn update(&mut self, x: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * x;
        self.steps += 1;
    }

    /// Bias-corrected average, `None` before the first update.
    pub fn corrected(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.value / (1.0 - self.decay.powi(self.steps.min(i32::MAX as u64) as i32)))
    }
}

/// Statistics network `T(a, b)` and its moving-average state.
#[derive(Clone, Debug, PartialEq)]
pub struct MineNetwork {
    pub net: Mlp,
    pub dim_a: usize,
    pub dim_b: usize,
    pub average: MovingAverage,
}

/// How the gradient of the log-partition term is normalised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Denominator {
    /// Exact batch value; the gradient is that of the DV bound itself.
    Exact,
    /// Bias-corrected moving average, optionally folding in this batch first.
    Average { update: bool },
}

impl MineNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim_a: usize,
        dim_b: usize,
        hidden: &[usize],
        activation: Activation,
        decay: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut dims = vec![dim_a + dim_b];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self {
            net: Mlp::new(store, name, &dims, activation, rng),
            dim_a,
            dim_b,
            average: MovingAverage::new(decay),
        }
    }

    /// Set the output layer to zero weights and bias `c`, making `T` constant.
    pub fn set_constant(&self, store: &mut ParamStore, c: f64) {
        let last = self.net.layers.last().unwrap();
        store.get_mut(last.weight).fill(0.0);
        store.get_mut(last.bias).fill(c);
    }

    pub fn statistic(&self, tape: &mut Tape, bind: &Binding, a: Var, b: Var) -> Var {
        let input = tape.concat_cols(&[a, b]);
        self.net.forward(tape, bind, input)
    }

    /// `mean T(a, b) - ln mean exp T(a, b[perm])` with the exact gradient.
    pub fn dv_exact(&self, tape: &mut Tape, bind: &Binding, a: Var, b: Var, perm: &[usize]) -> Var {
        let (joint_mean, marginal) = self.dv_parts(tape, bind, a, b, perm);
        let log_term = tape.log_mean_exp(marginal, None);
        tape.sub(joint_mean, log_term)
    }

    /// Same forward value as [`Self::dv_exact`]; `denominator` only changes
    /// the gradient of the log term.
    pub fn dv_on(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        a: Var,
        b: Var,
        perm: &[usize],
        denominator: Denominator,
    ) -> Var {
        let (joint_mean, marginal) = self.dv_parts(tape, bind, a, b, perm);
        let fixed = match denominator {
            Denominator::Exact => None,
            Denominator::Average { update } => {
                if update {
                    let batch = tape.value(marginal).mapv(f64::exp).mean().unwrap_or(1.0);
                    self.average.update(batch);
                }
                self.average.corrected()
            }
        };
        let log_term = tape.log_mean_exp(marginal, fixed);
        tape.sub(joint_mean, log_term)
    }

    fn dv_parts(&self, tape: &mut Tape, bind: &Binding, a: Var, b: Var, perm: &[usize]) -> (Var, Var) {
        let joint = self.statistic(tape, bind, a, b);
        let joint_mean = tape.mean(joint);
        let shuffled = tape.gather_rows(b, perm);
        (joint_mean, self.statistic(tape, bind, a, shuffled))
    }

    fn check(&self, a: &Mat, b: &Mat) -> Result<()> {
        if a.nrows() != b.nrows() {
            return Err(CimlError::Shape(format!(
                "MINE batches differ in size: {} vs {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if a.nrows() < 2 {
            return Err(CimlError::Data("MINE needs a batch of at least 2 samples".into()));
        }
        if a.ncols() != self.dim_a || b.ncols() != self.dim_b {
            return Err(CimlError::Shape(format!(
                "MINE network expects widths ({}, {}), got ({}, {})",
                self.dim_a,
                self.dim_b,
                a.ncols(),
                b.ncols()
            )));
        }
        Ok(())
    }
}

/// Donsker-Varadhan estimate with marginals formed by `perm` applied to `b`.
pub fn mine_estimate_with(
    store: &ParamStore,
    net: &MineNetwork,
    a: &Mat,
    b: &Mat,
    perm: &[usize],
) -> Result<MIEstimate> {
    net.check(a, b)?;
    if perm.len() != a.nrows() {
        return Err(CimlError::Shape("permutation length differs from batch".into()));
    }
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let a = tape.leaf(a.clone());
    let b = tape.leaf(b.clone());
    let bound = net.dv_exact(&mut tape, &bind, a, b, perm);
    let value = tape.scalar(bound);
    if !value.is_finite() {
        return Err(CimlError::NonFinite("MINE estimate".into()));
    }
    Ok(MIEstimate {
        value,
        kind: MiKind::Mine,
    })
}

/// Donsker-Varadhan estimate with a seeded in-batch shuffle.
pub fn mine_estimate(store: &ParamStore, net: &MineNetwork, a: &Mat, b: &Mat, shuffle_seed: u64) -> Result<MIEstimate> {
    let mut perm: Vec<usize> = (0..a.nrows()).collect();
    perm.shuffle(&mut rng::substream(shuffle_seed, rng::MINE_SHUFFLE, 0));
    mine_estimate_with(store, net, a, b, &perm)
}

/// Settings for fitting a standalone MINE probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineProbeConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay: f64,
    /// Shuffles averaged for the final estimate.
    pub eval_shuffles: usize,
}

impl Default for MineProbeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            lr: 1e-3,
            batch_size: 256,
            epochs: 20,
            decay: 0.99,
            eval_shuffles: 10,
        }
    }
}

/// A MINE network fitted on `(a, b)` pairs.
#[derive(Clone, Debug)]
pub struct MineProbe {
    pub store: ParamStore,
    pub net: MineNetwork,
}

impl MineProbe {
    /// Maximise the bias-corrected DV objective on `(a, b)`.
    pub fn fit(a: &Mat, b: &Mat, config: &MineProbeConfig, seed: u64) -> Result<Self> {
        if a.nrows() != b.nrows() || a.nrows() < 2 {
            return Err(CimlError::Data("MINE probe needs matching samples, at least 2".into()));
        }
        let mut init = rng::substream(seed, rng::INIT, 0);
        let mut store = ParamStore::new();
        let mut net = MineNetwork::new(
            &mut store,
            "probe",
            a.ncols(),
            b.ncols(),
            &config.hidden,
            config.activation,
            config.decay,
            &mut init,
        );
        let mut opt = Adam::new(&store, config.lr);
        let n = a.nrows();
        let batch = config.batch_size.clamp(2, n);
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::substream(seed, rng::BATCHING, epoch as u64));
            let mut shuffle = rng::substream(seed, rng::MINE_SHUFFLE, epoch as u64);
            for chunk in order.chunks(batch).filter(|c| c.len() >= 2) {
                let ab = a.select(ndarray::Axis(0), chunk);
                let bb = b.select(ndarray::Axis(0), chunk);
                let mut perm: Vec<usize> = (0..chunk.len()).collect();
                perm.shuffle(&mut shuffle);
                let mut tape = Tape::new();
                let bind = store.bind(&mut tape);
                let av = tape.leaf(ab);
                let bv = tape.leaf(bb);
                let bound = net.dv_on(&mut tape, &bind, av, bv, &perm, Denominator::Average { update: true });
                let loss = tape.neg(bound);
                if !tape.scalar(loss).is_finite() {
                    return Err(CimlError::NonFinite("MINE probe objective".into()));
                }
                let grads = bind.grads(&tape.backward(loss));
                opt.apply(&mut store, &grads);
            }
        }
        Ok(Self { store, net })
    }

    /// Mean DV estimate over `shuffles` seeded permutations of `b`.
    pub fn estimate(&self, a: &Mat, b: &Mat, shuffles: usize, seed: u64) -> Result<f64> {
        let shuffles = shuffles.max(1);
        let mut total = 0.0;
        for s in 0..shuffles {
            let mut perm: Vec<usize> = (0..a.nrows()).collect();
            perm.shuffle(&mut rng::substream(seed, "mine-eval", s as u64));
            total += mine_estimate_with(&self.store, &self.net, a, b, &perm)?.value;
        }
        Ok(total / shuffles as f64)
    }
}
