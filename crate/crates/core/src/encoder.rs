//! View encoders and Gaussian posterior heads with reparameterised sampling.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CimlError, Result};
use crate::nn::{Activation, Binding, Linear, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub stochastic: bool,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(CimlError::Config(format!(
                "encoder dimensions must be positive: in {}, hidden {:?}, out {}",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        Ok(())
    }
}

/// Bounds applied to log-variances before exponentiation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogvarClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for LogvarClamp {
    fn default() -> Self {
        Self { min: -10.0, max: 10.0 }
    }
}

/// MLP trunk with a mean head and, when stochastic, a log-variance head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub hidden: Vec<Linear>,
    pub mean_head: Linear,
    pub logvar_head: Option<Linear>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut hidden = Vec::new();
        let mut width = spec.input_dim;
        for (i, &h) in spec.hidden_dims.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{name}.hidden{i}"), width, h, rng));
            width = h;
        }
        let mean_head = Linear::new(store, &format!("{name}.mean"), width, spec.output_dim, rng);
        let logvar_head = if spec.stochastic {
            let head = Linear::new(store, &format!("{name}.logvar"), width, spec.output_dim, rng);
            // Start close to unit variance.
            store.get_mut(head.weight).mapv_inplace(|w| 0.1 * w);
            Some(head)
        } else {
            None
        };
        Ok(Self {
            spec,
            hidden,
            mean_head,
            logvar_head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn trunk(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(tape, bind, h);
            h = self.spec.activation.apply(tape, h);
        }
        h
    }

    /// Deterministic output (the mean head).
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let h = self.trunk(tape, bind, x);
        self.mean_head.forward(tape, bind, h)
    }

    /// Posterior `(mean, clamped log-variance)`.
    pub fn forward_stochastic(&self, tape: &mut Tape, bind: &Binding, x: Var, clamp: LogvarClamp) -> (Var, Var) {
        let h = self.trunk(tape, bind, x);
        let mean = self.mean_head.forward(tape, bind, h);
        let head = self
            .logvar_head
            .as_ref()
            .expect("forward_stochastic on a deterministic encoder");
        let logvar = head.forward(tape, bind, h);
        let logvar = tape.clamp(logvar, clamp.min, clamp.max);
        (mean, logvar)
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(CimlError::Shape(format!(
                "encoder expects {} input features, got {}",
                self.spec.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticEncoding {
    pub mean: Mat,
    pub std: Mat,
}

impl StochasticEncoding {
    pub fn new(mean: Mat, std: Mat) -> Result<Self> {
        if mean.dim() != std.dim() {
            return Err(CimlError::Shape(format!(
                "mean {:?} and std {:?} differ",
                mean.dim(),
                std.dim()
            )));
        }
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(CimlError::NonFinite("posterior mean".into()));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CimlError::NonFinite("posterior std (must be finite and > 0)".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn from_logvar(mean: Mat, logvar: &Mat) -> Result<Self> {
        Self::new(mean, logvar.mapv(|lv| (0.5 * lv).exp()))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mean.dim()
    }
}

/// `f_i(X)`: deterministic features for a batch.
pub fn encode_view(store: &ParamStore, encoder: &Encoder, x: &Mat) -> Result<Mat> {
    encoder.check_input(x)?;
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let input = tape.leaf(x.clone());
    let out = encoder.forward(&mut tape, &bind, input);
    Ok(tape.value(out).clone())
}

/// Posterior parameters with `std = exp(0.5 * logvar)`.
pub fn encode_stochastic(
    store: &ParamStore,
    encoder: &Encoder,
    x: &Mat,
    clamp: LogvarClamp,
) -> Result<StochasticEncoding> {
    encoder.check_input(x)?;
    if encoder.logvar_head.is_none() {
        return Err(CimlError::Config("encoder has no log-variance head".into()));
    }
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let input = tape.leaf(x.clone());
    let (mean, logvar) = encoder.forward_stochastic(&mut tape, &bind, input, clamp);
    StochasticEncoding::from_logvar(tape.value(mean).clone(), tape.value(logvar))
}

pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// `mean + std * eta` for a given noise matrix.
pub fn sample_with(enc: &StochasticEncoding, eta: &Mat) -> Mat {
    &enc.mean + &(&enc.std * eta)
}

/// Reparameterised draw; deterministic in `noise_seed`.
pub fn sample(enc: &StochasticEncoding, noise_seed: u64) -> Mat {
    let (rows, cols) = enc.dim();
    let mut r = rng::substream(noise_seed, rng::NOISE, 0);
    sample_with(enc, &standard_normal(&mut r, rows, cols))
}

/// Tape version of the reparameterisation: returns `(z, std)`.
/// Gradients reach `mean` and `logvar`; `eta` is a constant.
pub fn reparameterize(tape: &mut Tape, mean: Var, logvar: Var, eta: Mat) -> (Var, Var) {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eta = tape.leaf(eta);
    let noise = tape.mul(std, eta);
    (tape.add(mean, noise), std)
}

/// The per-sample common variable `C`, one row per training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonVariable {
    pub id: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl CommonVariable {
    pub fn new(store: &mut ParamStore, init: Mat) -> Result<Self> {
        if init.iter().any(|x| !x.is_finite()) {
            return Err(CimlError::NonFinite("common variable initialisation".into()));
        }
        let (rows, dim) = init.dim();
        let id = store.add("common_variable", init);
        Ok(Self { id, rows, dim })
    }

    pub fn value<'a>(&self, store: &'a ParamStore) -> &'a Mat {
        store.get(self.id)
    }
}
