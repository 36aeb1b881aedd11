//! Parameter storage, dense layers, and the Adam optimiser.

use ndarray::Zip;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CimlError, Result};
use crate::rng::Rng;
use crate::tape::{Grads, Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A flat, named collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Binding { vars }
    }

    /// Rebuild a store from names and values, checking they agree with `self`.
    pub fn replace_values(&mut self, names: &[String], values: Vec<Mat>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(CimlError::Data("parameter names do not match the model".into()));
        }
        for (old, new) in self.values.iter().zip(&values) {
            if old.dim() != new.dim() {
                return Err(CimlError::Shape(format!(
                    "parameter shape {:?} does not match model shape {:?}",
                    new.dim(),
                    old.dim()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for each parameter, in store order.
    pub fn grads(&self, grads: &Grads) -> Vec<Mat> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = CimlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(CimlError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Glorot-uniform matrix of shape `fan_in x fan_out`.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

/// Affine layer `x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Mat::zeros((in_dim, out_dim)));
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let h = tape.matmul(x, bind.var(self.weight));
        tape.add_bias(h, bind.var(self.bias))
    }
}

/// Fully connected network; `activation` follows every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h);
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|v| Mat::zeros(v.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let sq = tape.square(bind.var(id));
            let loss = tape.sum(sq);
            let grads = bind.grads(&tape.backward(loss));
            opt.apply(&mut store, &grads);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn mlp_shapes_and_determinism() {
        let build = || {
            let mut rng = Rng::seed_from_u64(9);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "f", &[4, 8, 3], Activation::Tanh, &mut rng);
            (store, mlp)
        };
        let (a, mlp) = build();
        let (b, _) = build();
        assert_eq!(a, b);
        let mut tape = Tape::new();
        let bind = a.bind(&mut tape);
        let x = tape.leaf(Mat::ones((5, 4)));
        let y = mlp.forward(&mut tape, &bind, x);
        assert_eq!(tape.shape(y), (5, 3));
    }
}
