//! Composition of estimator outputs into the common, unique, classification
//! and total objectives.
//!
//! * `L_c = -H(C) + alignment - (I(Zc;Y) - b1 I(Zc;C))`
//! * `L_u = -sum_i [I(Zu_i;Y) - b2 I(Zu_i;X_i) - I(Zu_i;Zc)] + sum_{i!=j} I(Zu_i;Zu_j)`
//! * `L = ce + b3 L_c + b4 L_u`

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CimlError, Result};
use crate::info;
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta1: 1e-4,
            beta2: 1e-4,
            beta3: 1.0,
            beta4: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("beta4", self.beta4),
        ] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(CimlError::Config(format!("{name} must be finite and >= 0, got {b}")));
            }
        }
        Ok(())
    }
}

/// Every scalar of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l_common: f64,
    pub l_unique: f64,
    pub total: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    /// Name of the first non-finite entry, if any.
    pub fn non_finite(&self) -> Option<String> {
        [("ce", self.ce), ("l_common", self.l_common), ("l_unique", self.l_unique), ("total", self.total)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .chain(self.terms.iter().map(|(k, v)| (k.clone(), *v)))
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k)
    }

    /// Accumulate `self += w * other` over every field and term.
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.ce += w * other.ce;
        self.l_common += w * other.l_common;
        self.l_unique += w * other.l_unique;
        self.total += w * other.total;
        self.beta3 = other.beta3;
        self.beta4 = other.beta4;
        for (k, v) in &other.terms {
            *self.terms.entry(k.clone()).or_insert(0.0) += w * v;
        }
    }
}

/// Per-view inputs of the unique objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniqueTerms {
    pub i_zu_y: f64,
    pub i_zu_x: f64,
    pub i_zu_zc: f64,
}

fn finite(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(CimlError::NonFinite(name.to_string()))
    }
}

pub fn common_loss(h_c: f64, alignment: f64, i_zc_y: f64, i_zc_c: f64, beta1: f64) -> Result<f64> {
    let h_c = finite("H(C)", h_c)?;
    let alignment = finite("alignment", alignment)?;
    let i_zc_y = finite("I(Zc;Y)", i_zc_y)?;
    let i_zc_c = finite("I(Zc;C)", i_zc_c)?;
    if i_zc_c < 0.0 {
        return Err(CimlError::Data(format!("I(Zc;C) upper bound must be >= 0, got {i_zc_c}")));
    }
    Ok(-h_c + alignment - (i_zc_y - beta1 * i_zc_c))
}

/// `pairwise` is `v x v` with a zero diagonal; both orders of a pair count.
pub fn unique_loss(per_view: &[UniqueTerms], pairwise: &Mat, beta2: f64) -> Result<f64> {
    let v = per_view.len();
    if pairwise.dim() != (v, v) {
        return Err(CimlError::Shape(format!(
            "pairwise matrix is {:?} for {v} views",
            pairwise.dim()
        )));
    }
    if (0..v).any(|i| pairwise[[i, i]] != 0.0) {
        return Err(CimlError::Data("pairwise matrix must have a zero diagonal".into()));
    }
    let mut loss = 0.0;
    for (i, t) in per_view.iter().enumerate() {
        finite(&format!("I(Zu{i};Y)"), t.i_zu_y)?;
        finite(&format!("I(Zu{i};X{i})"), t.i_zu_x)?;
        finite(&format!("I(Zu{i};Zc)"), t.i_zu_zc)?;
        loss -= t.i_zu_y - beta2 * t.i_zu_x - t.i_zu_zc;
    }
    Ok(loss + finite("pairwise", pairwise.sum())?)
}

/// Batch-mean cross-entropy of `softmax(logits)` against `labels`.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> Result<f64> {
    Ok(-info::predictive_lower_bound(logits, labels)?)
}

pub fn total_loss(ce: f64, l_common: f64, l_unique: f64, beta3: f64, beta4: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        l_common,
        l_unique,
        total: ce + beta3 * l_common + beta4 * l_unique,
        beta3,
        beta4,
        terms: BTreeMap::new(),
    }
}

/// Tape-level `L_c`.
pub fn common_loss_on(tape: &mut Tape, h_c: Var, alignment: Var, i_zc_y: Var, i_zc_c: Var, beta1: f64) -> Var {
    let a = tape.sub(alignment, h_c);
    let kl = tape.scale(i_zc_c, beta1);
    let inner = tape.sub(i_zc_y, kl);
    tape.sub(a, inner)
}

/// Tape-level `L_u`; `pairs` holds each unordered pair's estimate once and
/// is counted for both orders.
pub fn unique_loss_on(tape: &mut Tape, per_view: &[(Var, Var, Var)], pairs: &[Var], beta2: f64) -> Var {
    let mut loss = tape.scalar_leaf(0.0);
    for &(y, x, zc) in per_view {
        let kx = tape.scale(x, beta2);
        let inner = tape.sub(y, kx);
        let inner = tape.sub(inner, zc);
        loss = tape.sub(loss, inner);
    }
    for &p in pairs {
        let both = tape.scale(p, 2.0);
        loss = tape.add(loss, both);
    }
    loss
}

pub fn total_loss_on(tape: &mut Tape, ce: Var, l_common: Var, l_unique: Var, beta3: f64, beta4: f64) -> Var {
    let c = tape.scale(l_common, beta3);
    let u = tape.scale(l_unique, beta4);
    let t = tape.add(ce, c);
    tape.add(t, u)
}
