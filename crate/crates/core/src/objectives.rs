//! Training objectives: translation-pair mean-square alignment, symmetric
//! in-batch contrastive loss, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mse,
    Nce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Objective applied to translation pairs.
    pub nlt_objective: Objective,
    /// Objective applied to image-text pairs.
    pub le_objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            nlt_objective: Objective::Mse,
            le_objective: Objective::Nce,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "loss.temperature must be a positive finite number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `xᵀy / (‖x‖‖y‖)`.
pub fn cosine_sim<T: Real>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let nx = x.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Differentiable cosine similarity of two equal-length vectors.
pub fn cosine_sim_var<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let xn = g.normalize_rows(x)?;
    let yn = g.normalize_rows(y)?;
    let prod = g.mul(xn, yn)?;
    Ok(g.sum(prod))
}

fn batch_rows<T: Real>(g: &Graph<T>, v: Var) -> usize {
    let s = g.value(v).shape();
    if s.len() == 1 {
        1
    } else {
        s[0]
    }
}

/// `(1/B) Σᵢ ‖sᵢ − tᵢ‖²` over a batch of row vectors.
pub fn nlt_loss<T: Real>(g: &mut Graph<T>, native: Var, nonnative: Var) -> Result<Var> {
    let b = batch_rows(g, native);
    let diff = g.sub(native, nonnative)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, T::from_f64(1.0 / b as f64)))
}

/// Symmetric InfoNCE over cosine similarities scaled by `1/τ`, with the
/// other rows of the batch as negatives.
pub fn le_loss<T: Real>(g: &mut Graph<T>, images: Var, texts: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let (si, st) = (
        g.value(images).shape().to_vec(),
        g.value(texts).shape().to_vec(),
    );
    if si != st {
        return Err(Error::Shape(format!("le_loss batches {si:?} vs {st:?}")));
    }
    let vn = g.normalize_rows(images)?;
    let tn = g.normalize_rows(texts)?;
    let tt = g.transpose(tn);
    let sims = g.matmul(vn, tt)?;
    let logits = g.scale(sims, T::from_f64(1.0 / tau));
    let v2t = g.diag_cross_entropy(logits)?;
    let lt = g.transpose(logits);
    let t2v = g.diag_cross_entropy(lt)?;
    let both = g.add(v2t, t2v)?;
    Ok(g.scale(both, T::from_f64(0.5)))
}

/// Unweighted sum of the two objectives.
pub fn joint_loss<T: Real>(
    g: &mut Graph<T>,
    native: Var,
    nonnative: Var,
    images: Var,
    texts: Var,
    tau: f64,
) -> Result<Var> {
    let a = nlt_loss(g, native, nonnative)?;
    let b = le_loss(g, images, texts, tau)?;
    g.add(a, b)
}

/// Dispatches on an objective selector for a batch of paired rows.
pub fn pair_loss<T: Real>(
    g: &mut Graph<T>,
    objective: Objective,
    anchors: Var,
    targets: Var,
    tau: f64,
) -> Result<Var> {
    match objective {
        Objective::Mse => nlt_loss(g, anchors, targets),
        Objective::Nce => le_loss(g, anchors, targets, tau),
    }
}

/// Evaluates `nlt_loss` on plain tensors.
pub fn nlt_loss_value<T: Real>(native: &Tensor<T>, nonnative: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(native.clone()), g.constant(nonnative.clone()));
    let l = nlt_loss(&mut g, a, b)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Evaluates `le_loss` on plain tensors.
pub fn le_loss_value<T: Real>(images: &Tensor<T>, texts: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(images.clone()), g.constant(texts.clone()));
    let l = le_loss(&mut g, a, b, tau)?;
    Ok(g.value(l).data()[0].as_f64())
}
