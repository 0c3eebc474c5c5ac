//! Optimizer, learning-rate schedule and stage drivers.

mod data;
mod optim;
mod stages;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use data::{ImageTextPairs, StageData, TranslationPairs};
pub use optim::Adam;
pub use stages::{
    extend_language, language_seed, pretrain_vlp, run_joint_stage, run_le_stage, run_nlt_stage,
    run_schedule, validate_schedule, ExtensionPolicy,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    VlpPretrain,
    Nlt,
    Le,
    Joint,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::VlpPretrain => "vlp_pretrain",
            StageKind::Nlt => "nlt",
            StageKind::Le => "le",
            StageKind::Joint => "joint",
        }
    }
}

/// How batches alternate between languages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// Strict round-robin, one batch per language in turn.
    #[default]
    PerBatch,
    /// One pass over a language's corpus before moving to the next.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kind: StageKind,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    pub batch_size: usize,
    /// Languages trained in this stage; empty means every registered one.
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub interleave: Interleave,
    /// Whether the non-native input projection is trained alongside the
    /// embedding table.
    #[serde(default = "default_true")]
    pub train_in_proj: bool,
}

fn default_warmup() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

impl StageConfig {
    pub fn new(kind: StageKind, steps: usize, lr: f64, batch_size: usize) -> Self {
        Self {
            kind,
            steps,
            lr,
            warmup: default_warmup(),
            batch_size,
            languages: Vec::new(),
            seed: 0,
            interleave: Interleave::PerBatch,
            train_in_proj: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kind.as_str();
        if self.steps == 0 {
            return Err(Error::Config(format!("{k}.steps must be >= 1")));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "{k}.lr must be a positive finite number, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::Config(format!(
                "{k}.warmup must be in [0, 1], got {}",
                self.warmup
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{k}.batch_size must be >= 1")));
        }
        Ok(())
    }

    /// `ceil(warmup · steps)`.
    pub fn warmup_steps(&self) -> usize {
        // The tolerance keeps products like 0.1·30 from rounding up past 3.
        ((self.warmup * self.steps as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Linear ramp from 0 to the peak over the warmup steps, then constant.
pub fn lr_at(step: usize, cfg: &StageConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::Schedule(format!(
            "step {step} outside a {}-step stage",
            cfg.steps
        )));
    }
    let w = cfg.warmup_steps();
    Ok(if step < w {
        cfg.lr * step as f64 / w as f64
    } else {
        cfg.lr
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: StageKind,
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    /// Language of each step's batch.
    pub language_trace: Vec<String>,
    /// Mean of each language's last ten losses.
    pub running_loss: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    /// Digests of components frozen for the whole stage.
    pub frozen_before: BTreeMap<String, String>,
    pub frozen_after: BTreeMap<String, String>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}
