//! Dual-encoder model with per-language acquirer stacks.
//!
//! Three encoders share one parameter registry:
//!
//! * the native text encoder (frozen after pre-training): token and position
//!   embeddings, `num_layers` causal pre-norm transformer layers, and the text
//!   head applied to the `[EOS]` hidden state;
//! * the vision encoder (frozen after pre-training): patch projection, a class
//!   slot at position 0, bidirectional layers, and the image head applied to
//!   the class slot;
//! * the acquisition encoder for non-native languages: a shared embedding
//!   table plus input projection, then the *same* frozen text layers, each
//!   followed by that language's acquirer, then the *same* text head.

mod checkpoint;
mod encoders;
mod params;
mod vocab;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use encoders::{pack_sequences, Binder, PackedText};
pub use params::{Component, Param, ParamRegistry, Selector};
pub use vocab::{Vocab, EOS, EOS_ID, SOS, SOS_ID};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Shape of the bottleneck inside each acquirer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquirerKind {
    /// `X + W_up·ReLU(W_down·X)`.
    Mlp,
    /// Same parameter count without the nonlinearity.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub acquirer_hidden: usize,
    pub acquirer_kind: AcquirerKind,
    pub max_text_len: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    /// Width of the shared non-native embedding table.
    pub nonnative_emb_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            proj_dim: 32,
            acquirer_hidden: 16,
            acquirer_kind: AcquirerKind::Mlp,
            max_text_len: 16,
            patch_count: 16,
            patch_dim: 16,
            nonnative_emb_dim: 64,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("proj_dim", self.proj_dim),
            ("acquirer_hidden", self.acquirer_hidden),
            ("max_text_len", self.max_text_len),
            ("patch_count", self.patch_count),
            ("patch_dim", self.patch_dim),
            ("nonnative_emb_dim", self.nonnative_emb_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model.model_dim {} is not divisible by model.num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config(
                "model.max_text_len must fit [SOS] and [EOS]".into(),
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("model.layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Trainable parameters one language adds: `l·(2·d·h + h + d)`.
    pub fn acquirer_param_count(&self) -> usize {
        acquirer_param_count(self.num_layers, self.model_dim, self.acquirer_hidden)
    }
}

/// `layers · (2·dim·hidden + hidden + dim)`: down and up projections with
/// their biases, once per layer.
pub fn acquirer_param_count(layers: usize, dim: usize, hidden: usize) -> usize {
    layers * (2 * dim * hidden + hidden + dim)
}

pub(crate) const ACQ_PARAMS: [&str; 4] = ["w_down", "b_down", "w_up", "b_up"];

pub(crate) fn layer_name(prefix: &str, layer: usize, p: &str) -> String {
    format!("{prefix}.layer{layer}.{p}")
}

pub(crate) fn acq_name(lang: &str, layer: usize, p: &str) -> String {
    format!("acquirer.{lang}.layer{layer}.{p}")
}

const EMB_STD: f64 = 0.02;
const ACQ_DOWN_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    native_vocab: Vocab,
    nonnative_vocab: Vocab,
    registry: ParamRegistry<T>,
    languages: Vec<String>,
}

fn transformer_layer<T: Real>(
    reg: &mut ParamRegistry<T>,
    rng: &mut Rng,
    prefix: &str,
    layer: usize,
    cfg: &ModelConfig,
    component: &Component,
) -> Result<()> {
    let (d, f) = (cfg.model_dim, cfg.ffn_dim);
    let depth_scale = 1.0 / ((2 * cfg.num_layers) as f64).sqrt();
    let lin = |rng: &mut Rng, i: usize, o: usize, s: f64| {
        rng.gaussian::<T>(&[i, o], s / (i as f64).sqrt())
    };
    let entries: Vec<(&str, Tensor<T>)> = vec![
        ("ln1_g", Tensor::full(&[d], T::one())),
        ("ln1_b", Tensor::zeros(&[d])),
        ("wq", lin(rng, d, d, 1.0)),
        ("bq", Tensor::zeros(&[d])),
        ("wk", lin(rng, d, d, 1.0)),
        ("bk", Tensor::zeros(&[d])),
        ("wv", lin(rng, d, d, 1.0)),
        ("bv", Tensor::zeros(&[d])),
        ("wo", lin(rng, d, d, depth_scale)),
        ("bo", Tensor::zeros(&[d])),
        ("ln2_g", Tensor::full(&[d], T::one())),
        ("ln2_b", Tensor::zeros(&[d])),
        ("w1", lin(rng, d, f, 1.0)),
        ("b1", Tensor::zeros(&[f])),
        ("w2", lin(rng, f, d, depth_scale)),
        ("b2", Tensor::zeros(&[d])),
    ];
    for (name, value) in entries {
        reg.add(
            layer_name(prefix, layer, name),
            value,
            component.clone(),
            false,
        )?;
    }
    Ok(())
}

impl<T: Real> Model<T> {
    /// Freshly initialised model with no registered languages.
    pub fn new(
        config: ModelConfig,
        native_vocab: Vocab,
        nonnative_vocab: Vocab,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.model_dim;
        let mut reg = ParamRegistry::new();
        let mut rng = Rng::derive(seed, 1);

        let text = Component::TextEncoder;
        reg.add(
            "text.tok_emb",
            rng.gaussian(&[native_vocab.len(), d], EMB_STD),
            text.clone(),
            true,
        )?;
        reg.add(
            "text.pos_emb",
            rng.gaussian(&[cfg.max_text_len, d], EMB_STD),
            text.clone(),
            false,
        )?;
        for l in 0..cfg.num_layers {
            transformer_layer(&mut reg, &mut rng, "text", l, cfg, &text)?;
        }

        let vision = Component::VisionEncoder;
        let pd = cfg.patch_dim;
        reg.add(
            "vision.patch_proj",
            rng.gaussian(&[pd, d], 1.0 / (pd as f64).sqrt()),
            vision.clone(),
            false,
        )?;
        reg.add(
            "vision.class_emb",
            rng.gaussian(&[d], EMB_STD),
            vision.clone(),
            false,
        )?;
        reg.add(
            "vision.pos_emb",
            rng.gaussian(&[cfg.patch_count + 1, d], EMB_STD),
            vision.clone(),
            false,
        )?;
        for l in 0..cfg.num_layers {
            transformer_layer(&mut reg, &mut rng, "vision", l, cfg, &vision)?;
        }

        let head_std = 1.0 / (d as f64).sqrt();
        reg.add(
            "heads.text_proj",
            rng.gaussian(&[d, cfg.proj_dim], head_std),
            Component::Heads,
            false,
        )?;
        reg.add(
            "heads.image_proj",
            rng.gaussian(&[d, cfg.proj_dim], head_std),
            Component::Heads,
            false,
        )?;

        let e = cfg.nonnative_emb_dim;
        let nn = Component::NonNativeEmbedding;
        reg.add(
            "nonnative.tok_emb",
            rng.gaussian(&[nonnative_vocab.len(), e], EMB_STD),
            nn.clone(),
            true,
        )?;
        reg.add(
            "nonnative.in_proj",
            rng.gaussian(&[e, d], 1.0 / (e as f64).sqrt()),
            nn,
            false,
        )?;

        Ok(Self {
            config,
            native_vocab,
            nonnative_vocab,
            registry: reg,
            languages: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn native_vocab(&self) -> &Vocab {
        &self.native_vocab
    }

    pub fn nonnative_vocab(&self) -> &Vocab {
        &self.nonnative_vocab
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.registry
    }

    /// Registered non-native languages in registration order.
    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn is_registered(&self, lang: &str) -> bool {
        self.languages.iter().any(|l| l == lang)
    }

    pub fn check_language(&self, lang: &str) -> Result<()> {
        if self.is_registered(lang) {
            Ok(())
        } else {
            Err(Error::UnknownLanguage(lang.to_string()))
        }
    }

    /// Adds a trainable acquirer stack for `lang`. The up-projection and its
    /// bias start at zero, so the new path initially reproduces the frozen
    /// text encoder exactly.
    pub fn register_language(&mut self, lang: &str, init_seed: u64) -> Result<()> {
        if self.is_registered(lang) {
            return Err(Error::AlreadyRegistered(lang.to_string()));
        }
        if lang.is_empty() || lang.contains(['.', ':', '\t', '\n']) {
            return Err(Error::Config(format!("invalid language tag {lang:?}")));
        }
        let (d, h) = (self.config.model_dim, self.config.acquirer_hidden);
        let mut rng = Rng::new(init_seed);
        let comp = Component::Acquirer(lang.to_string());
        for l in 0..self.config.num_layers {
            let values: [Tensor<T>; 4] = [
                rng.gaussian(&[d, h], ACQ_DOWN_STD),
                Tensor::zeros(&[h]),
                Tensor::zeros(&[h, d]),
                Tensor::zeros(&[d]),
            ];
            for (name, value) in ACQ_PARAMS.iter().zip(values) {
                self.registry
                    .add(acq_name(lang, l, name), value, comp.clone(), false)?;
            }
        }
        self.languages.push(lang.to_string());
        Ok(())
    }

    pub fn set_trainable(&mut self, selectors: &[Selector], flag: bool) -> Result<usize> {
        self.registry.set_trainable(selectors, flag)
    }

    /// Same model at another precision.
    pub fn to_precision<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            native_vocab: self.native_vocab.clone(),
            nonnative_vocab: self.nonnative_vocab.clone(),
            registry: self.registry.convert(),
            languages: self.languages.clone(),
        }
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        native_vocab: Vocab,
        nonnative_vocab: Vocab,
        registry: ParamRegistry<T>,
        languages: Vec<String>,
    ) -> Self {
        Self {
            config,
            native_vocab,
            nonnative_vocab,
            registry,
            languages,
        }
    }

    pub fn digest(&self, component: &Component) -> String {
        self.registry.component_digest(component)
    }
}
