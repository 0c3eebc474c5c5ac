//! Glue from a synthetic world to models and stage data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, ModelConfig, Vocab};
use crate::synthworld::{
    gen_image_text_corpus, gen_parallel_corpus, SampleRecord, Split, SyntheticWorld, NATIVE,
};
use crate::training::{language_seed, ImageTextPairs, StageData, TranslationPairs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSizes {
    /// Native image-text pairs for pre-training.
    pub pretrain: usize,
    /// Translation pairs per language.
    pub parallel: usize,
    /// Image-text pairs per language.
    pub image_text: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            pretrain: 5000,
            parallel: 2000,
            image_text: 1000,
        }
    }
}

/// Every corpus of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpora {
    pub pretrain: Vec<SampleRecord>,
    pub parallel: BTreeMap<String, Vec<SampleRecord>>,
    pub image_text: BTreeMap<String, Vec<SampleRecord>>,
}

pub fn vocabularies(world: &SyntheticWorld) -> Result<(Vocab, Vocab)> {
    Ok((
        Vocab::new("native", world.native_words())?,
        Vocab::new("nonnative", world.nonnative_words())?,
    ))
}

/// Untrained model sized for `world`, with no languages registered.
pub fn fresh_model(world: &SyntheticWorld, config: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    let (native, nonnative) = vocabularies(world)?;
    let config = ModelConfig {
        patch_dim: world.config().patch_dim,
        patch_count: world.config().patches,
        ..config.clone()
    };
    Model::new(config, native, nonnative, seed)
}

/// Registers each language with an acquirer seed derived from `seed`.
pub fn register_languages(model: &mut Model<f32>, languages: &[String], seed: u64) -> Result<()> {
    for l in languages {
        model.register_language(l, language_seed(seed, l))?;
    }
    Ok(())
}

/// Corpora for `languages`, each drawn from its own seed stream.
pub fn generate_corpora(
    world: &SyntheticWorld,
    languages: &[String],
    sizes: &CorpusSizes,
    seed: u64,
) -> Result<Corpora> {
    let mut c = Corpora {
        pretrain: gen_image_text_corpus(
            world,
            NATIVE,
            sizes.pretrain,
            language_seed(seed, "pretrain"),
        )?,
        ..Default::default()
    };
    for l in languages {
        let s = language_seed(seed, l);
        c.parallel.insert(
            l.clone(),
            gen_parallel_corpus(world, std::slice::from_ref(l), sizes.parallel, s ^ 1)?,
        );
        c.image_text.insert(
            l.clone(),
            gen_image_text_corpus(world, l, sizes.image_text, s ^ 2)?,
        );
    }
    Ok(c)
}

/// Tokenised `split` records of every corpus.
pub fn stage_data(model: &Model<f32>, corpora: &Corpora, split: Split) -> Result<StageData> {
    let mut d = StageData::default();
    if !corpora.pretrain.is_empty() {
        d.image_text.insert(
            NATIVE.into(),
            ImageTextPairs::from_records(model, &corpora.pretrain, NATIVE, Some(split))?,
        );
    }
    for (l, recs) in &corpora.parallel {
        d.translation.insert(
            l.clone(),
            TranslationPairs::from_records(model, recs, l, Some(split))?,
        );
    }
    for (l, recs) in &corpora.image_text {
        d.image_text.insert(
            l.clone(),
            ImageTextPairs::from_records(model, recs, l, Some(split))?,
        );
    }
    Ok(d)
}
