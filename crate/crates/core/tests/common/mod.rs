#![allow(dead_code)]

use mla_core::model::{Model, ModelConfig};
use mla_core::pipeline::{
    fresh_model, generate_corpora, register_languages, stage_data, Corpora, CorpusSizes,
};
use mla_core::synthworld::{Split, SyntheticWorld, WorldConfig};
use mla_core::training::StageData;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 16,
        proj_dim: 8,
        acquirer_hidden: 4,
        nonnative_emb_dim: 8,
        ..ModelConfig::default()
    }
}

pub fn langs(tags: &[&str]) -> Vec<String> {
    tags.iter().map(|s| s.to_string()).collect()
}

pub struct Setup {
    pub world: SyntheticWorld,
    pub corpora: Corpora,
    pub model: Model<f32>,
    pub data: StageData,
}

/// A small model with `registered` languages and corpora for `corpus_langs`.
pub fn setup(registered: &[&str], corpus_langs: &[&str]) -> Setup {
    let world = SyntheticWorld::build(WorldConfig::default()).unwrap();
    let sizes = CorpusSizes {
        pretrain: 80,
        parallel: 60,
        image_text: 60,
    };
    let corpora = generate_corpora(&world, &langs(corpus_langs), &sizes, 3).unwrap();
    let mut model = fresh_model(&world, &tiny_config(), 5).unwrap();
    register_languages(&mut model, &langs(registered), 5).unwrap();
    let data = stage_data(&model, &corpora, Split::Train).unwrap();
    Setup {
        world,
        corpora,
        model,
        data,
    }
}
