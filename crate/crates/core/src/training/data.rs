//! Tokenised training pairs built from corpus records.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthworld::{SampleRecord, Split, NATIVE};
use crate::tensor::{Real, Tensor};

/// Framed native and non-native token ids of one language's sentence pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranslationPairs {
    pub native: Vec<Vec<usize>>,
    pub nonnative: Vec<Vec<usize>>,
}

impl TranslationPairs {
    pub fn from_records<T: Real>(
        model: &Model<T>,
        records: &[SampleRecord],
        lang: &str,
        split: Option<Split>,
    ) -> Result<Self> {
        let mut out = Self::default();
        for r in records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
        {
            out.native
                .push(model.native_vocab().encode(r.sentence(NATIVE)?)?);
            out.nonnative
                .push(model.nonnative_vocab().encode(r.sentence(lang)?)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.native.len()
    }

    pub fn is_empty(&self) -> bool {
        self.native.is_empty()
    }
}

/// Images with framed token ids of their captions. Captions use the native
/// vocabulary when built for [`NATIVE`], the non-native one otherwise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTextPairs {
    pub images: Vec<Tensor<f32>>,
    pub texts: Vec<Vec<usize>>,
}

impl ImageTextPairs {
    pub fn from_records<T: Real>(
        model: &Model<T>,
        records: &[SampleRecord],
        lang: &str,
        split: Option<Split>,
    ) -> Result<Self> {
        let vocab = if lang == NATIVE {
            model.native_vocab()
        } else {
            model.nonnative_vocab()
        };
        let mut out = Self::default();
        for r in records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
        {
            let img = r
                .image
                .clone()
                .ok_or_else(|| Error::Data(format!("record {} has no image", r.id)))?;
            out.images.push(img);
            out.texts.push(vocab.encode(r.sentence(lang)?)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-language corpora for a stage.
#[derive(Clone, Debug, Default)]
pub struct StageData {
    pub translation: BTreeMap<String, TranslationPairs>,
    pub image_text: BTreeMap<String, ImageTextPairs>,
}

impl StageData {
    pub fn translation(&self, lang: &str) -> Result<&TranslationPairs> {
        match self.translation.get(lang) {
            Some(p) if !p.is_empty() => Ok(p),
            _ => Err(Error::Data(format!(
                "no translation pairs for language {lang:?}"
            ))),
        }
    }

    pub fn image_text(&self, lang: &str) -> Result<&ImageTextPairs> {
        match self.image_text.get(lang) {
            Some(p) if !p.is_empty() => Ok(p),
            _ => Err(Error::Data(format!(
                "no image-text pairs for language {lang:?}"
            ))),
        }
    }
}
