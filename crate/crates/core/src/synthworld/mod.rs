//! A seeded toy universe: concepts with visual prototypes, a native language
//! naming them, and cipher languages derived from it.
//!
//! Images are grids of `N` patches; each depicted concept occupies one patch
//! holding its prototype plus Gaussian noise, the rest is background noise.
//! Sentences follow the template `a photo of w1 and w2 ...`. A cipher
//! language renames every native word through a bijection and may reorder
//! the concept slots.

mod corpus;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use corpus::{
    gen_image_text_corpus, gen_parallel_corpus, read_corpus, write_corpus, SampleRecord, Split,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Tag of the pre-training language.
pub const NATIVE: &str = "en";

pub const FUNCTION_WORDS: [&str; 4] = ["a", "photo", "of", "and"];

/// Most concepts one sample can depict.
pub const MAX_CONCEPTS: usize = 4;

const MAX_PROTOTYPE_RETRIES: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordOrder {
    Identity,
    Reversal,
    /// A fixed seeded permutation of the concept slots, one per slot count.
    Permuted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub tag: String,
    pub order: WordOrder,
    /// Fraction of native words whose surface form is borrowed from the
    /// first configured language.
    #[serde(default)]
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub concepts: usize,
    pub patch_dim: usize,
    pub patches: usize,
    pub sigma: f64,
    pub languages: Vec<LanguageConfig>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            concepts: 32,
            patch_dim: 16,
            patches: 16,
            sigma: 0.05,
            languages: vec![
                LanguageConfig {
                    tag: "xa".into(),
                    order: WordOrder::Identity,
                    overlap: 0.0,
                },
                LanguageConfig {
                    tag: "xb".into(),
                    order: WordOrder::Reversal,
                    overlap: 0.0,
                },
                LanguageConfig {
                    tag: "xc".into(),
                    order: WordOrder::Permuted,
                    overlap: 0.2,
                },
                LanguageConfig {
                    tag: "xd".into(),
                    order: WordOrder::Permuted,
                    overlap: 0.0,
                },
            ],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(Error::Config(format!(
                "world.concepts must be >= 2, got {}",
                self.concepts
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "world.sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.patch_dim == 0 || self.patches == 0 {
            return Err(Error::Config(
                "world.patch_dim and world.patches must be >= 1".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for l in &self.languages {
            if l.tag == NATIVE || l.tag.is_empty() || l.tag.contains(['.', ':', '\t', '\n']) {
                return Err(Error::Config(format!("invalid language tag {:?}", l.tag)));
            }
            if !seen.insert(&l.tag) {
                return Err(Error::Config(format!(
                    "language {:?} configured twice",
                    l.tag
                )));
            }
            if !(0.0..=1.0).contains(&l.overlap) {
                return Err(Error::Config(format!(
                    "world.languages[{}].overlap must be in [0, 1]",
                    l.tag
                )));
            }
        }
        Ok(())
    }
}

/// A cipher of the native language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub tag: String,
    pub order: WordOrder,
    forms: HashMap<String, String>,
    inverse: HashMap<String, String>,
    /// `slot_perms[n]`: output slot `i` carries input slot `slot_perms[n][i]`.
    slot_perms: Vec<Vec<usize>>,
}

impl LanguageSpec {
    fn identity_perms(order: WordOrder, rng: &mut Rng) -> Vec<Vec<usize>> {
        (0..=MAX_CONCEPTS)
            .map(|n| {
                let mut p: Vec<usize> = (0..n).collect();
                match order {
                    WordOrder::Identity => {}
                    WordOrder::Reversal => p.reverse(),
                    WordOrder::Permuted => rng.shuffle(&mut p),
                }
                p
            })
            .collect()
    }

    /// Surface form of a native word.
    pub fn form(&self, native: &str) -> Result<&str> {
        self.forms
            .get(native)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownToken {
                vocab: "native",
                token: native.to_string(),
            })
    }

    /// Every surface form, in native-word order of `words`.
    pub fn forms_of<'a>(&'a self, words: &'a [String]) -> impl Iterator<Item = &'a str> + 'a {
        words
            .iter()
            .filter_map(|w| self.forms.get(w).map(String::as_str))
    }

    /// Maps a sentence of this language back to the native sentence.
    pub fn decode(&self, tokens: &[String]) -> Result<Vec<String>> {
        let native: Vec<String> = tokens
            .iter()
            .map(|t| {
                self.inverse
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::UnknownToken {
                        vocab: "cipher",
                        token: t.clone(),
                    })
            })
            .collect::<Result<_>>()?;
        let slots = concept_slots(native.len())?;
        let perm = &self.slot_perms[slots.len()];
        let mut out = native.clone();
        for (i, &src) in perm.iter().enumerate() {
            out[slots[src]] = native[slots[i]].clone();
        }
        Ok(out)
    }
}

/// Positions of concept words in a template sentence of `len` tokens.
fn concept_slots(len: usize) -> Result<Vec<usize>> {
    // a photo of w1 (and wi)*
    if len < 4 || !(len - 4).is_multiple_of(2) {
        return Err(Error::Data(format!(
            "sentence of {len} tokens does not fit the template"
        )));
    }
    let n = 1 + (len - 4) / 2;
    if n > MAX_CONCEPTS {
        return Err(Error::Data(format!(
            "sentence names {n} concepts, at most {MAX_CONCEPTS}"
        )));
    }
    Ok((0..n).map(|i| 3 + 2 * i).collect())
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS[rng.below(ONSETS.len())],
                VOWELS[rng.below(VOWELS.len())]
            )
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    config: WorldConfig,
    prototypes: Vec<Tensor<f32>>,
    concept_words: Vec<String>,
    native_words: Vec<String>,
    languages: Vec<LanguageSpec>,
}

impl SyntheticWorld {
    /// Deterministic world for `config`. Prototypes are redrawn until every
    /// pair is more than `4σ` apart.
    pub fn build(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let prototypes = Self::draw_prototypes(&config)?;

        let mut rng = Rng::derive(config.seed, 2);
        let mut used = BTreeSet::new();
        let mut fresh = |rng: &mut Rng, syl: usize| loop {
            let w = pseudo_word(rng, syl);
            if used.insert(w.clone()) {
                break w;
            }
        };
        let concept_words: Vec<String> = (0..config.concepts).map(|_| fresh(&mut rng, 2)).collect();
        let native_words: Vec<String> = FUNCTION_WORDS
            .iter()
            .map(|w| w.to_string())
            .chain(concept_words.iter().cloned())
            .collect();

        let mut surface_used = BTreeSet::new();
        let mut languages: Vec<LanguageSpec> = Vec::new();
        for (li, lc) in config.languages.iter().enumerate() {
            let mut lrng = Rng::derive(config.seed, 100 + li as u64);
            let borrow: BTreeSet<usize> = if li > 0 && lc.overlap > 0.0 {
                let k = (lc.overlap * native_words.len() as f64).round() as usize;
                lrng.choose_distinct(native_words.len(), k.min(native_words.len()))
                    .into_iter()
                    .collect()
            } else {
                BTreeSet::new()
            };
            let mut forms = HashMap::new();
            let mut inverse = HashMap::new();
            for (wi, w) in native_words.iter().enumerate() {
                let form = if borrow.contains(&wi) {
                    languages[0].forms[w].clone()
                } else {
                    loop {
                        let f = pseudo_word(&mut lrng, 3);
                        if surface_used.insert(f.clone()) {
                            break f;
                        }
                    }
                };
                inverse.insert(form.clone(), w.clone());
                forms.insert(w.clone(), form);
            }
            let slot_perms = LanguageSpec::identity_perms(lc.order, &mut lrng);
            languages.push(LanguageSpec {
                tag: lc.tag.clone(),
                order: lc.order,
                forms,
                inverse,
                slot_perms,
            });
        }
        Ok(Self {
            config,
            prototypes,
            concept_words,
            native_words,
            languages,
        })
    }

    fn draw_prototypes(config: &WorldConfig) -> Result<Vec<Tensor<f32>>> {
        let min_sep = 4.0 * config.sigma;
        for attempt in 0..MAX_PROTOTYPE_RETRIES {
            let mut rng = Rng::derive(config.seed, 1000 + attempt);
            let protos: Vec<Tensor<f32>> = (0..config.concepts)
                .map(|_| rng.gaussian(&[config.patch_dim], 1.0))
                .collect();
            if min_pairwise_distance(&protos) > min_sep {
                return Ok(protos);
            }
        }
        Err(Error::Config(format!(
            "could not draw {} prototypes in {} dimensions separated by more than 4 sigma = {min_sep}",
            config.concepts, config.patch_dim
        )))
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &[Tensor<f32>] {
        &self.prototypes
    }

    pub fn concept_words(&self) -> &[String] {
        &self.concept_words
    }

    /// Function words followed by concept words.
    pub fn native_words(&self) -> &[String] {
        &self.native_words
    }

    pub fn languages(&self) -> &[LanguageSpec] {
        &self.languages
    }

    pub fn language(&self, tag: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.tag == tag)
            .ok_or_else(|| Error::UnknownLanguage(tag.to_string()))
    }

    /// Shared non-native vocabulary: every surface form of every language,
    /// first occurrence wins.
    pub fn nonnative_words(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for l in &self.languages {
            for f in l.forms_of(&self.native_words) {
                if seen.insert(f.to_string()) {
                    out.push(f.to_string());
                }
            }
        }
        out
    }

    /// Patches `[N × patch_dim]` depicting `concepts`.
    pub fn render_image(&self, concepts: &[usize], sample_seed: u64) -> Result<Tensor<f32>> {
        let (n, pd, sigma) = (
            self.config.patches,
            self.config.patch_dim,
            self.config.sigma,
        );
        if concepts.is_empty() {
            return Err(Error::Data("an image needs at least one concept".into()));
        }
        if concepts.len() > n {
            return Err(Error::Data(format!(
                "{} concepts do not fit in {n} patches",
                concepts.len()
            )));
        }
        if let Some(&bad) = concepts.iter().find(|&&c| c >= self.config.concepts) {
            return Err(Error::Data(format!("unknown concept id {bad}")));
        }
        let mut rng = Rng::derive(sample_seed, 3);
        let slots = rng.choose_distinct(n, concepts.len());
        let mut img = Tensor::zeros(&[n, pd]);
        for p in 0..n {
            let proto = slots
                .iter()
                .position(|&s| s == p)
                .map(|i| &self.prototypes[concepts[i]]);
            for (j, v) in img.row_mut(p).iter_mut().enumerate() {
                let base = proto.map_or(0.0, |t| t.data()[j] as f64);
                *v = (base + sigma * rng.normal()) as f32;
            }
        }
        Ok(img)
    }

    /// Nearest-prototype reading of an image: each patch is either background
    /// (closest to zero) or the concept whose prototype is closest.
    pub fn read_image(&self, image: &Tensor<f32>) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for p in 0..image.rows() {
            let patch = image.row(p);
            let bg: f64 = patch.iter().map(|&v| (v as f64).powi(2)).sum();
            let (best, dist) = self
                .prototypes
                .iter()
                .enumerate()
                .map(|(c, t)| (c, sq_dist(patch, t.data())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least two prototypes");
            if dist < bg {
                out.insert(best);
            }
        }
        out
    }

    /// Native template sentence naming `concepts` in the given order.
    pub fn native_sentence(&self, concepts: &[usize]) -> Result<Vec<String>> {
        if concepts.is_empty() || concepts.len() > MAX_CONCEPTS {
            return Err(Error::Data(format!(
                "sentences name 1..={MAX_CONCEPTS} concepts, got {}",
                concepts.len()
            )));
        }
        let mut words: Vec<String> = ["a", "photo", "of"].iter().map(|w| w.to_string()).collect();
        for (i, &c) in concepts.iter().enumerate() {
            let w = self
                .concept_words
                .get(c)
                .ok_or_else(|| Error::Data(format!("unknown concept id {c}")))?;
            if i > 0 {
                words.push("and".into());
            }
            words.push(w.clone());
        }
        Ok(words)
    }

    /// Sentence for `concepts` in `language` (native when it is [`NATIVE`]).
    pub fn utter(&self, concepts: &[usize], language: &str) -> Result<Vec<String>> {
        let native = self.native_sentence(concepts)?;
        if language == NATIVE {
            return Ok(native);
        }
        let lang = self.language(language)?;
        let slots = concept_slots(native.len())?;
        let perm = &lang.slot_perms[slots.len()];
        let mut reordered = native.clone();
        for (i, &src) in perm.iter().enumerate() {
            reordered[slots[i]] = native[slots[src]].clone();
        }
        reordered
            .iter()
            .map(|w| lang.form(w).map(str::to_string))
            .collect()
    }

    /// Native sentence back from a sentence in `language`.
    pub fn decode(&self, tokens: &[String], language: &str) -> Result<Vec<String>> {
        if language == NATIVE {
            return Ok(tokens.to_vec());
        }
        self.language(language)?.decode(tokens)
    }

    /// Concept ids named in a native sentence.
    pub fn concepts_of(&self, native: &[String]) -> Result<BTreeSet<usize>> {
        concept_slots(native.len())?
            .into_iter()
            .map(|s| {
                self.concept_words
                    .iter()
                    .position(|w| *w == native[s])
                    .ok_or_else(|| Error::Data(format!("{:?} is not a concept word", native[s])))
            })
            .collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

pub fn min_pairwise_distance(points: &[Tensor<f32>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(sq_dist(points[i].data(), points[j].data()).sqrt());
        }
    }
    best
}
