//! Generated records and their JSONL form.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SyntheticWorld, MAX_CONCEPTS, NATIVE};
use crate::error::{Error, Result};
use crate::rng::{mix, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// Split of a record, from its id and the corpus seed alone.
    ///
    /// Ids are grouped in blocks of ten; each block is dealt out by a seeded
    /// shuffle as eight train, one dev and one test.
    pub fn assign(seed: u64, id: u64) -> Split {
        let block = id / 10;
        let mut slots: Vec<u64> = (0..10).collect();
        slots.sort_by_key(|&s| mix(seed ^ mix(block.wrapping_mul(10).wrapping_add(s))));
        match slots.iter().position(|&s| s == id % 10) {
            Some(8) => Split::Dev,
            Some(9) => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?}; expected train, dev or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: u64,
    split: Split,
    concepts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<Vec<Vec<f32>>>,
    text: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub split: Split,
    /// Concept ids in sentence order.
    pub concepts: Vec<usize>,
    /// `[N × patch_dim]` patches, present in image-text corpora.
    pub image: Option<Tensor<f32>>,
    /// Unframed token sequences by language tag.
    pub text: BTreeMap<String, Vec<String>>,
}

impl SampleRecord {
    pub fn sentence(&self, language: &str) -> Result<&[String]> {
        self.text
            .get(language)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("record {} has no {language:?} sentence", self.id)))
    }

    fn to_line(&self) -> RecordLine {
        RecordLine {
            id: self.id,
            split: self.split,
            concepts: self.concepts.clone(),
            image: self
                .image
                .as_ref()
                .map(|t| (0..t.rows()).map(|r| t.row(r).to_vec()).collect()),
            text: self.text.clone(),
        }
    }

    fn from_line(line: RecordLine) -> std::result::Result<Self, String> {
        let image = match line.image {
            None => None,
            Some(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
                    return Err("image must be a nonempty rectangular array".into());
                }
                Some(Tensor::from_rows(&rows))
            }
        };
        Ok(Self {
            id: line.id,
            split: line.split,
            concepts: line.concepts,
            image,
            text: line.text,
        })
    }
}

fn sample_concepts(world: &SyntheticWorld, rng: &mut Rng) -> Vec<usize> {
    let max = MAX_CONCEPTS
        .min(world.config().concepts)
        .min(world.config().patches);
    let n = 1 + rng.below(max);
    rng.choose_distinct(world.config().concepts, n)
}

/// `n` translation-pair records carrying the native sentence and one
/// sentence per language, all naming the same concepts.
pub fn gen_parallel_corpus(
    world: &SyntheticWorld,
    languages: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::Data("corpus size must be >= 1".into()));
    }
    for l in languages {
        world.language(l)?;
    }
    (0..n as u64)
        .map(|id| {
            let mut rng = Rng::derive(seed, id);
            let concepts = sample_concepts(world, &mut rng);
            let mut text = BTreeMap::new();
            text.insert(NATIVE.to_string(), world.utter(&concepts, NATIVE)?);
            for l in languages {
                text.insert(l.clone(), world.utter(&concepts, l)?);
            }
            Ok(SampleRecord {
                id,
                split: Split::assign(seed, id),
                concepts,
                image: None,
                text,
            })
        })
        .collect()
}

/// `n` image-text records in `language`. The native sentence rides along
/// so the same records can score the native model.
pub fn gen_image_text_corpus(
    world: &SyntheticWorld,
    language: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::Data("corpus size must be >= 1".into()));
    }
    if language != NATIVE {
        world.language(language)?;
    }
    (0..n as u64)
        .map(|id| {
            let mut rng = Rng::derive(seed, id);
            let concepts = sample_concepts(world, &mut rng);
            let image = world.render_image(&concepts, rng.next_u64())?;
            let mut text = BTreeMap::new();
            text.insert(NATIVE.to_string(), world.utter(&concepts, NATIVE)?);
            text.insert(language.to_string(), world.utter(&concepts, language)?);
            Ok(SampleRecord {
                id,
                split: Split::assign(seed, id),
                concepts,
                image: Some(image),
                text,
            })
        })
        .collect()
}

pub fn write_corpus(records: &[SampleRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r.to_line())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSONL corpus. Blank lines are skipped; anything else that does
/// not parse fails with its 1-based line number.
pub fn read_corpus(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(SampleRecord::from_line(raw).map_err(parse_err)?);
    }
    Ok(out)
}
