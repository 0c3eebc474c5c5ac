//! Cross-modal retrieval metrics, video pooling and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthworld::{SampleRecord, Split, NATIVE};
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Frames kept from a longer clip.
pub const VIDEO_FRAMES: usize = 12;

pub const THREADS_ENV: &str = "MLA_FORGE_THREADS";

/// Rows per unit of parallel work; matches the encoders' inference batch so
/// parallel and serial encodings are bit-identical.
const WORK_CHUNK: usize = 256;

pub const CSV_HEADER: &str = "language,split,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,ar";

/// Fraction of queries (rows of `sim`) whose true candidate ranks in the
/// top `k`. Ties go to the lower candidate index.
pub fn recall_at_k(sim: &Tensor<f32>, truth: &[usize], k: usize) -> Result<f64> {
    let (q, c) = (sim.rows(), sim.cols());
    if k == 0 || k > c {
        return Err(Error::Config(format!("recall@{k} over {c} candidates")));
    }
    if truth.len() != q {
        return Err(Error::Shape(format!(
            "{} truth indices for {q} queries",
            truth.len()
        )));
    }
    let mut hits = 0usize;
    for (i, &t) in truth.iter().enumerate() {
        if t >= c {
            return Err(Error::Data(format!(
                "truth index {t} outside {c} candidates"
            )));
        }
        let row = sim.row(i);
        let st = row[t];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > st || (s == st && j < t))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub language: String,
    pub split: Split,
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub ar: f64,
    pub candidates: usize,
}

impl RetrievalReport {
    pub fn recalls(&self) -> [f64; 6] {
        [
            self.r1_i2t,
            self.r5_i2t,
            self.r10_i2t,
            self.r1_t2i,
            self.r5_t2i,
            self.r10_t2i,
        ]
    }

    /// CSV row in [`CSV_HEADER`] order, AR as a percentage.
    pub fn csv_row(&self) -> String {
        let r = self.recalls();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.language,
            self.split.as_str(),
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
            self.ar * 100.0
        )
    }
}

/// Mean of the six recalls, summed in report order.
pub fn average_recall(recalls: &[f64; 6]) -> f64 {
    recalls.iter().sum::<f64>() / 6.0
}

fn normalized(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateVector(format!(
                "zero embedding at row {r}"
            )));
        }
        for v in row {
            *v = (*v as f64 / n) as f32;
        }
    }
    Ok(out)
}

/// Cosine similarity of every row of `a` with every row of `b`.
pub fn cosine_matrix(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    normalized(a)?.matmul(&normalized(b)?.transpose())
}

/// Report from paired embeddings: image `i` belongs with text `i`.
pub fn retrieval_from_embeddings(
    images: &Tensor<f32>,
    texts: &Tensor<f32>,
    language: &str,
    split: Split,
) -> Result<RetrievalReport> {
    if images.rows() != texts.rows() {
        return Err(Error::Shape(format!(
            "{} images vs {} texts",
            images.rows(),
            texts.rows()
        )));
    }
    let sim = cosine_matrix(images, texts)?;
    let simt = sim.transpose();
    let truth: Vec<usize> = (0..sim.rows()).collect();
    let mut r = [0.0; 6];
    for (i, &k) in RECALL_KS.iter().enumerate() {
        r[i] = recall_at_k(&sim, &truth, k)?;
        r[3 + i] = recall_at_k(&simt, &truth, k)?;
    }
    Ok(RetrievalReport {
        language: language.to_string(),
        split,
        r1_i2t: r[0],
        r5_i2t: r[1],
        r10_i2t: r[2],
        r1_t2i: r[3],
        r5_t2i: r[4],
        r10_t2i: r[5],
        ar: average_recall(&r),
        candidates: sim.cols(),
    })
}

/// Worker count from [`THREADS_ENV`]; 1 when unset.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

/// Applies `f` to fixed-size chunks of `items`, spread over `threads`
/// workers, and stacks the results in order.
fn encode_chunks<I: Sync>(
    items: &[I],
    threads: usize,
    f: impl Fn(&[I]) -> Result<Tensor<f32>> + Sync,
) -> Result<Tensor<f32>> {
    let chunks: Vec<&[I]> = items.chunks(WORK_CHUNK).collect();
    let parts: Vec<Result<Tensor<f32>>> = if threads <= 1 || chunks.len() <= 1 {
        chunks.iter().map(|c| f(c)).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(|| group.iter().map(|c| f(c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("encoder worker panicked"))
                .collect()
        })
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let cols = parts.first().map_or(0, Tensor::cols);
    let data: Vec<f32> = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Tensor::new(vec![items.len(), cols], data)
}

pub fn encode_images_parallel(
    model: &Model<f32>,
    images: &[Tensor<f32>],
    threads: usize,
) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::Data("no images to encode".into()));
    }
    encode_chunks(images, threads, |c| model.encode_images(c))
}

/// Encodes framed token sequences of `language`, natively for [`NATIVE`].
pub fn encode_texts_parallel(
    model: &Model<f32>,
    seqs: &[Vec<usize>],
    language: &str,
    threads: usize,
) -> Result<Tensor<f32>> {
    if seqs.is_empty() {
        return Err(Error::Data("no texts to encode".into()));
    }
    if language == NATIVE {
        encode_chunks(seqs, threads, |c| model.encode_native_texts(c))
    } else {
        model.check_language(language)?;
        encode_chunks(seqs, threads, |c| model.encode_nonnative_texts(c, language))
    }
}

fn tokenize(model: &Model<f32>, r: &SampleRecord, language: &str) -> Result<Vec<usize>> {
    let vocab = if language == NATIVE {
        model.native_vocab()
    } else {
        model.nonnative_vocab()
    };
    vocab.encode(r.sentence(language)?)
}

/// Image-text retrieval over the `split` records as one candidate pool.
pub fn retrieval_eval(
    model: &Model<f32>,
    records: &[SampleRecord],
    language: &str,
    split: Split,
    threads: usize,
) -> Result<RetrievalReport> {
    let picked: Vec<&SampleRecord> = records.iter().filter(|r| r.split == split).collect();
    if picked.is_empty() {
        return Err(Error::Data(format!(
            "no {} records to evaluate",
            split.as_str()
        )));
    }
    let images: Vec<Tensor<f32>> = picked
        .iter()
        .map(|r| {
            r.image
                .clone()
                .ok_or_else(|| Error::Data(format!("record {} has no image", r.id)))
        })
        .collect::<Result<_>>()?;
    let seqs: Vec<Vec<usize>> = picked
        .iter()
        .map(|r| tokenize(model, r, language))
        .collect::<Result<_>>()?;
    let iv = encode_images_parallel(model, &images, threads)?;
    let tv = encode_texts_parallel(model, &seqs, language, threads)?;
    retrieval_from_embeddings(&iv, &tv, language, split)
}

/// Mean of per-frame image embeddings; clips longer than [`VIDEO_FRAMES`]
/// are sampled uniformly at frames `i·n/12`.
pub fn encode_video(model: &Model<f32>, frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    if frames.is_empty() {
        return Err(Error::Data("a video needs at least one frame".into()));
    }
    let n = frames.len();
    let picked: Vec<Tensor<f32>> = if n > VIDEO_FRAMES {
        (0..VIDEO_FRAMES)
            .map(|i| frames[i * n / VIDEO_FRAMES].clone())
            .collect()
    } else {
        frames.to_vec()
    };
    let emb = model.encode_images(&picked)?;
    let mut mean = vec![0.0f64; emb.cols()];
    for r in 0..emb.rows() {
        for (m, &v) in mean.iter_mut().zip(emb.row(r)) {
            *m += v as f64;
        }
    }
    Ok(Tensor::from_vec(
        mean.into_iter()
            .map(|m| (m / emb.rows() as f64) as f32)
            .collect(),
    ))
}

/// Writes `id\ttag\tv1\t…` rows: one `image` row per record that has an
/// image, then one row per language.
pub fn export_embeddings(
    model: &Model<f32>,
    records: &[SampleRecord],
    languages: &[String],
    path: &Path,
    threads: usize,
) -> Result<usize> {
    let images: Vec<Tensor<f32>> = records.iter().filter_map(|r| r.image.clone()).collect();
    let image_emb = if images.is_empty() {
        None
    } else {
        Some(encode_images_parallel(model, &images, threads)?)
    };
    let mut text_emb = Vec::with_capacity(languages.len());
    for l in languages {
        let seqs: Vec<Vec<usize>> = records
            .iter()
            .map(|r| tokenize(model, r, l))
            .collect::<Result<_>>()?;
        text_emb.push(encode_texts_parallel(model, &seqs, l, threads)?);
    }
    let mut out = String::new();
    let mut rows = 0;
    let mut img_row = 0;
    let mut push = |out: &mut String, id: u64, tag: &str, v: &[f32]| {
        write!(out, "{id}\t{tag}").expect("writing to a String");
        for x in v {
            write!(out, "\t{x}").expect("writing to a String");
        }
        out.push('\n');
        rows += 1;
    };
    for (i, r) in records.iter().enumerate() {
        if r.image.is_some() {
            let e = image_emb.as_ref().expect("images were encoded");
            push(&mut out, r.id, "image", e.row(img_row));
            img_row += 1;
        }
        for (l, e) in languages.iter().zip(&text_emb) {
            push(&mut out, r.id, l, e.row(i));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

pub fn write_reports_csv(reports: &[RetrievalReport], path: &Path) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
