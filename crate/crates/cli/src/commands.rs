//! The pipelines behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mla_core::eval::{
    export_embeddings, retrieval_eval, worker_threads, write_reports_csv, RetrievalReport,
};
use mla_core::gradcheck::{model_suite, op_suite, CheckCase};
use mla_core::model::{load_checkpoint, save_checkpoint, Model};
use mla_core::pipeline::{fresh_model, generate_corpora, register_languages, stage_data, Corpora};
use mla_core::synthworld::{read_corpus, write_corpus, Split, SyntheticWorld, NATIVE};
use mla_core::training::{
    extend_language, pretrain_vlp, run_le_stage, run_nlt_stage, run_schedule, StageConfig,
    StageKind, TrainReport,
};
use mla_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

const WORLD_DONE: &str = "COMPLETE";
const WORLD_KEY: &str = "world.json";

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Overrides the config's language list where a command takes one.
    pub languages: Option<Vec<String>>,
}

/// Creates `<out>/run-<hash>-<unix secs>` (suffixed if taken) and echoes
/// the resolved config into it.
pub fn create_run_dir(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let base = format!("run-{}-{secs}", cfg.hash());
    let mut n = 1;
    let dir = loop {
        let name = if n == 1 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    write_file(&dir.join("config.resolved.json"), &(cfg.to_json() + "\n"))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn build_world(cfg: &RunConfig) -> Result<SyntheticWorld> {
    SyntheticWorld::build(cfg.world.clone())
}

fn world_key(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "seed": cfg.seed, "world": cfg.world, "corpus": cfg.corpus })
}

fn all_languages(cfg: &RunConfig) -> Vec<String> {
    cfg.world.languages.iter().map(|l| l.tag.clone()).collect()
}

/// Writes every corpus of the configured world under
/// `<out>/world-<hash>/`. Returns the directory and whether an earlier
/// complete copy was reused.
pub fn world_gen(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, bool)> {
    let dir = out.join(format!("world-{}", cfg.world_hash()));
    if dir.join(WORLD_DONE).is_file() {
        return Ok((dir, true));
    }
    let tmp = out.join(format!("world-{}.partial", cfg.world_hash()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let world = build_world(cfg)?;
    let corpora = generate_corpora(&world, &all_languages(cfg), &cfg.corpus, cfg.seed)?;
    write_corpus(&corpora.pretrain, &tmp.join("pretrain.jsonl"))?;
    for (l, recs) in &corpora.parallel {
        write_corpus(recs, &tmp.join(format!("parallel-{l}.jsonl")))?;
    }
    for (l, recs) in &corpora.image_text {
        write_corpus(recs, &tmp.join(format!("image_text-{l}.jsonl")))?;
    }
    write_json(&tmp.join(WORLD_KEY), &world_key(cfg))?;
    write_file(&tmp.join(WORLD_DONE), "")?;
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok((dir, false))
}

/// Corpora for `languages`, read from `paths.corpora` when set and
/// generated in memory otherwise.
pub fn load_corpora(cfg: &RunConfig, languages: &[String]) -> Result<Corpora> {
    let Some(dir) = &cfg.paths.corpora else {
        return generate_corpora(&build_world(cfg)?, languages, &cfg.corpus, cfg.seed);
    };
    let key_path = dir.join(WORLD_KEY);
    let text = fs::read_to_string(&key_path).map_err(|e| Error::io(&key_path, e))?;
    let stored: serde_json::Value = serde_json::from_str(&text)?;
    if stored != world_key(cfg) {
        return Err(Error::Config(format!(
            "paths.corpora {} was generated from a different seed, world or corpus section",
            dir.display()
        )));
    }
    let mut c = Corpora {
        pretrain: read_corpus(&dir.join("pretrain.jsonl"))?,
        ..Default::default()
    };
    for l in languages {
        c.parallel.insert(
            l.clone(),
            read_corpus(&dir.join(format!("parallel-{l}.jsonl")))?,
        );
        c.image_text.insert(
            l.clone(),
            read_corpus(&dir.join(format!("image_text-{l}.jsonl")))?,
        );
    }
    Ok(c)
}

fn require_checkpoint(opts: &Options) -> Result<Model<f32>> {
    let path = opts
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    load_checkpoint(path)
}

fn main_languages(cfg: &RunConfig, opts: &Options) -> Vec<String> {
    opts.languages
        .clone()
        .unwrap_or_else(|| cfg.languages.clone())
}

fn register_missing(model: &mut Model<f32>, languages: &[String], seed: u64) -> Result<()> {
    let fresh: Vec<String> = languages
        .iter()
        .filter(|l| !model.is_registered(l))
        .cloned()
        .collect();
    register_languages(model, &fresh, seed)
}

/// Held-out retrieval for the native captions of the pretraining corpus and
/// for each language's image-text corpus.
pub fn evaluate(
    model: &Model<f32>,
    corpora: &Corpora,
    languages: &[String],
    split: Split,
) -> Result<Vec<RetrievalReport>> {
    let threads = worker_threads()?;
    let mut reports = Vec::new();
    if !corpora.pretrain.is_empty() {
        reports.push(retrieval_eval(
            model,
            &corpora.pretrain,
            NATIVE,
            split,
            threads,
        )?);
    }
    for l in languages {
        let recs = corpora
            .image_text
            .get(l)
            .ok_or_else(|| Error::Data(format!("no image-text corpus for {l:?}")))?;
        reports.push(retrieval_eval(model, recs, l, split, threads)?);
    }
    Ok(reports)
}

fn finish(
    dir: &Path,
    model: &Model<f32>,
    reports: &[TrainReport],
    metrics: Option<&[RetrievalReport]>,
) -> Result<PathBuf> {
    let ckpt = dir.join("checkpoint");
    save_checkpoint(model, &ckpt)?;
    write_json(&dir.join("train_reports.json"), &reports)?;
    if let Some(m) = metrics {
        write_json(&dir.join("metrics.json"), &m)?;
        write_reports_csv(m, &dir.join("metrics.csv"))?;
    }
    Ok(ckpt)
}

/// Native image-text pre-training from a fresh model.
pub fn pretrain(cfg: &RunConfig, opts: &Options) -> Result<PathBuf> {
    let stage = cfg.stage(StageKind::VlpPretrain)?;
    let dir = create_run_dir(cfg, &opts.out)?;
    let world = build_world(cfg)?;
    let corpora = load_corpora(cfg, &[])?;
    let mut model = fresh_model(&world, &cfg.model, cfg.seed)?;
    let data = stage_data(&model, &corpora, Split::Train)?;
    let report = pretrain_vlp(&mut model, &data, &stage, &cfg.loss)?;
    let metrics = evaluate(&model, &corpora, &[], cfg.eval.split)?;
    finish(&dir, &model, &[report], Some(&metrics))?;
    Ok(dir)
}

fn single_stage(cfg: &RunConfig, opts: &Options, kind: StageKind) -> Result<PathBuf> {
    let stage = cfg.stage(kind)?;
    let mut model = require_checkpoint(opts)?;
    let langs = main_languages(cfg, opts);
    let dir = create_run_dir(cfg, &opts.out)?;
    register_missing(&mut model, &langs, cfg.seed)?;
    let corpora = load_corpora(cfg, &langs)?;
    let data = stage_data(&model, &corpora, Split::Train)?;
    let stage = StageConfig {
        languages: langs.clone(),
        ..stage
    };
    let report = match kind {
        StageKind::Nlt => run_nlt_stage(&mut model, &data, &stage, &cfg.loss)?,
        _ => run_le_stage(&mut model, &data, &stage, &cfg.loss)?,
    };
    let metrics = evaluate(&model, &corpora, &langs, cfg.eval.split)?;
    finish(&dir, &model, &[report], Some(&metrics))?;
    Ok(dir)
}

pub fn train_nlt(cfg: &RunConfig, opts: &Options) -> Result<PathBuf> {
    single_stage(cfg, opts, StageKind::Nlt)
}

pub fn train_le(cfg: &RunConfig, opts: &Options) -> Result<PathBuf> {
    single_stage(cfg, opts, StageKind::Le)
}

/// Every configured stage in order, then held-out evaluation.
pub fn schedule(cfg: &RunConfig, opts: &Options) -> Result<PathBuf> {
    let stages: Vec<StageConfig> = (0..cfg.stages.len())
        .map(|i| cfg.resolved_stage(i))
        .collect();
    mla_core::training::validate_schedule(&stages.iter().map(|s| s.kind).collect::<Vec<_>>())?;
    let langs = main_languages(cfg, opts);
    let (pre, rest) = match stages.split_first() {
        Some((first, rest)) if first.kind == StageKind::VlpPretrain => {
            (Some(first.clone()), rest.to_vec())
        }
        _ => (None, stages.clone()),
    };
    let world = build_world(cfg)?;
    let mut model = match (&pre, &opts.checkpoint) {
        (Some(_), _) => fresh_model(&world, &cfg.model, cfg.seed)?,
        (None, Some(p)) => load_checkpoint(p)?,
        (None, None) => {
            return Err(Error::Config(
                "a schedule without pre-training needs --checkpoint".into(),
            ))
        }
    };
    let dir = create_run_dir(cfg, &opts.out)?;
    let corpora = load_corpora(cfg, &langs)?;
    let data = stage_data(&model, &corpora, Split::Train)?;
    let mut reports = Vec::new();
    if let Some(p) = &pre {
        reports.extend(run_schedule(
            &mut model,
            std::slice::from_ref(p),
            &data,
            &cfg.loss,
            None,
        )?);
    }
    register_missing(&mut model, &langs, cfg.seed)?;
    if !rest.is_empty() {
        let rest: Vec<StageConfig> = rest
            .into_iter()
            .map(|s| StageConfig {
                languages: langs.clone(),
                ..s
            })
            .collect();
        reports.extend(run_schedule(&mut model, &rest, &data, &cfg.loss, None)?);
    }
    let metrics = evaluate(&model, &corpora, &langs, cfg.eval.split)?;
    finish(&dir, &model, &reports, Some(&metrics))?;
    Ok(dir)
}

/// Adds one language to a trained checkpoint.
pub fn extend(cfg: &RunConfig, opts: &Options) -> Result<PathBuf> {
    let mut model = require_checkpoint(opts)?;
    let lang = match &opts.languages {
        Some(l) if l.len() == 1 => l[0].clone(),
        Some(_) => return Err(Error::Config("extend takes exactly one language".into())),
        None => cfg.extension.language.clone(),
    };
    let dir = create_run_dir(cfg, &opts.out)?;
    let mut langs = model.languages().to_vec();
    langs.push(lang.clone());
    let corpora = load_corpora(cfg, &langs)?;
    let data = stage_data(&model, &corpora, Split::Train)?;
    let seeded = |s: &StageConfig| StageConfig {
        seed: mla_core::training::language_seed(cfg.seed ^ s.seed, &lang),
        languages: vec![lang.clone()],
        ..s.clone()
    };
    let nlt = seeded(&cfg.extension.nlt);
    let le = cfg.extension.le.as_ref().map(seeded);
    let reports = extend_language(
        &mut model,
        &lang,
        &data,
        &nlt,
        le.as_ref(),
        cfg.extension.policy,
        &cfg.loss,
    )?;
    let metrics = evaluate(&model, &corpora, &langs, cfg.eval.split)?;
    finish(&dir, &model, &reports, Some(&metrics))?;
    Ok(dir)
}

/// Scores a checkpoint; the reports are also written to the run directory.
pub fn eval(cfg: &RunConfig, opts: &Options) -> Result<(PathBuf, Vec<RetrievalReport>)> {
    let model = require_checkpoint(opts)?;
    let langs = opts
        .languages
        .clone()
        .unwrap_or_else(|| model.languages().to_vec());
    let dir = create_run_dir(cfg, &opts.out)?;
    let corpora = load_corpora(cfg, &langs)?;
    let reports = evaluate(&model, &corpora, &langs, cfg.eval.split)?;
    write_json(&dir.join("metrics.json"), &reports)?;
    write_reports_csv(&reports, &dir.join("metrics.csv"))?;
    Ok((dir, reports))
}

/// One TSV per language holding image, native and language embeddings of
/// its evaluation-split records.
pub fn export(cfg: &RunConfig, opts: &Options) -> Result<PathBuf> {
    let model = require_checkpoint(opts)?;
    let langs = opts
        .languages
        .clone()
        .unwrap_or_else(|| model.languages().to_vec());
    let dir = create_run_dir(cfg, &opts.out)?;
    let corpora = load_corpora(cfg, &langs)?;
    let threads = worker_threads()?;
    for l in &langs {
        let recs: Vec<_> = corpora.image_text[l]
            .iter()
            .filter(|r| r.split == cfg.eval.split)
            .cloned()
            .collect();
        let tags = [NATIVE.to_string(), l.clone()];
        export_embeddings(
            &model,
            &recs,
            &tags,
            &dir.join(format!("embeddings-{l}.tsv")),
            threads,
        )?;
    }
    Ok(dir)
}

/// Finite-difference check of every operation and of the model losses in
/// 64-bit arithmetic.
pub fn grad_check(seed: u64) -> Result<Vec<CheckCase>> {
    let mut cases = op_suite(seed)?;
    cases.extend(model_suite(seed, None)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mla_core::model::ModelConfig;
    use mla_core::pipeline::CorpusSizes;

    fn tiny() -> RunConfig {
        RunConfig {
            corpus: CorpusSizes {
                pretrain: 100,
                parallel: 40,
                image_text: 100,
            },
            model: ModelConfig {
                num_layers: 1,
                model_dim: 16,
                num_heads: 2,
                ffn_dim: 16,
                proj_dim: 8,
                acquirer_hidden: 4,
                nonnative_emb_dim: 8,
                ..ModelConfig::default()
            },
            stages: vec![
                StageConfig::new(StageKind::VlpPretrain, 3, 1e-3, 8),
                StageConfig::new(StageKind::Nlt, 3, 1e-3, 8),
                StageConfig::new(StageKind::Le, 2, 1e-3, 8),
            ],
            ..RunConfig::default()
        }
    }

    #[test]
    fn world_gen_reuses_identical_corpora() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let (dir, reused) = world_gen(&cfg, tmp.path()).unwrap();
        assert!(!reused);
        let before = fs::read(dir.join("image_text-xa.jsonl")).unwrap();
        let (again, reused) = world_gen(&cfg, tmp.path()).unwrap();
        assert!(reused && again == dir);
        assert_eq!(fs::read(again.join("image_text-xa.jsonl")).unwrap(), before);
        let other = tempfile::tempdir().unwrap();
        let (fresh, _) = world_gen(&cfg, other.path()).unwrap();
        assert_eq!(fs::read(fresh.join("image_text-xa.jsonl")).unwrap(), before);
    }

    #[test]
    fn stored_corpora_match_generated_ones() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        let (dir, _) = world_gen(&cfg, tmp.path()).unwrap();
        let langs = vec!["xb".to_string()];
        let generated = load_corpora(&cfg, &langs).unwrap();
        cfg.paths.corpora = Some(dir);
        assert_eq!(load_corpora(&cfg, &langs).unwrap(), generated);
        cfg.seed += 1;
        assert!(load_corpora(&cfg, &langs).is_err());
    }

    #[test]
    fn run_dirs_are_write_once() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let a = create_run_dir(&cfg, tmp.path()).unwrap();
        let b = create_run_dir(&cfg, tmp.path()).unwrap();
        assert_ne!(a, b);
        let echoed = crate::config::load_config(&a.join("config.resolved.json")).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn schedule_then_extend_then_eval() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let opts = Options {
            out: tmp.path().into(),
            ..Options::default()
        };
        let run = schedule(&cfg, &opts).unwrap();
        let ckpt = run.join("checkpoint");
        let m = load_checkpoint(&ckpt).unwrap();
        assert_eq!(m.languages(), ["xa", "xb", "xc"]);
        let opts = Options {
            checkpoint: Some(ckpt),
            ..opts
        };
        let ext = extend(&cfg, &opts).unwrap();
        let m = load_checkpoint(&ext.join("checkpoint")).unwrap();
        assert_eq!(m.languages(), ["xa", "xb", "xc", "xd"]);
        let (_, reports) = eval(&cfg, &opts).unwrap();
        let names: Vec<&str> = reports.iter().map(|r| r.language.as_str()).collect();
        assert_eq!(names, ["en", "xa", "xb", "xc"]);
        let exp = export(
            &cfg,
            &Options {
                languages: Some(vec!["xb".into()]),
                ..opts
            },
        )
        .unwrap();
        let tsv = fs::read_to_string(exp.join("embeddings-xb.tsv")).unwrap();
        assert!(tsv.lines().next().unwrap().contains("\timage\t"));
    }

    #[test]
    fn eval_needs_a_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let opts = Options {
            out: tmp.path().into(),
            ..Options::default()
        };
        assert_eq!(eval(&tiny(), &opts).unwrap_err().kind(), "config");
    }
}
