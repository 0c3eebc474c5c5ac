//! Stage drivers: native pre-training, translation alignment, image-text
//! contrastive training, their schedules, and adding a language later.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use super::data::StageData;
use super::optim::Adam;
use super::{lr_at, Interleave, StageConfig, StageKind, TrainReport};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{save_checkpoint, Binder, Component, Model, Selector, EOS_ID, SOS_ID};
use crate::objectives::{pair_loss, LossConfig};
use crate::rng::{mix, Rng};
use crate::synthworld::NATIVE;
use crate::tensor::Tensor;

const RUNNING_WINDOW: usize = 10;

/// Which embedding rows a language extension may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtensionPolicy {
    /// Only rows of tokens in the new language's corpus, minus the shared
    /// frame tokens; the input projection stays frozen.
    RowsOnly,
    /// The whole table and the input projection.
    FullEmbedding,
}

/// Fixed-size batches drawn from a reshuffled permutation, epoch by epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl Sampler {
    fn new(n: usize, batch: usize, seed: u64, stream: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.min(n),
            rng: Rng::derive(seed, stream),
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Index of the language trained at each step.
fn language_plan(steps: usize, epoch_batches: &[usize], interleave: Interleave) -> Vec<usize> {
    let l = epoch_batches.len();
    match interleave {
        Interleave::PerBatch => (0..steps).map(|s| s % l).collect(),
        Interleave::PerEpoch => {
            let mut out = Vec::with_capacity(steps);
            let mut i = 0;
            while out.len() < steps {
                let run = epoch_batches[i % l].max(1);
                out.extend(std::iter::repeat_n(i % l, run.min(steps - out.len())));
                i += 1;
            }
            out
        }
    }
}

/// Trainable set for one step.
#[derive(Clone, Debug)]
enum Scope {
    Native,
    Acquire {
        emb_rows: Option<Vec<usize>>,
        in_proj: bool,
    },
}

impl Scope {
    fn apply(&self, model: &mut Model<f32>, lang: &str) -> Result<()> {
        model.registry_mut().freeze_all();
        match self {
            Scope::Native => {
                model.set_trainable(
                    &[
                        Selector::Component(Component::TextEncoder),
                        Selector::Component(Component::VisionEncoder),
                        Selector::Component(Component::Heads),
                    ],
                    true,
                )?;
            }
            Scope::Acquire { emb_rows, in_proj } => {
                model.set_trainable(
                    &[Selector::Component(Component::Acquirer(lang.to_string()))],
                    true,
                )?;
                let emb = match emb_rows {
                    None => Selector::Name("nonnative.tok_emb".into()),
                    Some(rows) => Selector::EmbeddingRows {
                        name: "nonnative.tok_emb".into(),
                        rows: rows.clone(),
                    },
                };
                model.set_trainable(&[emb], true)?;
                if *in_proj {
                    model.set_trainable(&[Selector::Name("nonnative.in_proj".into())], true)?;
                }
            }
        }
        Ok(())
    }

    /// Components that stay frozen for the whole stage.
    fn frozen_components(&self, model: &Model<f32>, langs: &[String]) -> Vec<Component> {
        let acquirers = model
            .languages()
            .iter()
            .map(|l| Component::Acquirer(l.clone()));
        match self {
            Scope::Native => std::iter::once(Component::NonNativeEmbedding)
                .chain(acquirers)
                .collect(),
            Scope::Acquire { .. } => [
                Component::TextEncoder,
                Component::VisionEncoder,
                Component::Heads,
            ]
            .into_iter()
            .chain(acquirers.filter(|c| !matches!(c, Component::Acquirer(l) if langs.contains(l))))
            .collect(),
        }
    }
}

fn digests(model: &Model<f32>, comps: &[Component]) -> BTreeMap<String, String> {
    comps
        .iter()
        .map(|c| (c.to_string(), model.digest(c)))
        .collect()
}

/// Shared loop: per step, sets the trainable scope, builds the loss for the
/// planned language, back-propagates and applies Adam at the scheduled rate.
fn drive(
    model: &mut Model<f32>,
    cfg: &StageConfig,
    langs: &[String],
    epoch_batches: &[usize],
    scope: &Scope,
    mut loss_fn: impl FnMut(&Model<f32>, &mut Graph<f32>, &mut Binder, usize) -> Result<Var>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let frozen = scope.frozen_components(model, langs);
    let frozen_before = digests(model, &frozen);
    let plan = language_plan(cfg.steps, epoch_batches, cfg.interleave);
    let mut adam = Adam::new();
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let mut language_trace = Vec::with_capacity(cfg.steps);
    for (step, &li) in plan.iter().enumerate() {
        scope.apply(model, &langs[li])?;
        let mut g = Graph::new();
        let mut b = Binder::new();
        let loss = loss_fn(model, &mut g, &mut b, li)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss {value} at step {step} ({})",
                langs[li]
            )));
        }
        let grads = g.backward(loss)?;
        adam.step(model.registry_mut(), &grads, lr_at(step, cfg)?)?;
        loss_trace.push(value);
        language_trace.push(langs[li].clone());
    }
    model.registry_mut().freeze_all();
    let frozen_after = digests(model, &frozen);
    if frozen_after != frozen_before {
        return Err(Error::Contract(format!(
            "a frozen component changed during the {} stage",
            cfg.kind.as_str()
        )));
    }
    let mut running_loss = BTreeMap::new();
    for l in langs {
        let recent: Vec<f64> = loss_trace
            .iter()
            .zip(&language_trace)
            .filter(|(_, t)| *t == l)
            .map(|(v, _)| *v)
            .collect();
        let tail = &recent[recent.len().saturating_sub(RUNNING_WINDOW)..];
        if !tail.is_empty() {
            running_loss.insert(l.clone(), tail.iter().sum::<f64>() / tail.len() as f64);
        }
    }
    Ok(TrainReport {
        kind: cfg.kind,
        steps: cfg.steps,
        loss_trace,
        language_trace,
        running_loss,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint: None,
        frozen_before,
        frozen_after,
    })
}

fn stage_languages(model: &Model<f32>, cfg: &StageConfig) -> Result<Vec<String>> {
    let langs = if cfg.languages.is_empty() {
        model.languages().to_vec()
    } else {
        cfg.languages.clone()
    };
    if langs.is_empty() {
        return Err(Error::Config(format!(
            "{} stage has no languages to train",
            cfg.kind.as_str()
        )));
    }
    for l in &langs {
        model.check_language(l)?;
    }
    Ok(langs)
}

fn check_kind(cfg: &StageConfig, kind: StageKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Schedule(format!(
            "{} driver given a {} stage config",
            kind.as_str(),
            cfg.kind.as_str()
        )));
    }
    Ok(())
}

fn gather<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn gather_rows(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), t.cols()], data)
}

/// Trains the text encoder, vision encoder and heads from scratch with the
/// contrastive loss on native image-text pairs, then freezes everything.
pub fn pretrain_vlp(
    model: &mut Model<f32>,
    data: &StageData,
    cfg: &StageConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    check_kind(cfg, StageKind::VlpPretrain)?;
    loss.validate()?;
    let pairs = data.image_text(NATIVE)?;
    let mut sampler = Sampler::new(pairs.len(), cfg.batch_size, cfg.seed, 1);
    let epoch = [sampler.batches_per_epoch()];
    drive(
        model,
        cfg,
        &[NATIVE.to_string()],
        &epoch,
        &Scope::Native,
        |m, g, b, _| {
            let idx = sampler.next();
            let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &pairs.images[i]).collect();
            let v = m.image_forward(g, b, &imgs)?;
            let t = m.native_text_forward(g, b, &gather(&pairs.texts, &idx))?;
            pair_loss(g, loss.le_objective, v, t, loss.temperature)
        },
    )
}

struct NltArm {
    nonnative: Vec<Vec<usize>>,
    targets: Tensor<f32>,
    sampler: Sampler,
}

struct LeArm {
    texts: Vec<Vec<usize>>,
    images: Tensor<f32>,
    sampler: Sampler,
}

/// Native targets are encoded once per stage: the native path is frozen, so
/// they are the same values a per-batch pass would produce.
fn nlt_arms(
    model: &Model<f32>,
    data: &StageData,
    langs: &[String],
    cfg: &StageConfig,
) -> Result<Vec<NltArm>> {
    langs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let p = data.translation(l)?;
            Ok(NltArm {
                nonnative: p.nonnative.clone(),
                targets: model.encode_native_texts(&p.native)?,
                sampler: Sampler::new(p.len(), cfg.batch_size, cfg.seed, 100 + i as u64),
            })
        })
        .collect()
}

fn le_arms(
    model: &Model<f32>,
    data: &StageData,
    langs: &[String],
    cfg: &StageConfig,
) -> Result<Vec<LeArm>> {
    langs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let p = data.image_text(l)?;
            Ok(LeArm {
                texts: p.texts.clone(),
                images: model.encode_images(&p.images)?,
                sampler: Sampler::new(p.len(), cfg.batch_size, cfg.seed, 200 + i as u64),
            })
        })
        .collect()
}

fn nlt_term(
    m: &Model<f32>,
    g: &mut Graph<f32>,
    b: &mut Binder,
    arm: &mut NltArm,
    lang: &str,
    loss: &LossConfig,
) -> Result<Var> {
    let idx = arm.sampler.next();
    let s = m.nonnative_text_forward(g, b, &gather(&arm.nonnative, &idx), lang, false)?;
    let t = g.constant(gather_rows(&arm.targets, &idx)?);
    pair_loss(g, loss.nlt_objective, t, s, loss.temperature)
}

fn le_term(
    m: &Model<f32>,
    g: &mut Graph<f32>,
    b: &mut Binder,
    arm: &mut LeArm,
    lang: &str,
    loss: &LossConfig,
) -> Result<Var> {
    let idx = arm.sampler.next();
    let s = m.nonnative_text_forward(g, b, &gather(&arm.texts, &idx), lang, false)?;
    let v = g.constant(gather_rows(&arm.images, &idx)?);
    pair_loss(g, loss.le_objective, v, s, loss.temperature)
}

fn acquire_scope(cfg: &StageConfig, emb_rows: Option<Vec<usize>>) -> Scope {
    let in_proj = cfg.train_in_proj && emb_rows.is_none();
    Scope::Acquire { emb_rows, in_proj }
}

fn nlt_stage(
    model: &mut Model<f32>,
    data: &StageData,
    cfg: &StageConfig,
    loss: &LossConfig,
    emb_rows: Option<Vec<usize>>,
) -> Result<TrainReport> {
    check_kind(cfg, StageKind::Nlt)?;
    loss.validate()?;
    let langs = stage_languages(model, cfg)?;
    let mut arms = nlt_arms(model, data, &langs, cfg)?;
    let epoch: Vec<usize> = arms.iter().map(|a| a.sampler.batches_per_epoch()).collect();
    drive(
        model,
        cfg,
        &langs,
        &epoch,
        &acquire_scope(cfg, emb_rows),
        |m, g, b, li| nlt_term(m, g, b, &mut arms[li], &langs[li], loss),
    )
}

fn le_stage(
    model: &mut Model<f32>,
    data: &StageData,
    cfg: &StageConfig,
    loss: &LossConfig,
    emb_rows: Option<Vec<usize>>,
) -> Result<TrainReport> {
    check_kind(cfg, StageKind::Le)?;
    loss.validate()?;
    let langs = stage_languages(model, cfg)?;
    let mut arms = le_arms(model, data, &langs, cfg)?;
    let epoch: Vec<usize> = arms.iter().map(|a| a.sampler.batches_per_epoch()).collect();
    drive(
        model,
        cfg,
        &langs,
        &epoch,
        &acquire_scope(cfg, emb_rows),
        |m, g, b, li| le_term(m, g, b, &mut arms[li], &langs[li], loss),
    )
}

/// Aligns each language's non-native sentences with the frozen native
/// encodings of their translations, one language per batch in turn.
pub fn run_nlt_stage(
    model: &mut Model<f32>,
    data: &StageData,
    cfg: &StageConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    nlt_stage(model, data, cfg, loss, None)
}

/// Contrasts each language's captions against frozen image encodings.
pub fn run_le_stage(
    model: &mut Model<f32>,
    data: &StageData,
    cfg: &StageConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    le_stage(model, data, cfg, loss, None)
}

/// Both objectives summed, each step drawing one translation batch and one
/// image-text batch of the same language.
pub fn run_joint_stage(
    model: &mut Model<f32>,
    data: &StageData,
    cfg: &StageConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    check_kind(cfg, StageKind::Joint)?;
    loss.validate()?;
    let langs = stage_languages(model, cfg)?;
    let mut nlt = nlt_arms(model, data, &langs, cfg)?;
    let mut le = le_arms(model, data, &langs, cfg)?;
    let epoch: Vec<usize> = nlt.iter().map(|a| a.sampler.batches_per_epoch()).collect();
    drive(
        model,
        cfg,
        &langs,
        &epoch,
        &acquire_scope(cfg, None),
        |m, g, b, li| {
            let a = nlt_term(m, g, b, &mut nlt[li], &langs[li], loss)?;
            let c = le_term(m, g, b, &mut le[li], &langs[li], loss)?;
            g.add(a, c)
        },
    )
}

/// Accepts an optional leading pre-training stage followed by one of
/// `[nlt]`, `[le]`, `[joint]`, `[nlt, le]`, `[nlt, joint]`.
pub fn validate_schedule(kinds: &[StageKind]) -> Result<()> {
    use StageKind::*;
    let rest = match kinds.split_first() {
        Some((VlpPretrain, rest)) => rest,
        _ => kinds,
    };
    match rest {
        [] if !kinds.is_empty() => Ok(()),
        [Nlt] | [Le] | [Joint] | [Nlt, Le] | [Nlt, Joint] => Ok(()),
        _ => Err(Error::Schedule(format!(
            "unsupported stage sequence [{}]",
            kinds
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Runs stages in order on one model. With `checkpoint_dir`, the model is
/// saved after each stage under `stage-<i>-<kind>`.
pub fn run_schedule(
    model: &mut Model<f32>,
    stages: &[StageConfig],
    data: &StageData,
    loss: &LossConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<TrainReport>> {
    validate_schedule(&stages.iter().map(|s| s.kind).collect::<Vec<_>>())?;
    let mut reports = Vec::with_capacity(stages.len());
    for (i, cfg) in stages.iter().enumerate() {
        let mut report = match cfg.kind {
            StageKind::VlpPretrain => pretrain_vlp(model, data, cfg, loss)?,
            StageKind::Nlt => run_nlt_stage(model, data, cfg, loss)?,
            StageKind::Le => run_le_stage(model, data, cfg, loss)?,
            StageKind::Joint => run_joint_stage(model, data, cfg, loss)?,
        };
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("stage-{i}-{}", cfg.kind.as_str()));
            save_checkpoint(model, &path)?;
            report.checkpoint = Some(path);
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Seed for a language's acquirer initialisation.
pub fn language_seed(seed: u64, lang: &str) -> u64 {
    lang.bytes().fold(mix(seed), |h, b| mix(h ^ u64::from(b)))
}

/// Registers `new_lang` and trains it alone: an NLT stage, then optionally
/// an LE stage. Other languages' acquirers are never touched.
pub fn extend_language(
    model: &mut Model<f32>,
    new_lang: &str,
    data: &StageData,
    nlt: &StageConfig,
    le: Option<&StageConfig>,
    policy: ExtensionPolicy,
    loss: &LossConfig,
) -> Result<Vec<TrainReport>> {
    if model.is_registered(new_lang) {
        return Err(Error::AlreadyRegistered(new_lang.to_string()));
    }
    let rows = match policy {
        ExtensionPolicy::FullEmbedding => None,
        ExtensionPolicy::RowsOnly => {
            let mut used = vec![false; model.nonnative_vocab().len()];
            let mut mark = |seqs: &[Vec<usize>]| {
                for &t in seqs.iter().flatten() {
                    used[t] = true;
                }
            };
            mark(&data.translation(new_lang)?.nonnative);
            if le.is_some() {
                mark(&data.image_text(new_lang)?.texts);
            }
            used[SOS_ID] = false;
            used[EOS_ID] = false;
            Some((0..used.len()).filter(|&i| used[i]).collect::<Vec<_>>())
        }
    };
    let only = |cfg: &StageConfig| StageConfig {
        languages: vec![new_lang.to_string()],
        ..cfg.clone()
    };
    model.register_language(new_lang, language_seed(nlt.seed, new_lang))?;
    let mut reports = vec![nlt_stage(model, data, &only(nlt), loss, rows.clone())?];
    if let Some(le) = le {
        reports.push(le_stage(model, data, &only(le), loss, rows)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_batch_plan_alternates() {
        assert_eq!(
            language_plan(5, &[3, 3], Interleave::PerBatch),
            [0, 1, 0, 1, 0]
        );
    }

    #[test]
    fn per_epoch_plan_runs_whole_epochs() {
        assert_eq!(
            language_plan(7, &[2, 3], Interleave::PerEpoch),
            [0, 0, 1, 1, 1, 0, 0]
        );
    }

    #[test]
    fn sampler_covers_an_epoch_without_repeats() {
        let mut s = Sampler::new(10, 3, 1, 0);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn supported_schedules() {
        use StageKind::*;
        for ok in [
            &[Nlt][..],
            &[Le],
            &[Joint],
            &[Nlt, Le],
            &[Nlt, Joint],
            &[VlpPretrain],
            &[VlpPretrain, Nlt, Le],
        ] {
            validate_schedule(ok).unwrap();
        }
        for bad in [
            &[][..],
            &[Le, Nlt],
            &[Nlt, Nlt],
            &[Nlt, VlpPretrain],
            &[Joint, Le],
        ] {
            assert!(
                matches!(validate_schedule(bad), Err(Error::Schedule(_))),
                "{bad:?}"
            );
        }
    }
}
