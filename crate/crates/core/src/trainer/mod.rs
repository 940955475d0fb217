//! Training protocol: text-to-image pretraining, projector-only phase 1,
//! joint phase 2, three-way conditioning dropout and EMA weights.

mod config;
mod ema;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{DataConfig, RunConfig, TrainConfig, CONFIG_SCHEMA_VERSION, MAX_SEED};
pub use ema::EmaTracker;

use crate::datagen::{Corpus, GrammarConfig, TrainingSample};
use crate::diffusion::training_loss;
use crate::encoders::{ImageEncoder, TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Conditioning, ModelConfig, UmmModel};
use crate::numerics::{adam_step, AdamConfig, AdamState, Checkpoint, Graph, ParameterStore, Tensor};
use crate::tiue::{ConditionSet, Projector};
use crate::diffusion::Denoiser;

/// Prefix of EMA shadow entries inside a checkpoint.
pub const EMA_PREFIX: &str = "ema/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain,
    Phase1,
    Phase2,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "phase1" => Ok(Phase::Phase1),
            "phase2" => Ok(Phase::Phase2),
            _ => Err(Error::format("phase", format!("unknown phase `{s}`"))),
        }
    }

    /// Parameter-name prefixes optimized in this phase.
    pub fn trainable_prefixes(&self) -> &'static [&'static str] {
        match self {
            Phase::Pretrain => &[TextEncoder::PREFIX, ImageEncoder::PREFIX, Denoiser::PREFIX],
            Phase::Phase1 => &[Projector::PREFIX],
            Phase::Phase2 => &[Projector::PREFIX, Denoiser::PREFIX],
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Phase1 => 2,
            Phase::Phase2 => 3,
        }
    }
}

/// Conditioning branch chosen for one training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Null,
    Unified,
    Text,
}

/// Categorical draw over (null, multi-modal, pure-text). Without subjects
/// the multi-modal mass moves to pure text.
pub fn draw_condition(has_subjects: bool, probs: [f64; 3], rng: &mut impl Rng) -> Branch {
    let u: f64 = rng.random();
    if u < probs[0] {
        Branch::Null
    } else if u < probs[0] + probs[1] {
        if has_subjects {
            Branch::Unified
        } else {
            Branch::Text
        }
    } else {
        Branch::Text
    }
}

/// A training sample tokenized and paired with its condition sets and the
/// class labels of its subject crops.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub image: Image,
    pub unified: ConditionSet,
    pub text: ConditionSet,
    pub crops: Vec<(Image, usize, usize)>,
}

pub fn prepare_samples(
    model: &UmmModel,
    vocab: &Vocabulary,
    grammar: &GrammarConfig,
    samples: &[TrainingSample],
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let tokens = vocab.tokenize(&s.caption, model.config.max_len)?;
            let unified = ConditionSet::new(
                tokens.clone(),
                s.subjects.iter().map(|x| x.crop.clone()).collect(),
                s.subjects.iter().map(|x| x.position).collect(),
            )?;
            let mut crops = Vec::new();
            for x in &s.subjects {
                let shape = grammar
                    .shape_index(&x.label)
                    .ok_or_else(|| Error::invalid(format!("unknown shape `{}`", x.label)))?;
                let color = grammar
                    .color_index(&x.color)
                    .ok_or_else(|| Error::invalid(format!("unknown colour `{}`", x.color)))?;
                crops.push((x.crop.clone(), shape, color));
            }
            Ok(PreparedSample {
                image: s.image.clone(),
                unified,
                text: ConditionSet::text_only(tokens),
                crops,
            })
        })
        .collect()
}

/// A model with its vocabulary, grammar and weights, as stored in a
/// checkpoint. `raw` holds the optimizer's weights, `ema` the averaged
/// weights used for sampling.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: UmmModel,
    pub vocab: Vocabulary,
    pub grammar: GrammarConfig,
    pub phase: Phase,
    pub step: usize,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub raw: ParameterStore<f32>,
    pub ema: ParameterStore<f32>,
}

impl TrainedModel {
    pub fn new_model(config: &ModelConfig, vocab: &Vocabulary, grammar: &GrammarConfig) -> Result<UmmModel> {
        UmmModel::new(config, vocab.len(), grammar.shapes.len(), grammar.colors.len())
    }

    /// Weights used for sampling and evaluation.
    pub fn params(&self) -> &ParameterStore<f32> {
        &self.ema
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.raw);
        for (name, p) in self.ema.iter() {
            let raw = self.raw.get(name).expect("ema and raw stores share names");
            if !p.value.bit_eq(raw) {
                ck.insert(format!("{EMA_PREFIX}{name}"), &p.value);
            }
        }
        let meta = &mut ck.meta;
        meta.insert("model_config".into(), toml::to_string(&self.model.config).expect("model config serializes"));
        meta.insert("grammar".into(), serde_json::to_string(&self.grammar).expect("grammar serializes"));
        meta.insert("vocab".into(), self.vocab.to_text());
        meta.insert("phase".into(), self.phase.name().into());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("train_config".into(), toml::to_string(&self.train_config).expect("train config serializes"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ck.meta.get(k).ok_or_else(|| Error::format("checkpoint", format!("missing `{k}` metadata")));
        let config: ModelConfig =
            toml::from_str(meta("model_config")?).map_err(|e| Error::format("checkpoint model config", e.to_string()))?;
        let grammar: GrammarConfig =
            serde_json::from_str(meta("grammar")?).map_err(|e| Error::format("checkpoint grammar", e.to_string()))?;
        grammar.validate()?;
        let vocab = Vocabulary::parse(meta("vocab")?)?;
        let phase = Phase::parse(meta("phase")?)?;
        let number = |k: &str| meta(k)?.parse::<u64>().map_err(|e| Error::format("checkpoint", format!("`{k}`: {e}")));
        let step = number("step")? as usize;
        let seed = number("seed")?;
        let train_config: TrainConfig =
            toml::from_str(meta("train_config")?).map_err(|e| Error::format("checkpoint train config", e.to_string()))?;
        let model = Self::new_model(&config, &vocab, &grammar)?;
        let raw = ck.to_store::<f32>("")?;
        let expected = model.init_params::<f32>(0)?;
        for (name, p) in expected.iter() {
            let got = raw.get(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    lhs: p.value.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        if raw.len() != expected.len() {
            return Err(Error::format("checkpoint", "parameter set does not match the model"));
        }
        let mut ema = raw.clone();
        for (name, p) in ck.to_store::<f32>(EMA_PREFIX)?.iter() {
            if ema.get(name)?.shape() != p.value.shape() {
                return Err(Error::format("checkpoint", format!("EMA entry `{name}` has the wrong shape")));
            }
            ema.set(name, p.value.clone())?;
        }
        Ok(TrainedModel {
            model,
            vocab,
            grammar,
            phase,
            step,
            seed,
            train_config,
            raw,
            ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-step diffusion losses of one phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the first and last `window` steps.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(w)..]))
    }
}

fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase.stream());
    rng
}

fn append_log(path: &Path, rows: &[(usize, f64)], phase: Phase, lr: f64) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("step,phase,loss,lr\n");
    }
    for (step, loss) in rows {
        text.push_str(&format!("{step},{},{loss},{lr}\n", phase.name()));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Sets trainable flags for `phase`: its prefixes on, everything else off.
pub fn set_phase_trainable(ps: &mut ParameterStore<f32>, phase: Phase) {
    ps.freeze_all();
    for prefix in phase.trainable_prefixes() {
        ps.set_trainable_prefix(prefix, true);
    }
}

/// Runs `cfg.iterations` optimizer steps of `phase` on `data` starting from
/// `params`. Returns raw weights, the EMA tracker and the loss trace.
pub fn run_phase(
    model: &UmmModel,
    params: ParameterStore<f32>,
    data: &[PreparedSample],
    phase: Phase,
    cfg: &TrainConfig,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<(ParameterStore<f32>, EmaTracker<f32>, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut ps = params;
    set_phase_trainable(&mut ps, phase);
    let mut ema = EmaTracker::new(&ps, cfg.ema_decay, cfg.ema_warmup);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let trainable = ps.trainable_names();
    let mut rng = phase_rng(seed, phase);
    let mut log = TrainLog::default();
    let mut pending = Vec::new();
    for step in 1..=cfg.iterations {
        let batch: Vec<&PreparedSample> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let conds: Vec<Conditioning> = batch
            .iter()
            .map(|s| match draw_condition(s.unified.has_subjects(), cfg.cond_probs, &mut rng) {
                Branch::Null => Conditioning::Null,
                Branch::Unified => Conditioning::Set(&s.unified),
                Branch::Text => Conditioning::Set(&s.text),
            })
            .collect();
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let mut g = Graph::new();
        let loss = training_loss(&mut g, &ps, model, &images, &conds, &mut rng)?;
        let value = g.value(loss).data()[0] as f64;
        let total = if phase == Phase::Pretrain && cfg.aux_weight > 0.0 {
            match aux_loss(&mut g, &ps, model, &batch)? {
                Some(aux) => {
                    let aux = g.scale(aux, cfg.aux_weight as f32);
                    g.add(loss, aux)?
                }
                None => loss,
            }
        } else {
            loss
        };
        let mut grads = g.backward(total)?.into_params();
        fill_missing(&mut grads, &ps, &trainable)?;
        adam_step(&mut ps, &grads, &mut adam)?;
        ema.update(&ps)?;
        log.losses.push(value);
        pending.push((step, value));
        if step % cfg.log_every == 0 || step == cfg.iterations {
            let mean = pending.iter().map(|p| p.1).sum::<f64>() / pending.len() as f64;
            log::info!("{} step {step}/{} loss {mean:.4}", phase.name(), cfg.iterations);
            if let Some(path) = log_path {
                append_log(path, &pending, phase, cfg.lr)?;
            }
            pending.clear();
        }
    }
    Ok((ps, ema, log))
}

/// Shape and colour cross-entropy of the image encoder on the batch's
/// subject crops.
fn aux_loss(
    g: &mut Graph<f32>,
    ps: &ParameterStore<f32>,
    model: &UmmModel,
    batch: &[&PreparedSample],
) -> Result<Option<crate::numerics::Var>> {
    let crops: Vec<&(Image, usize, usize)> = batch.iter().flat_map(|s| s.crops.iter()).collect();
    if crops.is_empty() {
        return Ok(None);
    }
    let images: Vec<&Image> = crops.iter().map(|c| &c.0).collect();
    let emb = model.tiue.image.forward(g, ps, &images)?;
    let (shape, color) = model.tiue.image.classify(g, ps, emb)?;
    let shapes: Vec<usize> = crops.iter().map(|c| c.1).collect();
    let colors: Vec<usize> = crops.iter().map(|c| c.2).collect();
    let a = g.cross_entropy(shape, &shapes)?;
    let b = g.cross_entropy(color, &colors)?;
    Ok(Some(g.add(a, b)?))
}

/// Zero gradients for trainable parameters the loss never reached.
fn fill_missing(grads: &mut BTreeMap<String, Tensor<f32>>, ps: &ParameterStore<f32>, trainable: &[String]) -> Result<()> {
    for name in trainable {
        if !grads.contains_key(name) {
            grads.insert(name.clone(), Tensor::zeros(ps.get(name)?.shape()));
        }
    }
    Ok(())
}

fn check_corpus(corpus: &Corpus, init: &TrainedModel) -> Result<()> {
    if corpus.vocab != init.vocab {
        return Err(Error::invalid("corpus vocabulary differs from the checkpoint's"));
    }
    Ok(())
}

fn finish(
    model: UmmModel,
    corpus: &Corpus,
    phase: Phase,
    cfg: &TrainConfig,
    seed: u64,
    raw: ParameterStore<f32>,
    ema: &EmaTracker<f32>,
) -> Result<TrainedModel> {
    let merged = ema.merged(&raw)?;
    Ok(TrainedModel {
        model,
        vocab: corpus.vocab.clone(),
        grammar: corpus.grammar.clone(),
        phase,
        step: cfg.iterations,
        seed,
        train_config: cfg.clone(),
        raw,
        ema: merged,
    })
}

/// Trains text encoder, image encoder and denoiser from scratch on
/// (image, caption) pairs.
pub fn pretrain_t2i(run: &RunConfig, corpus: &Corpus, log_path: Option<&Path>) -> Result<(TrainedModel, TrainLog)> {
    run.validate()?;
    let model = TrainedModel::new_model(&run.model, &corpus.vocab, &corpus.grammar)?;
    let data = prepare_samples(&model, &corpus.vocab, &corpus.grammar, &corpus.samples)?;
    let init = model.init_params::<f32>(run.seed)?;
    let cfg = &run.pretrain;
    let (raw, ema, log) = run_phase(&model, init, &data, Phase::Pretrain, cfg, run.seed, log_path)?;
    Ok((finish(model, corpus, Phase::Pretrain, cfg, run.seed, raw, &ema)?, log))
}

/// Trains the projector with everything else frozen, starting from the
/// averaged weights of `init`.
pub fn train_phase1(run: &RunConfig, corpus: &Corpus, init: &TrainedModel, log_path: Option<&Path>) -> Result<(TrainedModel, TrainLog)> {
    continue_training(run, corpus, init, Phase::Phase1, &run.phase1, log_path)
}

/// Trains projector and denoiser jointly; encoder trunks stay frozen.
pub fn train_phase2(run: &RunConfig, corpus: &Corpus, init: &TrainedModel, log_path: Option<&Path>) -> Result<(TrainedModel, TrainLog)> {
    continue_training(run, corpus, init, Phase::Phase2, &run.phase2, log_path)
}

fn continue_training(
    run: &RunConfig,
    corpus: &Corpus,
    init: &TrainedModel,
    phase: Phase,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<(TrainedModel, TrainLog)> {
    run.validate()?;
    check_corpus(corpus, init)?;
    let model = init.model.clone();
    let data = prepare_samples(&model, &corpus.vocab, &corpus.grammar, &corpus.samples)?;
    let (raw, ema, log) = run_phase(&model, init.ema.clone(), &data, phase, cfg, run.seed, log_path)?;
    Ok((finish(model, corpus, phase, cfg, run.seed, raw, &ema)?, log))
}

/// Mean denoising loss over `data` with fixed noise, each sample
/// conditioned on its multi-modal set (pure text when it has no subjects).
pub fn eval_loss(model: &UmmModel, ps: &ParameterStore<f32>, data: &[PreparedSample], batch: usize, seed: u64) -> Result<f64> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("eval needs samples and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in data.chunks(batch) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let conds: Vec<Conditioning> = chunk.iter().map(|s| Conditioning::Set(&s.unified)).collect();
        let mut g = Graph::new();
        let loss = training_loss(&mut g, ps, model, &images, &conds, &mut rng)?;
        total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::build_corpus;

    #[test]
    fn draw_condition_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(draw_condition(true, [1.0, 0.0, 0.0], &mut rng), Branch::Null);
            assert_ne!(draw_condition(false, [0.1, 0.54, 0.36], &mut rng), Branch::Unified);
            assert_eq!(draw_condition(false, [0.0, 1.0, 0.0], &mut rng), Branch::Text);
        }
    }

    #[test]
    fn phase_prefixes() {
        assert_eq!(Phase::Phase1.trainable_prefixes(), &["projector."]);
        assert!(!Phase::Phase2.trainable_prefixes().contains(&"text."));
        assert!(!Phase::Phase2.trainable_prefixes().contains(&"image."));
        for p in [Phase::Pretrain, Phase::Phase1, Phase::Phase2] {
            assert_eq!(Phase::parse(p.name()).unwrap(), p);
        }
    }

    fn tiny_run() -> (RunConfig, Corpus, tempfile::TempDir) {
        let mut run = RunConfig::smoke();
        for t in [&mut run.pretrain, &mut run.phase1, &mut run.phase2] {
            t.iterations = 3;
        }
        let dir = tempfile::tempdir().unwrap();
        build_corpus(run.data.candidates, &run.data.grammar, &run.data.policy, 3, dir.path()).unwrap();
        let corpus = Corpus::load(dir.path()).unwrap();
        (run, corpus, dir)
    }

    #[test]
    fn phases_respect_freeze_contracts() {
        let (run, corpus, dir) = tiny_run();
        let log = dir.path().join("train.csv");
        let (pre, _) = pretrain_t2i(&run, &corpus, Some(&log)).unwrap();
        let start = pre.ema.clone();
        assert!(start.changed_names(&pre.model.init_params(run.seed).unwrap()).iter().all(|n| !n.starts_with("projector.")));

        let (p1, _) = train_phase1(&run, &corpus, &pre, Some(&log)).unwrap();
        let changed = start.changed_names(&p1.raw);
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|n| n.starts_with("projector.")), "{changed:?}");

        let (p2, _) = train_phase2(&run, &corpus, &p1, Some(&log)).unwrap();
        let changed = p1.ema.changed_names(&p2.raw);
        assert!(changed.iter().any(|n| n.starts_with("unet.")));
        assert!(changed.iter().all(|n| n.starts_with("unet.") || n.starts_with("projector.")));

        let text = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,phase,loss,lr");
        assert_eq!(lines.len(), 1 + 9);
        assert!(lines[9].starts_with("3,phase2,"));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (run, corpus, dir) = tiny_run();
        let (pre, _) = pretrain_t2i(&run, &corpus, None).unwrap();
        let path = dir.path().join("pre.ckpt");
        pre.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert!(back.raw.changed_names(&pre.raw).is_empty());
        assert!(back.ema.changed_names(&pre.ema).is_empty());
        assert_eq!(back.phase, Phase::Pretrain);
        assert_eq!(back.vocab, pre.vocab);
        assert_eq!(back.model.config, pre.model.config);
        assert_eq!(back.train_config, pre.train_config);
        assert!(TrainedModel::load(dir.path().join("missing.ckpt")).is_err());

        let (again, _) = pretrain_t2i(&run, &corpus, None).unwrap();
        assert_eq!(again.to_checkpoint().encode(), pre.to_checkpoint().encode());
    }
}
