//! Subcommands of the `umm` binary. Every command prints its fully resolved
//! configuration (including the seed) before doing any work and writes the
//! same text to `<out>/config.toml`, so re-running with
//! `--config <out>/config.toml` reproduces the artifacts exactly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use umm_core::datagen::{build_corpus, Corpus};
use umm_core::diffusion::sample;
use umm_core::image::Image;
use umm_core::tiue::ConditionSet;
use umm_core::trainer::{pretrain_t2i, train_phase1, train_phase2, RunConfig, TrainLog, TrainedModel, MAX_SEED};

use crate::args::{parse_alpha, parse_non_negative, parse_unit, SubjectArg};
use crate::eval::{ablate_alpha, default_fixtures, export_embeddings};
use crate::metrics::MetricReport;

#[derive(Parser, Debug)]
#[command(name = "umm", version, about = "Train and sample a text-and-image conditioned toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; generated and printed when omitted and
    /// not set in the config file.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Default)]
pub struct SamplerFlags {
    /// Fuse ratio between multi-modal and pure-text predictions, in [0, 1].
    #[arg(long, value_parser = parse_alpha)]
    pub alpha: Option<f64>,
    /// Classifier-free guidance weight.
    #[arg(long, value_parser = parse_non_negative)]
    pub guidance: Option<f64>,
    /// Number of DDIM steps.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    /// DDIM stochasticity, 0 for deterministic sampling.
    #[arg(long, value_parser = parse_unit)]
    pub eta: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate, filter and write the synthetic corpus.
    BuildData {
        #[command(flatten)]
        common: Common,
    },
    /// Train text encoder, image encoder and denoiser on image-caption pairs.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the projector with everything else frozen.
    Train1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train projector and denoiser jointly.
    Train2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Phase-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate one image from a caption and optional subject images.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Subject image and the caption word it replaces, as <path>@<position>.
        #[arg(long = "subject")]
        subjects: Vec<SubjectArg>,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Sample with the optimizer's weights instead of the averaged ones.
        #[arg(long)]
        raw_weights: bool,
    },
    /// Sweep the fuse ratio over held-out fixtures and score the samples.
    AblateAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fuse ratios to evaluate.
        #[arg(long, value_delimiter = ',', value_parser = parse_alpha, default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
        /// Number of held-out fixtures.
        #[arg(long, default_value_t = 24)]
        fixtures: usize,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Print a built-in configuration preset as TOML.
    ShowConfig {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
    /// Write pseudo-word embeddings of corpus subjects and their separation.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Subjects kept per class.
        #[arg(long, default_value_t = 11)]
        per_class: usize,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Reference optimizer settings with desk-scale batch and iterations.
    Default,
    /// Faster settings that train the default model in minutes.
    Desk,
    /// Tiny model and corpus for smoke tests.
    Smoke,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Default => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
            Preset::Smoke => RunConfig::smoke(),
        }
    }
}

/// Configuration after merging file, defaults and flags.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub run: RunConfig,
    pub seed_generated: bool,
}

pub fn resolve(common: &Common, sampler: Option<&SamplerFlags>) -> Result<Resolved> {
    let (mut run, file_seed) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            (RunConfig::parse(&text)?, table.contains_key("seed"))
        }
        None => (RunConfig::default(), false),
    };
    let seed_generated = common.seed.is_none() && !file_seed;
    if let Some(seed) = common.seed {
        run.seed = seed;
    } else if seed_generated {
        run.seed = rand::rng().random_range(0..=MAX_SEED);
    }
    run.sampler.seed = run.seed;
    if let Some(f) = sampler {
        if let Some(a) = f.alpha {
            run.sampler.alpha = a;
        }
        if let Some(w) = f.guidance {
            run.sampler.guidance = w;
        }
        if let Some(s) = f.steps {
            run.sampler.steps = s as usize;
        }
        if let Some(e) = f.eta {
            run.sampler.eta = e;
        }
    }
    run.validate()?;
    Ok(Resolved { run, seed_generated })
}

fn echo(resolved: &Resolved, out: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = resolved.run.to_toml();
    if resolved.seed_generated {
        eprintln!("generated seed {}", resolved.run.seed);
    }
    println!("# umm {command}: resolved configuration\n{text}");
    fs::write(out.join("config.toml"), &text).with_context(|| format!("writing {}/config.toml", out.display()))
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildData { common } => {
            let r = resolve(&common, None)?;
            echo(&r, &common.out, "build-data")?;
            let d = &r.run.data;
            let (_, stats) = build_corpus(d.candidates, &d.grammar, &d.policy, r.run.seed, &common.out)?;
            println!(
                "accepted {} of {} candidates ({} area, {} duplicate-label, {} resolution rejections)",
                stats.accepted, stats.candidates, stats.rejected_area, stats.rejected_duplicate_label, stats.rejected_resolution
            );
        }
        Command::Pretrain { common, corpus } => {
            let r = resolve(&common, None)?;
            let corpus = load_corpus(&corpus)?;
            echo(&r, &common.out, "pretrain")?;
            let (model, log) = pretrain_t2i(&r.run, &corpus, Some(&common.out.join("train_log.csv")))?;
            model.save(common.out.join("model.ckpt"))?;
            report_losses(&log);
        }
        Command::Train1 { common, corpus, checkpoint } => continue_training(&common, &corpus, &checkpoint, false)?,
        Command::Train2 { common, corpus, checkpoint } => continue_training(&common, &corpus, &checkpoint, true)?,
        Command::Sample {
            common,
            checkpoint,
            prompt,
            mut subjects,
            sampler,
            raw_weights,
        } => {
            let r = resolve(&common, Some(&sampler))?;
            let trained = load_checkpoint(&checkpoint)?;
            let tokens = trained.vocab.tokenize(&prompt, trained.model.config.max_len)?;
            subjects.sort_by_key(|s| s.position);
            let mut images = Vec::new();
            for s in &subjects {
                images.push(Image::load_ppm(&s.path).with_context(|| format!("loading subject {}", s.path.display()))?);
            }
            let cond = ConditionSet::new(tokens, images, subjects.iter().map(|s| s.position).collect())?;
            echo(&r, &common.out, "sample")?;
            let ps = if raw_weights { &trained.raw } else { trained.params() };
            let img = sample(&trained.model, ps, &cond, &r.run.sampler)?;
            img.save_ppm(common.out.join("sample.ppm"))?;
            println!("wrote {}", common.out.join("sample.ppm").display());
        }
        Command::AblateAlpha {
            common,
            checkpoint,
            alphas,
            fixtures,
            sampler,
        } => {
            let r = resolve(&common, Some(&sampler))?;
            if fixtures == 0 {
                bail!("--fixtures must be positive");
            }
            let trained = load_checkpoint(&checkpoint)?;
            echo(&r, &common.out, "ablate-alpha")?;
            let fx = default_fixtures(&trained, fixtures, r.run.seed)?;
            let (reports, grid) = ablate_alpha(&trained, &alphas, &fx, &r.run.sampler, 8)?;
            let summary = MetricReport::summary_csv(&reports);
            write(common.out.join("ablation.csv"), &summary)?;
            write(common.out.join("ablation_samples.csv"), &MetricReport::samples_csv(&reports))?;
            grid.save_ppm(common.out.join("ablation_grid.ppm"))?;
            print!("{summary}");
        }
        Command::ShowConfig { preset } => print!("{}", preset.config().to_toml()),
        Command::ExportEmbeddings {
            common,
            checkpoint,
            corpus,
            per_class,
        } => {
            let r = resolve(&common, None)?;
            let trained = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&corpus)?;
            echo(&r, &common.out, "export-embeddings")?;
            let export = export_embeddings(&trained, &corpus.samples, per_class)?;
            write(common.out.join("embeddings.csv"), &export.to_csv())?;
            write(common.out.join("separation.txt"), &format!("{}\n", export.ratio))?;
            println!("separation ratio {:.4} over {} embeddings", export.ratio, export.rows.len());
        }
    }
    Ok(())
}

fn continue_training(common: &Common, corpus: &Path, checkpoint: &Path, phase2: bool) -> Result<()> {
    let r = resolve(common, None)?;
    let corpus = load_corpus(corpus)?;
    let init = load_checkpoint(checkpoint)?;
    echo(&r, &common.out, if phase2 { "train2" } else { "train1" })?;
    let log_path = common.out.join("train_log.csv");
    let (model, log) = if phase2 {
        train_phase2(&r.run, &corpus, &init, Some(&log_path))?
    } else {
        train_phase1(&r.run, &corpus, &init, Some(&log_path))?
    };
    model.save(common.out.join("model.ckpt"))?;
    report_losses(&log);
    Ok(())
}

fn report_losses(log: &TrainLog) {
    let w = log.losses.len().clamp(1, 50);
    let (head, tail) = log.head_tail(w);
    println!("mean loss over the first {w} steps {head:.4}, over the last {w} steps {tail:.4}");
}
