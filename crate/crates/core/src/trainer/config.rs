use serde::{Deserialize, Serialize};

use crate::datagen::{FilterPolicy, GrammarConfig};
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Largest seed a TOML integer can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// Settings of one training phase.
///
/// Defaults keep the reference recipe's optimizer, EMA and dropout values
/// (lr 1e-5, EMA 0.9999, condition probabilities 0.10 / 0.54 / 0.36) with
/// batch 32 instead of 192 and a few thousand iterations instead of 200k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + k) / (10 + k))` at update `k`.
    pub ema_warmup: bool,
    /// Probabilities of the unconditional, multi-modal and pure-text branches.
    pub cond_probs: [f64; 3],
    /// Weight of the image-encoder classification loss (pretraining only).
    pub aux_weight: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 32,
            lr: 1e-5,
            ema_decay: 0.9999,
            ema_warmup: true,
            cond_probs: [0.10, 0.54, 0.36],
            aux_weight: 0.0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            iterations: 5000,
            cond_probs: [0.10, 0.0, 0.90],
            aux_weight: 1.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("train config: {m}")));
        if self.batch_size == 0 || self.log_every == 0 {
            return fail("batch_size and log_every must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if self.cond_probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (self.cond_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("cond_probs must be probabilities summing to 1, got {:?}", self.cond_probs));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return fail("aux_weight must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of candidate scenes generated before filtering.
    pub candidates: usize,
    pub grammar: GrammarConfig,
    pub policy: FilterPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            candidates: 4000,
            grammar: GrammarConfig::default(),
            policy: FilterPolicy::default(),
        }
    }
}

/// Complete experiment configuration as stored in TOML run files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            phase1: TrainConfig::default(),
            phase2: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings that train the default model in minutes on one CPU core:
    /// larger learning rates and fewer iterations than the defaults.
    pub fn desk() -> Self {
        let fast = |iterations, lr, probs| TrainConfig {
            iterations,
            lr,
            cond_probs: probs,
            ..TrainConfig::default()
        };
        RunConfig {
            model: ModelConfig {
                unet_channels: 16,
                ..ModelConfig::default()
            },
            data: DataConfig {
                candidates: 3000,
                ..DataConfig::default()
            },
            pretrain: TrainConfig {
                aux_weight: 1.0,
                ..fast(1500, 2e-3, [0.10, 0.0, 0.90])
            },
            phase1: fast(600, 1e-3, [0.10, 0.54, 0.36]),
            phase2: fast(600, 5e-4, [0.10, 0.54, 0.36]),
            ..RunConfig::default()
        }
    }

    /// Tiny 8×8 model and corpus with a handful of steps per phase; runs in
    /// seconds and exercises the whole pipeline.
    pub fn smoke() -> Self {
        let step = |probs, aux_weight| TrainConfig {
            iterations: 4,
            batch_size: 4,
            lr: 1e-3,
            cond_probs: probs,
            aux_weight,
            log_every: 2,
            ..TrainConfig::default()
        };
        let grammar = GrammarConfig {
            image_size: 8,
            min_object: 3,
            max_object: 5,
            low_res_size: 4,
            ..GrammarConfig::default()
        };
        RunConfig {
            model: ModelConfig {
                max_len: grammar.max_caption_words() + 2,
                ..ModelConfig::tiny()
            },
            data: DataConfig {
                candidates: 60,
                grammar,
                policy: FilterPolicy {
                    min_resolution: 8,
                    ..FilterPolicy::default()
                },
            },
            pretrain: step([0.10, 0.0, 0.90], 1.0),
            phase1: step([0.10, 0.54, 0.36], 0.0),
            phase2: step([0.10, 0.54, 0.36], 0.0),
            sampler: SamplerConfig {
                steps: 5,
                ..SamplerConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::format(
                "run config",
                format!("schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.model.validate()?;
        self.data.grammar.validate()?;
        self.data.policy.validate()?;
        for t in [&self.pretrain, &self.phase1, &self.phase2] {
            t.validate()?;
        }
        self.sampler.validate()?;
        if self.seed > MAX_SEED || self.sampler.seed > MAX_SEED {
            return Err(Error::invalid(format!("seeds must be at most {MAX_SEED}")));
        }
        if self.data.grammar.image_size != self.model.image_size {
            return Err(Error::invalid("grammar image_size must equal model image_size"));
        }
        if self.data.grammar.max_caption_words() + 2 > self.model.max_len {
            return Err(Error::invalid("model max_len is too short for the caption templates"));
        }
        Ok(())
    }
}
