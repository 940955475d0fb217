//! Architecture configuration and the bundle of all sub-networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, NoiseSchedule, ScheduleConfig};
use crate::encoders::{HiddenSequence, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, ParameterStore, Real, Tensor, Var};
use crate::tiue::{ConditionSet, Projector, Tiue};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub image_resolution: usize,
    pub image_channels: [usize; 3],
    pub d_img: usize,
    pub projector_hidden: usize,
    pub unet_channels: usize,
    pub unet_heads: usize,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            max_len: 16,
            d_model: 64,
            text_layers: 2,
            text_heads: 4,
            image_resolution: 16,
            image_channels: [16, 32, 32],
            d_img: 32,
            projector_hidden: 256,
            unet_channels: 32,
            unet_heads: 2,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that exercises every component; for tests and
    /// quick experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            max_len: 8,
            d_model: 16,
            text_layers: 1,
            text_heads: 2,
            image_resolution: 8,
            image_channels: [4, 8, 8],
            d_img: 8,
            projector_hidden: 16,
            unet_channels: 8,
            unet_heads: 2,
            schedule: ScheduleConfig {
                steps: 100,
                ..ScheduleConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.max_len < 3 {
            return fail("max_len must be at least 3");
        }
        if self.d_model == 0 || self.text_heads == 0 || !self.d_model.is_multiple_of(self.text_heads) {
            return fail("d_model must be a positive multiple of text_heads");
        }
        if self.image_resolution < 4 || !self.image_resolution.is_multiple_of(4) {
            return fail("image_resolution must be a positive multiple of 4");
        }
        if self.image_channels.contains(&0) || self.d_img == 0 || self.projector_hidden == 0 {
            return fail("layer widths must be positive");
        }
        Ok(())
    }
}

/// Per-sample conditioning for a batched denoiser call.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    Null,
    /// Encoded through TIUE; a set without subjects yields `h_y`.
    Set(&'a ConditionSet),
}

#[derive(Clone, Debug)]
pub struct UmmModel {
    pub config: ModelConfig,
    pub tiue: Tiue,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl UmmModel {
    /// `n_shapes`/`n_colors` size the image encoder's pretraining heads.
    pub fn new(config: &ModelConfig, vocab_size: usize, n_shapes: usize, n_colors: usize) -> Result<Self> {
        config.validate()?;
        let text = TextEncoder {
            vocab_size,
            max_len: config.max_len,
            d_model: config.d_model,
            layers: config.text_layers,
            heads: config.text_heads,
        };
        let image = ImageEncoder {
            resolution: config.image_resolution,
            channels: config.image_channels,
            d_img: config.d_img,
            n_shapes: n_shapes.max(1),
            n_colors: n_colors.max(1),
        };
        let projector = Projector {
            d_img: config.d_img,
            d_emb: config.d_model,
            hidden: config.projector_hidden,
        };
        let denoiser = Denoiser {
            image_size: config.image_size,
            channels: config.unet_channels,
            heads: config.unet_heads,
            cond_dim: config.d_model,
            cond_len: config.max_len,
        };
        denoiser.validate()?;
        Ok(UmmModel {
            config: config.clone(),
            tiue: Tiue { text, image, projector },
            denoiser,
            schedule: config.schedule.build()?,
        })
    }

    /// Fresh parameters for every sub-network, all trainable.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.tiue.text.init_params(&mut store, &mut rng)?;
        self.tiue.image.init_params(&mut store, &mut rng)?;
        self.tiue.projector.init_params(&mut store, &mut rng)?;
        self.denoiser.init_params(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Fresh projector parameters only.
    pub fn init_projector<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.tiue.projector.init_params(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Conditioning rows `[N·L, d]` for a batch: the null embedding or the
    /// TIUE output of each entry.
    pub fn condition_batch<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, items: &[Conditioning]) -> Result<Var> {
        let l = self.config.max_len;
        let sets: Vec<(usize, &ConditionSet)> = items
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                Conditioning::Set(s) => Some((i, *s)),
                Conditioning::Null => None,
            })
            .collect();
        if sets.is_empty() {
            return self.denoiser.null_condition(g, ps, items.len());
        }
        let refs: Vec<&ConditionSet> = sets.iter().map(|(_, s)| *s).collect();
        let encoded = self.tiue.encode_batch(g, ps, &refs)?.h_u;
        if sets.len() == items.len() {
            return Ok(encoded);
        }
        let base = self.denoiser.null_condition(g, ps, items.len())?;
        let rows: Vec<usize> = sets.iter().flat_map(|&(i, _)| i * l..(i + 1) * l).collect();
        g.scatter_rows(base, encoded, &rows)
    }

    /// Single-image noise prediction. `cond = None` selects the null condition.
    pub fn predict_noise<T: Real>(
        &self,
        ps: &ParameterStore<T>,
        x_t: &Tensor<T>,
        cond: Option<&HiddenSequence<T>>,
        t: usize,
    ) -> Result<Tensor<T>> {
        self.schedule.alpha_bar(t)?;
        if t == 0 {
            return Err(Error::invalid("timestep 0 is not a noise level"));
        }
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let c = match cond {
            Some(h) => g.constant(h.values.clone()),
            None => self.denoiser.null_condition(&mut g, ps, 1)?,
        };
        let out = self.denoiser.forward(&mut g, ps, x, &[t], c)?;
        Ok(g.value(out).clone())
    }

    /// Stacks images into one `[N·H·W, 3]` tensor at the model resolution.
    pub fn image_batch<T: Real>(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::InvalidShape {
                    shape: vec![img.height(), img.width()],
                    reason: format!("model images are {s}x{s}"),
                });
            }
            data.extend(img.data().iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![images.len() * s * s, 3], data)
    }
}
