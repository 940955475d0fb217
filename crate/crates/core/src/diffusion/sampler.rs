use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::fused_epsilon;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Conditioning, UmmModel};
use crate::numerics::{Checkpoint, Graph, ParameterStore, Real, Tensor};
use crate::tiue::ConditionSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Fuse ratio between the unified and pure-text predictions.
    pub alpha: f64,
    /// Classifier-free guidance weight.
    pub guidance: f64,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 0.5,
            guidance: 7.5,
            steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::invalid(format!("guidance must be >= 0, got {}", self.guidance)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// Per-step states of one sampling run: `states[0]` is `x_T`, `states[k+1]`
/// follows the update at `timesteps[k]` that used `eps[k]`.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub timesteps: Vec<usize>,
    pub states: Vec<Tensor<T>>,
    pub eps: Vec<Tensor<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let ts: Vec<String> = self.timesteps.iter().map(|t| t.to_string()).collect();
        ck.meta.insert("timesteps".into(), ts.join(","));
        for (k, x) in self.states.iter().enumerate() {
            ck.insert(format!("x/{k:04}"), x);
        }
        for (k, e) in self.eps.iter().enumerate() {
            ck.insert(format!("eps/{k:04}"), e);
        }
        ck
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Branch {
    Unified,
    Text,
    Null,
}

/// Generates one image for `cond` with the fused guidance rule.
pub fn sample<T: Real>(model: &UmmModel, ps: &ParameterStore<T>, cond: &ConditionSet, config: &SamplerConfig) -> Result<Image> {
    let (mut images, _) = sample_traced(model, ps, std::slice::from_ref(cond), config, &[config.seed], false)?;
    Ok(images.remove(0))
}

/// Independent trajectories, one per `(cond, seed)` pair, evaluated together.
pub fn sample_batch<T: Real>(
    model: &UmmModel,
    ps: &ParameterStore<T>,
    conds: &[ConditionSet],
    config: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    Ok(sample_traced(model, ps, conds, config, seeds, false)?.0)
}

/// As [`sample_batch`], optionally recording every intermediate state.
///
/// `h_u` and `h_y` are encoded once up front. A condition without subjects
/// has `h_u = h_y`, so it runs the pure-text rule regardless of `alpha`.
pub fn sample_traced<T: Real>(
    model: &UmmModel,
    ps: &ParameterStore<T>,
    conds: &[ConditionSet],
    config: &SamplerConfig,
    seeds: &[u64],
    trace: bool,
) -> Result<(Vec<Image>, Vec<Trajectory<T>>)> {
    config.validate()?;
    if conds.is_empty() || conds.len() != seeds.len() {
        return Err(Error::invalid("need one seed per condition"));
    }
    let s = model.config.image_size;
    let hw = s * s;
    let l = model.config.max_len;
    let schedule = &model.schedule;
    let timesteps = schedule.timesteps(config.steps)?;

    let alphas: Vec<f64> = conds
        .iter()
        .map(|c| if c.has_subjects() { config.alpha } else { 0.0 })
        .collect();
    let text_only: Vec<ConditionSet> = conds.iter().map(|c| c.without_subjects()).collect();
    let mut instances = Vec::new();
    for (k, &a) in alphas.iter().enumerate() {
        if a > 0.0 {
            instances.push((k, Branch::Unified));
        }
        if a < 1.0 {
            instances.push((k, Branch::Text));
        }
        if config.guidance != 1.0 {
            instances.push((k, Branch::Null));
        }
    }
    let items: Vec<Conditioning> = instances
        .iter()
        .map(|&(k, b)| match b {
            Branch::Unified => Conditioning::Set(&conds[k]),
            Branch::Text => Conditioning::Set(&text_only[k]),
            Branch::Null => Conditioning::Null,
        })
        .collect();
    let cond_values = {
        let mut g = Graph::new();
        let c = model.condition_batch(&mut g, ps, &items)?;
        g.value(c).clone()
    };
    debug_assert_eq!(cond_values.dims2().0, instances.len() * l);

    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&sd| ChaCha8Rng::seed_from_u64(sd)).collect();
    let mut xs: Vec<Tensor<T>> = rngs.iter_mut().map(|r| Tensor::randn(&[hw, 3], r)).collect();
    let mut traces: Vec<Trajectory<T>> = (0..conds.len())
        .map(|k| Trajectory {
            timesteps: timesteps.clone(),
            states: if trace { vec![xs[k].clone()] } else { Vec::new() },
            eps: Vec::new(),
        })
        .collect();

    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let mut g = Graph::new();
        let mut data = Vec::with_capacity(instances.len() * hw * 3);
        for &(k, _) in &instances {
            data.extend_from_slice(xs[k].data());
        }
        let x = g.constant(Tensor::new(vec![instances.len() * hw, 3], data)?);
        let c = g.constant(cond_values.clone());
        let out = model.denoiser.forward(&mut g, ps, x, &vec![t; instances.len()], c)?;
        let pred = g.value(out);
        let chunk = |j: usize| Tensor::new(vec![hw, 3], pred.data()[j * hw * 3..(j + 1) * hw * 3].to_vec());

        for k in 0..conds.len() {
            let mut by_branch = [None, None, None];
            for (j, &(kk, b)) in instances.iter().enumerate() {
                if kk == k {
                    by_branch[b as usize] = Some(chunk(j)?);
                }
            }
            let [u, y, n] = by_branch;
            let (u, y) = match (u, y) {
                (Some(u), Some(y)) => (u, y),
                (Some(u), None) => (u.clone(), u),
                (None, Some(y)) => (y.clone(), y),
                (None, None) => unreachable!("every trajectory has a conditional branch"),
            };
            let eps = fused_epsilon(&u, &y, n.as_ref(), alphas[k], config.guidance)?;
            let noise = (config.eta > 0.0).then(|| Tensor::randn(&[hw, 3], &mut rngs[k]));
            xs[k] = schedule.ddim_step(&xs[k], &eps, t, t_prev, config.eta, noise.as_ref())?;
            if trace {
                traces[k].states.push(xs[k].clone());
                traces[k].eps.push(eps);
            }
        }
    }

    let images = xs
        .iter()
        .map(|x| {
            if !x.is_finite() {
                return Err(Error::NonFinite("sampled image".into()));
            }
            Ok(Image::from_tensor(x, s, s)?.clamped())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((images, traces))
}
