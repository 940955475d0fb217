use rand::Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Conditioning, UmmModel};
use crate::numerics::{Graph, ParameterStore, Real, Tensor, Var};

/// Per-sample timesteps, noise and noised inputs for one batch.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
    pub x_t: Tensor<T>,
}

/// Draws `t ~ U[1, T]` then `ε ~ N(0, I)` for each of the `n` samples stacked
/// row-wise in `x0`.
pub fn draw_noise<T: Real>(schedule: &NoiseSchedule, x0: &Tensor<T>, n: usize, rng: &mut impl Rng) -> Result<NoiseDraw<T>> {
    let rows = x0.dims2().0;
    if n == 0 || !rows.is_multiple_of(n) {
        return Err(Error::invalid(format!("{rows} rows do not split into {n} samples")));
    }
    let per = x0.numel() / n;
    let mut t = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(x0.numel());
    let mut x_t = Vec::with_capacity(x0.numel());
    for b in 0..n {
        let step = rng.random_range(1..=schedule.steps());
        t.push(step);
        let e = Tensor::<T>::randn(&[per], rng);
        let x = Tensor::new(vec![per], x0.data()[b * per..(b + 1) * per].to_vec())?;
        x_t.extend_from_slice(schedule.q_sample(&x, step, &e)?.data());
        eps.extend_from_slice(e.data());
    }
    Ok(NoiseDraw {
        t,
        eps: Tensor::new(x0.shape().to_vec(), eps)?,
        x_t: Tensor::new(x0.shape().to_vec(), x_t)?,
    })
}

/// Mean over the batch of `‖ε − ε̂‖²`. `predict` maps `(graph, x_t, t, ε)` to
/// `ε̂`; the true `ε` is passed only so that test stubs can use it.
pub fn diffusion_loss<T, F>(g: &mut Graph<T>, schedule: &NoiseSchedule, x0: &Tensor<T>, n: usize, rng: &mut impl Rng, predict: F) -> Result<Var>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, Var, &[usize], &Tensor<T>) -> Result<Var>,
{
    let draw = draw_noise(schedule, x0, n, rng)?;
    let x_t = g.constant(draw.x_t);
    let pred = predict(g, x_t, &draw.t, &draw.eps)?;
    if g.shape(pred) != draw.eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "noise prediction",
            lhs: g.shape(pred).to_vec(),
            rhs: draw.eps.shape().to_vec(),
        });
    }
    let per = draw.eps.numel() / n;
    let target = g.constant(draw.eps.reshape(&[n, per])?);
    let pred = g.reshape(pred, &[n, per])?;
    g.sum_sq_error_per_row(pred, target)
}

/// Denoising loss of the full model on a batch of images with per-sample
/// conditioning (null, pure text or unified).
pub fn training_loss<T: Real>(
    g: &mut Graph<T>,
    ps: &ParameterStore<T>,
    model: &UmmModel,
    images: &[&Image],
    conds: &[Conditioning],
    rng: &mut impl Rng,
) -> Result<Var> {
    if images.len() != conds.len() || images.is_empty() {
        return Err(Error::invalid("need one condition per image"));
    }
    let x0 = model.image_batch(images)?;
    diffusion_loss(g, &model.schedule, &x0, images.len(), rng, |g, x_t, t, _| {
        let cond = model.condition_batch(g, ps, conds)?;
        model.denoiser.forward(g, ps, x_t, t, cond)
    })
}
