use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear β schedule with cached `α_t = 1 − β_t` and `ᾱ_t = ∏ α_s`.
///
/// Timesteps are 1-based; `ᾱ_0` is defined as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// One forward step: `√(1−β_t)·x_{t−1} + √β_t·noise`.
    pub fn q_step<T: Real>(&self, x_prev: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.beta(t)?;
        affine(x_prev, (1.0 - b).sqrt(), noise, b.sqrt())
    }

    /// Closed-form marginal: `√ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample<T: Real>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(t)?;
        self.check(t)?;
        affine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Descending, uniformly strided subsequence of `[1, T]` starting at `T`.
    pub fn timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count == 0 || count > t {
            return Err(Error::invalid(format!("sampling steps must be in [1, {t}], got {count}")));
        }
        Ok((0..count).map(|k| t - k * t / count).collect())
    }

    /// One DDIM update from `t` to `t_prev` (`t_prev = 0` returns `x̂_0`).
    /// `noise` is required when `eta > 0`.
    pub fn ddim_step<T: Real>(
        &self,
        x_t: &Tensor<T>,
        eps: &Tensor<T>,
        t: usize,
        t_prev: usize,
        eta: f64,
        noise: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if t_prev >= t {
            return Err(Error::invalid(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta must be in [0, 1], got {eta}")));
        }
        let ab_t = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        if ab_t <= 0.0 {
            return Err(Error::invalid("alpha_bar is zero"));
        }
        let x0 = affine(x_t, 1.0 / ab_t.sqrt(), eps, -(1.0 - ab_t).sqrt() / ab_t.sqrt())?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut out = affine(&x0, ab_prev.sqrt(), eps, dir)?;
        if sigma > 0.0 {
            let noise = noise.ok_or_else(|| Error::invalid("stochastic ddim step needs noise"))?;
            out = affine(&out, 1.0, noise, sigma)?;
        }
        Ok(out)
    }
}

fn affine<T: Real>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ca, cb) = (T::lit(ca), T::lit(cb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `α·w·ε̂_u + (1−α)·w·ε̂_y + (1−w)·ε̂_∅`. The unconditional prediction may be
/// omitted only when `w = 1`, where its coefficient vanishes.
pub fn fused_epsilon<T: Real>(
    eps_u: &Tensor<T>,
    eps_y: &Tensor<T>,
    eps_null: Option<&Tensor<T>>,
    alpha: f64,
    w: f64,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("fuse ratio must be in [0, 1], got {alpha}")));
    }
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("guidance weight must be >= 0, got {w}")));
    }
    let fused = affine(eps_u, alpha * w, eps_y, (1.0 - alpha) * w)?;
    match eps_null {
        Some(n) => affine(&fused, 1.0, n, 1.0 - w),
        None if w == 1.0 => Ok(fused),
        None => Err(Error::invalid("unconditional prediction required when w != 1")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn default_schedule_values() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 1000);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
        let single = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(single.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(steps in 1usize..300, a in 1e-6f64..0.5, span in 0.0f64..0.49) {
            let s = make_schedule(steps, a, a + span).unwrap();
            let mut prev = 1.0;
            for t in 1..=steps {
                let ab = s.alpha_bar(t).unwrap();
                prop_assert!(ab < prev);
                prev = ab;
            }
        }
    }

    #[test]
    fn forward_process_edge_cases() {
        let s = make_schedule(10, 0.1, 0.2).unwrap();
        let x = t1(&[1.0, -0.5]);
        let zero = t1(&[0.0, 0.0]);
        let st = s.q_step(&x, 3, &zero).unwrap();
        let k = (1.0 - s.beta(3).unwrap()).sqrt();
        assert_eq!(st.data(), &[k, -0.5 * k]);
        let qs = s.q_sample(&x, 4, &zero).unwrap();
        assert_eq!(qs.data()[0], s.alpha_bar(4).unwrap().sqrt());
        assert!(s.q_step(&x, 0, &zero).is_err());
        assert!(s.q_sample(&x, 11, &zero).is_err());

        let tiny = make_schedule(1, 1e-300, 1e-300).unwrap();
        let same = tiny.q_step(&x, 1, &t1(&[3.0, 3.0])).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-140);
    }

    #[test]
    fn q_sample_at_t_max_is_mostly_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = t1(&[1.0, -1.0, 0.3]);
        let eps = t1(&[0.2, -1.5, 2.0]);
        let out = s.q_sample(&x0, 1000, &eps).unwrap();
        let ab = s.alpha_bar(1000).unwrap();
        let bound = ab.sqrt() * 1.0 + ((1.0 - ab).sqrt() - 1.0).abs() * 2.0;
        assert!(out.max_abs_diff(&eps) <= bound);
    }

    #[test]
    fn timesteps_are_uniform_and_descending() {
        let s = ScheduleConfig::default().build().unwrap();
        let ts = s.timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[49], 20);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(s.timesteps(1000).unwrap().last(), Some(&1));
        assert!(s.timesteps(0).is_err());
        assert!(s.timesteps(1001).is_err());
    }

    #[test]
    fn deterministic_ddim_recovers_marginal() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = t1(&[0.7, -0.2, 0.0, 1.0]);
        let eps = t1(&[1.1, -0.3, 0.5, -2.0]);
        let xt = s.q_sample(&x0, 600, &eps).unwrap();
        let back = s.ddim_step(&xt, &eps, 600, 250, 0.0, None).unwrap();
        let want = s.q_sample(&x0, 250, &eps).unwrap();
        assert!(back.max_abs_diff(&want) < 1e-12);
        let to_zero = s.ddim_step(&xt, &eps, 600, 0, 0.0, None).unwrap();
        assert!(to_zero.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn ddim_rejects_bad_arguments() {
        let s = make_schedule(10, 0.1, 0.2).unwrap();
        let x = t1(&[0.0]);
        assert!(s.ddim_step(&x, &x, 3, 3, 0.0, None).is_err());
        assert!(s.ddim_step(&x, &x, 3, 1, 1.5, None).is_err());
        assert!(s.ddim_step(&x, &x, 3, 1, 0.5, None).is_err());
        assert!(s.ddim_step(&x, &x, 3, 1, 0.5, Some(&x)).is_ok());
    }

    #[test]
    fn fused_epsilon_probe() {
        let one = t1(&[1.0]);
        let zero = t1(&[0.0]);
        let out = fused_epsilon(&one, &zero, Some(&zero), 0.5, 2.0).unwrap();
        assert_eq!(out.data(), &[1.0]);
        assert!(fused_epsilon(&one, &zero, Some(&zero), 1.5, 2.0).is_err());
        assert!(fused_epsilon(&one, &zero, Some(&zero), -0.1, 2.0).is_err());
        assert!(fused_epsilon(&one, &zero, None, 0.5, 2.0).is_err());
        assert!(fused_epsilon(&one, &zero, None, 0.5, 1.0).is_ok());
    }
}
