use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Real, Tensor};

/// Only the learning rate has a published value; the moment decay rates
/// and ε are the conventional defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }
}

/// One bias-corrected Adam update. `grads` must contain exactly the
/// trainable parameters of `store`; frozen parameters are never touched.
pub fn adam_step<T: Real>(
    store: &mut ParameterStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let trainable = store.trainable_names();
    if let Some(name) = trainable.iter().find(|n| !grads.contains_key(*n)) {
        return Err(Error::MissingGradient(name.clone()));
    }
    if let Some(name) = grads.keys().find(|n| !store.is_trainable(n)) {
        return Err(Error::UnexpectedGradient(name.clone()));
    }
    for name in &trainable {
        let g = &grads[name];
        let p = store.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }

    state.step += 1;
    let c = state.config;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one, eps) = (T::one(), T::lit(c.eps));
    let bias1 = T::lit(1.0 - c.beta1.powi(state.step as i32));
    let bias2 = T::lit(1.0 - c.beta2.powi(state.step as i32));
    let lr = T::lit(c.lr);
    for name in trainable {
        let g = &grads[&name];
        let shape = g.shape().to_vec();
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let p = store.get_mut(&name)?;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], trainable: bool) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let t = Tensor::new(vec![values.len()], values.to_vec()).unwrap();
        s.insert("p", t, trainable).unwrap();
        s
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        let t = Tensor::new(vec![values.len()], values.to_vec()).unwrap();
        BTreeMap::from([("p".to_string(), t)])
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store(&[1.0, -2.0], true);
        let before = s.clone();
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grads(&[0.0, 0.0]), &mut st).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[0.5], true);
        let cfg = AdamConfig {
            lr: 0.001,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg);
        adam_step(&mut s, &grads(&[1.0]), &mut st).unwrap();
        let delta = s.get("p").unwrap().data()[0] - 0.5;
        // m̂/√v̂ = 1 on the first step; ε shifts it by ~1e-8 relative
        assert!((delta + 0.001).abs() < 1e-10, "delta = {delta}");
    }

    #[test]
    fn descends_monotonically_on_a_parabola() {
        let mut s = store(&[1.0], true);
        let cfg = AdamConfig {
            lr: 0.001,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let p = s.get("p").unwrap().data()[0];
            adam_step(&mut s, &grads(&[2.0 * p]), &mut st).unwrap();
            let now = s.get("p").unwrap().data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn rejects_missing_and_frozen_gradients() {
        let mut s = store(&[1.0], true);
        let mut st = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut s, &BTreeMap::new(), &mut st).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "p"));

        let mut frozen = store(&[1.0], false);
        let err = adam_step(&mut frozen, &grads(&[1.0]), &mut st).unwrap_err();
        assert!(matches!(err, Error::UnexpectedGradient(_)));
    }
}
