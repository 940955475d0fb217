use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Real, Tensor};

/// Exponential moving average of a fixed set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTracker<T> {
    pub decay: f64,
    pub warmup: bool,
    updates: u64,
    shadow: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> EmaTracker<T> {
    /// Tracks the currently trainable parameters of `store`, starting from
    /// their present values.
    pub fn new(store: &ParameterStore<T>, decay: f64, warmup: bool) -> Self {
        let shadow = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        EmaTracker {
            decay,
            warmup,
            updates: 0,
            shadow,
        }
    }

    /// Decay used by the next update.
    pub fn current_decay(&self) -> f64 {
        if self.warmup {
            let k = self.updates as f64;
            self.decay.min((1.0 + k) / (10.0 + k))
        } else {
            self.decay
        }
    }

    /// `shadow ← d·shadow + (1 − d)·param` for every tracked parameter.
    pub fn update(&mut self, store: &ParameterStore<T>) -> Result<()> {
        let d = self.current_decay();
        let (keep, take) = (T::lit(d), T::lit(1.0 - d));
        for (name, shadow) in self.shadow.iter_mut() {
            let p = store.get(name)?;
            if p.shape() != shadow.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ema update",
                    lhs: shadow.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            let data = shadow.data().iter().zip(p.data()).map(|(&s, &v)| keep * s + take * v).collect();
            *shadow = Tensor::new(p.shape().to_vec(), data)?;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.shadow
    }

    /// Copy of `store` with the tracked parameters replaced by their averages.
    pub fn merged(&self, store: &ParameterStore<T>) -> Result<ParameterStore<T>> {
        let mut out = store.clone();
        for (name, v) in &self.shadow {
            out.set(name, v.clone())?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_step_recurrence() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("a", Tensor::scalar(1.0), true).unwrap();
        store.insert("frozen", Tensor::scalar(5.0), false).unwrap();
        let mut ema = EmaTracker::new(&store, 0.9, false);
        let trajectory = [2.0, -1.0, 4.0];
        let mut want = 1.0;
        for v in trajectory {
            store.set("a", Tensor::scalar(v)).unwrap();
            ema.update(&store).unwrap();
            want = 0.9 * want + 0.1 * v;
        }
        assert!((ema.shadow()["a"].data()[0] - want).abs() < 1e-15);
        assert!(!ema.shadow().contains_key("frozen"));
        let merged = ema.merged(&store).unwrap();
        assert_eq!(merged.get("frozen").unwrap().data(), &[5.0]);
        assert_eq!(merged.get("a").unwrap().data()[0], ema.shadow()["a"].data()[0]);
    }

    #[test]
    fn warmup_ramps_decay() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("a", Tensor::scalar(0.0), true).unwrap();
        let mut ema = EmaTracker::new(&store, 0.9999, true);
        assert!((ema.current_decay() - 0.1).abs() < 1e-15);
        ema.update(&store).unwrap();
        assert!((ema.current_decay() - 2.0 / 11.0).abs() < 1e-15);
        let plain = EmaTracker::new(&store, 0.9999, false);
        assert_eq!(plain.current_decay(), 0.9999);
    }
}
