use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam hyper-parameters with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    /// Values used for the full-scale model with pretrained backbones.
    pub const FULL_SCALE: AdamConfig = AdamConfig {
        lr: 2e-5,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 1e-2,
    };
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::FULL_SCALE
    }
}

/// Applies one Adam step at learning rate `lr` (already warmed up / scaled).
///
/// `step_index` is only used in the error when a gradient is not finite; the
/// store is left untouched in that case.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: &AdamConfig,
    lr: f64,
    step_index: usize,
) -> Result<()> {
    for (name, g) in grads {
        let p = store
            .param_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{name}: param {:?}, grad {:?}", p.value.shape(), g.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                step: step_index,
            });
        }
    }

    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::c(b1), T::c(b2));
    let (one_b1, one_b2) = (T::c(1.0 - b1), T::c(1.0 - b2));
    let (lr_t, eps_t, wd_t) = (T::c(lr), T::c(cfg.eps), T::c(cfg.weight_decay));
    let (bc1_t, bc2_t) = (T::c(bc1), T::c(bc2));

    for (name, g) in grads {
        let p = store.param_mut(name).expect("checked above");
        let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for i in 0..value.len() {
            let gi = g.data()[i];
            m[i] = b1t * m[i] + one_b1 * gi;
            v[i] = b2t * v[i] + one_b2 * gi * gi;
            let mhat = m[i] / bc1_t;
            let vhat = v[i] / bc2_t;
            value[i] -= lr_t * (mhat / (vhat.sqrt() + eps_t) + wd_t * value[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p));
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = store(0.75);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &grads(0.0), &cfg, 1e-3, 0).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 0.75);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let (p0, lr) = (0.5, 1e-3);
        let cfg = AdamConfig::default();
        let mut s = store(p0);
        adam_step(&mut s, &grads(1.0), &cfg, lr, 0).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = p0 - lr * (1.0 / (1.0 + 1e-8) + 1e-2 * p0);
        assert!((s.get("p").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut s = store(0.0);
        let err = adam_step(&mut s, &grads(f64::NAN), &AdamConfig::default(), 1e-3, 17)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 17, .. }));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn defaults_load_from_config_text() {
        let cfg: AdamConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, AdamConfig::FULL_SCALE);
        assert_eq!(
            (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay),
            (2e-5, 0.9, 0.999, 1e-8, 1e-2)
        );
    }
}
