//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Matrix, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamwConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment accumulators, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamwState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamwState {
    pub fn new(store: &ParameterStore) -> Self {
        Self {
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }
}

/// One optimizer step over every parameter in `store`:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
/// ```
///
/// A non-finite gradient aborts before anything is modified.
pub fn adamw_step(store: &mut ParameterStore, state: &mut AdamwState, cfg: &AdamwConfig) -> Result<()> {
    if !(cfg.lr > 0.0 && cfg.eps > 0.0 && cfg.weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad AdamW hyperparameters {cfg:?}")));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::InvalidArgument("AdamW betas must lie in [0, 1)".into()));
    }
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let value = p.value.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for i in 0..value.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * value[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamRole, SeededRng};

    fn single(value: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        let id = store.init("p", 1, 1, ParamRole::Bias, &mut SeededRng::new(0));
        store.get_mut(id).value.set(0, 0, value);
        store
    }

    #[test]
    fn pure_decay_shrinks_geometrically() {
        let mut store = single(1.0);
        let mut state = AdamwState::new(&store);
        let cfg = AdamwConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        for k in 1..=5 {
            adamw_step(&mut store, &mut state, &cfg).unwrap();
            let expected = 0.999f64.powi(k);
            assert!((store.get(crate::numerics::ParamId(0)).value.get(0, 0) - expected).abs() < 1e-15);
        }
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut store = single(0.0);
        store.iter_mut().next().unwrap().grad.fill(1.0);
        let mut state = AdamwState::new(&store);
        let cfg = AdamwConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut store, &mut state, &cfg).unwrap();
        // m_hat = v_hat = 1 at t = 1
        let expected = -0.1 / (1.0 + 1e-8);
        let got = store.iter().next().unwrap().1.value.get(0, 0);
        assert!((got - expected).abs() < 1e-15, "{got}");
    }

    #[test]
    fn zero_grad_no_decay_is_bit_identical() {
        let mut store = ParameterStore::new();
        store.init("w", 3, 4, ParamRole::Weight, &mut SeededRng::new(9));
        let before = store.get(crate::numerics::ParamId(0)).value.clone();
        let mut state = AdamwState::new(&store);
        let cfg = AdamwConfig { lr: 0.5, weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            adamw_step(&mut store, &mut state, &cfg).unwrap();
        }
        let after = &store.get(crate::numerics::ParamId(0)).value;
        assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParameterStore::new();
        store.init("ok", 1, 1, ParamRole::Bias, &mut SeededRng::new(0));
        let bad = store.init("decoder.v", 1, 2, ParamRole::Bias, &mut SeededRng::new(0));
        store.get_mut(bad).grad.set(0, 1, f64::NAN);
        let mut state = AdamwState::new(&store);
        let err = adamw_step(&mut store, &mut state, &AdamwConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "decoder.v"));
        assert_eq!(state.step, 0);
    }
}
