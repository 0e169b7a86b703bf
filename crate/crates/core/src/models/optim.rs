use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value().shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }
}

/// One bias-corrected Adam update of every parameter from its stored
/// gradient. Nothing is modified when any gradient is non-finite.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::dim(format!(
            "optimizer tracks {} parameters, store holds {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        if p.grad().shape() != state.m[id.index()].shape() {
            return Err(Error::dim(format!("moment shape mismatch for {}", p.name())));
        }
        if !p.grad().is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name())));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powf(state.step as f64);
    let bc2 = 1.0 - beta2.powf(state.step as f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let grad = store.grad(id).data().to_vec();
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let value = store.value_mut(id).data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Triangular cyclic learning rate: rises linearly from `base_lr` to
/// `max_lr` over the first half of each cycle and falls back over the second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    pub cycle_len_steps: u64,
}

impl CyclicLrSchedule {
    /// `base_lr = max_lr / 10`.
    pub fn with_max(max_lr: f64, cycle_len_steps: u64) -> Self {
        Self {
            base_lr: max_lr / 10.0,
            max_lr,
            cycle_len_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr) {
            return Err(Error::Config(format!(
                "need 0 < base_lr ≤ max_lr, got {} and {}",
                self.base_lr, self.max_lr
            )));
        }
        if self.cycle_len_steps == 0 {
            return Err(Error::Config("cycle length must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        let len = self.cycle_len_steps.max(1);
        let x = (step % len) as f64 / len as f64;
        let tri = 1.0 - (2.0 * x - 1.0).abs();
        self.base_lr + (self.max_lr - self.base_lr) * tri
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store(x0: f64) -> (ParamStore, crate::autodiff::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x0)).unwrap();
        (store, id)
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        let mut tape = crate::autodiff::Tape::new();
        // loss = g·x ⇒ ∂/∂x = g, built from catalog ops.
        let id = store.ids().next().unwrap();
        let x = tape.param(store, id).unwrap();
        let s = tape.scale(x, g).unwrap();
        let l = tape.mean_all(s).unwrap();
        let grads = tape.backward(l).unwrap();
        store.zero_grad();
        store.accumulate(&grads);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = quadratic_store(1.5);
        let mut st = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut st, &mut store, 1e-2).unwrap();
        }
        assert_eq!(store.value(id).data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [3.0, -0.7] {
            let (mut store, id) = quadratic_store(0.0);
            set_grad(&mut store, g);
            let mut st = AdamState::new(&store, AdamConfig::default());
            adam_step(&mut st, &mut store, 1e-3).unwrap();
            let moved = store.value(id).data()[0];
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-10, "{moved}");
        }
    }

    #[test]
    fn trajectory_matches_reference_recurrence() {
        // Minimize (x − 3)² from x = 0; gradient 2(x − 3).
        let lr = 0.05;
        let (mut store, id) = quadratic_store(0.0);
        let mut st = AdamState::new(&store, AdamConfig::default());
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (store.value(id).data()[0] - 3.0);
            set_grad(&mut store, g);
            adam_step(&mut st, &mut store, lr).unwrap();

            let gr = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * gr;
            v = b2 * v + (1.0 - b2) * gr * gr;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((store.value(id).data()[0] - x).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let (mut store, id) = quadratic_store(2.0);
        let mut st = AdamState::new(&store, AdamConfig::default());
        store.grad_mut(id).data_mut()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut st, &mut store, 1e-3), Err(Error::Numeric(_))));
        assert_eq!(store.value(id).data()[0], 2.0);
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn cyclic_schedule_points() {
        let s = CyclicLrSchedule {
            base_lr: 1e-5,
            max_lr: 1e-4,
            cycle_len_steps: 40,
        };
        assert_eq!(s.lr(0), 1e-5);
        assert!((s.lr(20) - 1e-4).abs() < 1e-18);
        assert!((s.lr(10) - (1e-5 + 1e-4) / 2.0).abs() < 1e-18);
        assert_eq!(s.lr(40), s.lr(0));
        assert!((s.lr(30) - s.lr(10)).abs() < 1e-18);
        assert!(CyclicLrSchedule { base_lr: 2.0, ..s }.validate().is_err());
        assert!(CyclicLrSchedule::with_max(1e-4, 10).validate().is_ok());
    }
}
