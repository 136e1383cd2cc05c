use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![F::zero(); len], v: vec![F::zero(); len], t: 0 }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<F: Scalar>(param: &mut [F], grad: &[F], state: &mut AdamState<F>, cfg: &AdamConfig) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let c1 = F::lit(1.0 - cfg.beta1.powi(t));
    let c2 = F::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (F::lit(cfg.lr), F::lit(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a whole [`ParamStore`]. Parameters that received no gradient
/// are left untouched, state included.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    states: Vec<Option<AdamState<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, states: Vec::new() }
    }

    /// Applies one update; returns how many parameter tensors changed.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>]) -> usize {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.states.resize_with(store.len(), || None);
        let mut updated = 0;
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let state = self.states[i].get_or_insert_with(|| AdamState::new(tensor.numel()));
            adam_step(tensor.data_mut(), g, state, &self.config);
            updated += 1;
        }
        updated
    }

    pub fn state(&self, index: usize) -> Option<&AdamState<F>> {
        self.states.get(index).and_then(Option::as_ref)
    }

    pub fn set_state(&mut self, index: usize, state: AdamState<F>) {
        if self.states.len() <= index {
            self.states.resize_with(index + 1, || None);
        }
        self.states[index] = Some(state);
    }
}
