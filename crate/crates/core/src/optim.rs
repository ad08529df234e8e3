//! SGD with momentum and weight decay, plus the step learning-rate rule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_err, Result};
use crate::model::ParamStore;

/// Per-parameter velocity buffers, indexed like the parameter store.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        SgdState {
            velocity: store
                .iter()
                .map(|p| vec![0.0; p.tensor.len()])
                .collect(),
        }
    }
}

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
/// Applies to every grad-requiring parameter; consumed grads are zeroed.
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (idx, param) in store.iter_mut().enumerate() {
        if !param.tensor.requires_grad {
            continue;
        }
        let grad = param
            .tensor
            .grad
            .as_ref()
            .ok_or_else(|| invalid_err!("parameter {} has no gradient", param.name))?
            .clone();
        let v = &mut state.velocity[idx];
        let data = param.tensor.data_mut();
        for i in 0..data.len() {
            v[i] = momentum * v[i] + grad[i] + weight_decay * data[i];
            data[i] -= lr * v[i];
        }
        param.tensor.zero_grad();
    }
    Ok(())
}

/// Step schedule: the base rate decays by `decay` every `step_epochs`.
pub fn lr_at(epoch: usize, base: f64, decay: f64, step_epochs: usize) -> f64 {
    let steps = if step_epochs == 0 { 0 } else { epoch / step_epochs };
    let mut lr = base;
    for _ in 0..steps {
        lr *= decay;
    }
    lr
}
