//! Adam optimizer with bias correction.
//!
//! State is keyed by parameter name in a BTreeMap, so update order follows
//! the model's parameter naming and checkpoint round-trips are stable. A
//! non-finite gradient aborts the step before any parameter moves.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One Adam update for a single parameter.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if let Some(i) = param.grad.data.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::Numeric(format!(
            "non-finite gradient {} at flat index {} in parameter '{}'",
            param.grad.data[i], i, param.name
        )));
    }
    if param.grad.shape != param.value.shape {
        return Err(CoreError::Shape(format!(
            "gradient shape {:?} does not match parameter '{}' shape {:?}",
            param.grad.shape, param.name, param.value.shape
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((m, v), (g, p)) in state
        .m
        .data
        .iter_mut()
        .zip(&mut state.v.data)
        .zip(param.grad.data.iter().zip(&mut param.value.data))
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            hyper: AdamHyper::with_lr(lr),
            states: BTreeMap::new(),
        }
    }

    /// Update every parameter in place from its accumulated gradient.
    /// Gradient validity is checked for the whole set before any update so
    /// a bad gradient cannot leave the model half-stepped.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if let Some(i) = p.grad.data.iter().position(|g| !g.is_finite()) {
                return Err(CoreError::Numeric(format!(
                    "non-finite gradient {} at flat index {} in parameter '{}'",
                    p.grad.data[i], i, p.name
                )));
            }
        }
        for p in params.iter_mut() {
            let state = self
                .states
                .entry(p.name.clone())
                .or_insert_with(|| AdamState::new(&p.value.shape));
            adam_step(p, state, &self.hyper)?;
        }
        Ok(())
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    pub fn states(&self) -> &BTreeMap<String, AdamState> {
        &self.states
    }

    /// Install a previously saved state, e.g. when resuming a run.
    pub fn restore_state(&mut self, name: &str, state: AdamState) {
        self.states.insert(name.to_string(), state);
    }
}
