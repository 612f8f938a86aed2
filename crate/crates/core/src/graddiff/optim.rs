use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Result, TcmError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    SgdNesterov {
        lr: f64,
        momentum: f64,
    },
}

impl OptimizerKind {
    /// Stage-1 defaults.
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Stage-2 defaults.
    pub fn sgd_nesterov_default() -> Self {
        OptimizerKind::SgdNesterov {
            lr: 1e-3,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub kind: OptimizerKind,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Dispatches on the optimizer kind.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam { .. } => adam_step(self, params, grads),
            OptimizerKind::SgdNesterov { .. } => sgd_nesterov_step(self, params, grads),
        }
    }
}

fn check_grad(params: &ParamStore, name: &str, len: usize) -> Result<()> {
    let slot = params.get(name)?;
    if slot.data().len() != len {
        return Err(TcmError::shape(
            "optimizer",
            format!(
                "gradient for {name} has {len} entries, slot has {}",
                slot.data().len()
            ),
        ));
    }
    Ok(())
}

/// Bias-corrected Adam. Only slots present in `grads` move.
pub fn adam_step(state: &mut OptState, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
    let OptimizerKind::Adam {
        lr,
        beta1,
        beta2,
        eps,
    } = state.kind
    else {
        return Err(TcmError::Contract(
            "adam_step on a non-Adam optimizer state".into(),
        ));
    };
    for (name, g) in grads.iter() {
        check_grad(params, name, g.data().len())?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (name, g) in grads.iter() {
        let n = g.data().len();
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let w = params.slot_mut(name)?;
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    params.bump_generation();
    Ok(())
}

/// Nesterov momentum in the PyTorch form: `v = μv + g; w -= lr (g + μv)`.
pub fn sgd_nesterov_step(
    state: &mut OptState,
    params: &mut ParamStore,
    grads: &Gradients,
) -> Result<()> {
    let OptimizerKind::SgdNesterov { lr, momentum } = state.kind else {
        return Err(TcmError::Contract(
            "sgd_nesterov_step on a non-SGD optimizer state".into(),
        ));
    };
    for (name, g) in grads.iter() {
        check_grad(params, name, g.data().len())?;
    }
    state.step += 1;
    for (name, g) in grads.iter() {
        let buf = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.data().len()]);
        let w = params.slot_mut(name)?;
        for ((wi, &gi), bi) in w.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
            *bi = momentum * *bi + gi;
            *wi -= lr * (gi + momentum * *bi);
        }
    }
    params.bump_generation();
    Ok(())
}
