//! AdamW with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Value;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First/second moment accumulators per parameter name plus the step count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }
}

/// One AdamW update over the given named parameters.
///
/// Decay is decoupled: applied directly to the weights, never through the
/// moment estimates. Parameters without an accumulated gradient are skipped
/// entirely. A non-finite gradient aborts, naming the parameter.
pub fn adamw_step(
    params: &[(String, Value)],
    state: &mut OptimizerState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - betas.0.powi(t);
    let bc2 = 1.0 - betas.1.powi(t);
    for (name, p) in params {
        let Some(grad) = p.grad() else { continue };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient in parameter group {name} at step {}",
                state.step
            )));
        }
        let mut data = p.to_vec();
        let slot = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; data.len()],
            v: vec![0.0; data.len()],
        });
        for i in 0..data.len() {
            data[i] *= 1.0 - lr * weight_decay;
            slot.m[i] = betas.0 * slot.m[i] + (1.0 - betas.0) * grad[i];
            slot.v[i] = betas.1 * slot.v[i] + (1.0 - betas.1) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_data(&data);
    }
    Ok(())
}
