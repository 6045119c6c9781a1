use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::numerics::Array;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are treated as having zero gradient.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).map_or(0, Array::len);
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
        let g = grads.get(&name).map(Array::data);
        let p = params.get_mut(&name).expect("name taken from params");
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}
