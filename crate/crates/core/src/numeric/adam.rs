//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::param::Parameter;

/// Per-parameter moment estimates. Each slot keeps its own step counter
/// so bias correction stays exact when parameter groups are frozen for
/// part of the schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamSlot {
    m: Matrix,
    v: Matrix,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            slots: BTreeMap::new(),
        }
    }

    /// Step counter for a parameter, 0 if it has never been updated.
    pub fn step_count(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.step)
    }
}

/// Applies one Adam update to every listed parameter and zeroes their
/// gradients. Fails without touching any value if a gradient contains
/// non-finite entries.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Parameter]) -> Result<()> {
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                p.name
            )));
        }
    }
    for p in params.iter_mut() {
        let (rows, cols) = p.value.shape();
        let slot = state.slots.entry(p.name.clone()).or_insert_with(|| AdamSlot {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        });
        assert_eq!(slot.m.shape(), p.value.shape(), "adam slot shape mismatch");
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = 1.0 - state.beta1.powi(t);
        let bc2 = 1.0 - state.beta2.powi(t);

        for idx in 0..p.value.len() {
            let g = p.grad.as_slice()[idx];
            let m = &mut slot.m.as_mut_slice()[idx];
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            let v = &mut slot.v.as_mut_slice()[idx];
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            p.value.as_mut_slice()[idx] -=
                state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        p.zero_grad();
    }
    Ok(())
}
