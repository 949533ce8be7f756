use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{EncoderParams, Gradients};
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &EncoderParams) -> Self {
        let n = Gradients::zeros_like(params).len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn apply_update(
    params: &mut EncoderParams,
    grads: &Gradients,
    learning_rate: f64,
    state: &mut AdamState,
) -> Result<()> {
    let g_slices = grads.slices();
    let mut p_slices = params.slices_mut();
    let shapes_match = g_slices.len() == p_slices.len()
        && g_slices.iter().zip(&p_slices).all(|(g, p)| g.len() == p.len());
    let total: usize = g_slices.iter().map(|s| s.len()).sum();
    if !shapes_match || state.m.len() != total || state.v.len() != total {
        return Err(Error::DimensionMismatch {
            expected: p_slices.iter().map(|s| s.len()).sum(),
            actual: total,
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::pow(BETA1, f64::from(t));
    let bc2 = 1.0 - libm::pow(BETA2, f64::from(t));
    let mut k = 0;
    for (p, g) in p_slices.iter_mut().zip(g_slices) {
        for (pi, &gi) in p.iter_mut().zip(g) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = BETA1 * *m + (1.0 - BETA1) * gi;
            *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *pi -= learning_rate * m_hat / (libm::sqrt(v_hat) + EPS);
            k += 1;
        }
    }
    Ok(())
}
