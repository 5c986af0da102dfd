//! Adam with per-parameter learning rates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update. `grads[i] == None` leaves parameter `i`
/// and its moments alone; `lrs[i]` is its learning rate.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    lrs: &[f64],
    state: &mut AdamState,
) -> Result<()> {
    let n = state.len();
    if params.len() != n || grads.len() != n || lrs.len() != n {
        return Err(Error::dim(format!(
            "optimizer holds {n} moments, given {} params, {} grads, {} rates",
            params.len(),
            grads.len(),
            lrs.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!(
                "param {i} has shape {:?}, moment {:?}",
                p.shape(),
                state.m[i].shape()
            )));
        }
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "grad {i} has shape {:?}, param {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let lr = lrs[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
            *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
