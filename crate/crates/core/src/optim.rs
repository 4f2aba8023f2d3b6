//! Parameter-store optimizers.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Matrix;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment buffers, aligned index-for-index with the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Single-owner optimizer over one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let adam = match kind {
            OptimizerKind::Adam => Some(AdamState {
                t: 0,
                m: store
                    .mats()
                    .iter()
                    .map(|p| Matrix::zeros(p.rows(), p.cols()))
                    .collect(),
                v: store
                    .mats()
                    .iter()
                    .map(|p| Matrix::zeros(p.rows(), p.cols()))
                    .collect(),
            }),
            OptimizerKind::Sgd => None,
        };
        Optimizer { kind, lr, adam }
    }

    /// One update step; `grads` must align with the store order.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(CoreError::shape(
                alloc::format!("{} gradient tensors", store.len()),
                alloc::format!("{}", grads.len()),
            ));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in store.mats_mut().iter_mut().zip(grads) {
                    p.axpy(-self.lr, g);
                }
            }
            OptimizerKind::Adam => {
                let state = self.adam.as_mut().expect("adam state present");
                state.t += 1;
                let bc1 = 1.0 - crate::fx::powf(ADAM_BETA1, state.t as f64);
                let bc2 = 1.0 - crate::fx::powf(ADAM_BETA2, state.t as f64);
                for ((p, g), (m, v)) in store
                    .mats_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        let gi = g.as_slice()[i];
                        let mi = &mut m.as_mut_slice()[i];
                        let vi = &mut v.as_mut_slice()[i];
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        p.as_mut_slice()[i] -= self.lr * m_hat / (crate::fx::sqrt(v_hat) + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
