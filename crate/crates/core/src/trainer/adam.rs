use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. Moments are indexed like the store's leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros: Vec<Tensor> = params
            .leaves()
            .iter()
            .map(|l| Tensor::zeros(l.value.rows(), l.value.cols()))
            .collect();
        Ok(Adam {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(bad) = params.leaves().iter().find(|l| !l.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", bad.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (id, (m, v)) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            let leaf = params.leaf_mut(id);
            let g = leaf.grad.data();
            let theta = leaf.value.data_mut();
            for (k, ((mk, vk), th)) in m.data_mut().iter_mut().zip(v.data_mut()).zip(theta).enumerate() {
                *mk = BETA1 * *mk + (1.0 - BETA1) * g[k];
                *vk = BETA2 * *vk + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = *mk / c1;
                let v_hat = *vk / c2;
                *th -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(max_norm / norm);
    }
    norm
}
