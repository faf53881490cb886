//! Adam with bias correction and no weight decay.

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: DenoiserParams<f32>,
    pub v: DenoiserParams<f32>,
}

impl Adam {
    pub fn new(params: &DenoiserParams<f32>, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {lr} must be positive"
            )));
        }
        Ok(Adam {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        })
    }

    /// Applies one update. `grads` must follow the parameter order.
    pub fn update(
        &mut self,
        params: &mut DenoiserParams<f32>,
        grads: &[Tensor<f32>],
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powf(self.step as f64)) as f32;
        let c2 = (1.0 - self.beta2.powf(self.step as f64)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads);
        for (((p, m), v), g) in tensors {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
