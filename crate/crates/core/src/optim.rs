//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let m: Vec<_> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One AdamW update at learning rate `lr`. `None` gradients count as zero.
    ///
    /// Every gradient is checked before any parameter is touched, so a
    /// non-finite gradient leaves both parameters and moments unchanged.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((id, name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                g.check_finite(&format!("gradient of {name}"))?;
            }
            debug_assert_eq!(self.m[id.index()].shape(), p.shape());
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);

        for (i, g) in grads.iter().enumerate() {
            let id = crate::params::ParamId(i);
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.as_ref().map_or(T::zero(), |g| g.data()[j]);
                p[j] = p[j] * decay;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                p[j] = p[j] - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
