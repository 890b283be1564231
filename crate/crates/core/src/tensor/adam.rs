use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar = f32> {
    pub config: AdamConfig,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let first: Vec<_> = params.into_iter().map(Tensor::zeros_like).collect();
        let second = first.clone();
        AdamState {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Gradients are validated before any
    /// parameter is touched, so a non-finite gradient leaves the state intact.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[&Tensor<F>],
        names: &[&str],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(format!(
                    "adam: parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                let param = names.get(i).map_or_else(|| format!("#{i}"), |s| s.to_string());
                return Err(Error::NonFiniteGradient { param });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gv.as_f64();
                let mf = beta1 * mv.as_f64() + (1.0 - beta1) * gf;
                let vf = beta2 * vv.as_f64() + (1.0 - beta2) * gf * gf;
                *mv = F::from_f64(mf);
                *vv = F::from_f64(vf);
                let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + eps);
                *pv = F::from_f64(pv.as_f64() - update);
            }
        }
        Ok(())
    }
}
