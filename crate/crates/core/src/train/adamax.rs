use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientRecord;
use crate::snn::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamaxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be > 0"));
        }
        Ok(())
    }
}

/// Adamax: first moment plus an exponentially decayed infinity norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub params: AdamaxParams,
    pub m: Vec<Array2<f64>>,
    pub u: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamaxState {
    pub fn new(net: &Network, params: AdamaxParams) -> Result<Self> {
        params.validate()?;
        let zeros: Vec<Array2<f64>> = net
            .layers()
            .iter()
            .map(|l| Array2::zeros(l.weights.raw_dim()))
            .collect();
        Ok(Self {
            params,
            m: zeros.clone(),
            u: zeros,
            step: 0,
        })
    }

    /// `m = β₁m + (1−β₁)g`, `u = max(β₂u, |g|)`, `θ −= η/(1−β₁^t) · m/(u+ε)`.
    pub fn step(&mut self, grads: &GradientRecord, net: &mut Network) -> Result<()> {
        Error::check_dim("adamax layers", self.m.len(), grads.depth())?;
        self.step += 1;
        let AdamaxParams { lr, beta1, beta2, eps } = self.params;
        let rate = lr / (1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32));
        for (((m, u), g), layer) in self
            .m
            .iter_mut()
            .zip(&mut self.u)
            .zip(&grads.layers)
            .zip(net.layers_mut())
        {
            Zip::from(&mut layer.weights)
                .and(m)
                .and(u)
                .and(g)
                .for_each(|w, m, u, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *u = (beta2 * *u).max(g.abs());
                    *w -= rate * *m / (*u + eps);
                });
        }
        Ok(())
    }
}
