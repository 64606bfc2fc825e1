use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("train.adam: betas in [0, 1), eps > 0, weight_decay >= 0".into()))
        }
    }
}

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    steps: i32,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, lr: f64) -> Self {
        Adam {
            config,
            lr,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Updates every parameter named in `grads`. Frozen parameters are rejected.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.frozen {
                return Err(Error::Contract(format!("optimizer step on frozen parameter {name}")));
            }
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adam", p.value.shape(), g.shape()));
            }
            let shape = g.shape().to_vec();
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let value = params.value_mut(name)?;
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w -= self.lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}
