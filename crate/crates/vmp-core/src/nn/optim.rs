//! SGD with momentum and an Adam-style adaptive optimizer, both with
//! decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{GradientMap, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(alias = "adam")]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum, or the first-moment decay of the adaptive rule.
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: BTreeMap<ParamId, Vec<f64>>,
    second: BTreeMap<ParamId, Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be > 0, got {}",
                config.lr
            )));
        }
        Ok(Optimizer {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// SGD velocity of a parameter, if it has been stepped.
    pub fn velocity(&self, id: &ParamId) -> Option<&[f64]> {
        self.first.get(id).map(Vec::as_slice)
    }

    /// Updates every parameter in `params` in place. Each needs a gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<ParamId, Tensor>,
        grads: &GradientMap,
    ) -> Result<()> {
        let OptimizerConfig {
            kind,
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for id in params.keys() {
            match grads.get(id) {
                Some(g) if g.shape() == params[id].shape() => {}
                Some(g) => {
                    return Err(Error::dim(format!(
                        "gradient for {id:?} has shape {:?}, parameter {:?}",
                        g.shape(),
                        params[id].shape()
                    )))
                }
                None => return Err(Error::contract(format!("missing gradient for {id:?}"))),
            }
        }
        self.steps += 1;
        let decay = 1.0 - lr * weight_decay;
        for (id, p) in params.iter_mut() {
            let g = grads.get(id).unwrap().data();
            let n = g.len();
            let m = self.first.entry(*id).or_insert_with(|| vec![0.0; n]);
            match kind {
                OptimizerKind::Sgd => {
                    for ((w, v), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(g) {
                        *w *= decay;
                        *v = momentum * *v - lr * gi;
                        *w += *v;
                    }
                }
                OptimizerKind::Adaptive => {
                    let s = self.second.entry(*id).or_insert_with(|| vec![0.0; n]);
                    let t = self.steps as i32;
                    let c1 = 1.0 - momentum.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, mv), sv), gi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                        .zip(g)
                    {
                        *mv = momentum * *mv + (1.0 - momentum) * gi;
                        *sv = ADAM_BETA2 * *sv + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = *mv / c1;
                        let shat = *sv / c2;
                        *w = *w * decay - lr * mhat / (shat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
