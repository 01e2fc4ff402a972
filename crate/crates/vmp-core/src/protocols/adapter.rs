use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Method, PriorChoice, ProtocolConfig};
use crate::error::{Error, Result};
use crate::nn::{forward, softmax, Mode, Optimizer, ParamId, SourceModel};
use crate::objectives::{compute_pseudo_labels, Likelihood, NoisePath, Objective};
use crate::perturbation::{
    adaptive_prior, isotropic_prior, predict_mc, predict_source, PerturbationSet, PriorSet,
};
use crate::tensor::Tensor;

const EVAL_STREAM: u64 = 0x5eed_e7a1;

/// Mutable adaptation state: the (frozen-weight) model with its BN state,
/// the perturbation being learned and the optimizer.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub model: SourceModel,
    pub perturbation: Option<PerturbationSet>,
    pub prior: Option<PriorSet>,
    pub config: ProtocolConfig,
    n_target: usize,
    trainable: BTreeSet<ParamId>,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    steps: usize,
}

impl Adapter {
    /// `n_target` scales the KL term (number of target samples the
    /// perturbation is fitted to).
    pub fn new(model: &SourceModel, config: &ProtocolConfig, n_target: usize) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if n_target == 0 {
            return Err(Error::contract("n_target must be positive"));
        }
        let (perturbation, prior, trainable) = match config.method {
            Method::Perturbation => {
                let p = &config.perturbation;
                let pert = PerturbationSet::init(model, p.sharing, p.rho_init);
                let prior = match p.prior {
                    PriorChoice::Adaptive { lambda } => adaptive_prior(model, lambda)?,
                    PriorChoice::Isotropic { variance } => isotropic_prior(model, variance)?,
                };
                let trainable = if config.train_bn_affine {
                    model.bn_affine_ids()
                } else {
                    BTreeSet::new()
                };
                (Some(pert), Some(prior), trainable)
            }
            Method::FineTune => (None, None, model.all_param_ids()),
        };
        Ok(Adapter {
            model: model.clone(),
            perturbation,
            prior,
            config: config.clone(),
            n_target,
            trainable,
            optimizer: Optimizer::new(config.optimizer)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            eval_rng: ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_STREAM),
            steps: 0,
        })
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn needs_pseudo_labels(&self) -> bool {
        self.config.objective.likelihood == Likelihood::InfoMaxPlusPseudo
    }

    /// Pseudo-labels from a deterministic eval-mode pass at the mean weights.
    pub fn pseudo_labels(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let f = forward(&self.model, &self.model.weights, inputs, Mode::Eval)?;
        Ok(compute_pseudo_labels(&f.features, &softmax(&f.logits))?.labels)
    }

    /// One gradient step on `batch`; returns the objective value.
    pub fn step(&mut self, batch: &Tensor, pseudo_labels: Option<&[usize]>) -> Result<f64> {
        let path = if self.config.perturbation.local_reparam {
            NoisePath::Local
        } else {
            NoisePath::Sampled
        };
        let objective = Objective {
            model: &self.model,
            perturbation: self.perturbation.as_ref().zip(self.prior.as_ref()),
            config: &self.config.objective,
            n_target: self.n_target,
            path,
            mode: Mode::Train,
        };
        let max_rho = self
            .perturbation
            .as_ref()
            .map_or(0.0, PerturbationSet::max_abs_rho);
        let step = self.steps;
        let eval = objective
            .evaluate(batch, pseudo_labels, &self.trainable, &mut self.rng)
            .map_err(|e| match e {
                Error::Numeric { layer, detail } => Error::numeric(
                    format!("adaptation step {step}, {layer}"),
                    format!("{detail}; max |rho| = {max_rho}"),
                ),
                other => other,
            })?;
        let mut params = self.model.collect_params(&self.trainable)?;
        if let Some(pert) = &self.perturbation {
            params.extend(pert.rho.iter().map(|(&l, r)| (ParamId::Rho(l), r.clone())));
        }
        self.optimizer.step(&mut params, &eval.grads)?;
        let mut model_params = BTreeMap::new();
        for (id, t) in params {
            match id {
                ParamId::Rho(l) => {
                    if !t.is_finite() {
                        return Err(Error::numeric(
                            format!("adaptation step {step}, layer{l} rho"),
                            format!("non-finite rho after update; loss = {}", eval.loss),
                        ));
                    }
                    if let Some(pert) = self.perturbation.as_mut() {
                        pert.rho.insert(l, t);
                    }
                }
                _ => {
                    model_params.insert(id, t);
                }
            }
        }
        self.model.apply_params(&model_params)?;
        self.model.bn = eval.bn;
        self.steps += 1;
        Ok(eval.loss)
    }

    /// Class probabilities: Monte Carlo average over perturbations, or the
    /// deterministic model for fine-tuning. Eval-mode BN in both cases.
    pub fn predict(&mut self, inputs: &Tensor) -> Result<Tensor> {
        match &self.perturbation {
            Some(pert) => predict_mc(
                &self.model,
                pert,
                inputs,
                self.config.mc_eval_samples,
                &mut self.eval_rng,
            ),
            None => predict_source(&self.model, inputs),
        }
    }
}
