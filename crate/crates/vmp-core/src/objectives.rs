//! Unsupervised likelihood surrogates and the full adaptation objective
//! `kl_scale * KL / n_target + E_q[likelihood loss]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, softmax, softmax_backward, softmax_cross_entropy_with_grad, BnState, GradientMap,
    LocalNoise, Mode, ParamId, SourceModel, LOG_CLAMP,
};
use crate::perturbation::{
    kl_divergence_with_grad, noise_variance_grad_to_rho, sample_weights_with_noise,
    weight_grad_to_rho, PerturbationSet, PriorSet,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Per-sample prediction entropy.
    Entropy,
    /// Per-sample entropy minus the entropy of the batch-mean prediction.
    InfoMax,
    /// `InfoMax` plus `beta` times cross-entropy against pseudo-labels.
    InfoMaxPlusPseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub likelihood: Likelihood,
    /// Pseudo-label weight; only read by [`Likelihood::InfoMaxPlusPseudo`].
    pub beta: f64,
    pub kl_scale: f64,
    pub mc_train_samples: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            likelihood: Likelihood::InfoMaxPlusPseudo,
            beta: 0.3,
            kl_scale: 1.0,
            mc_train_samples: 1,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::contract(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.kl_scale > 0.0) {
            return Err(Error::contract(format!(
                "kl_scale must be > 0, got {}",
                self.kl_scale
            )));
        }
        if self.mc_train_samples == 0 {
            return Err(Error::contract("mc_train_samples must be >= 1"));
        }
        Ok(())
    }
}

fn check_distributions(probs: &Tensor) -> Result<()> {
    if probs.rank() != 2 || probs.rows() == 0 {
        return Err(Error::dim(format!(
            "expected (B, K) probabilities, got {:?}",
            probs.shape()
        )));
    }
    for i in 0..probs.rows() {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 || probs.row(i).iter().any(|&p| p < 0.0) {
            return Err(Error::contract(format!(
                "row {i} is not a distribution (sums to {s})"
            )));
        }
    }
    Ok(())
}

#[inline]
fn plogp(p: f64) -> f64 {
    p * p.max(LOG_CLAMP).ln()
}

#[inline]
fn dplogp(p: f64) -> f64 {
    if p > LOG_CLAMP {
        p.ln() + 1.0
    } else {
        LOG_CLAMP.ln()
    }
}

fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| plogp(v)).sum::<f64>()
}

/// Mean per-sample entropy `-sum_k p_k ln p_k`.
pub fn entropy_loss(probs: &Tensor) -> Result<f64> {
    check_distributions(probs)?;
    Ok(entropy_with_grad(probs).0)
}

fn entropy_with_grad(probs: &Tensor) -> (f64, Tensor) {
    let b = probs.rows() as f64;
    let h = (0..probs.rows())
        .map(|i| row_entropy(probs.row(i)))
        .sum::<f64>()
        / b;
    (h, probs.map(|p| -dplogp(p) / b))
}

fn batch_mean(probs: &Tensor) -> Vec<f64> {
    let k = probs.row_len();
    let mut mean = vec![0.0; k];
    for i in 0..probs.rows() {
        for (m, p) in mean.iter_mut().zip(probs.row(i)) {
            *m += p;
        }
    }
    let b = probs.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    mean
}

/// Mean per-sample entropy minus the entropy of the mean prediction.
pub fn info_max_loss(probs: &Tensor) -> Result<f64> {
    check_distributions(probs)?;
    if probs.rows() < 2 {
        return Err(Error::contract("info_max_loss needs a batch of at least 2"));
    }
    Ok(info_max_with_grad(probs).0)
}

fn info_max_with_grad(probs: &Tensor) -> (f64, Tensor) {
    let (h, mut grad) = entropy_with_grad(probs);
    let mean = batch_mean(probs);
    let b = probs.rows() as f64;
    let k = probs.row_len();
    // d(-H(mean))/dp_bk = (ln mean_k + 1) / B
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        *g += dplogp(mean[i % k]) / b;
    }
    (h - row_entropy(&mean), grad)
}

/// Likelihood loss of `logits` and its gradient with respect to them.
pub fn likelihood_with_grad(
    logits: &Tensor,
    cfg: &ObjectiveConfig,
    pseudo_labels: Option<&[usize]>,
) -> Result<(f64, Tensor)> {
    let probs = softmax(logits);
    let (value, d_probs) = match cfg.likelihood {
        Likelihood::Entropy => entropy_with_grad(&probs),
        Likelihood::InfoMax | Likelihood::InfoMaxPlusPseudo => info_max_with_grad(&probs),
    };
    let mut d_logits = softmax_backward(&probs, &d_probs);
    let mut value = value;
    if cfg.likelihood == Likelihood::InfoMaxPlusPseudo {
        let labels = pseudo_labels
            .ok_or_else(|| Error::contract("pseudo-labels are required by info_max_plus_pseudo"))?;
        if cfg.beta > 0.0 {
            let (ce, d_ce) = softmax_cross_entropy_with_grad(logits, labels)?;
            value += cfg.beta * ce;
            for (d, c) in d_logits.data_mut().iter_mut().zip(d_ce.data()) {
                *d += cfg.beta * c;
            }
        }
    }
    Ok((value, d_logits))
}

/// Centroid-based pseudo-labels over the full target set.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelState {
    /// `(K, F + 1)`, in the normalized augmented feature space.
    pub centroids: Tensor,
    pub labels: Vec<usize>,
    pub refresh_epoch: usize,
}

/// Features with a constant-1 coordinate appended, each row L2-normalized.
fn augment(features: &Tensor) -> Vec<Vec<f64>> {
    (0..features.rows())
        .map(|i| {
            let mut v = features.row(i).to_vec();
            v.push(1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

fn nearest(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|f| {
            let mut best = 0;
            let mut best_d = cosine_distance(f, &centroids[0]);
            for (k, c) in centroids.iter().enumerate().skip(1) {
                let d = cosine_distance(f, c);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Soft centroids, nearest-centroid labels, hard centroids, relabel.
///
/// A class left empty after hard assignment keeps its soft centroid.
/// Ties go to the lowest class index.
pub fn compute_pseudo_labels(features: &Tensor, probs: &Tensor) -> Result<PseudoLabelState> {
    let (n, k) = (probs.rows(), probs.row_len());
    if features.rows() != n {
        return Err(Error::dim(format!(
            "{} feature rows for {n} probability rows",
            features.rows()
        )));
    }
    if n < k {
        return Err(Error::contract(format!(
            "need at least {k} samples, got {n}"
        )));
    }
    if !features.is_finite() {
        return Err(Error::numeric("pseudo-labels", "non-finite features"));
    }
    let points = augment(features);
    let dim = points[0].len();
    let mut soft = vec![vec![0.0; dim]; k];
    let mut mass = vec![0.0; k];
    for (i, f) in points.iter().enumerate() {
        for (c, p) in probs.row(i).iter().enumerate() {
            mass[c] += p;
            for (s, x) in soft[c].iter_mut().zip(f) {
                *s += p * x;
            }
        }
    }
    for (c, m) in soft.iter_mut().zip(&mass) {
        c.iter_mut().for_each(|v| *v /= m + 1e-8);
    }
    let first = nearest(&points, &soft);
    let mut hard = vec![vec![0.0; dim]; k];
    let mut count = vec![0usize; k];
    for (f, &y) in points.iter().zip(&first) {
        count[y] += 1;
        for (s, x) in hard[y].iter_mut().zip(f) {
            *s += x;
        }
    }
    for c in 0..k {
        if count[c] == 0 {
            hard[c] = soft[c].clone();
        } else {
            hard[c].iter_mut().for_each(|v| *v /= count[c] as f64);
        }
    }
    let labels = nearest(&points, &hard);
    Ok(PseudoLabelState {
        centroids: Tensor::from_rows(&hard)?,
        labels,
        refresh_epoch: 0,
    })
}

/// How perturbation noise enters the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePath {
    /// Pre-activation noise (local reparameterization).
    Local,
    /// Explicit weight samples.
    Sampled,
}

/// One evaluation of the adaptation objective.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    /// The already-scaled KL contribution.
    pub kl_term: f64,
    pub likelihood: f64,
    /// `Rho(l)` for every perturbed layer plus the requested model parameters.
    pub grads: GradientMap,
    /// BN state after the first Monte Carlo pass.
    pub bn: BTreeMap<usize, BnState>,
}

/// The adaptation objective bound to a model and (optionally) a perturbation.
///
/// With `perturbation: None` this is plain fine-tuning of the requested
/// model parameters under the same likelihood and no KL term.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub model: &'a SourceModel,
    pub perturbation: Option<(&'a PerturbationSet, &'a PriorSet)>,
    pub config: &'a ObjectiveConfig,
    pub n_target: usize,
    pub path: NoisePath,
    pub mode: Mode,
}

impl<'a> Objective<'a> {
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        batch: &Tensor,
        pseudo_labels: Option<&[usize]>,
        model_trainable: &BTreeSet<ParamId>,
        rng: &mut R,
    ) -> Result<ObjectiveEval> {
        self.config.validate()?;
        if self.n_target == 0 {
            return Err(Error::contract("n_target must be positive"));
        }
        if self.config.likelihood == Likelihood::InfoMaxPlusPseudo && pseudo_labels.is_none() {
            return Err(Error::contract(
                "pseudo-labels are required by info_max_plus_pseudo",
            ));
        }
        let samples = self.config.mc_train_samples;
        let inv_s = 1.0 / samples as f64;
        let mut grads = GradientMap::default();
        let mut likelihood = 0.0;
        let mut bn = None;
        let variances = self.perturbation.map(|(p, _)| p.weight_variances());
        for _ in 0..samples {
            let (fwd, noise) = match (self.perturbation, self.path) {
                (Some(_), NoisePath::Local) => {
                    let local = LocalNoise {
                        variances: variances.as_ref().unwrap(),
                        rng: &mut *rng,
                    };
                    (
                        nn::run(
                            self.model,
                            &self.model.weights,
                            batch,
                            self.mode,
                            Some(local),
                        )?,
                        None,
                    )
                }
                (Some((pert, _)), NoisePath::Sampled) => {
                    let (w, eps) = sample_weights_with_noise(self.model, pert, rng);
                    (nn::forward(self.model, &w, batch, self.mode)?, Some(eps))
                }
                (None, _) => (
                    nn::forward(self.model, &self.model.weights, batch, self.mode)?,
                    None,
                ),
            };
            let (value, d_logits) = likelihood_with_grad(&fwd.logits, self.config, pseudo_labels)?;
            likelihood += value * inv_s;
            let mut wanted = model_trainable.clone();
            if let Some((pert, _)) = self.perturbation {
                for &l in pert.rho.keys() {
                    wanted.insert(match self.path {
                        NoisePath::Local => ParamId::NoiseVariance(l),
                        NoisePath::Sampled => ParamId::Weight(l),
                    });
                }
            }
            let raw = fwd.backward(&d_logits, &wanted)?;
            if let Some((pert, _)) = self.perturbation {
                let rho = match &noise {
                    Some(eps) => weight_grad_to_rho(pert, &raw, eps)?,
                    None => noise_variance_grad_to_rho(pert, &raw)?,
                };
                let rho_grads = GradientMap {
                    grads: rho.into_iter().map(|(l, g)| (ParamId::Rho(l), g)).collect(),
                };
                grads.accumulate(&rho_grads, inv_s);
            }
            let model_grads = GradientMap {
                grads: raw
                    .grads
                    .into_iter()
                    .filter(|(id, _)| model_trainable.contains(id))
                    .collect(),
            };
            grads.accumulate(&model_grads, inv_s);
            if bn.is_none() {
                bn = Some(fwd.bn);
            }
        }
        let mut kl_term = 0.0;
        if let Some((pert, prior)) = self.perturbation {
            let (kl, dkl) = kl_divergence_with_grad(pert, prior)?;
            let scale = self.config.kl_scale / self.n_target as f64;
            kl_term = scale * kl;
            let kl_grads = GradientMap {
                grads: dkl.into_iter().map(|(l, g)| (ParamId::Rho(l), g)).collect(),
            };
            grads.accumulate(&kl_grads, scale);
        }
        let loss = kl_term + likelihood;
        if !loss.is_finite() {
            return Err(Error::numeric(
                "objective",
                format!("loss = {loss} (kl term {kl_term}, likelihood {likelihood})"),
            ));
        }
        Ok(ObjectiveEval {
            loss,
            kl_term,
            likelihood,
            grads,
            bn: bn.unwrap(),
        })
    }
}

/// Scalar adaptation objective with train-mode BN and local reparameterization.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_objective<R: Rng + ?Sized>(
    model: &SourceModel,
    pert: &PerturbationSet,
    prior: &PriorSet,
    batch: &Tensor,
    pseudo_labels: Option<&[usize]>,
    cfg: &ObjectiveConfig,
    n_target: usize,
    rng: &mut R,
) -> Result<f64> {
    let objective = Objective {
        model,
        perturbation: Some((pert, prior)),
        config: cfg,
        n_target,
        path: NoisePath::Local,
        mode: Mode::Train,
    };
    Ok(objective
        .evaluate(batch, pseudo_labels, &BTreeSet::new(), rng)?
        .loss)
}
