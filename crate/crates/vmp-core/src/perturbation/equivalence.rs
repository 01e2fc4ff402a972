//! Evaluates the adaptation objective under two parameterizations of the
//! same posterior: over the perturbation `dw ~ N(0, s2)` and over the
//! perturbed weights `w_t ~ N(w_s, s2)` with the prior pushed forward by
//! `w_t = w_s + dw`. Sharing the noise draw, both must give the same loss
//! and the same `rho` gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{group_kl, PerturbationSet, PriorSet};
use crate::error::{Error, Result};
use crate::nn::{forward, Mode, ParamId, SourceModel, WeightMap};
use crate::objectives::{likelihood_with_grad, ObjectiveConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub loss_delta_param: f64,
    pub loss_wt_param: f64,
    pub grad_delta_param: BTreeMap<usize, Tensor>,
    pub grad_wt_param: BTreeMap<usize, Tensor>,
}

impl EquivalenceReport {
    /// Largest absolute difference between the two `rho` gradients.
    pub fn max_grad_gap(&self) -> f64 {
        self.grad_delta_param
            .iter()
            .flat_map(|(l, a)| {
                let b = &self.grad_wt_param[l];
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max)
    }
}

fn draw_noise(model: &SourceModel, pert: &PerturbationSet, seed: u64) -> WeightMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pert.rho
        .keys()
        .map(|&l| {
            let shape = model.weights[&l].shape().to_vec();
            let n: usize = shape.iter().product();
            let eps = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            (l, Tensor::new(shape, eps).unwrap())
        })
        .collect()
}

struct PathResult {
    loss: f64,
    grads: BTreeMap<usize, Tensor>,
}

/// Likelihood part shared by both routes: run the net at `weights`, return
/// the loss and the gradient with respect to those weights.
fn likelihood_at(
    model: &SourceModel,
    weights: &WeightMap,
    batch: &Tensor,
    pseudo: Option<&[usize]>,
    cfg: &ObjectiveConfig,
    layers: &BTreeSet<ParamId>,
) -> Result<(f64, crate::nn::GradientMap)> {
    let fwd = forward(model, weights, batch, Mode::Train)?;
    let (value, d_logits) = likelihood_with_grad(&fwd.logits, cfg, pseudo)?;
    Ok((value, fwd.backward(&d_logits, layers)?))
}

#[allow(clippy::too_many_arguments)]
fn delta_route(
    model: &SourceModel,
    pert: &PerturbationSet,
    prior: &PriorSet,
    batch: &Tensor,
    pseudo: Option<&[usize]>,
    cfg: &ObjectiveConfig,
    n_target: usize,
    eps: &WeightMap,
) -> Result<PathResult> {
    // dw = 0 + eps * sigma, then w_t = w_s + dw.
    let mut weights = model.weights.clone();
    for (&l, e) in eps {
        let sigma = pert.sigma(l);
        let w = weights.get_mut(&l).unwrap();
        for (pos, (v, ev)) in w.data_mut().iter_mut().zip(e.data()).enumerate() {
            let delta = 0.0 + ev * sigma[pert.scheme.group_of(l, pos)];
            *v += delta;
        }
    }
    let ids = pert.rho.keys().map(|&l| ParamId::Weight(l)).collect();
    let (like, dw) = likelihood_at(model, &weights, batch, pseudo, cfg, &ids)?;
    let group_var = prior.for_scheme(&pert.scheme)?;
    let scale = cfg.kl_scale / n_target as f64;
    let mut kl = 0.0;
    let mut grads = BTreeMap::new();
    for (&l, rho) in &pert.rho {
        let sigma = pert.sigma(l);
        let mult = pert.scheme.multiplicity(l);
        let mut g = vec![0.0; rho.len()];
        // d(dw)/d(rho) = eps * sigma / 2
        for (pos, (gv, ev)) in dw
            .get(&ParamId::Weight(l))
            .unwrap()
            .data()
            .iter()
            .zip(eps[&l].data())
            .enumerate()
        {
            let grp = pert.scheme.group_of(l, pos);
            g[grp] += gv * ev * sigma[grp] / 2.0;
        }
        for (grp, (&r, &v)) in rho.data().iter().zip(group_var[&l].data()).enumerate() {
            let (k, dk) = group_kl(r, v, mult[grp] as f64);
            kl += k;
            g[grp] += scale * dk;
        }
        grads.insert(l, Tensor::vector(g));
    }
    Ok(PathResult {
        loss: scale * kl + like,
        grads,
    })
}

#[allow(clippy::too_many_arguments)]
fn weight_route(
    model: &SourceModel,
    pert: &PerturbationSet,
    prior: &PriorSet,
    batch: &Tensor,
    pseudo: Option<&[usize]>,
    cfg: &ObjectiveConfig,
    n_target: usize,
    eps: &WeightMap,
) -> Result<PathResult> {
    // Posterior N(mu, s2) with mu = w_s; prior N(w_s, v) after the change of variables.
    let posterior_mean = &model.weights;
    let prior_mean = &model.weights;
    let mut weights = WeightMap::new();
    for (&l, mu) in posterior_mean {
        let Some(e) = eps.get(&l) else {
            weights.insert(l, mu.clone());
            continue;
        };
        let sigma = pert.sigma(l);
        let data = mu
            .data()
            .iter()
            .zip(e.data())
            .enumerate()
            .map(|(pos, (m, ev))| m + ev * sigma[pert.scheme.group_of(l, pos)])
            .collect();
        weights.insert(l, Tensor::new(mu.shape().to_vec(), data)?);
    }
    let ids = pert.rho.keys().map(|&l| ParamId::Weight(l)).collect();
    let (like, dwt) = likelihood_at(model, &weights, batch, pseudo, cfg, &ids)?;
    let group_var = prior.for_scheme(&pert.scheme)?;
    let scale = cfg.kl_scale / n_target as f64;
    let mut kl = 0.0;
    let mut grads = BTreeMap::new();
    for (&l, rho) in &pert.rho {
        let mult = pert.scheme.multiplicity(l);
        let v = group_var[&l].data();
        let mut shift = vec![0.0; rho.len()];
        for (pos, (a, b)) in posterior_mean[&l]
            .data()
            .iter()
            .zip(prior_mean[&l].data())
            .enumerate()
        {
            let grp = pert.scheme.group_of(l, pos);
            shift[grp] += (a - b) * (a - b) / v[grp];
        }
        let sigma = pert.sigma(l);
        let mut g = vec![0.0; rho.len()];
        // d(w_t)/d(rho) = eps * sigma / 2
        for (pos, (gv, ev)) in dwt
            .get(&ParamId::Weight(l))
            .unwrap()
            .data()
            .iter()
            .zip(eps[&l].data())
            .enumerate()
        {
            let grp = pert.scheme.group_of(l, pos);
            g[grp] += gv * ev * sigma[grp] / 2.0;
        }
        for (grp, &r) in rho.data().iter().enumerate() {
            let (k, dk) = group_kl(r, v[grp], mult[grp] as f64);
            kl += k + 0.5 * shift[grp];
            g[grp] += scale * dk;
        }
        grads.insert(l, Tensor::vector(g));
    }
    Ok(PathResult {
        loss: scale * kl + like,
        grads,
    })
}

/// Objective and `rho` gradients under both parameterizations with shared noise.
#[allow(clippy::too_many_arguments)]
pub fn elbo_equivalence_check(
    model: &SourceModel,
    pert: &PerturbationSet,
    prior: &PriorSet,
    batch: &Tensor,
    pseudo_labels: Option<&[usize]>,
    cfg: &ObjectiveConfig,
    n_target: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    cfg.validate()?;
    if n_target == 0 {
        return Err(Error::contract("n_target must be positive"));
    }
    pert.check_against(model)?;
    let eps = draw_noise(model, pert, seed);
    let a = delta_route(
        model,
        pert,
        prior,
        batch,
        pseudo_labels,
        cfg,
        n_target,
        &eps,
    )?;
    let b = weight_route(
        model,
        pert,
        prior,
        batch,
        pseudo_labels,
        cfg,
        n_target,
        &eps,
    )?;
    Ok(EquivalenceReport {
        loss_delta_param: a.loss,
        loss_wt_param: b.loss,
        grad_delta_param: a.grads,
        grad_wt_param: b.grads,
    })
}
