//! Learnable zero-mean Gaussian perturbations over frozen source weights.
//!
//! A perturbed weight is `w_t = w_s + eps * sqrt(exp(rho))` with
//! `eps ~ N(0, 1)` drawn per weight. `rho` (the log-variance) is the only
//! learned weight-space quantity; with per-output-channel sharing every
//! weight of a conv kernel (or of a dense output unit) shares one `rho`.

mod equivalence;
mod prior;
mod sampling;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{SourceModel, WeightMap};
use crate::tensor::Tensor;

pub use equivalence::{elbo_equivalence_check, EquivalenceReport};
pub use prior::{adaptive_prior, isotropic_prior, PriorSet, VARIANCE_FLOOR};
pub use sampling::{
    local_reparam_dense, noise_variance_grad_to_rho, predict_mc, predict_source, sample_weights,
    sample_weights_with_noise, weight_grad_to_rho,
};

/// Default initial log-variance (sigma ~ 6.7e-3).
pub const RHO_INIT: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingKind {
    PerWeight,
    PerOutputChannel,
}

impl SharingKind {
    pub fn code(self) -> u8 {
        match self {
            SharingKind::PerWeight => 0,
            SharingKind::PerOutputChannel => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SharingKind::PerWeight),
            1 => Some(SharingKind::PerOutputChannel),
            _ => None,
        }
    }
}

/// Layout of one perturbed layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGroups {
    pub weight_shape: Vec<usize>,
    /// Output units (dense) or output channels (conv); the last weight axis.
    pub out_units: usize,
}

impl LayerGroups {
    pub fn weight_count(&self) -> usize {
        self.weight_shape.iter().product()
    }
}

/// Maps every perturbed weight to its group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingScheme {
    pub kind: SharingKind,
    pub layers: BTreeMap<usize, LayerGroups>,
}

impl SharingScheme {
    pub fn new(model: &SourceModel, kind: SharingKind) -> Self {
        let layers = model
            .weighted_layers()
            .into_iter()
            .map(|l| {
                let spec = &model.layers[l];
                (
                    l,
                    LayerGroups {
                        weight_shape: spec.weight_shape().unwrap(),
                        out_units: spec.out_units().unwrap(),
                    },
                )
            })
            .collect();
        SharingScheme { kind, layers }
    }

    pub fn group_count(&self, layer: usize) -> usize {
        let g = &self.layers[&layer];
        match self.kind {
            SharingKind::PerWeight => g.weight_count(),
            SharingKind::PerOutputChannel => g.out_units,
        }
    }

    /// Group of the weight at flat (row-major) position `pos` of `layer`.
    ///
    /// The output unit is the last weight axis for both dense and conv layouts.
    #[inline]
    pub fn group_of(&self, layer: usize, pos: usize) -> usize {
        match self.kind {
            SharingKind::PerWeight => pos,
            SharingKind::PerOutputChannel => pos % self.layers[&layer].out_units,
        }
    }

    /// Output unit (kernel) a weight belongs to, independent of sharing.
    #[inline]
    pub fn kernel_of(&self, layer: usize, pos: usize) -> usize {
        pos % self.layers[&layer].out_units
    }

    /// Number of weights in each group of `layer`.
    pub fn multiplicity(&self, layer: usize) -> Vec<usize> {
        let mut m = vec![0; self.group_count(layer)];
        for pos in 0..self.layers[&layer].weight_count() {
            m[self.group_of(layer, pos)] += 1;
        }
        m
    }

    /// Total learnable perturbation parameters.
    pub fn parameter_count(&self) -> usize {
        self.layers.keys().map(|&l| self.group_count(l)).sum()
    }

    /// Broadcasts per-group values to a per-weight tensor.
    pub fn expand(&self, layer: usize, groups: &[f64]) -> Tensor {
        let g = &self.layers[&layer];
        let data = (0..g.weight_count())
            .map(|pos| groups[self.group_of(layer, pos)])
            .collect();
        Tensor::new(g.weight_shape.clone(), data).unwrap()
    }

    /// Sums per-weight values into their groups.
    pub fn reduce(&self, layer: usize, per_weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.group_count(layer)];
        for (pos, v) in per_weight.iter().enumerate() {
            out[self.group_of(layer, pos)] += v;
        }
        out
    }
}

/// Log-variances of the perturbation groups, one tensor per perturbed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub rho: BTreeMap<usize, Tensor>,
    pub scheme: SharingScheme,
}

impl PerturbationSet {
    /// One `rho` per group, all set to `rho_init`.
    pub fn init(model: &SourceModel, kind: SharingKind, rho_init: f64) -> Self {
        let scheme = SharingScheme::new(model, kind);
        let rho = scheme
            .layers
            .keys()
            .map(|&l| (l, Tensor::full(&[scheme.group_count(l)], rho_init)))
            .collect();
        PerturbationSet { rho, scheme }
    }

    pub fn parameter_count(&self) -> usize {
        self.rho.values().map(Tensor::len).sum()
    }

    /// Per-weight variances `exp(rho)` for every layer.
    pub fn weight_variances(&self) -> WeightMap {
        self.rho
            .iter()
            .map(|(&l, r)| {
                let var: Vec<f64> = r.data().iter().map(|v| v.exp()).collect();
                (l, self.scheme.expand(l, &var))
            })
            .collect()
    }

    /// Per-group standard deviations `sqrt(exp(rho))`.
    pub fn sigma(&self, layer: usize) -> Vec<f64> {
        self.rho[&layer]
            .data()
            .iter()
            .map(|r| r.exp().sqrt())
            .collect()
    }

    /// Sets every `rho` to the same value.
    pub fn fill(&mut self, value: f64) {
        for r in self.rho.values_mut() {
            r.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn max_abs_rho(&self) -> f64 {
        self.rho.values().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// Checks that the set matches the model's perturbable layers.
    pub fn check_against(&self, model: &SourceModel) -> Result<()> {
        let expected = SharingScheme::new(model, self.scheme.kind);
        if expected != self.scheme {
            return Err(Error::Mismatch(
                "perturbation groups do not match the model's dense/conv layers".into(),
            ));
        }
        for (&l, r) in &self.rho {
            r.check_shape(&[self.scheme.group_count(l)], &format!("layer{l} rho"))?;
        }
        if self.rho.keys().ne(self.scheme.layers.keys()) {
            return Err(Error::Mismatch(
                "rho layers differ from the sharing scheme".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form `KL[q || p]` for zero-mean diagonal Gaussians, summed over
/// every perturbed weight.
pub fn kl_divergence(pert: &PerturbationSet, prior: &PriorSet) -> Result<f64> {
    kl_divergence_with_grad(pert, prior).map(|(kl, _)| kl)
}

/// KL and its gradient with respect to each layer's `rho`.
pub fn kl_divergence_with_grad(
    pert: &PerturbationSet,
    prior: &PriorSet,
) -> Result<(f64, BTreeMap<usize, Tensor>)> {
    let group_var = prior.for_scheme(&pert.scheme)?;
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for (&l, rho) in &pert.rho {
        let v = group_var
            .get(&l)
            .ok_or_else(|| Error::contract(format!("prior has no entry for layer{l}")))?;
        let mult = pert.scheme.multiplicity(l);
        let mut g = Vec::with_capacity(rho.len());
        for ((&r, &vg), &m) in rho.data().iter().zip(v.data()).zip(&mult) {
            if !r.is_finite() {
                return Err(Error::numeric(
                    format!("layer{l} rho"),
                    format!("rho = {r}"),
                ));
            }
            let (kl, dkl) = group_kl(r, vg, m as f64);
            total += kl;
            g.push(dkl);
        }
        grads.insert(l, Tensor::vector(g));
    }
    Ok((total, grads))
}

/// `m * 1/2 (s2/v - ln(s2/v) - 1)` with `s2 = exp(rho)`, and its `rho` derivative.
#[inline]
pub(crate) fn group_kl(rho: f64, prior_var: f64, multiplicity: f64) -> (f64, f64) {
    let d = rho.exp() / prior_var - 1.0;
    // ln(s2/v): ln_1p keeps precision near d = 0, the direct form avoids
    // ln(0) when exp(rho) underflows relative to v.
    let log_ratio = if d > -0.5 {
        d.ln_1p()
    } else {
        rho - prior_var.ln()
    };
    (multiplicity * 0.5 * (d - log_ratio), multiplicity * 0.5 * d)
}
