use std::collections::BTreeMap;

use super::SharingScheme;
use crate::error::{Error, Result};
use crate::nn::SourceModel;
use crate::tensor::Tensor;

/// Lower bound on prior variances; constant kernels have zero variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Zero-mean Gaussian prior over perturbations, one variance per kernel
/// (conv output channel or dense output unit) of every weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub variance: BTreeMap<usize, Tensor>,
    pub lambda: f64,
}

/// Prior variance `max(lambda * Var(kernel), floor)` shared by the whole kernel.
///
/// `Var` is the population variance of the source weights feeding one
/// output channel / unit.
pub fn adaptive_prior(model: &SourceModel, lambda: f64) -> Result<PriorSet> {
    if !(lambda > 0.0) {
        return Err(Error::contract(format!("lambda must be > 0, got {lambda}")));
    }
    let mut variance = BTreeMap::new();
    for l in model.weighted_layers() {
        let w = &model.weights[&l];
        let out = model.layers[l].out_units().unwrap();
        let per_kernel = w.len() / out;
        let mut sum = vec![0.0; out];
        for (pos, v) in w.data().iter().enumerate() {
            sum[pos % out] += v;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / per_kernel as f64).collect();
        let mut sq = vec![0.0; out];
        for (pos, v) in w.data().iter().enumerate() {
            let d = v - mean[pos % out];
            sq[pos % out] += d * d;
        }
        let var = sq
            .iter()
            .map(|s| (lambda * s / per_kernel as f64).max(VARIANCE_FLOOR))
            .collect();
        variance.insert(l, Tensor::vector(var));
    }
    Ok(PriorSet { variance, lambda })
}

/// The same prior variance for every weight.
pub fn isotropic_prior(model: &SourceModel, variance: f64) -> Result<PriorSet> {
    if !(variance > 0.0) {
        return Err(Error::contract(format!(
            "prior variance must be > 0, got {variance}"
        )));
    }
    let variance_map = model
        .weighted_layers()
        .into_iter()
        .map(|l| {
            let out = model.layers[l].out_units().unwrap();
            (l, Tensor::full(&[out], variance.max(VARIANCE_FLOOR)))
        })
        .collect();
    Ok(PriorSet {
        variance: variance_map,
        lambda: 1.0,
    })
}

impl PriorSet {
    /// Prior variance for every group of `scheme`.
    pub fn for_scheme(&self, scheme: &SharingScheme) -> Result<BTreeMap<usize, Tensor>> {
        let mut out = BTreeMap::new();
        for (&l, groups) in &scheme.layers {
            let kernels = self
                .variance
                .get(&l)
                .ok_or_else(|| Error::contract(format!("prior has no entry for layer{l}")))?;
            if kernels.len() != groups.out_units {
                return Err(Error::contract(format!(
                    "prior for layer{l} has {} kernels, layer has {}",
                    kernels.len(),
                    groups.out_units
                )));
            }
            let n = scheme.group_count(l);
            // Groups never straddle kernels; group g's first weight sits at position g.
            let data = (0..n)
                .map(|g| kernels.data()[scheme.kernel_of(l, g)])
                .collect();
            out.insert(l, Tensor::vector(data));
        }
        if self.variance.len() != scheme.layers.len() {
            return Err(Error::contract(
                "prior and perturbation cover different layers",
            ));
        }
        Ok(out)
    }
}
