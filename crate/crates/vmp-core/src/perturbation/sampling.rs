use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PerturbationSet;
use crate::error::{Error, Result};
use crate::nn::{forward, softmax, GradientMap, Linear, Mode, ParamId, SourceModel, WeightMap};
use crate::tensor::Tensor;

/// Draws `w_t = w_s + eps * sigma_group` for every perturbed weight.
pub fn sample_weights<R: Rng + ?Sized>(
    model: &SourceModel,
    pert: &PerturbationSet,
    rng: &mut R,
) -> WeightMap {
    sample_weights_with_noise(model, pert, rng).0
}

/// Like [`sample_weights`], also returning the standard-normal draws.
///
/// Draw order is layer ascending, then row-major within the weight tensor.
pub fn sample_weights_with_noise<R: Rng + ?Sized>(
    model: &SourceModel,
    pert: &PerturbationSet,
    rng: &mut R,
) -> (WeightMap, WeightMap) {
    let mut weights = model.weights.clone();
    let mut noise = BTreeMap::new();
    for (&l, w) in weights.iter_mut() {
        let Some(_) = pert.rho.get(&l) else { continue };
        let sigma = pert.sigma(l);
        let eps: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(rng)).collect();
        for (pos, (v, e)) in w.data_mut().iter_mut().zip(&eps).enumerate() {
            *v += e * sigma[pert.scheme.group_of(l, pos)];
        }
        noise.insert(l, Tensor::new(w.shape().to_vec(), eps).unwrap());
    }
    (weights, noise)
}

/// Chain rule from `dL/dw_t` to `dL/drho` along the weight-sampling path:
/// `dw_t/drho = eps * sigma / 2`.
pub fn weight_grad_to_rho(
    pert: &PerturbationSet,
    weight_grads: &GradientMap,
    noise: &WeightMap,
) -> Result<BTreeMap<usize, Tensor>> {
    let mut out = BTreeMap::new();
    for &l in pert.rho.keys() {
        let g = weight_grads
            .get(&ParamId::Weight(l))
            .ok_or_else(|| Error::contract(format!("no weight gradient for layer{l}")))?;
        let eps = &noise[&l];
        let sigma = pert.sigma(l);
        let mut acc = vec![0.0; sigma.len()];
        for (pos, (gv, e)) in g.data().iter().zip(eps.data()).enumerate() {
            let grp = pert.scheme.group_of(l, pos);
            acc[grp] += gv * e * sigma[grp] / 2.0;
        }
        out.insert(l, Tensor::vector(acc));
    }
    Ok(out)
}

/// Chain rule from per-weight noise-variance gradients (local path) to
/// `dL/drho`: `d var / d rho = var`.
pub fn noise_variance_grad_to_rho(
    pert: &PerturbationSet,
    variance_grads: &GradientMap,
) -> Result<BTreeMap<usize, Tensor>> {
    let mut out = BTreeMap::new();
    for (&l, rho) in &pert.rho {
        let g = variance_grads
            .get(&ParamId::NoiseVariance(l))
            .ok_or_else(|| Error::contract(format!("no noise-variance gradient for layer{l}")))?;
        let summed = pert.scheme.reduce(l, g.data());
        let data = summed
            .iter()
            .zip(rho.data())
            .map(|(s, r)| s * r.exp())
            .collect();
        out.insert(l, Tensor::vector(data));
    }
    Ok(out)
}

/// Dense pre-activations under local reparameterization:
/// `a = x w + zeta * sqrt(x^2 var_w)` with `zeta ~ N(0,1)` per (sample, output).
///
/// `var_w` holds one variance per weight, in `(F_in, F_out)` layout.
pub fn local_reparam_dense<R: Rng + ?Sized>(
    x: &Tensor,
    w: &Tensor,
    var_w: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::dim(format!(
            "cannot multiply {:?} by {:?}",
            x.shape(),
            w.shape()
        )));
    }
    var_w.check_shape(w.shape(), "noise variance")?;
    let op = Linear::Dense {
        inputs: w.shape()[0],
        outputs: w.shape()[1],
    };
    let mut a = op.apply(x, w);
    let var = op.apply(&x.map(|v| v * v), var_w);
    if var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::numeric(
            "local reparameterization",
            "negative variance",
        ));
    }
    for (o, v) in a.data_mut().iter_mut().zip(var.data()) {
        let z: f64 = StandardNormal.sample(rng);
        *o += z * v.sqrt();
    }
    Ok(a)
}

/// Class probabilities of the unperturbed source model, eval-mode BN.
pub fn predict_source(model: &SourceModel, batch: &Tensor) -> Result<Tensor> {
    let f = forward(model, &model.weights, batch, Mode::Eval)?;
    Ok(softmax(&f.logits))
}

/// Mean of `samples` softmax outputs, each with freshly sampled weights and eval-mode BN.
pub fn predict_mc<R: Rng + ?Sized>(
    model: &SourceModel,
    pert: &PerturbationSet,
    batch: &Tensor,
    samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if samples == 0 {
        return Err(Error::contract("predict_mc needs at least one sample"));
    }
    let mut acc: Option<Tensor> = None;
    for _ in 0..samples {
        let w = sample_weights(model, pert, rng);
        let p = softmax(&forward(model, &w, batch, Mode::Eval)?.logits);
        match acc.as_mut() {
            None => acc = Some(p),
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(p.data())
                .for_each(|(x, y)| *x += y),
        }
    }
    let mut out = acc.unwrap();
    let inv = 1.0 / samples as f64;
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}
