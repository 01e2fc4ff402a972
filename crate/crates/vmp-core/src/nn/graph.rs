//! Forward pass with a recorded tape and exact reverse-mode gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{BnState, GradientMap, LayerSpec, ParamId, SourceModel, WeightMap};
use super::ops::Linear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, BN state untouched.
    Eval,
}

/// Pre-activation noise for local reparameterization.
///
/// `variances` holds one per-weight variance tensor per noisy layer, in
/// weight layout; layers without an entry run deterministically.
pub struct LocalNoise<'a, R: Rng + ?Sized> {
    pub variances: &'a WeightMap,
    pub rng: &'a mut R,
}

struct LocalCache {
    x_sq: Tensor,
    var_w: Tensor,
    zeta: Tensor,
    std: Tensor,
}

#[allow(clippy::large_enum_variant)]
enum Node {
    Weighted {
        layer: usize,
        op: Linear,
        x: Tensor,
        w: Tensor,
        local: Option<LocalCache>,
    },
    Norm {
        layer: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        gamma: Vec<f64>,
        train: bool,
        channels: usize,
        spatial: usize,
    },
    Relu {
        mask: Vec<bool>,
    },
    Flatten {
        shape: Vec<usize>,
    },
}

/// Result of a forward pass. Keeps the tape needed by [`Forward::backward`].
pub struct Forward {
    pub logits: Tensor,
    /// Penultimate activation, `(B, F)`.
    pub features: Tensor,
    /// BN state after the pass (updated in train mode, unchanged in eval mode).
    pub bn: BTreeMap<usize, BnState>,
    nodes: Vec<Node>,
}

/// Deterministic forward pass with the given weights.
pub fn forward(
    model: &SourceModel,
    weights: &WeightMap,
    batch: &Tensor,
    mode: Mode,
) -> Result<Forward> {
    run::<rand_chacha::ChaCha8Rng>(model, weights, batch, mode, None)
}

/// Forward pass, optionally with local-reparameterization noise.
pub fn run<R: Rng + ?Sized>(
    model: &SourceModel,
    weights: &WeightMap,
    batch: &Tensor,
    mode: Mode,
    mut local: Option<LocalNoise<'_, R>>,
) -> Result<Forward> {
    if batch.rank() != model.input_shape.len() + 1 || batch.shape()[1..] != model.input_shape[..] {
        return Err(Error::dim(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            model.input_shape
        )));
    }
    if batch.rows() == 0 {
        return Err(Error::dim("empty batch"));
    }
    let mut bn = model.bn.clone();
    let mut nodes = Vec::with_capacity(model.layers.len());
    let mut h = batch.clone();
    let mut features = None;
    let last = model.layers.len() - 1;
    for (l, spec) in model.layers.iter().enumerate() {
        if l == last {
            features = Some(h.clone());
        }
        let (next, node) = match *spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let w = weights
                    .get(&l)
                    .ok_or_else(|| Error::contract(format!("no weights for layer{l}")))?;
                let expected = spec.weight_shape().unwrap();
                w.check_shape(&expected, &format!("layer{l} weight"))?;
                let op = linear_of(spec);
                let mut y = op.apply(&h, w);
                op.add_bias(&mut y, model.biases[&l].data());
                let mut cache = None;
                if let Some(noise) = local.as_mut() {
                    if let Some(var_w) = noise.variances.get(&l) {
                        var_w.check_shape(&expected, &format!("layer{l} noise variance"))?;
                        let x_sq = h.map(|v| v * v);
                        let var = op.apply(&x_sq, var_w);
                        if var.data().iter().any(|&v| v < 0.0) {
                            return Err(Error::numeric(
                                format!("layer{l} ({})", spec.name()),
                                "negative pre-activation variance",
                            ));
                        }
                        let std = var.map(f64::sqrt);
                        let zeta_data: Vec<f64> = (0..y.len())
                            .map(|_| StandardNormal.sample(&mut *noise.rng))
                            .collect();
                        let zeta = Tensor::new(y.shape().to_vec(), zeta_data)?;
                        for ((o, z), s) in y.data_mut().iter_mut().zip(zeta.data()).zip(std.data())
                        {
                            *o += z * s;
                        }
                        cache = Some(LocalCache {
                            x_sq,
                            var_w: var_w.clone(),
                            zeta,
                            std,
                        });
                    }
                }
                let node = Node::Weighted {
                    layer: l,
                    op,
                    x: h,
                    w: w.clone(),
                    local: cache,
                };
                (y, node)
            }
            LayerSpec::BatchNorm { features } => {
                let state = bn.get_mut(&l).expect("validated bn layer");
                batchnorm(l, &h, features, state, mode)?
            }
            LayerSpec::Relu => {
                let mask: Vec<bool> = h.data().iter().map(|&v| v > 0.0).collect();
                let y = h.map(|v| v.max(0.0));
                (y, Node::Relu { mask })
            }
            LayerSpec::Flatten => {
                let shape = h.shape().to_vec();
                let b = shape[0];
                let y = h.reshape(vec![b, shape[1..].iter().product()])?;
                (y, Node::Flatten { shape })
            }
        };
        if !next.is_finite() {
            return Err(Error::numeric(
                format!("layer{l} ({})", spec.name()),
                "activation is NaN or infinite",
            ));
        }
        nodes.push(node);
        h = next;
    }
    Ok(Forward {
        logits: h,
        features: features.expect("model has at least one layer"),
        bn,
        nodes,
    })
}

pub(crate) fn linear_of(spec: &LayerSpec) -> Linear {
    match *spec {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => Linear::Dense {
            inputs: in_features,
            outputs: out_features,
        },
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
        } => Linear::Conv {
            kh: kernel_h,
            kw: kernel_w,
            cin: in_channels,
            cout: out_channels,
        },
        _ => unreachable!("not a weighted layer"),
    }
}

fn batchnorm(
    layer: usize,
    x: &Tensor,
    features: usize,
    state: &mut BnState,
    mode: Mode,
) -> Result<(Tensor, Node)> {
    let b = x.rows();
    let spatial = x.row_len() / features;
    let n = (b * spatial) as f64;
    let xd = x.data();
    let idx = |s: usize, c: usize, p: usize| (s * features + c) * spatial + p;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; features];
            let mut var = vec![0.0; features];
            for c in 0..features {
                let mut acc = 0.0;
                for s in 0..b {
                    for p in 0..spatial {
                        acc += xd[idx(s, c, p)];
                    }
                }
                let mu = acc / n;
                let mut sq = 0.0;
                for s in 0..b {
                    for p in 0..spatial {
                        let d = xd[idx(s, c, p)] - mu;
                        sq += d * d;
                    }
                }
                mean[c] = mu;
                var[c] = sq / n;
            }
            let m = state.momentum;
            for (r, v) in state.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in state.running_var.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * v;
            }
            (mean, var)
        }
        Mode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gamma = state.gamma.data().to_vec();
    let beta = state.beta.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for s in 0..b {
        for c in 0..features {
            for p in 0..spatial {
                let i = idx(s, c, p);
                xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        Node::Norm {
            layer,
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            gamma,
            train: mode == Mode::Train,
            channels: features,
            spatial,
        },
    ))
}

impl Forward {
    /// Reverse-mode gradients of a scalar loss given `d loss / d logits`.
    ///
    /// Only ids in `trainable` appear in the result. Asking for a parameter
    /// the tape did not record (e.g. a noise variance on a deterministic
    /// layer) is a contract error.
    pub fn backward(
        &self,
        d_logits: &Tensor,
        trainable: &BTreeSet<ParamId>,
    ) -> Result<GradientMap> {
        d_logits.check_shape(self.logits.shape(), "d_logits")?;
        if !d_logits.is_finite() {
            return Err(Error::numeric("loss", "non-finite gradient of the loss"));
        }
        for id in trainable {
            let ok = match (id, self.nodes.get(id.layer())) {
                (ParamId::Weight(_) | ParamId::Bias(_), Some(Node::Weighted { .. })) => true,
                (ParamId::NoiseVariance(_), Some(Node::Weighted { local, .. })) => local.is_some(),
                (ParamId::Gamma(_) | ParamId::Beta(_), Some(Node::Norm { .. })) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::contract(format!(
                    "{id:?} is not on the recorded graph"
                )));
            }
        }
        let lowest = trainable.iter().map(ParamId::layer).min();
        let mut out = GradientMap::default();
        let Some(lowest) = lowest else {
            return Ok(out);
        };
        let mut g = d_logits.clone();
        for (l, node) in self.nodes.iter().enumerate().rev() {
            if l < lowest {
                break;
            }
            let need_input = l > lowest;
            g = match node {
                Node::Weighted {
                    layer,
                    op,
                    x,
                    w,
                    local,
                } => {
                    let layer = *layer;
                    if trainable.contains(&ParamId::Weight(layer)) {
                        out.insert(ParamId::Weight(layer), op.grad_weight(x, &g, w.shape()));
                    }
                    if trainable.contains(&ParamId::Bias(layer)) {
                        out.insert(ParamId::Bias(layer), op.grad_bias(&g));
                    }
                    let d_var = local.as_ref().map(|c| {
                        let data = g
                            .data()
                            .iter()
                            .zip(c.zeta.data())
                            .zip(c.std.data())
                            .map(|((gv, z), s)| if *s > 0.0 { gv * z / (2.0 * s) } else { 0.0 })
                            .collect();
                        Tensor::new(g.shape().to_vec(), data).unwrap()
                    });
                    if let (Some(c), Some(dv)) = (local, &d_var) {
                        if trainable.contains(&ParamId::NoiseVariance(layer)) {
                            out.insert(
                                ParamId::NoiseVariance(layer),
                                op.grad_weight(&c.x_sq, dv, c.var_w.shape()),
                            );
                        }
                    }
                    if !need_input {
                        break;
                    }
                    let mut dx = op.grad_input(&g, w, x.shape());
                    if let (Some(c), Some(dv)) = (local, &d_var) {
                        let dxs = op.grad_input(dv, &c.var_w, x.shape());
                        for ((d, a), xv) in dx.data_mut().iter_mut().zip(dxs.data()).zip(x.data()) {
                            *d += 2.0 * xv * a;
                        }
                    }
                    dx
                }
                Node::Norm {
                    layer,
                    xhat,
                    inv_std,
                    gamma,
                    train,
                    channels,
                    spatial,
                } => {
                    let (c_n, sp) = (*channels, *spatial);
                    let b = g.rows();
                    let n = (b * sp) as f64;
                    let gd = g.data();
                    let xh = xhat.data();
                    let idx = |s: usize, c: usize, p: usize| (s * c_n + c) * sp + p;
                    let mut dgamma = vec![0.0; c_n];
                    let mut dbeta = vec![0.0; c_n];
                    for s in 0..b {
                        for c in 0..c_n {
                            for p in 0..sp {
                                let i = idx(s, c, p);
                                dgamma[c] += gd[i] * xh[i];
                                dbeta[c] += gd[i];
                            }
                        }
                    }
                    if trainable.contains(&ParamId::Gamma(*layer)) {
                        out.insert(ParamId::Gamma(*layer), Tensor::vector(dgamma.clone()));
                    }
                    if trainable.contains(&ParamId::Beta(*layer)) {
                        out.insert(ParamId::Beta(*layer), Tensor::vector(dbeta.clone()));
                    }
                    if !need_input {
                        break;
                    }
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..b {
                        for c in 0..c_n {
                            for p in 0..sp {
                                let i = idx(s, c, p);
                                dx[i] = if *train {
                                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                                    gamma[c] * inv_std[c] / n
                                        * (n * gd[i] - dbeta[c] - xh[i] * dgamma[c])
                                } else {
                                    gd[i] * gamma[c] * inv_std[c]
                                };
                            }
                        }
                    }
                    Tensor::new(g.shape().to_vec(), dx)?
                }
                Node::Relu { mask } => {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(v, &m)| if m { *v } else { 0.0 })
                        .collect();
                    Tensor::new(g.shape().to_vec(), data)?
                }
                Node::Flatten { shape } => g.reshape(shape.clone())?,
            };
        }
        Ok(out)
    }
}
