use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default BN moving-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Layer-id keyed tensors; layer ids are positions in [`SourceModel::layers`].
pub type WeightMap = BTreeMap<usize, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    /// Weight layout `(in_features, out_features)`.
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Stride 1, zero "same" padding. Kernel layout `(kernel_h, kernel_w, in_channels, out_channels)`.
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
    },
    /// Normalizes features of a `(B, F)` input or channels of a `(B, C, H, W)` input.
    BatchNorm {
        features: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Dense and conv layers carry a weight tensor; these are the perturbable layers.
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some(vec![in_features, out_features]),
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => Some(vec![kernel_h, kernel_w, in_channels, out_channels]),
            _ => None,
        }
    }

    /// Number of output units (dense) or output channels (conv).
    pub fn out_units(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { out_features, .. } => Some(out_features),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Error::dim(format!(
                "{} layer cannot take input {input:?}: {what}",
                self.name()
            ))
        };
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(bad(&format!("expects [{in_features}]")));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => {
                if kernel_h == 0 || kernel_w == 0 || in_channels == 0 || out_channels == 0 {
                    return Err(bad("kernel dims must be >= 1"));
                }
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad(&format!("expects [{in_channels}, H, W]")));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerSpec::BatchNorm { features } => {
                if input.is_empty()
                    || input[0] != features
                    || !(input.len() == 1 || input.len() == 3)
                {
                    return Err(bad(&format!("expects [{features}] or [{features}, H, W]")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub momentum: f64,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            momentum: BN_MOMENTUM,
        }
    }
}

/// Identifies a trainable quantity on the recorded graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
    /// Per-weight noise variance of a layer run with local reparameterization.
    NoiseVariance(usize),
    /// Log-variance of the perturbation groups of a layer.
    Rho(usize),
}

impl ParamId {
    pub fn layer(&self) -> usize {
        match *self {
            ParamId::Weight(l)
            | ParamId::Bias(l)
            | ParamId::Gamma(l)
            | ParamId::Beta(l)
            | ParamId::NoiseVariance(l)
            | ParamId::Rho(l) => l,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    pub grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.grads.get(id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamId> {
        self.grads.keys()
    }

    /// Adds `scale * other` into `self`, inserting missing keys.
    pub fn accumulate(&mut self, other: &GradientMap, scale: f64) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    self.grads.insert(*id, g.map(|v| scale * v));
                }
            }
        }
    }
}

/// Frozen point-estimate network trained on the source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    /// Per-sample input shape, e.g. `[2]` or `[1, 8, 8]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub weights: WeightMap,
    pub biases: WeightMap,
    pub bn: BTreeMap<usize, BnState>,
}

impl SourceModel {
    /// Glorot-uniform weights, zero biases, identity BN.
    pub fn init<R: Rng + ?Sized>(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        layer_shapes(&input_shape, &layers)?;
        check_head(&layers)?;
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        let mut bn = BTreeMap::new();
        for (l, spec) in layers.iter().enumerate() {
            match *spec {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let shape = spec.weight_shape().expect("weighted layer");
                    let (fan_in, fan_out) = fans(spec);
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
                    weights.insert(l, Tensor::new(shape, data)?);
                    biases.insert(l, Tensor::zeros(&[spec.out_units().unwrap()]));
                }
                LayerSpec::BatchNorm { features } => {
                    bn.insert(l, BnState::new(features));
                }
                _ => {}
            }
        }
        Ok(SourceModel {
            input_shape,
            layers,
            weights,
            biases,
            bn,
        })
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    /// Width of the penultimate activation (input of the classifier layer).
    pub fn feature_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { in_features, .. }) => *in_features,
            _ => 0,
        }
    }

    /// Ids of the dense/conv layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_weights())
            .map(|(l, _)| l)
            .collect()
    }

    pub fn bn_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, LayerSpec::BatchNorm { .. }))
            .map(|(l, _)| l)
            .collect()
    }

    pub fn total_weights(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        layer_shapes(&self.input_shape, &self.layers)?;
        check_head(&self.layers)?;
        let weighted: BTreeSet<usize> = self.weighted_layers().into_iter().collect();
        let bn_ids: BTreeSet<usize> = self.bn_layers().into_iter().collect();
        let wkeys: BTreeSet<usize> = self.weights.keys().copied().collect();
        let bkeys: BTreeSet<usize> = self.biases.keys().copied().collect();
        let nkeys: BTreeSet<usize> = self.bn.keys().copied().collect();
        if wkeys != weighted || bkeys != weighted {
            return Err(Error::Mismatch(
                "weights/biases must be keyed exactly by the dense/conv layer ids".into(),
            ));
        }
        if nkeys != bn_ids {
            return Err(Error::Mismatch(
                "bn state must be keyed exactly by the batchnorm layer ids".into(),
            ));
        }
        for &l in &weighted {
            let spec = &self.layers[l];
            self.weights[&l]
                .check_shape(&spec.weight_shape().unwrap(), &format!("layer{l} weight"))?;
            self.biases[&l].check_shape(&[spec.out_units().unwrap()], &format!("layer{l} bias"))?;
        }
        for (&l, st) in &self.bn {
            let LayerSpec::BatchNorm { features } = self.layers[l] else {
                unreachable!()
            };
            for (t, what) in [
                (&st.running_mean, "running_mean"),
                (&st.running_var, "running_var"),
                (&st.gamma, "gamma"),
                (&st.beta, "beta"),
            ] {
                t.check_shape(&[features], &format!("layer{l} {what}"))?;
            }
            if st.running_var.data().iter().any(|&v| v < 0.0) {
                return Err(Error::contract(format!("layer{l} running_var is negative")));
            }
            if !(st.momentum > 0.0 && st.momentum < 1.0) {
                return Err(Error::contract(format!(
                    "layer{l} momentum {} outside (0,1)",
                    st.momentum
                )));
            }
        }
        Ok(())
    }

    /// Copies the requested parameters out of the model.
    pub fn collect_params(&self, ids: &BTreeSet<ParamId>) -> Result<BTreeMap<ParamId, Tensor>> {
        ids.iter()
            .map(|id| {
                let t = match *id {
                    ParamId::Weight(l) => self.weights.get(&l),
                    ParamId::Bias(l) => self.biases.get(&l),
                    ParamId::Gamma(l) => self.bn.get(&l).map(|s| &s.gamma),
                    ParamId::Beta(l) => self.bn.get(&l).map(|s| &s.beta),
                    _ => None,
                };
                t.cloned()
                    .map(|t| (*id, t))
                    .ok_or_else(|| Error::contract(format!("{id:?} is not a model parameter")))
            })
            .collect()
    }

    /// Writes parameters back; ids must name model parameters.
    pub fn apply_params(&mut self, params: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        for (id, t) in params {
            let slot = match *id {
                ParamId::Weight(l) => self.weights.get_mut(&l),
                ParamId::Bias(l) => self.biases.get_mut(&l),
                ParamId::Gamma(l) => self.bn.get_mut(&l).map(|s| &mut s.gamma),
                ParamId::Beta(l) => self.bn.get_mut(&l).map(|s| &mut s.beta),
                _ => None,
            }
            .ok_or_else(|| Error::contract(format!("{id:?} is not a model parameter")))?;
            *slot = t.clone();
        }
        Ok(())
    }

    /// Ids of every weight and bias plus BN affine parameters.
    pub fn all_param_ids(&self) -> BTreeSet<ParamId> {
        let mut ids: BTreeSet<ParamId> = self
            .weighted_layers()
            .into_iter()
            .flat_map(|l| [ParamId::Weight(l), ParamId::Bias(l)])
            .collect();
        ids.extend(self.bn_affine_ids());
        ids
    }

    pub fn bn_affine_ids(&self) -> BTreeSet<ParamId> {
        self.bn_layers()
            .into_iter()
            .flat_map(|l| [ParamId::Gamma(l), ParamId::Beta(l)])
            .collect()
    }
}

fn fans(spec: &LayerSpec) -> (usize, usize) {
    match *spec {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => (in_features, out_features),
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
        } => {
            let k = kernel_h * kernel_w;
            (k * in_channels, k * out_channels)
        }
        _ => (0, 0),
    }
}

fn check_head(layers: &[LayerSpec]) -> Result<()> {
    match layers.last() {
        Some(LayerSpec::Dense { .. }) => Ok(()),
        _ => Err(Error::dim("the final layer must be a dense classifier")),
    }
}

/// Per-sample input shapes of every layer followed by the output shape.
pub fn layer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input.is_empty() || input.contains(&0) {
        return Err(Error::dim(format!("invalid input shape {input:?}")));
    }
    let mut shapes = vec![input.to_vec()];
    for (l, spec) in layers.iter().enumerate() {
        let next = spec
            .output_shape(shapes.last().unwrap())
            .map_err(|e| Error::dim(format!("layer{l}: {e}")))?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Fully connected network `in -> hidden... -> classes`, with optional BN after each hidden dense layer.
pub fn mlp(
    in_features: usize,
    hidden: &[usize],
    classes: usize,
    batchnorm: bool,
) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = in_features;
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            in_features: prev,
            out_features: h,
        });
        if batchnorm {
            layers.push(LayerSpec::BatchNorm { features: h });
        }
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::Dense {
        in_features: prev,
        out_features: classes,
    });
    layers
}

/// Small convnet: `conv3x3 -> [BN] -> relu` per entry of `channels`, then a dense bottleneck and classifier.
pub fn convnet(
    input_shape: &[usize],
    channels: &[usize],
    bottleneck: usize,
    classes: usize,
    batchnorm: bool,
) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut c = input_shape[0];
    for &out in channels {
        layers.push(LayerSpec::Conv2d {
            kernel_h: 3,
            kernel_w: 3,
            in_channels: c,
            out_channels: out,
        });
        if batchnorm {
            layers.push(LayerSpec::BatchNorm { features: out });
        }
        layers.push(LayerSpec::Relu);
        c = out;
    }
    layers.push(LayerSpec::Flatten);
    let flat = c * input_shape[1..].iter().product::<usize>();
    layers.extend(mlp(flat, &[bottleneck], classes, batchnorm));
    layers
}
