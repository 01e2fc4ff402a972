use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, batches};
use crate::domains::LabeledData;
use crate::error::{Error, Result};
use crate::nn::{
    forward, softmax, softmax_cross_entropy_with_grad, LayerSpec, Mode, Optimizer, OptimizerConfig,
    SourceModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stop after this many epochs without a new best train accuracy.
    pub patience: usize,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig {
                lr: 0.05,
                ..Default::default()
            },
            seed: 0,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Eval-mode accuracy of a deterministic model.
pub(crate) fn model_accuracy(model: &SourceModel, data: &LabeledData) -> Result<f64> {
    let f = forward(model, &model.weights, &data.inputs, Mode::Eval)?;
    Ok(accuracy(&softmax(&f.logits), &data.labels))
}

/// Minibatch training on softmax cross-entropy. Deterministic given the seed.
pub fn train_source(
    data: &LabeledData,
    input_shape: Vec<usize>,
    arch: Vec<LayerSpec>,
    cfg: &SourceTrainConfig,
) -> Result<(SourceModel, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(Error::contract("source dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SourceModel::init(input_shape, arch, &mut rng)?;
    let k = model.num_classes();
    if let Some(bad) = data.labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let trainable = model.all_param_ids();
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut best = -1.0;
    let mut stale = 0;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in batches(&order, cfg.batch_size) {
            // A lone trailing sample gives degenerate batch statistics.
            if idx.len() == 1 && order.len() > 1 {
                continue;
            }
            let batch = data.select(idx);
            let wrap = |e: Error| match e {
                Error::Numeric { layer, detail } => {
                    Error::numeric(format!("source training step {step}, {layer}"), detail)
                }
                other => other,
            };
            let fwd = forward(&model, &model.weights, &batch.inputs, Mode::Train).map_err(wrap)?;
            let (loss, d_logits) = softmax_cross_entropy_with_grad(&fwd.logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::numeric(
                    format!("source training step {step}"),
                    format!("loss = {loss}"),
                ));
            }
            let grads = fwd.backward(&d_logits, &trainable).map_err(wrap)?;
            let mut params = model.collect_params(&trainable)?;
            opt.step(&mut params, &grads)?;
            model.bn = fwd.bn;
            model.apply_params(&params)?;
            total += loss * idx.len() as f64;
            seen += idx.len();
            step += 1;
        }
        let train_acc = model_accuracy(&model, data)?;
        log.push(EpochLog {
            epoch,
            loss: total / seen.max(1) as f64,
            train_acc,
        });
        if train_acc > best {
            best = train_acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((model, log))
}
