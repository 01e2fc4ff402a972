use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::analysis::{a_distance, sigma_l1_per_layer};
use super::{accuracy, batches, harmonic_mean, Adapter, Protocol, ProtocolConfig, RunMetrics};
use crate::domains::LabeledData;
use crate::error::{Error, Result};
use crate::nn::{forward, Mode, SourceModel};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x0ff1_11e5;

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub adapter: Adapter,
    /// Mean objective value per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Multi-epoch adaptation on the whole (unlabeled) target set.
///
/// Pseudo-labels, when the likelihood uses them, are refreshed at the
/// start of every epoch. Source weights are never written.
pub fn adapt_offline(
    model: &SourceModel,
    target: &Tensor,
    cfg: &ProtocolConfig,
) -> Result<OfflineOutcome> {
    if cfg.protocol == Protocol::ContinualOnline {
        return Err(Error::contract(
            "adapt_offline needs the offline or generalized protocol",
        ));
    }
    let n = target.rows();
    if n == 0 {
        return Err(Error::contract("target set is empty"));
    }
    let mut adapter = Adapter::new(model, cfg, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let labels = if adapter.needs_pseudo_labels() {
            Some(adapter.pseudo_labels(target)?)
        } else {
            None
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in batches(&order, cfg.batch_size) {
            // Batch statistics and the diversity term need two samples.
            if idx.len() < 2 {
                continue;
            }
            let batch = target.select_rows(idx);
            let pl: Option<Vec<usize>> =
                labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
            total += adapter.step(&batch, pl.as_deref())? * idx.len() as f64;
            count += idx.len();
        }
        epoch_loss.push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    Ok(OfflineOutcome {
        adapter,
        epoch_loss,
    })
}

/// Source-holdout and target accuracies of an adapted model.
///
/// Accuracies use Monte Carlo predictions; the source figure is also
/// reported with the pre-adaptation BN statistics. The A-distance is
/// measured on the source model's features of both splits.
pub fn eval_generalized(
    source_model: &SourceModel,
    adapter: &mut Adapter,
    source_holdout: &LabeledData,
    target: &LabeledData,
) -> Result<RunMetrics> {
    if source_holdout.is_empty() || target.is_empty() {
        return Err(Error::contract("evaluation splits must be non-empty"));
    }
    let source_acc = accuracy(
        &adapter.predict(&source_holdout.inputs)?,
        &source_holdout.labels,
    );
    let target_acc = accuracy(&adapter.predict(&target.inputs)?, &target.labels);
    let adapted_bn = std::mem::replace(&mut adapter.model.bn, source_model.bn.clone());
    let with_source_bn = adapter.predict(&source_holdout.inputs);
    adapter.model.bn = adapted_bn;
    let source_acc_source_bn = accuracy(&with_source_bn?, &source_holdout.labels);

    let a_dist = if source_holdout.len() >= 2 && target.len() >= 2 {
        let fs = forward(
            source_model,
            &source_model.weights,
            &source_holdout.inputs,
            Mode::Eval,
        )?;
        let ft = forward(
            source_model,
            &source_model.weights,
            &target.inputs,
            Mode::Eval,
        )?;
        Some(a_distance(&fs.features, &ft.features, adapter.config.seed)?)
    } else {
        None
    };
    let sigma = adapter
        .perturbation
        .as_ref()
        .map(|p| {
            sigma_l1_per_layer(p)
                .into_iter()
                .map(|(l, v)| (format!("layer{l}"), v))
                .collect()
        })
        .unwrap_or_default();
    Ok(RunMetrics {
        per_domain_accuracy: BTreeMap::from([
            ("source_holdout".to_string(), source_acc),
            ("target".to_string(), target_acc),
        ]),
        source_accuracy: Some(source_acc),
        target_accuracy: target_acc,
        harmonic: Some(harmonic_mean(source_acc, target_acc)),
        source_accuracy_source_bn: Some(source_acc_source_bn),
        sigma_l1_per_layer: sigma,
        a_distance: a_dist,
        wall_clock: 0.0,
    })
}
