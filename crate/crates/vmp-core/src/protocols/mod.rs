//! Evaluation protocols (offline, generalized, continual online) and the
//! analysis utilities used to read their results.

mod adapter;
mod analysis;
mod continual;
mod offline;
mod source;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::objectives::{Likelihood, ObjectiveConfig};
use crate::perturbation::{SharingKind, RHO_INIT};
use crate::tensor::Tensor;

pub use adapter::Adapter;
pub use analysis::{a_distance, sigma_l1_per_layer, sigma_l1_total};
pub use continual::{
    corruption_stream, run_continual_stream, ContinualOutcome, CorruptionStreamSpec, StreamBatch,
    TraceRow,
};
pub use offline::{adapt_offline, eval_generalized, OfflineOutcome};
pub use source::{train_source, EpochLog, SourceTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Offline,
    Generalized,
    ContinualOnline,
}

/// What adaptation is allowed to change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Learn perturbation log-variances; source weights stay frozen.
    Perturbation,
    /// Baseline: update every weight, bias and BN affine parameter.
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PriorChoice {
    /// Per-kernel `lambda * Var(w_s)`.
    Adaptive {
        lambda: f64,
    },
    Isotropic {
        variance: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub sharing: SharingKind,
    pub rho_init: f64,
    pub prior: PriorChoice,
    /// Local reparameterization during adaptation; weight sampling otherwise.
    pub local_reparam: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            sharing: SharingKind::PerOutputChannel,
            rho_init: RHO_INIT,
            prior: PriorChoice::Adaptive { lambda: 1.0 },
            local_reparam: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub method: Method,
    /// Passes over the target set (offline/generalized). Continual runs
    /// always take exactly one step per batch.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub perturbation: PerturbationConfig,
    pub mc_eval_samples: usize,
    pub train_bn_affine: bool,
}

impl ProtocolConfig {
    /// Defaults for a protocol: info-max plus pseudo-labels offline,
    /// entropy with BN affine training online.
    pub fn for_protocol(protocol: Protocol) -> Self {
        let online = protocol == Protocol::ContinualOnline;
        ProtocolConfig {
            protocol,
            method: Method::Perturbation,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            objective: ObjectiveConfig {
                likelihood: if online {
                    Likelihood::Entropy
                } else {
                    Likelihood::InfoMaxPlusPseudo
                },
                ..Default::default()
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adaptive,
                lr: if online { 1e-2 } else { 5e-2 },
                momentum: 0.9,
                weight_decay: 0.0,
            },
            perturbation: PerturbationConfig::default(),
            mc_eval_samples: 10,
            train_bn_affine: online,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if self.mc_eval_samples == 0 {
            return Err(Error::contract("mc_eval_samples must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::contract("optimizer lr must be > 0"));
        }
        Ok(())
    }
}

/// Metrics of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_domain_accuracy: BTreeMap<String, f64>,
    /// Absent for the continual protocol, which has no source split.
    pub source_accuracy: Option<f64>,
    pub target_accuracy: f64,
    /// Present exactly when `source_accuracy` is.
    pub harmonic: Option<f64>,
    /// Source accuracy evaluated with the pre-adaptation BN statistics.
    pub source_accuracy_source_bn: Option<f64>,
    pub sigma_l1_per_layer: BTreeMap<String, f64>,
    pub a_distance: Option<f64>,
    pub wall_clock: f64,
}

/// `2st / (s + t)`, or 0 when both are 0.
pub fn harmonic_mean(source: f64, target: f64) -> f64 {
    if source + target > 0.0 {
        2.0 * source * target / (source + target)
    } else {
        0.0
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / labels.len() as f64
}

/// Splits `0..n` into consecutive batches of `size` (last may be shorter).
pub(crate) fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}
