use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, Adapter, Protocol, ProtocolConfig, RunMetrics};
use crate::domains::{generate, Corruption, DatasetKind, DatasetSpec, LabeledData, ShiftSpec};
use crate::error::{Error, Result};
use crate::nn::SourceModel;
use crate::objectives::Likelihood;
use crate::tensor::Tensor;

/// One labelled batch of the stream. Labels are used for scoring only.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub domain_id: String,
    pub corruption: Corruption,
    pub severity: u8,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub domain_id: String,
    pub corruption: Corruption,
    pub severity: u8,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceRow>,
    /// Mean batch error per domain, in order of first appearance.
    pub domain_errors: Vec<(String, f64)>,
    pub adapter: Adapter,
}

impl ContinualOutcome {
    pub fn mean_error(&self) -> f64 {
        if self.domain_errors.is_empty() {
            return 0.0;
        }
        self.domain_errors.iter().map(|(_, e)| e).sum::<f64>() / self.domain_errors.len() as f64
    }
}

/// Predict-then-adapt over an ordered stream. Every batch is scored with
/// state that has not seen it, then used for exactly one step.
pub fn run_continual_stream(
    model: &SourceModel,
    stream: &[StreamBatch],
    cfg: &ProtocolConfig,
) -> Result<ContinualOutcome> {
    if cfg.protocol != Protocol::ContinualOnline {
        return Err(Error::contract(
            "run_continual_stream needs the continual_online protocol",
        ));
    }
    let total: usize = stream.iter().map(|b| b.inputs.rows()).sum();
    let mut adapter = Adapter::new(model, cfg, total.max(1))?;
    let mut trace = Vec::with_capacity(stream.len());
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut hits = 0.0;
    for (step, b) in stream.iter().enumerate() {
        if b.inputs.rows() != b.labels.len() || b.labels.is_empty() {
            return Err(Error::contract(format!(
                "stream batch {step} is empty or misaligned"
            )));
        }
        let acc = accuracy(&adapter.predict(&b.inputs)?, &b.labels);
        let error = 1.0 - acc;
        hits += acc * b.labels.len() as f64;
        trace.push(TraceRow {
            step,
            domain_id: b.domain_id.clone(),
            corruption: b.corruption,
            severity: b.severity,
            error,
        });
        let slot = sums.entry(b.domain_id.clone()).or_insert_with(|| {
            order.push(b.domain_id.clone());
            (0.0, 0)
        });
        slot.0 += error;
        slot.1 += 1;

        let single_ok = cfg.objective.likelihood == Likelihood::Entropy;
        if b.inputs.rows() >= 2 || single_ok {
            let pl = if adapter.needs_pseudo_labels() {
                Some(adapter.pseudo_labels(&b.inputs)?)
            } else {
                None
            };
            adapter.step(&b.inputs, pl.as_deref())?;
        }
    }
    let domain_errors: Vec<(String, f64)> = order
        .into_iter()
        .map(|d| {
            let (s, c) = sums[&d];
            (d, s / c as f64)
        })
        .collect();
    let metrics = RunMetrics {
        per_domain_accuracy: domain_errors
            .iter()
            .map(|(d, e)| (d.clone(), 1.0 - e))
            .collect(),
        source_accuracy: None,
        target_accuracy: if total > 0 { hits / total as f64 } else { 0.0 },
        harmonic: None,
        source_accuracy_source_bn: None,
        sigma_l1_per_layer: adapter
            .perturbation
            .as_ref()
            .map(|p| {
                super::sigma_l1_per_layer(p)
                    .into_iter()
                    .map(|(l, v)| (format!("layer{l}"), v))
                    .collect()
            })
            .unwrap_or_default(),
        a_distance: None,
        wall_clock: 0.0,
    };
    Ok(ContinualOutcome {
        metrics,
        trace,
        domain_errors,
        adapter,
    })
}

/// Stream settings for the synthetic corruption benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionStreamSpec {
    pub classes: usize,
    /// Samples per class and domain.
    pub n_per_class: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub corruptions: Vec<Corruption>,
    pub severities: Vec<u8>,
    pub seed: u64,
}

impl Default for CorruptionStreamSpec {
    fn default() -> Self {
        CorruptionStreamSpec {
            classes: 4,
            n_per_class: 128,
            batch_size: 16,
            noise_sigma: 0.1,
            corruptions: Corruption::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            seed: 0,
        }
    }
}

/// Tinygrid domains, corruption-major then severity, each shuffled and cut
/// into batches. Domain ids are `"<corruption>-<severity>"`.
pub fn corruption_stream(spec: &CorruptionStreamSpec) -> Result<Vec<StreamBatch>> {
    if spec.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut domain = 0u64;
    for &corruption in &spec.corruptions {
        for &severity in &spec.severities {
            let data: LabeledData = generate(&DatasetSpec {
                kind: DatasetKind::Tinygrid,
                n_per_class: spec.n_per_class,
                classes: spec.classes,
                shift: ShiftSpec {
                    noise_sigma: spec.noise_sigma,
                    corruption,
                    severity,
                    ..Default::default()
                },
                seed: spec.seed.wrapping_mul(1000).wrapping_add(domain),
            })?;
            domain += 1;
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            for chunk in idx.chunks(spec.batch_size) {
                let part = data.select(chunk);
                out.push(StreamBatch {
                    domain_id: format!("{corruption}-{severity}"),
                    corruption,
                    severity,
                    inputs: part.inputs,
                    labels: part.labels,
                });
            }
        }
    }
    Ok(out)
}
