//! Softmax and categorical cross-entropy, computed with max-subtraction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest probability fed to a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).unwrap()
}

pub fn log_softmax(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).unwrap()
}

/// Pulls a gradient with respect to probabilities back through softmax.
pub fn softmax_backward(probs: &Tensor, d_probs: &Tensor) -> Tensor {
    let k = probs.row_len();
    let mut out = vec![0.0; probs.len()];
    for ((p, dp), o) in probs
        .data()
        .chunks_exact(k)
        .zip(d_probs.data().chunks_exact(k))
        .zip(out.chunks_exact_mut(k))
    {
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for ((ov, pv), dv) in o.iter_mut().zip(p).zip(dp) {
            *ov = pv * (dv - dot);
        }
    }
    Tensor::new(probs.shape().to_vec(), out).unwrap()
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::dim(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    softmax_cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits, `(p - onehot) / B`.
pub fn softmax_cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = (logits.rows(), logits.row_len());
    check_labels(labels, b, k)?;
    let logp = log_softmax(logits);
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logp.row(i)[y])
        .sum::<f64>()
        / b as f64;
    let mut grad = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad.data_mut()[i * k + y] -= 1.0;
    }
    let inv_b = 1.0 / b as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv_b);
    Ok((loss, grad))
}
