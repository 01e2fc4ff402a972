use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    forward, softmax_cross_entropy_with_grad, LayerSpec, Mode, Optimizer, OptimizerConfig,
    OptimizerKind, SourceModel,
};
use crate::perturbation::PerturbationSet;
use crate::tensor::Tensor;

/// `sum_g m_g * sigma_g` per perturbed layer, i.e. the l1 norm of the
/// per-weight standard deviations.
pub fn sigma_l1_per_layer(pert: &PerturbationSet) -> BTreeMap<usize, f64> {
    pert.rho
        .keys()
        .map(|&l| {
            let mult = pert.scheme.multiplicity(l);
            let total = pert
                .sigma(l)
                .iter()
                .zip(&mult)
                .map(|(s, &m)| s * m as f64)
                .sum();
            (l, total)
        })
        .collect()
}

pub fn sigma_l1_total(pert: &PerturbationSet) -> f64 {
    sigma_l1_per_layer(pert).values().sum()
}

const DOMAIN_EPOCHS: usize = 300;

/// Proxy A-distance `2 (1 - 2 err)` of a logistic-regression domain
/// classifier trained on half of the pooled features, clamped to `[0, 2]`.
/// The larger domain is subsampled to the size of the smaller one so that
/// a majority-class guess scores an error of one half.
pub fn a_distance(source: &Tensor, target: &Tensor, seed: u64) -> Result<f64> {
    if source.rows() < 2 || target.rows() < 2 {
        return Err(Error::contract(
            "a_distance needs at least 2 samples per domain",
        ));
    }
    if source.row_len() != target.row_len() {
        return Err(Error::dim(format!(
            "feature widths differ: {} vs {}",
            source.row_len(),
            target.row_len()
        )));
    }
    let dim = source.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n = source.rows().min(target.rows());
    for (domain, feats) in [source, target].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..feats.rows()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        let half = n / 2;
        train.extend(idx[..half].iter().map(|&i| (feats.row(i).to_vec(), domain)));
        test.extend(idx[half..].iter().map(|&i| (feats.row(i).to_vec(), domain)));
    }
    let (mean, std) = standardizer(&train, dim);
    let pack = |rows: &[(Vec<f64>, usize)]| -> Result<(Tensor, Vec<usize>)> {
        let x: Vec<Vec<f64>> = rows
            .iter()
            .map(|(r, _)| {
                r.iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect();
        Ok((
            Tensor::from_rows(&x)?,
            rows.iter().map(|(_, d)| *d).collect(),
        ))
    };
    let (x_train, y_train) = pack(&train)?;
    let (x_test, y_test) = pack(&test)?;

    let layers = vec![LayerSpec::Dense {
        in_features: dim,
        out_features: 2,
    }];
    let mut clf = SourceModel::init(vec![dim], layers, &mut rng)?;
    let ids = clf.all_param_ids();
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Sgd,
        lr: 0.5,
        momentum: 0.9,
        weight_decay: 1e-4,
    })?;
    for _ in 0..DOMAIN_EPOCHS {
        let fwd = forward(&clf, &clf.weights, &x_train, Mode::Train)?;
        let (_, d) = softmax_cross_entropy_with_grad(&fwd.logits, &y_train)?;
        let grads = fwd.backward(&d, &ids)?;
        let mut params = clf.collect_params(&ids)?;
        opt.step(&mut params, &grads)?;
        clf.apply_params(&params)?;
    }
    let logits = forward(&clf, &clf.weights, &x_test, Mode::Eval)?.logits;
    let wrong = logits
        .argmax_rows()
        .iter()
        .zip(&y_test)
        .filter(|(p, y)| p != y)
        .count();
    let err = wrong as f64 / y_test.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

fn standardizer(rows: &[(Vec<f64>, usize)], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for (r, _) in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for (r, _) in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let std = var
        .iter()
        .map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, std)
}
