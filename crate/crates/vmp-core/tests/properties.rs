use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmp_core::container::{
    model_from_container, model_to_container, perturbation_from_container,
    perturbation_to_container, Container,
};
use vmp_core::domains::{split_source, LabeledData};
use vmp_core::nn::{mlp, SourceModel};
use vmp_core::perturbation::{adaptive_prior, kl_divergence, PerturbationSet, SharingKind};
use vmp_core::protocols::{harmonic_mean, Adapter, Method, Protocol, ProtocolConfig};
use vmp_core::Tensor;

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

fn container() -> impl Strategy<Value = Container> {
    prop::collection::btree_map("[a-z.]{1,12}", tensor(), 0..6).prop_map(|entries| {
        let mut c = Container::default();
        for (k, v) in entries {
            c.insert(k, v);
        }
        c
    })
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn container_round_trip_is_bit_exact(c in container()) {
        let bytes = c.encode().unwrap();
        let back = Container::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.entries.len(), c.entries.len());
        for (k, t) in &c.entries {
            let u = back.get(k).unwrap();
            prop_assert_eq!(u.shape(), t.shape());
            prop_assert_eq!(bits(u), bits(t));
        }
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncated_containers_are_rejected(c in container(), cut in any::<prop::sample::Index>()) {
        let bytes = c.encode().unwrap();
        let k = cut.index(bytes.len());
        prop_assert!(Container::decode(&bytes[..k], Path::new("mem")).is_err());
    }

    #[test]
    fn harmonic_mean_matches_formula_and_bounds(s in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        let h = harmonic_mean(s, t);
        if s + t > 0.0 {
            prop_assert!((h - 2.0 * s * t / (s + t)).abs() <= 1e-15);
        }
        prop_assert_eq!(h, harmonic_mean(t, s));
        prop_assert!(h <= s.max(t) + 1e-15 && h >= 0.0);
        prop_assert!(h <= (s + t) / 2.0 + 1e-15);
    }

    #[test]
    fn source_split_is_a_disjoint_stratified_partition(
        counts in prop::collection::vec(2usize..40, 1..5),
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
        let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64]).collect();
        let data = LabeledData { inputs: Tensor::from_rows(&rows).unwrap(), labels: labels.clone() };
        let (train, hold) = split_source(&data, fraction, seed).unwrap();
        let ids = |d: &LabeledData| -> BTreeSet<usize> { d.inputs.data().iter().map(|&v| v as usize).collect() };
        let (a, b) = (ids(&train), ids(&hold));
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), labels.len());
        for (i, l) in train.inputs.data().iter().zip(&train.labels) {
            prop_assert_eq!(labels[*i as usize], *l);
        }
        for c in 0..counts.len() {
            prop_assert!(train.labels.contains(&c) && hold.labels.contains(&c));
        }
        prop_assert_eq!(split_source(&data, fraction, seed).unwrap().0.labels, train.labels);
    }

    #[test]
    fn kl_is_non_negative_and_zero_at_the_prior(rho in -30.0f64..5.0, lambda in 0.1f64..10.0, seed in 0u64..50) {
        let model = SourceModel::init(vec![3], mlp(3, &[4], 2, false), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let prior = adaptive_prior(&model, lambda).unwrap();
        let mut pert = PerturbationSet::init(&model, SharingKind::PerOutputChannel, rho);
        let kl = kl_divergence(&pert, &prior).unwrap();
        prop_assert!(kl.is_finite() && kl >= 0.0);
        let per_group = prior.for_scheme(&pert.scheme).unwrap();
        for (l, v) in per_group {
            let r = pert.rho.get_mut(&l).unwrap();
            *r = Tensor::new(r.shape().to_vec(), v.data().iter().map(|x| x.ln()).collect()).unwrap();
        }
        prop_assert!(kl_divergence(&pert, &prior).unwrap().abs() < 1e-9);
    }

    #[test]
    fn perturbation_adaptation_never_touches_source_weights(seed in 0u64..1000, online in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SourceModel::init(vec![2], mlp(2, &[6], 3, true), &mut rng).unwrap();
        let protocol = if online { Protocol::ContinualOnline } else { Protocol::Offline };
        let cfg = ProtocolConfig { seed, method: Method::Perturbation, ..ProtocolConfig::for_protocol(protocol) };
        let batch = Tensor::new(vec![8, 2], (0..16).map(|i| ((i * 7 + seed as usize) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let mut adapter = Adapter::new(&model, &cfg, 8).unwrap();
        let pl = if adapter.needs_pseudo_labels() { Some(adapter.pseudo_labels(&batch).unwrap()) } else { None };
        for _ in 0..3 {
            adapter.step(&batch, pl.as_deref()).unwrap();
        }
        for (l, w) in &model.weights {
            prop_assert_eq!(bits(&adapter.model.weights[l]), bits(w));
            prop_assert_eq!(bits(&adapter.model.biases[l]), bits(&model.biases[l]));
        }
        // BN affine parameters move only when the protocol trains them.
        let moved = model.bn.iter().any(|(l, s)| bits(&adapter.model.bn[l].gamma) != bits(&s.gamma));
        prop_assert!(online || !moved);
        let init = PerturbationSet::init(&model, cfg.perturbation.sharing, cfg.perturbation.rho_init);
        let changed = adapter.perturbation.as_ref().unwrap().rho.iter().any(|(l, r)| bits(r) != bits(&init.rho[l]));
        prop_assert!(changed);
    }

    #[test]
    fn model_and_perturbation_containers_round_trip(seed in 0u64..1000, rho in -20.0f64..2.0) {
        let model = SourceModel::init(vec![1, 4, 4], vmp_core::nn::convnet(&[1, 4, 4], &[2], 3, 2, true), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = model_from_container(&model_to_container(&model).unwrap()).unwrap();
        prop_assert_eq!(&back.layers, &model.layers);
        for (l, w) in &model.weights {
            prop_assert_eq!(bits(&back.weights[l]), bits(w));
        }
        let pert = PerturbationSet::init(&model, SharingKind::PerWeight, rho);
        let p = perturbation_from_container(&perturbation_to_container(&pert), &model).unwrap();
        for (l, r) in &pert.rho {
            prop_assert_eq!(bits(&p.rho[l]), bits(r));
        }
    }
}
