//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines show up in plain
//! `cargo test` output. A criterion that panics always fails the run; a
//! criterion that misses its threshold fails the run only when
//! `VMP_ACCEPTANCE_STRICT=1`, so the verdicts stay visible in a green
//! `cargo test --workspace`.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vmp_core::cli::{cmd_adapt, cmd_stream, cmd_train_source};
use vmp_core::config::RunConfig;
use vmp_core::container::Container;
use vmp_core::domains::{generate, split_source, DatasetKind, DatasetSpec, LabeledData, ShiftSpec};
use vmp_core::nn::{convnet, forward, mlp, softmax, LayerSpec, Mode, ParamId, SourceModel};
use vmp_core::objectives::{
    compute_pseudo_labels, Likelihood, NoisePath, Objective, ObjectiveConfig,
};
use vmp_core::perturbation::{
    adaptive_prior, elbo_equivalence_check, isotropic_prior, kl_divergence, local_reparam_dense,
    predict_mc, predict_source, sample_weights, PerturbationSet, SharingKind,
};
use vmp_core::protocols::{
    a_distance, adapt_offline, corruption_stream, eval_generalized, harmonic_mean,
    run_continual_stream, sigma_l1_total, train_source, CorruptionStreamSpec, Method, Protocol,
    ProtocolConfig, SourceTrainConfig,
};
use vmp_core::Tensor;

const SEEDS: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [Criterion; 12] = [
        (1, "gradient oracle", 30, c01_gradient_oracle),
        (2, "KL correctness", 60, c02_kl_monte_carlo),
        (3, "source recovery", 10, c03_source_recovery),
        (4, "change-of-variables equivalence", 10, c04_equivalence),
        (5, "local reparameterization", 30, c05_local_reparam),
        (6, "adaptation efficacy", 300, c06_efficacy),
        (7, "knowledge preservation", 600, c07_preservation),
        (8, "continual stability", 600, c08_continual),
        (9, "sigma/gap coupling", 600, c09_sigma_gap),
        (10, "parameter-sharing accounting", 1, c10_sharing_counts),
        (11, "harmonic metric", 1, c11_harmonic),
        (12, "determinism and round-trip", 30, c12_determinism),
    ];
    let mut failed = 0;
    let mut panicked = 0;
    for (id, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| {
            panicked += 1;
            outcome(false, "panicked")
        });
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s / {budget}s budget]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            took.as_secs_f64(),
        );
    }
    let strict = std::env::var("VMP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    println!("acceptance: {failed} criteria failed, {panicked} panicked");
    if panicked > 0 || (strict && failed > 0) {
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(r)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- 1

struct Fixture {
    model: SourceModel,
    pert: PerturbationSet,
    prior: vmp_core::perturbation::PriorSet,
    batch: Tensor,
    pseudo: Option<Vec<usize>>,
    cfg: ObjectiveConfig,
    path: NoisePath,
}

fn fixture(i: u64) -> Fixture {
    let mut r = rng(100 + i);
    let (input, layers, sharing, likelihood, path) = match i {
        0 => (
            vec![3],
            mlp(3, &[5], 2, false),
            SharingKind::PerOutputChannel,
            Likelihood::Entropy,
            NoisePath::Local,
        ),
        1 => (
            vec![4],
            mlp(4, &[6, 5], 3, true),
            SharingKind::PerWeight,
            Likelihood::InfoMax,
            NoisePath::Local,
        ),
        2 => (
            vec![1, 4, 4],
            convnet(&[1, 4, 4], &[2], 4, 3, true),
            SharingKind::PerOutputChannel,
            Likelihood::InfoMaxPlusPseudo,
            NoisePath::Local,
        ),
        3 => (
            vec![4],
            mlp(4, &[8], 3, true),
            SharingKind::PerWeight,
            Likelihood::InfoMaxPlusPseudo,
            NoisePath::Sampled,
        ),
        _ => (
            vec![2, 3, 3],
            convnet(&[2, 3, 3], &[3], 4, 2, false),
            SharingKind::PerOutputChannel,
            Likelihood::InfoMax,
            NoisePath::Sampled,
        ),
    };
    let model = SourceModel::init(input.clone(), layers, &mut r).unwrap();
    let mut pert = PerturbationSet::init(&model, sharing, 0.0);
    for t in pert.rho.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(-4.0..-1.0));
    }
    let prior = adaptive_prior(&model, 1.0).unwrap();
    let mut shape = vec![6];
    shape.extend(&input);
    let batch = randn(&shape, &mut r);
    let pseudo = (likelihood == Likelihood::InfoMaxPlusPseudo).then(|| {
        let f = forward(&model, &model.weights, &batch, Mode::Eval).unwrap();
        compute_pseudo_labels(&f.features, &softmax(&f.logits))
            .unwrap()
            .labels
    });
    let cfg = ObjectiveConfig {
        likelihood,
        mc_train_samples: 2,
        ..Default::default()
    };
    Fixture {
        model,
        pert,
        prior,
        batch,
        pseudo,
        cfg,
        path,
    }
}

fn fixture_loss(f: &Fixture, trainable: &BTreeSet<ParamId>) -> vmp_core::objectives::ObjectiveEval {
    let obj = Objective {
        model: &f.model,
        perturbation: Some((&f.pert, &f.prior)),
        config: &f.cfg,
        n_target: 50,
        path: f.path,
        mode: Mode::Train,
    };
    obj.evaluate(&f.batch, f.pseudo.as_deref(), trainable, &mut rng(7))
        .unwrap()
}

/// Central difference of the fixture loss along one coordinate.
fn central(f: &mut Fixture, slot: (bool, usize, usize), h: f64) -> f64 {
    let (is_rho, l, j) = slot;
    let set = |f: &mut Fixture, v: f64| {
        let t = if is_rho {
            f.pert.rho.get_mut(&l)
        } else {
            f.model.weights.get_mut(&l)
        };
        t.unwrap().data_mut()[j] = v;
    };
    let base = if is_rho {
        f.pert.rho[&l].data()[j]
    } else {
        f.model.weights[&l].data()[j]
    };
    set(f, base + h);
    let up = fixture_loss(f, &BTreeSet::new()).loss;
    set(f, base - h);
    let down = fixture_loss(f, &BTreeSet::new()).loss;
    set(f, base);
    (up - down) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn c01_gradient_oracle() -> Outcome {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut kinks = 0;
    let mut params_max = 0;
    for i in 0..5 {
        let mut f = fixture(i);
        let params = f.model.total_weights() + f.pert.parameter_count();
        params_max = params_max.max(params);
        let trainable: BTreeSet<ParamId> = f
            .model
            .weighted_layers()
            .into_iter()
            .map(ParamId::Weight)
            .collect();
        let analytic = fixture_loss(&f, &trainable).grads;
        for l in f.pert.rho.keys().copied().collect::<Vec<_>>() {
            for (is_rho, id) in [(true, ParamId::Rho(l)), (false, ParamId::Weight(l))] {
                let g = analytic.get(&id).unwrap().clone();
                for j in 0..g.len() {
                    let numeric = central(&mut f, (is_rho, l, j), H);
                    let r = rel_err(g.data()[j], numeric);
                    if r >= 1e-4 {
                        // A ReLU input within h of zero makes the central
                        // difference itself unreliable; it then disagrees
                        // with a finer step. A wrong gradient does not.
                        let fine = central(&mut f, (is_rho, l, j), H / 10.0);
                        if rel_err(numeric, fine) >= 1e-4 && rel_err(g.data()[j], fine) < 1e-4 {
                            kinks += 1;
                            continue;
                        }
                    }
                    checked += 1;
                    worst = worst.max(r);
                }
            }
        }
    }
    outcome(
        worst < 1e-4 && params_max <= 1000 && kinks * 100 <= checked,
        format!(
            "{checked} partials on 5 nets (<= {params_max} params), max rel err {worst:.2e} (< 1e-4); \
             {kinks} partials skipped as ReLU-kink crossings"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn c02_kl_monte_carlo() -> Outcome {
    let layers = vec![LayerSpec::Dense {
        in_features: 1,
        out_features: 1,
    }];
    let model = SourceModel::init(vec![1], layers, &mut rng(0)).unwrap();
    let mut r = rng(2);
    let mut worst_z: f64 = 0.0;
    let n = 1_000_000;
    for _ in 0..20 {
        let s2: f64 = (r.random_range(-3.0..1.0f64)).exp();
        let v: f64 = (r.random_range(-3.0..1.0f64)).exp();
        let pert = PerturbationSet::init(&model, SharingKind::PerWeight, s2.ln());
        let prior = isotropic_prior(&model, v).unwrap();
        let closed = kl_divergence(&pert, &prior).unwrap();
        let s2 = pert.rho[&0].data()[0].exp();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut r);
            let x2 = s2 * z * z;
            let t = 0.5 * (v / s2).ln() - x2 / (2.0 * s2) + x2 / (2.0 * v);
            sum += t;
            sum_sq += t * t;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / (n as f64 - 1.0)).sqrt();
        worst_z = worst_z.max((closed - mean).abs() / se.max(1e-300));
    }
    let mut exact = true;
    for v in [0.5, 1.0, 2.0, 1e-3] {
        let pert = PerturbationSet::init(&model, SharingKind::PerWeight, f64::ln(v));
        let prior = isotropic_prior(&model, pert.rho[&0].data()[0].exp()).unwrap();
        exact &= kl_divergence(&pert, &prior).unwrap() == 0.0;
    }
    outcome(
        worst_z < 3.0 && exact,
        format!("20 pairs, 1e6 draws each: max |closed - MC| = {worst_z:.2} SE (< 3); KL(v, v) == 0: {exact}"),
    )
}

// ---------------------------------------------------------------- 3

fn moons(n_per_class: usize, rotation: f64, seed: u64) -> LabeledData {
    generate(&DatasetSpec {
        kind: DatasetKind::Moons,
        n_per_class,
        classes: 2,
        shift: ShiftSpec {
            rotation_deg: rotation,
            ..Default::default()
        },
        seed,
    })
    .unwrap()
}

fn moons_model(seed: u64) -> SourceModel {
    let data = moons(1000, 0.0, 10_000 + seed);
    let (train, _) = split_source(&data, 0.8, seed).unwrap();
    let cfg = SourceTrainConfig {
        seed,
        ..Default::default()
    };
    train_source(&train, vec![2], mlp(2, &[32, 32], 2, true), &cfg)
        .unwrap()
        .0
}

fn c03_source_recovery() -> Outcome {
    let model = moons_model(0);
    let x = moons(500, 20.0, 77).inputs;
    let mut pert = PerturbationSet::init(&model, SharingKind::PerWeight, -40.0);
    pert.fill(-40.0);
    let base = predict_source(&model, &x).unwrap().argmax_rows();
    let mc = predict_mc(&model, &pert, &x, 10, &mut rng(3))
        .unwrap()
        .argmax_rows();
    let agree = base.iter().zip(&mc).filter(|(a, b)| a == b).count();
    outcome(
        agree == x.rows(),
        format!(
            "rho = -40: {agree}/{} argmax agreement with the source model",
            x.rows()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c04_equivalence() -> Outcome {
    let mut worst_loss: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for i in 0..5 {
        let f = fixture(i);
        let rep = elbo_equivalence_check(
            &f.model,
            &f.pert,
            &f.prior,
            &f.batch,
            f.pseudo.as_deref(),
            &f.cfg,
            50,
            i,
        )
        .unwrap();
        worst_loss = worst_loss.max((rep.loss_delta_param - rep.loss_wt_param).abs());
        worst_grad = worst_grad.max(rep.max_grad_gap());
    }
    outcome(
        worst_loss <= 1e-12 && worst_grad <= 1e-12,
        format!("5 fixtures: max |loss gap| {worst_loss:.1e}, max |rho-grad gap| {worst_grad:.1e} (<= 1e-12)"),
    )
}

// ---------------------------------------------------------------- 5

fn c05_local_reparam() -> Outcome {
    let mut r = rng(5);
    let w = randn(&[4, 3], &mut r);
    let var_w = Tensor::new(
        vec![4, 3],
        (0..12).map(|_| r.random_range(0.05..0.5)).collect(),
    )
    .unwrap();
    let x = Tensor::new(vec![1, 4], vec![0.7, -1.2, 0.4, 2.0]).unwrap();
    let n = 100_000;
    let layers = vec![LayerSpec::Dense {
        in_features: 4,
        out_features: 3,
    }];
    let mut model = SourceModel::init(vec![4], layers, &mut r).unwrap();
    model.weights.insert(0, w.clone());
    let mut pert = PerturbationSet::init(&model, SharingKind::PerWeight, 0.0);
    pert.rho.insert(
        0,
        Tensor::vector(var_w.data().iter().map(|v| v.ln()).collect()),
    );
    let stats = |draw: &mut dyn FnMut() -> Vec<f64>| {
        let mut s = [[0.0; 3]; 2];
        let mut s4 = [0.0; 3];
        let samples: Vec<Vec<f64>> = (0..n).map(|_| draw()).collect();
        for a in &samples {
            for o in 0..3 {
                s[0][o] += a[o] / n as f64;
            }
        }
        for a in &samples {
            for o in 0..3 {
                let d = a[o] - s[0][o];
                s[1][o] += d * d / (n - 1) as f64;
                s4[o] += d.powi(4) / n as f64;
            }
        }
        (s, s4)
    };
    let mut r1 = rng(51);
    let (local, l4) = stats(&mut || {
        local_reparam_dense(&x, &w, &var_w, &mut r1)
            .unwrap()
            .into_data()
    });
    let mut r2 = rng(52);
    let (sampled, s4) = stats(&mut || {
        let ws = sample_weights(&model, &pert, &mut r2);
        x.data()
            .iter()
            .enumerate()
            .fold(vec![0.0; 3], |mut acc, (i, xi)| {
                for (o, a) in acc.iter_mut().enumerate() {
                    *a += xi * ws[&0].data()[i * 3 + o];
                }
                acc
            })
    });
    let mut worst: f64 = 0.0;
    for o in 0..3 {
        let se_mean = ((local[1][o] + sampled[1][o]) / n as f64).sqrt();
        worst = worst.max((local[0][o] - sampled[0][o]).abs() / se_mean);
        // Var of the sample variance ~ (m4 - s^4) / n.
        let se_var = ((l4[o] - local[1][o].powi(2)) / n as f64
            + (s4[o] - sampled[1][o].powi(2)) / n as f64)
            .sqrt();
        worst = worst.max((local[1][o] - sampled[1][o]).abs() / se_var);
    }
    outcome(
        worst < 3.0,
        format!("1e5 draws per path: max mean/variance gap {worst:.2} SE (< 3)"),
    )
}

// ---------------------------------------------------------------- 6

fn c06_efficacy() -> Outcome {
    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in 0..SEEDS {
        let model = moons_model(seed);
        let target = moons(1000, 30.0, 20_000 + seed);
        let before = accuracy_of(
            &predict_source(&model, &target.inputs).unwrap(),
            &target.labels,
        );
        let cfg = ProtocolConfig {
            seed,
            ..ProtocolConfig::for_protocol(Protocol::Offline)
        };
        let mut adapter = adapt_offline(&model, &target.inputs, &cfg).unwrap().adapter;
        let after = accuracy_of(&adapter.predict(&target.inputs).unwrap(), &target.labels);
        if after > before {
            wins += 1;
        }
        gains.push(100.0 * (after - before));
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    outcome(
        wins >= 9 && mean >= 5.0,
        format!(
            "improved in {wins}/10 seeds (>= 9), mean gain {mean:.1} points (>= 5); gains {}",
            fmt_list(&gains)
        ),
    )
}

fn accuracy_of(p: &Tensor, labels: &[usize]) -> f64 {
    vmp_core::protocols::accuracy(p, labels)
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.1}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- 7

fn blobs(translation: Vec<f64>, seed: u64) -> LabeledData {
    generate(&DatasetSpec {
        kind: DatasetKind::Blobs,
        n_per_class: 300,
        classes: 4,
        shift: ShiftSpec {
            translation,
            noise_sigma: 1.0,
            ..Default::default()
        },
        seed,
    })
    .unwrap()
}

fn c07_preservation() -> Outcome {
    let mut src_ok = 0;
    let mut harm_ok = 0;
    let (mut src_bn_ok, mut harm_bn_ok) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let data = blobs(vec![], 30_000 + seed);
        let (train, holdout) = split_source(&data, 0.8, seed).unwrap();
        let cfg = SourceTrainConfig {
            seed,
            ..Default::default()
        };
        let model = train_source(&train, vec![2], mlp(2, &[32, 32], 4, true), &cfg)
            .unwrap()
            .0;
        let target = blobs(vec![2.0, 1.0], 40_000 + seed);
        let run = |method: Method| {
            let cfg = ProtocolConfig {
                seed,
                method,
                ..ProtocolConfig::for_protocol(Protocol::Generalized)
            };
            let mut adapter = adapt_offline(&model, &target.inputs, &cfg).unwrap().adapter;
            eval_generalized(&model, &mut adapter, &holdout, &target).unwrap()
        };
        let p = run(Method::Perturbation);
        let f = run(Method::FineTune);
        let (ps, fs) = (p.source_accuracy.unwrap(), f.source_accuracy.unwrap());
        let (ph, fh) = (p.harmonic.unwrap(), f.harmonic.unwrap());
        src_ok += (ps >= fs) as usize;
        harm_ok += (ph > fh) as usize;
        let (pb, fb) = (
            p.source_accuracy_source_bn.unwrap(),
            f.source_accuracy_source_bn.unwrap(),
        );
        src_bn_ok += (pb >= fb) as usize;
        harm_bn_ok +=
            (harmonic_mean(pb, p.target_accuracy) > harmonic_mean(fb, f.target_accuracy)) as usize;
        rows.push(format!("{:.0}/{:.0}", 100.0 * ph, 100.0 * fh));
    }
    outcome(
        src_ok >= 8 && harm_ok >= 7,
        format!(
            "source acc >= fine-tune in {src_ok}/10 (>= 8), harmonic > fine-tune in {harm_ok}/10 (>= 7); \
             with source-BN statistics on the holdout: {src_bn_ok}/10, {harm_bn_ok}/10; H pert/ft {}",
            rows.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn tinygrid_model(seed: u64) -> SourceModel {
    let data = generate(&DatasetSpec {
        kind: DatasetKind::Tinygrid,
        n_per_class: 150,
        classes: 4,
        shift: ShiftSpec::default(),
        seed: 50_000 + seed,
    })
    .unwrap();
    let cfg = SourceTrainConfig {
        seed,
        epochs: 30,
        ..Default::default()
    };
    let arch = convnet(&[1, 8, 8], &[8], 16, 4, true);
    train_source(&data, vec![1, 8, 8], arch, &cfg).unwrap().0
}

fn c08_continual() -> Outcome {
    let mut ok = 0;
    let mut finite = true;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let model = tinygrid_model(seed);
        let stream = corruption_stream(&CorruptionStreamSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let run = |method: Method| {
            let cfg = ProtocolConfig {
                seed,
                method,
                ..ProtocolConfig::for_protocol(Protocol::ContinualOnline)
            };
            run_continual_stream(&model, &stream, &cfg)
        };
        match (run(Method::Perturbation), run(Method::FineTune)) {
            (Ok(p), Ok(f)) => {
                ok += (p.mean_error() <= f.mean_error()) as usize;
                rows.push(format!(
                    "{:.1}/{:.1}",
                    100.0 * p.mean_error(),
                    100.0 * f.mean_error()
                ));
            }
            (p, _) => {
                if p.is_err() {
                    finite = false;
                }
                rows.push("err".into());
            }
        }
    }
    outcome(
        ok >= 8 && finite,
        format!("pert error <= fine-tune in {ok}/10 (>= 8), perturbation loss always finite: {finite}; err% pert/ft {}", rows.join(" ")),
    )
}

// ---------------------------------------------------------------- 9

fn c09_sigma_gap() -> Outcome {
    let angles = [15.0, 45.0, 75.0];
    let mut sigma_ok = 0;
    let mut adist_ok = 0;
    let mut pseudo_ok = 0;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let model = moons_model(seed);
        let clean = moons(500, 0.0, 60_000 + seed);
        let fs = forward(&model, &model.weights, &clean.inputs, Mode::Eval)
            .unwrap()
            .features;
        let mut sig = Vec::new();
        let mut sig_pseudo = Vec::new();
        let mut ad = Vec::new();
        for (k, &angle) in angles.iter().enumerate() {
            let target = moons(1000, angle, 70_000 + 10 * seed + k as u64);
            let base = ProtocolConfig {
                seed,
                ..ProtocolConfig::for_protocol(Protocol::Offline)
            };
            let mut cfg = base.clone();
            cfg.objective.likelihood = Likelihood::Entropy;
            let total = |cfg: &ProtocolConfig| {
                let out = adapt_offline(&model, &target.inputs, cfg).unwrap();
                sigma_l1_total(out.adapter.perturbation.as_ref().unwrap())
            };
            sig.push(total(&cfg));
            sig_pseudo.push(total(&base));
            let ft = forward(&model, &model.weights, &target.inputs, Mode::Eval)
                .unwrap()
                .features;
            ad.push(a_distance(&fs, &ft, seed).unwrap());
        }
        sigma_ok += sig.windows(2).all(|w| w[0] <= w[1]) as usize;
        pseudo_ok += sig_pseudo.windows(2).all(|w| w[0] <= w[1]) as usize;
        adist_ok += ad.windows(2).all(|w| w[0] <= w[1]) as usize;
        rows.push(format!("{}|{}", fmt_list(&sig), fmt_list(&ad)));
    }
    outcome(
        sigma_ok >= 8 && adist_ok >= 8,
        format!(
            "entropy likelihood: sigma l1 non-decreasing in {sigma_ok}/10 (>= 8), A-distance non-decreasing in {adist_ok}/10 (>= 8); \
             info-max + pseudo-label likelihood: sigma non-decreasing in {pseudo_ok}/10; {}",
            rows.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn c10_sharing_counts() -> Outcome {
    let archs = [
        (vec![2], mlp(2, &[32, 32], 2, true)),
        (vec![1, 8, 8], convnet(&[1, 8, 8], &[8, 16], 16, 10, true)),
        (vec![3, 6, 6], convnet(&[3, 6, 6], &[4], 8, 5, false)),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (input, layers) in archs {
        let model = SourceModel::init(input, layers.clone(), &mut rng(0)).unwrap();
        let c_out: usize = layers
            .iter()
            .filter(|l| l.has_weights())
            .map(|l| l.out_units().unwrap())
            .sum();
        let shared =
            PerturbationSet::init(&model, SharingKind::PerOutputChannel, -10.0).parameter_count();
        let full = PerturbationSet::init(&model, SharingKind::PerWeight, -10.0).parameter_count();
        ok &= shared == c_out && full == model.total_weights();
        notes.push(format!(
            "{shared}={c_out}, {full}={}",
            model.total_weights()
        ));
    }
    outcome(
        ok,
        format!(
            "shared = sum c_out, per-weight = #weights: {}",
            notes.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 11

fn c11_harmonic() -> Outcome {
    let table = harmonic_mean(76.6, 71.6);
    let model = moons_model(0);
    let holdout = moons(50, 0.0, 5);
    let target = moons(50, 30.0, 6);
    let cfg = ProtocolConfig {
        epochs: 1,
        ..ProtocolConfig::for_protocol(Protocol::Generalized)
    };
    let mut adapter = adapt_offline(&model, &target.inputs, &cfg).unwrap().adapter;
    let m = eval_generalized(&model, &mut adapter, &holdout, &target).unwrap();
    let (s, t) = (m.source_accuracy.unwrap(), m.target_accuracy);
    let consistent = (m.harmonic.unwrap() - 2.0 * s * t / (s + t)).abs() <= 1e-12;
    outcome(
        (table - 74.0).abs() <= 0.05 && consistent,
        format!("H(76.6, 71.6) = {table:.3} (74.0 +- 0.05); eval_generalized harmonic consistent: {consistent}"),
    )
}

// ---------------------------------------------------------------- 12

fn c12_determinism() -> Outcome {
    let run = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let moons_cfg = format!(
            "seed = 3\ndata.n_per_class = 200\ntarget.rotation_deg = 30.0\nadapt.epochs = 2\noutput.dir = \"{}\"",
            dir.join("moons").display()
        );
        let cfg = RunConfig::parse(&moons_cfg).unwrap();
        let t = cmd_train_source(&cfg).unwrap();
        cmd_adapt(&cfg, &t.model_path).unwrap();
        let grid_cfg = format!(
            "seed = 3\nprotocol = \"continual_online\"\ndata.kind = \"tinygrid\"\ndata.classes = 3\n\
             data.n_per_class = 40\narch.kind = \"convnet\"\nsource.epochs = 3\nstream.n_per_class = 8\n\
             stream.batch_size = 12\noutput.dir = \"{}\"",
            dir.join("grid").display()
        );
        let cfg = RunConfig::parse(&grid_cfg).unwrap();
        let t = cmd_train_source(&cfg).unwrap();
        cmd_stream(&cfg, &t.model_path).unwrap();
        let mut files = Vec::new();
        for sub in ["moons", "grid"] {
            let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            names.sort();
            for p in names {
                files.push((
                    format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
        files
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run(a.path());
    let fb = run(b.path());
    let identical = fa == fb;

    let mut r = rng(12);
    let mut c = Container::default();
    for i in 0..20 {
        let rank = r.random_range(0..4usize);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(0..5)).collect();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| f64::from_bits(r.random::<u64>())).collect();
        c.insert(format!("t{i}"), Tensor::new(shape, data).unwrap());
    }
    let bytes = c.encode().unwrap();
    let back = Container::decode(&bytes, Path::new("mem")).unwrap();
    let bit_exact = back.encode().unwrap() == bytes
        && c.entries.iter().all(|(k, t)| {
            let u = &back.entries[k];
            u.shape() == t.shape()
                && u.data()
                    .iter()
                    .zip(t.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    outcome(
        identical && bit_exact && fa.len() >= 9,
        format!("{} output files byte-identical across reruns: {identical}; random-bit container round-trip exact: {bit_exact}", fa.len()),
    )
}
