use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vmp_core::config::RunConfig;
use vmp_core::container::{model_from_container, Container};
use vmp_core::perturbation::predict_source;
use vmp_core::protocols::{accuracy, harmonic_mean};

const MOONS: &str = r#"
seed = 3
data.kind = "moons"
data.n_per_class = 150
target.rotation_deg = 30.0
source.epochs = 8
adapt.epochs = 2
adapt.mc_eval_samples = 2
"#;

const GRID: &str = r#"
seed = 1
protocol = "continual_online"
data.kind = "tinygrid"
data.classes = 4
data.n_per_class = 40
arch.kind = "convnet"
arch.channels = [4]
arch.bottleneck = 8
source.epochs = 4
adapt.mc_eval_samples = 2
stream.n_per_class = 6
stream.batch_size = 8
stream.corruptions = ["gauss_noise", "blur"]
stream.severities = [1, 3]
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Run { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn vmp(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vmp"))
            .arg(sub)
            .arg("--config")
            .arg(self.path("run.toml"))
            .arg("--out-dir")
            .arg(self.path(out))
            .args(extra)
            .output()
            .unwrap()
    }

    fn ok(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        let o = self.vmp(sub, out, extra);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{sub}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    }

    fn model(&self) -> String {
        self.path("src/model.vmp").to_str().unwrap().to_owned()
    }

    fn config(&self) -> RunConfig {
        RunConfig::load(&self.path("run.toml")).unwrap()
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    read(p)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&read(p)).unwrap()
}

#[test]
fn train_source_writes_a_bit_exact_deterministic_model() {
    let run = Run::new(MOONS);
    run.ok("train-source", "src", &[]);
    run.ok("train-source", "again", &[]);
    let a = std::fs::read(run.path("src/model.vmp")).unwrap();
    assert_eq!(a, std::fs::read(run.path("again/model.vmp")).unwrap());
    assert_eq!(
        read(&run.path("src/train_log.csv")),
        read(&run.path("again/train_log.csv"))
    );
    assert!(read(&run.path("src/train_log.csv")).starts_with("epoch,loss,train_acc\n"));

    let mut cfg = run.config();
    cfg.output.dir = run.path("mem");
    let trained = vmp_core::cli::cmd_train_source(&cfg).unwrap();
    let loaded =
        model_from_container(&Container::decode(&a, Path::new("model.vmp")).unwrap()).unwrap();
    let (_, holdout) = vmp_core::cli::source_split(&cfg).unwrap();
    let p_mem = predict_source(&trained.model, &holdout.inputs).unwrap();
    let p_disk = predict_source(&loaded, &holdout.inputs).unwrap();
    assert_eq!(p_mem.data(), p_disk.data());
    assert_eq!(
        accuracy(&p_mem, &holdout.labels).to_bits(),
        accuracy(&p_disk, &holdout.labels).to_bits()
    );
}

#[test]
fn seed_flag_changes_the_model() {
    let run = Run::new(MOONS);
    run.ok("train-source", "a", &["--seed", "4"]);
    run.ok("train-source", "b", &["--seed", "5"]);
    assert_ne!(
        std::fs::read(run.path("a/model.vmp")).unwrap(),
        std::fs::read(run.path("b/model.vmp")).unwrap()
    );
}

#[test]
fn adapt_with_zero_epochs_keeps_rho_at_init() {
    let run = Run::new(
        &format!("{MOONS}\nperturbation.rho_init = -7.5\nadapt.epochs = 0\n")
            .replace("adapt.epochs = 2\n", ""),
    );
    run.ok("train-source", "src", &[]);
    run.ok("adapt", "ad", &["--model", &run.model()]);
    let pert = Container::load(&run.path("ad/perturbation.vmp")).unwrap();
    let rho: Vec<_> = pert
        .entries
        .iter()
        .filter(|(k, _)| k.ends_with(".rho"))
        .collect();
    assert!(!rho.is_empty());
    for (_, t) in rho {
        assert!(t.data().iter().all(|&r| r == -7.5));
    }
}

#[test]
fn adapt_outputs_follow_their_schemas() {
    let run = Run::new(MOONS);
    run.ok("train-source", "src", &[]);
    run.ok("adapt", "ad", &["--model", &run.model()]);

    let sigma = csv_rows(&run.path("ad/sigma.csv"));
    assert!(read(&run.path("ad/sigma.csv")).starts_with("layer_id,l1_sigma\n"));
    // mlp [32, 32] -> three dense layers.
    assert_eq!(sigma.len(), 3);

    let m = json(&run.path("ad/metrics.json"));
    for key in [
        "per_domain_accuracy",
        "source_accuracy",
        "target_accuracy",
        "harmonic",
        "sigma_l1_per_layer",
        "a_distance",
        "wall_clock",
    ] {
        assert!(m.get(key).is_some(), "metrics.json lacks {key}");
    }
    let s = m["source_accuracy"].as_f64().unwrap();
    let t = m["target_accuracy"].as_f64().unwrap();
    assert!((m["harmonic"].as_f64().unwrap() - harmonic_mean(s, t)).abs() < 1e-15);
    assert!((m["harmonic"].as_f64().unwrap() - 2.0 * s * t / (s + t)).abs() < 1e-12);
    let layers = m["sigma_l1_per_layer"].as_object().unwrap();
    assert_eq!(layers.len(), sigma.len());
    for row in &sigma {
        let v: f64 = row[1].parse().unwrap();
        assert_eq!(layers[&format!("layer{}", row[0])].as_f64().unwrap(), v);
    }

    run.ok("adapt", "ad2", &["--model", &run.model()]);
    for f in [
        "metrics.json",
        "sigma.csv",
        "perturbation.vmp",
        "adapted_model.vmp",
    ] {
        assert_eq!(
            std::fs::read(run.path("ad").join(f)).unwrap(),
            std::fs::read(run.path("ad2").join(f)).unwrap(),
            "{f} differs across identical runs"
        );
    }
}

#[test]
fn unknown_config_key_is_a_config_error_naming_the_key() {
    let run = Run::new("protocl = \"offline\"\n");
    let o = run.vmp("train-source", "x", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("protocl"));
    assert!(
        !run.path("x").exists(),
        "nothing may run before the config is accepted"
    );
}

#[test]
fn bad_values_and_bad_flags_are_config_errors() {
    for cfg in [
        "objective.beta = -1.0\n",
        "data.kind = \"mnist\"\n",
        "seed = \"one\"\n",
        "seed = [\n",
    ] {
        let o = Run::new(cfg).vmp("train-source", "x", &[]);
        assert_eq!(o.status.code(), Some(2), "{cfg}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_vmp"))
        .arg("train-source")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_errors_exit_with_4() {
    let run = Run::new(MOONS);
    let o = run.vmp("adapt", "x", &["--model", "/nonexistent/model.vmp"]);
    assert_eq!(o.status.code(), Some(4));
    let o = Command::new(env!("CARGO_BIN_EXE_vmp"))
        .args(["train-source", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn numeric_divergence_exits_with_3() {
    let run = Run::new(&format!(
        "{MOONS}\nmethod = \"fine_tune\"\noptimizer.kind = \"sgd\"\noptimizer.lr = 1e300\n"
    ));
    run.ok("train-source", "src", &[]);
    let o = run.vmp("adapt", "ad", &["--model", &run.model()]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn model_from_another_architecture_is_rejected() {
    let run = Run::new(MOONS);
    run.ok("train-source", "src", &[]);
    let other = Run::new(&format!("{MOONS}\narch.hidden = [16]\n"));
    let o = other.vmp("adapt", "ad", &["--model", &run.model()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not built with this config"));
}

#[test]
fn stream_trace_matches_summary_and_is_deterministic() {
    let run = Run::new(GRID);
    run.ok("train-source", "src", &[]);
    run.ok("stream", "s1", &["--model", &run.model()]);
    run.ok("stream", "s2", &["--model", &run.model()]);
    assert_eq!(
        read(&run.path("s1/trace.csv")),
        read(&run.path("s2/trace.csv"))
    );
    assert!(
        read(&run.path("s1/trace.csv")).starts_with("step,domain_id,corruption,severity,error\n")
    );

    let rows = csv_rows(&run.path("s1/trace.csv"));
    // 2 corruptions x 2 severities, 24 samples each in batches of 8.
    assert_eq!(rows.len(), 4 * 3);
    let mut per_domain: Vec<(String, Vec<f64>)> = Vec::new();
    for r in &rows {
        let e: f64 = r[4].parse().unwrap();
        match per_domain.last_mut() {
            Some((d, v)) if *d == r[1] => v.push(e),
            _ => per_domain.push((r[1].clone(), vec![e])),
        }
    }
    let summary = json(&run.path("s1/summary.json"));
    let domains = summary["domains"].as_array().unwrap();
    let ids: Vec<&str> = domains
        .iter()
        .map(|d| d["domain_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["gauss_noise-1", "gauss_noise-3", "blur-1", "blur-3"]);
    for ((id, errs), d) in per_domain.iter().zip(domains) {
        assert_eq!(id, d["domain_id"].as_str().unwrap());
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((mean - d["mean_error"].as_f64().unwrap()).abs() < 1e-12);
    }
    assert_eq!(summary["steps"].as_u64().unwrap() as usize, rows.len());
}

#[test]
fn empty_stream_gives_empty_trace_and_no_domains() {
    let run = Run::new(&GRID.replace(
        "stream.corruptions = [\"gauss_noise\", \"blur\"]",
        "stream.corruptions = []",
    ));
    run.ok("train-source", "src", &[]);
    run.ok("stream", "s", &["--model", &run.model()]);
    assert_eq!(
        read(&run.path("s/trace.csv")),
        "step,domain_id,corruption,severity,error\n"
    );
    let summary = json(&run.path("s/summary.json"));
    assert!(summary["domains"].as_array().unwrap().is_empty());
}

#[test]
fn protocol_and_subcommand_must_agree() {
    let run = Run::new(MOONS);
    run.ok("train-source", "src", &[]);
    assert_eq!(
        run.vmp("stream", "s", &["--model", &run.model()])
            .status
            .code(),
        Some(2)
    );
    let grid = Run::new(GRID);
    grid.ok("train-source", "src", &[]);
    assert_eq!(
        grid.vmp("adapt", "a", &["--model", &grid.model()])
            .status
            .code(),
        Some(2)
    );
}

fn a_distance_of(run: &Run) -> f64 {
    let o = run.ok("analyze", "an", &["--model", &run.model()]);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let written = json(&run.path("an/analysis.json"));
    assert_eq!(printed, written);
    written["a_distance"].as_f64().unwrap()
}

#[test]
fn analyze_separates_same_and_disjoint_domains() {
    let same = Run::new(
        &MOONS
            .replace("target.rotation_deg = 30.0", "")
            .replace("n_per_class = 150", "n_per_class = 500"),
    );
    same.ok("train-source", "src", &[]);
    let d = a_distance_of(&same);
    assert!(d < 0.2, "same-domain A-distance {d}");

    let far = Run::new(&format!(
        "{}\ntarget.translation = [40.0, 40.0]\n",
        MOONS.replace("target.rotation_deg = 30.0", "")
    ));
    far.ok("train-source", "src", &[]);
    let d = a_distance_of(&far);
    assert!(d > 1.8, "separable-domain A-distance {d}");
}

#[test]
fn analyze_reports_sigma_only_with_a_perturbation() {
    let run = Run::new(MOONS);
    run.ok("train-source", "src", &[]);
    let o = run.vmp("analyze", "an", &["--model", &run.model(), "--sigma"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--pert"));
    let o = run.vmp(
        "analyze",
        "an",
        &[
            "--model",
            &run.model(),
            "--sigma",
            "--pert",
            "/nonexistent/p.vmp",
        ],
    );
    assert_eq!(o.status.code(), Some(4));

    run.ok("adapt", "ad", &["--model", &run.model()]);
    let pert = run.path("ad/perturbation.vmp");
    let o = run.ok(
        "analyze",
        "an",
        &[
            "--model",
            &run.model(),
            "--sigma",
            "--pert",
            pert.to_str().unwrap(),
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let per_layer: BTreeMap<String, f64> =
        serde_json::from_value(report["sigma_l1_per_layer"].clone()).unwrap();
    let total: f64 = per_layer.values().sum();
    assert!((total - report["sigma_l1_total"].as_f64().unwrap()).abs() < 1e-9 * total.max(1.0));
    assert_eq!(
        read(&run.path("an/sigma.csv")),
        read(&run.path("ad/sigma.csv"))
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert_eq!(n, 3);
}
