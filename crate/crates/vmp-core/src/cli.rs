//! The `vmp` command line: `train-source`, `adapt`, `stream`, `analyze`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::container::{
    model_from_container, model_to_container, perturbation_from_container,
    perturbation_to_container, Container,
};
use crate::domains::{generate, split_source, LabeledData};
use crate::error::{Error, Result};
use crate::nn::{forward, Mode, SourceModel};
use crate::perturbation::{predict_source, PerturbationSet};
use crate::protocols::{
    a_distance, accuracy, adapt_offline, corruption_stream, eval_generalized, run_continual_stream,
    sigma_l1_per_layer, sigma_l1_total, train_source, EpochLog, Method, Protocol, RunMetrics,
    TraceRow,
};

#[derive(Debug, Parser)]
#[command(
    name = "vmp",
    version,
    about = "Variational model perturbation for source-free domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model; writes model.vmp and train_log.csv.
    TrainSource(Common),
    /// Adapt to the target domain; writes the perturbation, metrics.json and sigma.csv.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Continual online adaptation over a corruption stream; writes trace.csv and summary.json.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// A-distance between source and target features, plus sigma norms.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pert: Option<PathBuf>,
        /// Also report per-layer sigma l1 norms (needs --pert).
        #[arg(long)]
        sigma: bool,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(dir) = &self.out_dir {
            cfg.output.dir = dir.clone();
        }
        Ok(cfg)
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::TrainSource(c) => {
            let cfg = c.load()?;
            cmd_train_source(&cfg).map(|_| ())
        }
        Command::Adapt { common, model } => {
            let cfg = common.load()?;
            cmd_adapt(&cfg, model).map(|_| ())
        }
        Command::Stream { common, model } => {
            let cfg = common.load()?;
            cmd_stream(&cfg, model).map(|_| ())
        }
        Command::Analyze {
            common,
            model,
            pert,
            sigma,
        } => {
            let cfg = common.load()?;
            let report = cmd_analyze(&cfg, model, pert.as_deref(), *sigma)?;
            println!("{}", to_json(&report)?);
            Ok(())
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output.dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Contract(format!("json encoding: {e}")))
}

fn elapsed(cfg: &RunConfig, start: Instant) -> f64 {
    if cfg.output.wall_clock {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// Source data split into (train, holdout), exactly as `train-source` sees it.
pub fn source_split(cfg: &RunConfig) -> Result<(LabeledData, LabeledData)> {
    let data = generate(&cfg.source_data)?;
    split_source(&data, 1.0 - cfg.holdout_fraction, cfg.source_data.seed)
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<SourceModel> {
    let model = model_from_container(&Container::load(path)?)?;
    let expected = cfg
        .arch
        .layers(&cfg.source_data.input_shape(), cfg.source_data.classes)?;
    if model.layers != expected || model.input_shape != cfg.source_data.input_shape() {
        return Err(Error::Mismatch(format!(
            "{} was not built with this config's data/arch settings",
            path.display()
        )));
    }
    Ok(model)
}

pub struct TrainOutputs {
    pub model: SourceModel,
    pub log: Vec<EpochLog>,
    pub model_path: PathBuf,
    pub log_path: PathBuf,
}

pub fn cmd_train_source(cfg: &RunConfig) -> Result<TrainOutputs> {
    let dir = out_dir(cfg)?;
    let (train, _) = source_split(cfg)?;
    let arch = cfg
        .arch
        .layers(&cfg.source_data.input_shape(), cfg.source_data.classes)?;
    let (model, log) = train_source(&train, cfg.source_data.input_shape(), arch, &cfg.source)?;
    let model_path = dir.join("model.vmp");
    model_to_container(&model)?.save(&model_path)?;
    let mut csv = String::from("epoch,loss,train_acc\n");
    for row in &log {
        writeln!(csv, "{},{},{}", row.epoch, row.loss, row.train_acc).unwrap();
    }
    let log_path = dir.join("train_log.csv");
    write(&log_path, &csv)?;
    Ok(TrainOutputs {
        model,
        log,
        model_path,
        log_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptReport {
    pub protocol: Protocol,
    pub method: Method,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    /// Accuracies of the unadapted source model on the same splits.
    pub unadapted_source_accuracy: f64,
    pub unadapted_target_accuracy: f64,
    pub epoch_loss: Vec<f64>,
}

pub struct AdaptOutputs {
    pub report: AdaptReport,
    pub perturbation: Option<PerturbationSet>,
    pub adapted_model: SourceModel,
}

pub fn sigma_csv(pert: &PerturbationSet) -> String {
    let mut csv = String::from("layer_id,l1_sigma\n");
    for (l, v) in sigma_l1_per_layer(pert) {
        writeln!(csv, "{l},{v}").unwrap();
    }
    csv
}

pub fn cmd_adapt(cfg: &RunConfig, model_path: &Path) -> Result<AdaptOutputs> {
    if cfg.protocol.protocol == Protocol::ContinualOnline {
        return Err(Error::Config(
            "protocol = continual_online runs through `vmp stream`, not `vmp adapt`".into(),
        ));
    }
    let start = Instant::now();
    let dir = out_dir(cfg)?;
    let model = load_model(model_path, cfg)?;
    let (_, holdout) = source_split(cfg)?;
    let target = generate(&cfg.target_data)?;
    let outcome = adapt_offline(&model, &target.inputs, &cfg.protocol)?;
    let mut adapter = outcome.adapter;
    let mut metrics = eval_generalized(&model, &mut adapter, &holdout, &target)?;
    metrics.wall_clock = elapsed(cfg, start);
    let report = AdaptReport {
        protocol: cfg.protocol.protocol,
        method: cfg.protocol.method,
        seed: cfg.seed,
        metrics,
        unadapted_source_accuracy: accuracy(
            &predict_source(&model, &holdout.inputs)?,
            &holdout.labels,
        ),
        unadapted_target_accuracy: accuracy(
            &predict_source(&model, &target.inputs)?,
            &target.labels,
        ),
        epoch_loss: outcome.epoch_loss,
    };
    model_to_container(&adapter.model)?.save(&dir.join("adapted_model.vmp"))?;
    if let Some(p) = &adapter.perturbation {
        perturbation_to_container(p).save(&dir.join("perturbation.vmp"))?;
        write(&dir.join("sigma.csv"), &sigma_csv(p))?;
    }
    write(&dir.join("metrics.json"), &to_json(&report)?)?;
    Ok(AdaptOutputs {
        report,
        perturbation: adapter.perturbation,
        adapted_model: adapter.model,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainError {
    pub domain_id: String,
    pub mean_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamSummary {
    pub method: Method,
    pub seed: u64,
    /// Per-domain mean batch errors in stream order.
    pub domains: Vec<DomainError>,
    pub mean_error: f64,
    pub steps: usize,
    pub metrics: RunMetrics,
}

pub struct StreamOutputs {
    pub trace: Vec<TraceRow>,
    pub summary: StreamSummary,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut csv = String::from("step,domain_id,corruption,severity,error\n");
    for r in trace {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.step, r.domain_id, r.corruption, r.severity, r.error
        )
        .unwrap();
    }
    csv
}

pub fn cmd_stream(cfg: &RunConfig, model_path: &Path) -> Result<StreamOutputs> {
    if cfg.protocol.protocol != Protocol::ContinualOnline {
        return Err(Error::Config(
            "`vmp stream` needs protocol = \"continual_online\"".into(),
        ));
    }
    let start = Instant::now();
    let dir = out_dir(cfg)?;
    let model = load_model(model_path, cfg)?;
    if cfg.source_data.input_shape() != [1, crate::domains::GRID, crate::domains::GRID] {
        return Err(Error::Config(
            "the corruption stream needs data.kind = \"tinygrid\"".into(),
        ));
    }
    let stream = corruption_stream(&cfg.stream)?;
    let outcome = run_continual_stream(&model, &stream, &cfg.protocol)?;
    let mut metrics = outcome.metrics.clone();
    metrics.wall_clock = elapsed(cfg, start);
    let summary = StreamSummary {
        method: cfg.protocol.method,
        seed: cfg.seed,
        domains: outcome
            .domain_errors
            .iter()
            .map(|(d, e)| DomainError {
                domain_id: d.clone(),
                mean_error: *e,
            })
            .collect(),
        mean_error: outcome.mean_error(),
        steps: outcome.adapter.steps(),
        metrics,
    };
    write(&dir.join("trace.csv"), &trace_csv(&outcome.trace))?;
    write(&dir.join("summary.json"), &to_json(&summary)?)?;
    Ok(StreamOutputs {
        trace: outcome.trace,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub seed: u64,
    pub a_distance: f64,
    pub sigma_l1_per_layer: Option<std::collections::BTreeMap<String, f64>>,
    pub sigma_l1_total: Option<f64>,
}

/// A-distance on source-model features of source holdout vs. target data.
pub fn cmd_analyze(
    cfg: &RunConfig,
    model_path: &Path,
    pert_path: Option<&Path>,
    sigma: bool,
) -> Result<AnalysisReport> {
    if sigma && pert_path.is_none() {
        return Err(Error::Config("--sigma needs --pert PATH".into()));
    }
    let dir = out_dir(cfg)?;
    let model = load_model(model_path, cfg)?;
    let pert = match pert_path {
        Some(p) => Some(perturbation_from_container(&Container::load(p)?, &model)?),
        None => None,
    };
    let (_, holdout) = source_split(cfg)?;
    let target = generate(&cfg.target_data)?;
    let fs = forward(&model, &model.weights, &holdout.inputs, Mode::Eval)?.features;
    let ft = forward(&model, &model.weights, &target.inputs, Mode::Eval)?.features;
    let report = AnalysisReport {
        seed: cfg.seed,
        a_distance: a_distance(&fs, &ft, cfg.seed)?,
        sigma_l1_per_layer: pert.as_ref().map(|p| {
            sigma_l1_per_layer(p)
                .into_iter()
                .map(|(l, v)| (format!("layer{l}"), v))
                .collect()
        }),
        sigma_l1_total: pert.as_ref().map(sigma_l1_total),
    };
    if let Some(p) = &pert {
        write(&dir.join("sigma.csv"), &sigma_csv(p))?;
    }
    write(&dir.join("analysis.json"), &to_json(&report)?)?;
    Ok(report)
}
