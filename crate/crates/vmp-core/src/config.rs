//! Run configuration from a flat dotted-key TOML file.
//!
//! Every key is optional; unknown keys are rejected before anything runs.
//! Keys (defaults in brackets):
//!
//! ```text
//! seed [0]
//! protocol [offline]             offline | generalized | continual_online
//! method [perturbation]          perturbation | fine_tune
//! data.kind [moons]              moons | blobs | tinygrid
//! data.n_per_class [1000]
//! data.classes [2]
//! data.noise_sigma [0.1]
//! data.holdout_fraction [0.2]
//! target.rotation_deg [0]
//! target.translation [[]]
//! target.noise_sigma [data.noise_sigma]
//! target.corruption [none]       none | gauss_noise | blur | contrast
//! target.severity [0]
//! target.n_per_class [data.n_per_class]
//! arch.kind [mlp]                mlp | convnet
//! arch.hidden [[32, 32]]
//! arch.channels [[8]]
//! arch.bottleneck [16]
//! arch.batchnorm [true]
//! source.epochs [50]  source.batch_size [32]  source.patience [10]
//! source.optimizer [sgd]  source.lr [0.05]  source.momentum [0.9]  source.weight_decay [0]
//! adapt.epochs [10]  adapt.batch_size [64]  adapt.mc_eval_samples [10]
//! adapt.train_bn_affine [false offline, true continual]
//! objective.likelihood [info_max_plus_pseudo offline, entropy continual]
//! objective.beta [0.3]  objective.kl_scale [1]  objective.mc_train_samples [1]
//! optimizer.kind [adaptive]  optimizer.lr [0.05 offline, 0.01 continual]
//! optimizer.momentum [0.9]  optimizer.weight_decay [0]
//! perturbation.sharing [per_output_channel]
//! perturbation.rho_init [-10]
//! perturbation.prior [adaptive]  perturbation.lambda [1]  perturbation.prior_variance [1]
//! perturbation.local_reparam [true]
//! stream.n_per_class [128]  stream.batch_size [16]
//! stream.corruptions [[gauss_noise, blur, contrast]]  stream.severities [[1, 2, 3, 4, 5]]
//! output.dir [out]  output.wall_clock [false]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domains::{Corruption, DatasetKind, DatasetSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::nn::{convnet, mlp, LayerSpec, OptimizerConfig, OptimizerKind};
use crate::objectives::Likelihood;
use crate::perturbation::SharingKind;
use crate::protocols::{
    CorruptionStreamSpec, Method, PriorChoice, Protocol, ProtocolConfig, SourceTrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Convnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub bottleneck: usize,
    pub batchnorm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kind: ArchKind::Mlp,
            hidden: vec![32, 32],
            channels: vec![8],
            bottleneck: 16,
            batchnorm: true,
        }
    }
}

impl ArchConfig {
    pub fn layers(&self, input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
        match self.kind {
            ArchKind::Mlp => {
                if input_shape.len() != 1 {
                    return Err(Error::Config(format!(
                        "arch.kind = mlp needs flat inputs, data has shape {input_shape:?}"
                    )));
                }
                Ok(mlp(input_shape[0], &self.hidden, classes, self.batchnorm))
            }
            ArchKind::Convnet => {
                if input_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "arch.kind = convnet needs image inputs, data has shape {input_shape:?}"
                    )));
                }
                Ok(convnet(
                    input_shape,
                    &self.channels,
                    self.bottleneck,
                    classes,
                    self.batchnorm,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Record real elapsed time; off by default so outputs are reproducible.
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub source_data: DatasetSpec,
    pub target_data: DatasetSpec,
    pub holdout_fraction: f64,
    pub arch: ArchConfig,
    pub source: SourceTrainConfig,
    pub protocol: ProtocolConfig,
    pub stream: CorruptionStreamSpec,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_str("").expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(e.to_string().trim_end().replace('\n', " "))
        })?;
        let mut flat = BTreeMap::new();
        flatten("", table, &mut flat);
        if let Some(k) = flat.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let mut k = Keys(flat);
        let seed = k.u64("seed")?.unwrap_or(0);
        let protocol = k
            .parse::<Protocol>("protocol")?
            .unwrap_or(Protocol::Offline);
        let mut p = ProtocolConfig::for_protocol(protocol);
        p.method = k.parse::<Method>("method")?.unwrap_or(Method::Perturbation);

        let kind = k
            .parse_str("data.kind", DatasetKind::from_str)?
            .unwrap_or(DatasetKind::Moons);
        let n_per_class = k.usize("data.n_per_class")?.unwrap_or(1000);
        let classes = k.usize("data.classes")?.unwrap_or(2);
        let noise = k.f64("data.noise_sigma")?.unwrap_or(0.1);
        let holdout_fraction = k.f64("data.holdout_fraction")?.unwrap_or(0.2);
        let source_data = DatasetSpec {
            kind,
            n_per_class,
            classes,
            shift: ShiftSpec {
                noise_sigma: noise,
                ..Default::default()
            },
            seed,
        };
        let target_data = DatasetSpec {
            kind,
            n_per_class: k.usize("target.n_per_class")?.unwrap_or(n_per_class),
            classes,
            shift: ShiftSpec {
                rotation_deg: k.f64("target.rotation_deg")?.unwrap_or(0.0),
                translation: k.f64_list("target.translation")?.unwrap_or_default(),
                noise_sigma: k.f64("target.noise_sigma")?.unwrap_or(noise),
                corruption: k
                    .parse_str("target.corruption", Corruption::from_str)?
                    .unwrap_or(Corruption::None),
                severity: k.u8("target.severity")?.unwrap_or(0),
            },
            seed,
        };

        let d = ArchConfig::default();
        let arch = ArchConfig {
            kind: k.parse::<ArchKind>("arch.kind")?.unwrap_or(d.kind),
            hidden: k.usize_list("arch.hidden")?.unwrap_or(d.hidden),
            channels: k.usize_list("arch.channels")?.unwrap_or(d.channels),
            bottleneck: k.usize("arch.bottleneck")?.unwrap_or(d.bottleneck),
            batchnorm: k.bool("arch.batchnorm")?.unwrap_or(d.batchnorm),
        };

        let d = SourceTrainConfig::default();
        let source = SourceTrainConfig {
            epochs: k.usize("source.epochs")?.unwrap_or(d.epochs),
            batch_size: k.usize("source.batch_size")?.unwrap_or(d.batch_size),
            patience: k.usize("source.patience")?.unwrap_or(d.patience),
            optimizer: OptimizerConfig {
                kind: k
                    .parse::<OptimizerKind>("source.optimizer")?
                    .unwrap_or(d.optimizer.kind),
                lr: k.f64("source.lr")?.unwrap_or(d.optimizer.lr),
                momentum: k.f64("source.momentum")?.unwrap_or(d.optimizer.momentum),
                weight_decay: k
                    .f64("source.weight_decay")?
                    .unwrap_or(d.optimizer.weight_decay),
            },
            seed,
        };

        p.epochs = k.usize("adapt.epochs")?.unwrap_or(p.epochs);
        p.batch_size = k.usize("adapt.batch_size")?.unwrap_or(p.batch_size);
        p.mc_eval_samples = k
            .usize("adapt.mc_eval_samples")?
            .unwrap_or(p.mc_eval_samples);
        p.train_bn_affine = k
            .bool("adapt.train_bn_affine")?
            .unwrap_or(p.train_bn_affine);
        p.objective.likelihood = k
            .parse::<Likelihood>("objective.likelihood")?
            .unwrap_or(p.objective.likelihood);
        p.objective.beta = k.f64("objective.beta")?.unwrap_or(p.objective.beta);
        p.objective.kl_scale = k.f64("objective.kl_scale")?.unwrap_or(p.objective.kl_scale);
        p.objective.mc_train_samples = k
            .usize("objective.mc_train_samples")?
            .unwrap_or(p.objective.mc_train_samples);
        p.optimizer.kind = k
            .parse::<OptimizerKind>("optimizer.kind")?
            .unwrap_or(p.optimizer.kind);
        p.optimizer.lr = k.f64("optimizer.lr")?.unwrap_or(p.optimizer.lr);
        p.optimizer.momentum = k.f64("optimizer.momentum")?.unwrap_or(p.optimizer.momentum);
        p.optimizer.weight_decay = k
            .f64("optimizer.weight_decay")?
            .unwrap_or(p.optimizer.weight_decay);
        p.perturbation.sharing = k
            .parse::<SharingKind>("perturbation.sharing")?
            .unwrap_or(p.perturbation.sharing);
        p.perturbation.rho_init = k
            .f64("perturbation.rho_init")?
            .unwrap_or(p.perturbation.rho_init);
        p.perturbation.local_reparam = k
            .bool("perturbation.local_reparam")?
            .unwrap_or(p.perturbation.local_reparam);
        let lambda = k.f64("perturbation.lambda")?.unwrap_or(1.0);
        let variance = k.f64("perturbation.prior_variance")?.unwrap_or(1.0);
        p.perturbation.prior = match k.str("perturbation.prior")?.as_deref() {
            None | Some("adaptive") => PriorChoice::Adaptive { lambda },
            Some("isotropic") => PriorChoice::Isotropic { variance },
            Some(other) => {
                return Err(Error::Config(format!(
                    "perturbation.prior: expected adaptive or isotropic, got `{other}`"
                )))
            }
        };

        let d = CorruptionStreamSpec::default();
        let stream = CorruptionStreamSpec {
            classes,
            n_per_class: k.usize("stream.n_per_class")?.unwrap_or(d.n_per_class),
            batch_size: k.usize("stream.batch_size")?.unwrap_or(d.batch_size),
            noise_sigma: noise,
            corruptions: match k.str_list("stream.corruptions")? {
                Some(v) => v
                    .iter()
                    .map(|s| Corruption::from_str(s).map_err(|e| bad("stream.corruptions", e)))
                    .collect::<Result<_>>()?,
                None => d.corruptions,
            },
            severities: match k.usize_list("stream.severities")? {
                Some(v) => v
                    .into_iter()
                    .map(|s| u8::try_from(s).map_err(|_| bad("stream.severities", "out of range")))
                    .collect::<Result<_>>()?,
                None => d.severities,
            },
            seed,
        };
        let output = OutputConfig {
            dir: k
                .str("output.dir")?
                .map(PathBuf::from)
                .unwrap_or_else(|| "out".into()),
            wall_clock: k.bool("output.wall_clock")?.unwrap_or(false),
        };
        debug_assert!(k.0.is_empty(), "unconsumed keys: {:?}", k.0.keys());

        let mut cfg = RunConfig {
            seed,
            source_data,
            target_data,
            holdout_fraction,
            arch,
            source,
            protocol: p,
            stream,
            output,
        };
        cfg.set_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives every component seed from one run seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.source_data.seed = seed.wrapping_mul(4).wrapping_add(1);
        self.target_data.seed = seed.wrapping_mul(4).wrapping_add(2);
        self.source.seed = seed;
        self.protocol.seed = seed;
        self.stream.seed = seed.wrapping_mul(4).wrapping_add(3);
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.source_data.validate().map_err(cfg)?;
        self.target_data.validate().map_err(cfg)?;
        self.protocol.validate().map_err(cfg)?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(
                "data.holdout_fraction must be in (0, 1)".into(),
            ));
        }
        if self.source.batch_size == 0 || !(self.source.optimizer.lr > 0.0) {
            return Err(Error::Config(
                "source.batch_size and source.lr must be positive".into(),
            ));
        }
        if self.stream.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::Config("stream.severities must lie in 1..=5".into()));
        }
        if self.stream.batch_size == 0 || self.stream.n_per_class == 0 {
            return Err(Error::Config("stream sizes must be positive".into()));
        }
        self.arch
            .layers(&self.source_data.input_shape(), self.source_data.classes)?;
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunConfig::parse(s)
    }
}

const KNOWN: &[&str] = &[
    "seed",
    "protocol",
    "method",
    "data.kind",
    "data.n_per_class",
    "data.classes",
    "data.noise_sigma",
    "data.holdout_fraction",
    "target.rotation_deg",
    "target.translation",
    "target.noise_sigma",
    "target.corruption",
    "target.severity",
    "target.n_per_class",
    "arch.kind",
    "arch.hidden",
    "arch.channels",
    "arch.bottleneck",
    "arch.batchnorm",
    "source.epochs",
    "source.batch_size",
    "source.patience",
    "source.optimizer",
    "source.lr",
    "source.momentum",
    "source.weight_decay",
    "adapt.epochs",
    "adapt.batch_size",
    "adapt.mc_eval_samples",
    "adapt.train_bn_affine",
    "objective.likelihood",
    "objective.beta",
    "objective.kl_scale",
    "objective.mc_train_samples",
    "optimizer.kind",
    "optimizer.lr",
    "optimizer.momentum",
    "optimizer.weight_decay",
    "perturbation.sharing",
    "perturbation.rho_init",
    "perturbation.prior",
    "perturbation.lambda",
    "perturbation.prior_variance",
    "perturbation.local_reparam",
    "stream.n_per_class",
    "stream.batch_size",
    "stream.corruptions",
    "stream.severities",
    "output.dir",
    "output.wall_clock",
];

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (key, value) in table {
        let full = if prefix.is_empty() {
            key
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            toml::Value::Table(t) => flatten(&full, t, out),
            v => {
                out.insert(full, v);
            }
        }
    }
}

fn bad(key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {detail}"))
}

struct Keys(BTreeMap<String, toml::Value>);

impl Keys {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.0.remove(key)
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(v)),
            Some(toml::Value::Integer(v)) => Ok(Some(v as f64)),
            Some(v) => Err(bad(key, format!("expected a number, got {v}"))),
        }
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if v >= 0 => Ok(Some(v as u64)),
            Some(v) => Err(bad(
                key,
                format!("expected a non-negative integer, got {v}"),
            )),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn u8(&mut self, key: &str) -> Result<Option<u8>> {
        match self.u64(key)? {
            None => Ok(None),
            Some(v) => u8::try_from(v)
                .map(Some)
                .map_err(|_| bad(key, "out of range")),
        }
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(b)),
            Some(v) => Err(bad(key, format!("expected true or false, got {v}"))),
        }
    }

    fn str(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(bad(key, format!("expected a string, got {v}"))),
        }
    }

    fn parse_str<T, E: std::fmt::Display>(
        &mut self,
        key: &str,
        f: impl Fn(&str) -> std::result::Result<T, E>,
    ) -> Result<Option<T>> {
        self.str(key)?
            .map(|s| f(&s).map_err(|e| bad(key, e)))
            .transpose()
    }

    /// Any snake_case serde enum.
    fn parse<T: serde::de::DeserializeOwned>(&mut self, key: &str) -> Result<Option<T>> {
        self.str(key)?
            .map(|s| {
                T::deserialize(
                    serde::de::value::StrDeserializer::<serde::de::value::Error>::new(&s),
                )
                .map_err(|e| bad(key, e))
            })
            .transpose()
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<toml::Value>>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Array(a)) => Ok(Some(a)),
            Some(v) => Err(bad(key, format!("expected an array, got {v}"))),
        }
    }

    fn f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.list(key)?
            .map(|a| {
                a.into_iter()
                    .map(|v| match v {
                        toml::Value::Float(f) => Ok(f),
                        toml::Value::Integer(i) => Ok(i as f64),
                        v => Err(bad(key, format!("expected numbers, got {v}"))),
                    })
                    .collect()
            })
            .transpose()
    }

    fn usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        self.list(key)?
            .map(|a| {
                a.into_iter()
                    .map(|v| match v {
                        toml::Value::Integer(i) if i >= 0 => Ok(i as usize),
                        v => Err(bad(key, format!("expected non-negative integers, got {v}"))),
                    })
                    .collect()
            })
            .transpose()
    }

    fn str_list(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        self.list(key)?
            .map(|a| {
                a.into_iter()
                    .map(|v| match v {
                        toml::Value::String(s) => Ok(s),
                        v => Err(bad(key, format!("expected strings, got {v}"))),
                    })
                    .collect()
            })
            .transpose()
    }
}
