//! `VMP1` named-tensor container.
//!
//! Layout (little-endian): magic `VMP1`, `u32` entry count, then per entry
//! `u16` name length, UTF-8 name, `u8` dtype (0 = f64), `u8` rank, `u32`
//! per dim, raw payload. Entries are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{BnState, LayerSpec, SourceModel};
use crate::perturbation::{PerturbationSet, SharingKind, SharingScheme};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VMP1";
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Mismatch(format!("container has no entry `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("entry name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::contract(format!("rank of `{name}` exceeds 255")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::contract(format!("dim of `{name}` exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Container> {
        let fail = |detail: String| Error::Format {
            path: origin.to_path_buf(),
            detail,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(&fail)? != MAGIC {
            return Err(fail("bad magic (expected VMP1)".into()));
        }
        let count = r.u32().map_err(&fail)?;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let len = r.u16().map_err(&fail)? as usize;
            let name = std::str::from_utf8(r.take(len).map_err(&fail)?)
                .map_err(|_| fail(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let dtype = r.u8().map_err(&fail)?;
            if dtype != DTYPE_F64 {
                return Err(fail(format!("entry `{name}`: unsupported dtype {dtype}")));
            }
            let rank = r.u8().map_err(&fail)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().map_err(&fail)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| fail(format!("entry `{name}`: payload size overflows")))?;
            let payload = r
                .take(n)
                .map_err(|e| fail(format!("entry `{name}`: {e}")))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| fail(e.to_string()))?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(fail(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn arch_row(spec: &LayerSpec) -> [f64; 5] {
    let f = |v: usize| v as f64;
    match *spec {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => [0.0, f(in_features), f(out_features), 0.0, 0.0],
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
        } => [
            1.0,
            f(kernel_h),
            f(kernel_w),
            f(in_channels),
            f(out_channels),
        ],
        LayerSpec::BatchNorm { features } => [2.0, f(features), 0.0, 0.0, 0.0],
        LayerSpec::Relu => [3.0, 0.0, 0.0, 0.0, 0.0],
        LayerSpec::Flatten => [4.0, 0.0, 0.0, 0.0, 0.0],
    }
}

fn as_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Mismatch(format!("{what}: {v} is not a valid size")))
    }
}

fn spec_of(row: &[f64]) -> Result<LayerSpec> {
    let u = |i: usize| as_usize(row[i], "meta.arch");
    Ok(match row[0] as i64 {
        0 => LayerSpec::Dense {
            in_features: u(1)?,
            out_features: u(2)?,
        },
        1 => LayerSpec::Conv2d {
            kernel_h: u(1)?,
            kernel_w: u(2)?,
            in_channels: u(3)?,
            out_channels: u(4)?,
        },
        2 => LayerSpec::BatchNorm { features: u(1)? },
        3 => LayerSpec::Relu,
        4 => LayerSpec::Flatten,
        k => {
            return Err(Error::Mismatch(format!(
                "unknown layer code {k} in meta.arch"
            )))
        }
    })
}

/// Weights, biases, BN state and architecture metadata.
pub fn model_to_container(model: &SourceModel) -> Result<Container> {
    let mut c = Container::default();
    let rows: Vec<Vec<f64>> = model.layers.iter().map(|s| arch_row(s).to_vec()).collect();
    let arch = if rows.is_empty() {
        Tensor::zeros(&[0, 5])
    } else {
        Tensor::from_rows(&rows)?
    };
    c.insert("meta.arch", arch);
    c.insert(
        "meta.input_shape",
        Tensor::vector(model.input_shape.iter().map(|&d| d as f64).collect()),
    );
    for (l, w) in &model.weights {
        c.insert(format!("layer{l}.weight"), w.clone());
    }
    for (l, b) in &model.biases {
        c.insert(format!("layer{l}.bias"), b.clone());
    }
    for (l, s) in &model.bn {
        c.insert(format!("layer{l}.bn.running_mean"), s.running_mean.clone());
        c.insert(format!("layer{l}.bn.running_var"), s.running_var.clone());
        c.insert(format!("layer{l}.bn.gamma"), s.gamma.clone());
        c.insert(format!("layer{l}.bn.beta"), s.beta.clone());
        c.insert(format!("layer{l}.bn.momentum"), Tensor::scalar(s.momentum));
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<SourceModel> {
    let arch = c.require("meta.arch")?;
    if arch.rank() != 2 || arch.row_len() != 5 {
        return Err(Error::Mismatch(format!(
            "meta.arch has shape {:?}",
            arch.shape()
        )));
    }
    let layers = (0..arch.rows())
        .map(|i| spec_of(arch.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let input_shape = c
        .require("meta.input_shape")?
        .data()
        .iter()
        .map(|&v| as_usize(v, "meta.input_shape"))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    let mut bn = BTreeMap::new();
    for (l, spec) in layers.iter().enumerate() {
        match spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                weights.insert(l, c.require(&format!("layer{l}.weight"))?.clone());
                biases.insert(l, c.require(&format!("layer{l}.bias"))?.clone());
            }
            LayerSpec::BatchNorm { .. } => {
                let get = |k: &str| c.require(&format!("layer{l}.bn.{k}")).cloned();
                bn.insert(
                    l,
                    BnState {
                        running_mean: get("running_mean")?,
                        running_var: get("running_var")?,
                        gamma: get("gamma")?,
                        beta: get("beta")?,
                        momentum: get("momentum")?.data()[0],
                    },
                );
            }
            _ => {}
        }
    }
    let model = SourceModel {
        input_shape,
        layers,
        weights,
        biases,
        bn,
    };
    model
        .validate()
        .map_err(|e| Error::Mismatch(e.to_string()))?;
    Ok(model)
}

/// `rho` per group plus `[sharing code, groups, out units]` per layer.
pub fn perturbation_to_container(pert: &PerturbationSet) -> Container {
    let mut c = Container::default();
    c.insert(
        "meta.sharing",
        Tensor::scalar(pert.scheme.kind.code() as f64),
    );
    for (l, rho) in &pert.rho {
        c.insert(format!("layer{l}.rho"), rho.clone());
        let g = &pert.scheme.layers[l];
        c.insert(
            format!("layer{l}.rho_groups"),
            Tensor::vector(vec![
                pert.scheme.kind.code() as f64,
                pert.scheme.group_count(*l) as f64,
                g.out_units as f64,
            ]),
        );
    }
    c
}

/// Rebuilds a perturbation for `model`; group layout must match.
pub fn perturbation_from_container(c: &Container, model: &SourceModel) -> Result<PerturbationSet> {
    let code = c
        .require("meta.sharing")?
        .data()
        .first()
        .copied()
        .unwrap_or(-1.0);
    let kind = u8::try_from(code as i64)
        .ok()
        .and_then(SharingKind::from_code)
        .ok_or_else(|| Error::Mismatch(format!("unknown sharing code {code}")))?;
    let scheme = SharingScheme::new(model, kind);
    let mut rho = BTreeMap::new();
    for &l in scheme.layers.keys() {
        let r = c.require(&format!("layer{l}.rho"))?;
        if r.shape() != [scheme.group_count(l)] {
            return Err(Error::Mismatch(format!(
                "layer{l}.rho has shape {:?}, model needs [{}]",
                r.shape(),
                scheme.group_count(l)
            )));
        }
        rho.insert(l, r.clone());
    }
    let stray = c
        .entries
        .keys()
        .find(|k| k.ends_with(".rho") && !rho.keys().any(|l| **k == format!("layer{l}.rho")));
    if let Some(k) = stray {
        return Err(Error::Mismatch(format!(
            "`{k}` has no perturbable layer in the model"
        )));
    }
    let pert = PerturbationSet { rho, scheme };
    pert.check_against(model)?;
    Ok(pert)
}
