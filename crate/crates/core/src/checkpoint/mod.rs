//! `.dckpt.json` checkpoints: one JSON document per training step, with every
//! double stored as a hex-float string so that save/load is bit-exact.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "method_tag": "dora",
//!   "step": 200,
//!   "seed": 7,
//!   "layers": [
//!     {"name": "fc1", "role": "W0", "rows": 32, "cols": 16, "data": ["0x1.8p-3", ...]},
//!     {"name": "fc1", "role": "m", "rows": 1, "cols": 16, "data": [...]}
//!   ],
//!   "adapters": {"fc1": {"variant": "dora", "rank": 4, ...}},
//!   "config": { ... }
//! }
//! ```
//!
//! Tensors whose name has an `adapters` entry are reassembled into an
//! [`AdapterLayer`]; any other tensor must have role `full` and is a plain
//! parameter (bias, head, embedding). A `decimal` array may accompany `data`
//! for human readers; it is ignored on load.

pub mod hexfloat;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterConfig, AdapterError, AdapterLayer, Role};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[FORMAT_VERSION];
pub const EXTENSION: &str = "dckpt.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: refusing to overwrite existing file")]
    Collision { path: PathBuf },
    #[error("malformed checkpoint at `{field}`: {message}")]
    Malformed { field: String, message: String },
    #[error("unsupported format_version {found}; supported: {supported:?}")]
    Version { found: u64, supported: &'static [u32] },
    #[error("invalid checkpoint at `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("layer {layer:?}: {source}")]
    Adapter {
        layer: String,
        #[source]
        source: AdapterError,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: Role,
    pub value: Matrix,
}

/// Snapshot of every parameter of a model at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub method_tag: String,
    pub step: u64,
    pub seed: u64,
    pub layers: Vec<NamedTensor>,
    pub adapters: BTreeMap<String, AdapterConfig>,
    /// Echo of the configuration that produced this checkpoint.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    name: String,
    role: Role,
    rows: usize,
    cols: usize,
    data: Vec<String>,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    decimal: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawCheckpoint {
    format_version: u64,
    method_tag: String,
    step: u64,
    seed: u64,
    layers: Vec<RawTensor>,
    #[serde(default)]
    adapters: BTreeMap<String, AdapterConfig>,
    #[serde(default)]
    config: serde_json::Value,
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn new(method_tag: impl Into<String>, step: u64, seed: u64, config: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            method_tag: method_tag.into(),
            step,
            seed,
            layers: Vec::new(),
            adapters: BTreeMap::new(),
            config,
        }
    }

    /// Appends every stored tensor of `layer` under `name`.
    pub fn push_adapter(&mut self, name: &str, layer: &AdapterLayer) {
        for role in layer.variant().stored_roles() {
            if let Some(value) = layer.role(*role) {
                self.layers.push(NamedTensor {
                    name: name.to_string(),
                    role: *role,
                    value,
                });
            }
        }
        self.adapters.insert(name.to_string(), layer.config.clone());
    }

    pub fn push_plain(&mut self, name: &str, value: &Matrix) {
        self.layers.push(NamedTensor {
            name: name.to_string(),
            role: Role::Full,
            value: value.clone(),
        });
    }

    /// Reassembles every adapted layer, in name order.
    pub fn adapter_layers(&self) -> Result<Vec<(String, AdapterLayer)>> {
        self.adapters
            .iter()
            .map(|(name, cfg)| {
                let wrap = |source| CheckpointError::Adapter {
                    layer: name.clone(),
                    source,
                };
                let tensors: BTreeMap<Role, &Matrix> = self
                    .layers
                    .iter()
                    .filter(|t| &t.name == name)
                    .map(|t| (t.role, &t.value))
                    .collect();
                let w0 = tensors
                    .get(&Role::W0)
                    .ok_or_else(|| wrap(AdapterError::MissingParam(format!("{name}.W0"))))?;
                let mut layer = AdapterLayer {
                    config: cfg.clone(),
                    base: (*w0).clone(),
                    full: None,
                    magnitude: None,
                    lora_b: None,
                    lora_a: None,
                    lambda_b: None,
                    lambda_d: None,
                };
                for role in cfg.variant.stored_roles() {
                    let value = tensors
                        .get(role)
                        .ok_or_else(|| wrap(AdapterError::MissingParam(format!("{name}.{}", role.leaf_name()))))?;
                    layer.set_role(*role, (*value).clone()).map_err(wrap)?;
                }
                if let Some(extra) = tensors.keys().find(|r| !cfg.variant.stored_roles().contains(r)) {
                    return Err(invalid(
                        format!("layers[{name}]"),
                        format!("role {extra:?} does not belong to variant {}", cfg.variant),
                    ));
                }
                Ok((name.clone(), layer))
            })
            .collect()
    }

    /// Tensors without an adapter entry (biases, heads, ...).
    pub fn plain_tensors(&self) -> BTreeMap<String, Matrix> {
        self.layers
            .iter()
            .filter(|t| !self.adapters.contains_key(&t.name))
            .map(|t| (t.name.clone(), t.value.clone()))
            .collect()
    }

    /// Pre-trained `W0` of every adapted layer.
    pub fn base_weights(&self) -> BTreeMap<String, Matrix> {
        self.layers
            .iter()
            .filter(|t| t.role == Role::W0 && self.adapters.contains_key(&t.name))
            .map(|t| (t.name.clone(), t.value.clone()))
            .collect()
    }

    /// Merged dense weight of every adapted layer.
    pub fn to_effective(&self) -> Result<BTreeMap<String, Matrix>> {
        self.adapter_layers()?
            .into_iter()
            .map(|(name, layer)| {
                let merged = layer.merge().map_err(|source| CheckpointError::Adapter {
                    layer: name.clone(),
                    source,
                })?;
                Ok((name, merged))
            })
            .collect()
    }

    /// Merged adapted layers plus every plain tensor, keyed by name.
    pub fn all_weights(&self) -> Result<BTreeMap<String, Matrix>> {
        let mut out = self.plain_tensors();
        out.extend(self.to_effective()?);
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, t) in self.layers.iter().enumerate() {
            if !seen.insert((t.name.as_str(), t.role)) {
                return Err(invalid(format!("layers[{i}]"), format!("duplicate {}/{:?}", t.name, t.role)));
            }
            if !self.adapters.contains_key(&t.name) && t.role != Role::Full {
                return Err(invalid(
                    format!("layers[{i}].role"),
                    format!("tensor {:?} has role {:?} but no adapter entry", t.name, t.role),
                ));
            }
            if !t.value.is_finite() {
                return Err(invalid(format!("layers[{i}].data"), "non-finite value"));
            }
        }
        for (name, cfg) in &self.adapters {
            cfg.validate().map_err(|source| CheckpointError::Adapter {
                layer: name.clone(),
                source,
            })?;
        }
        self.adapter_layers()?;
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawCheckpoint {
            format_version: u64::from(self.format_version),
            method_tag: self.method_tag.clone(),
            step: self.step,
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|t| RawTensor {
                    name: t.name.clone(),
                    role: t.role,
                    rows: t.value.rows(),
                    cols: t.value.cols(),
                    data: t.value.data().iter().map(|v| hexfloat::format(*v)).collect(),
                    decimal: None,
                })
                .collect(),
            adapters: self.adapters.clone(),
            config: self.config.clone(),
        };
        let mut s = serde_json::to_string_pretty(&raw).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CheckpointError::Malformed {
            field: "<document>".into(),
            message: e.to_string(),
        })?;
        // check the version before anything else so old/new files get a clear error
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if SUPPORTED_VERSIONS.iter().any(|s| u64::from(*s) == v) => {}
            Some(found) => {
                return Err(CheckpointError::Version {
                    found,
                    supported: SUPPORTED_VERSIONS,
                })
            }
            None => {
                return Err(CheckpointError::Malformed {
                    field: "format_version".into(),
                    message: "missing or not an unsigned integer".into(),
                })
            }
        }
        let raw: RawCheckpoint = serde_path_to_error::deserialize(value).map_err(|e| CheckpointError::Malformed {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let layers = raw
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let data = t
                    .data
                    .iter()
                    .enumerate()
                    .map(|(j, s)| hexfloat::parse(s).map_err(|m| invalid(format!("layers[{i}].data[{j}]"), m)))
                    .collect::<Result<Vec<f64>>>()?;
                let value = Matrix::from_vec(t.rows, t.cols, data).map_err(|e| invalid(format!("layers[{i}]"), e.to_string()))?;
                Ok(NamedTensor {
                    name: t.name,
                    role: t.role,
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ckpt = Checkpoint {
            format_version: raw.format_version as u32,
            method_tag: raw.method_tag,
            step: raw.step,
            seed: raw.seed,
            layers,
            adapters: raw.adapters,
            config: raw.config,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes the checkpoint; fails rather than overwrite an existing file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        let mut file = OpenOptions::new().write(true).create_new(true).open(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::AlreadyExists {
                CheckpointError::Collision { path: path.into() }
            } else {
                CheckpointError::Io {
                    path: path.into(),
                    source,
                }
            }
        })?;
        file.write_all(self.to_json_string().as_bytes())
            .and_then(|_| file.sync_all())
            .map_err(|source| CheckpointError::Io {
                path: path.into(),
                source,
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// Conventional file name for a step, e.g. `step-000200.dckpt.json`.
    pub fn file_name(step: u64) -> String {
        format!("step-{step:06}.{EXTENSION}")
    }
}
