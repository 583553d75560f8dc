//! Flat dotted-key settings: defaults, then a JSON config file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use crate::raster::Compositing;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("config file {path}: {detail}")]
    File { path: PathBuf, detail: String },
}

/// Every setting the command line exposes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub vocabulary: Option<PathBuf>,
}

/// Recognised keys, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.manifest",
    "data.vocabulary",
    "gsr.voxel_size",
    "gsr.hidden_channels",
    "gsr.mlp_hidden",
    "gsr.heads",
    "gsr.mapping",
    "gsr.attention",
    "raster.dilation",
    "raster.min_alpha",
    "raster.transmittance_stop",
    "raster.alpha_clamp",
    "raster.cutoff_sigma",
    "raster.near",
    "raster.tile_size",
    "raster.jacobian_guard",
    "raster.compositing",
    "loss.temperature",
    "loss.reduction",
    "loss.cosine",
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.max_steps",
    "train.momentum",
    "train.checkpoint_every",
    "train.unseen",
    "augment.scale_min",
    "augment.scale_max",
    "augment.rotation",
    "augment.flip_prob",
];

fn invalid(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        detail: detail.into(),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    let x = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    };
    x.filter(|x| x.is_finite()).ok_or_else(|| invalid(key, format!("expected a finite number, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    let x = match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    };
    x.ok_or_else(|| invalid(key, format!("expected a non-negative integer, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    usize::try_from(as_u64(key, v)?).map_err(|e| invalid(key, e.to_string()))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    match v {
        Value::Bool(b) => Ok(*b),
        Value::String(s) if s == "true" => Ok(true),
        Value::String(s) if s == "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got {v}"))),
    }
}

fn optional_path(key: &str, v: &Value) -> Result<Option<PathBuf>, ConfigError> {
    match v {
        Value::Null => Ok(None),
        v => Ok(Some(PathBuf::from(as_string(key, v)?))),
    }
}

fn as_string(key: &str, v: &Value) -> Result<String, ConfigError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        _ => Err(invalid(key, format!("expected a string, got {v}"))),
    }
}

/// Accepts `"a,b"` or `["a", "b"]`.
fn as_list(key: &str, v: &Value) -> Result<Vec<String>, ConfigError> {
    match v {
        Value::String(s) => Ok(s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()),
        Value::Array(items) => items.iter().map(|i| as_string(key, i)).collect(),
        _ => Err(invalid(key, format!("expected a list of names, got {v}"))),
    }
}

fn parsed<T: std::str::FromStr>(key: &str, v: &Value) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    as_string(key, v)?.parse().map_err(|e: T::Err| invalid(key, e.to_string()))
}

impl Settings {
    /// Applies one key. Numbers may also arrive as strings, as they do from flags.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = as_u64(key, v)?,
            "data.manifest" => self.manifest = optional_path(key, v)?,
            "data.vocabulary" => self.vocabulary = optional_path(key, v)?,
            "gsr.voxel_size" => t.gsr.voxel_size = as_f64(key, v)?,
            "gsr.hidden_channels" => t.gsr.hidden_channels = as_usize(key, v)?,
            "gsr.mlp_hidden" => t.gsr.mlp_hidden = as_usize(key, v)?,
            "gsr.heads" => t.gsr.heads = as_usize(key, v)?,
            "gsr.mapping" => t.gsr.mapping = parsed(key, v)?,
            "gsr.attention" => t.gsr.attention = parsed(key, v)?,
            "raster.dilation" => t.raster.dilation = as_f64(key, v)?,
            "raster.min_alpha" => t.raster.min_alpha = as_f64(key, v)?,
            "raster.transmittance_stop" => t.raster.transmittance_stop = as_f64(key, v)?,
            "raster.alpha_clamp" => t.raster.alpha_clamp = as_f64(key, v)?,
            "raster.cutoff_sigma" => t.raster.cutoff_sigma = as_f64(key, v)?,
            "raster.near" => t.raster.near = as_f64(key, v)?,
            "raster.tile_size" => {
                t.raster.tile_size = u32::try_from(as_u64(key, v)?).map_err(|e| invalid(key, e.to_string()))?
            }
            "raster.jacobian_guard" => {
                t.raster.jacobian_guard = match v {
                    Value::String(s) if s == "inf" => f64::INFINITY,
                    _ => as_f64(key, v)?,
                }
            }
            "raster.compositing" => {
                t.raster.compositing = match as_string(key, v)?.as_str() {
                    "front-to-back" => Compositing::FrontToBack,
                    "additive" => Compositing::Additive,
                    other => return Err(invalid(key, format!("unknown compositing {other:?}"))),
                }
            }
            "loss.temperature" => t.loss.temperature = as_f64(key, v)?,
            "loss.reduction" => t.loss.reduction = parsed(key, v)?,
            "loss.cosine" => t.cosine = as_bool(key, v)?,
            "train.lr" => t.learning_rate = as_f64(key, v)?,
            "train.batch" => t.batch_size = as_usize(key, v)?,
            "train.epochs" => t.epochs = as_usize(key, v)?,
            "train.max_steps" => {
                t.max_steps = match v {
                    Value::Null => None,
                    _ => Some(as_usize(key, v)?),
                }
            }
            "train.momentum" => t.momentum = as_f64(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = as_usize(key, v)?,
            "train.unseen" => t.unseen = as_list(key, v)?,
            "augment.scale_min" => t.augment.scale_range.0 = as_f64(key, v)?,
            "augment.scale_max" => t.augment.scale_range.1 = as_f64(key, v)?,
            "augment.rotation" => t.augment.rotation_range = as_f64(key, v)?,
            "augment.flip_prob" => t.augment.flip_prob = as_f64(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a JSON object of dotted keys.
    pub fn merge_json(&mut self, text: &str) -> Result<(), ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| invalid("<config>", e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(invalid("<config>", "top level must be an object"));
        };
        for (k, v) in &map {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Unreadable files are [`ConfigError::File`]; bad contents report the key.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        self.merge_json(&text)
    }

    /// Current value of every key.
    pub fn effective(&self) -> BTreeMap<&'static str, Value> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(Value::Null, |p| Value::from(p.display().to_string()));
        let mut m = BTreeMap::new();
        let mut put = |k: &'static str, v: Value| {
            m.insert(k, v);
        };
        put("seed", t.seed.into());
        put("data.manifest", path(&self.manifest));
        put("data.vocabulary", path(&self.vocabulary));
        put("gsr.voxel_size", t.gsr.voxel_size.into());
        put("gsr.hidden_channels", t.gsr.hidden_channels.into());
        put("gsr.mlp_hidden", t.gsr.mlp_hidden.into());
        put("gsr.heads", t.gsr.heads.into());
        put(
            "gsr.mapping",
            match t.gsr.mapping {
                crate::gsr::PointMapping::Nearest => "nearest",
                crate::gsr::PointMapping::Trilinear => "trilinear",
            }
            .into(),
        );
        put(
            "gsr.attention",
            match t.gsr.attention {
                crate::gsr::AttentionMode::SelfOnly => "self",
                crate::gsr::AttentionMode::VoxelSet => "voxel-set",
            }
            .into(),
        );
        put("raster.dilation", t.raster.dilation.into());
        put("raster.min_alpha", t.raster.min_alpha.into());
        put("raster.transmittance_stop", t.raster.transmittance_stop.into());
        put("raster.alpha_clamp", t.raster.alpha_clamp.into());
        put("raster.cutoff_sigma", t.raster.cutoff_sigma.into());
        put("raster.near", t.raster.near.into());
        put("raster.tile_size", t.raster.tile_size.into());
        put("raster.jacobian_guard", if t.raster.jacobian_guard.is_finite() { t.raster.jacobian_guard.into() } else { Value::from("inf") });
        put(
            "raster.compositing",
            match t.raster.compositing {
                Compositing::FrontToBack => "front-to-back",
                Compositing::Additive => "additive",
            }
            .into(),
        );
        put("loss.temperature", t.loss.temperature.into());
        put(
            "loss.reduction",
            match t.loss.reduction {
                crate::ccl::Reduction::Mean => "mean",
                crate::ccl::Reduction::Sum => "sum",
            }
            .into(),
        );
        put("loss.cosine", t.cosine.into());
        put("train.lr", t.learning_rate.into());
        put("train.batch", t.batch_size.into());
        put("train.epochs", t.epochs.into());
        put("train.max_steps", t.max_steps.map_or(Value::Null, Value::from));
        put("train.momentum", t.momentum.into());
        put("train.checkpoint_every", t.checkpoint_every.into());
        put("train.unseen", Value::from(t.unseen.clone()));
        put("augment.scale_min", t.augment.scale_range.0.into());
        put("augment.scale_max", t.augment.scale_range.1.into());
        put("augment.rotation", t.augment.rotation_range.into());
        put("augment.flip_prob", t.augment.flip_prob.into());
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.effective()).expect("settings serialize")
    }
}
