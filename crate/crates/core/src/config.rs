//! `key = value` run-config text.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::gvp::Variant;
use crate::model::{ModelConfig, TaskMode};
use crate::train::{LossKind, MetricKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// One `key = value` entry and its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits config text into entries. `#` starts a comment; blank lines are
/// skipped; a repeated key is an error.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError { line, message: format!("expected `key = value`, got {body:?}") });
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(ConfigError { line, message: "empty key".into() });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfigError { line, message: format!("duplicate key {key:?}") });
        }
        out.push(Entry { line, key: key.into(), value: value.into() });
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

/// Accepted spellings of a task mode.
pub fn task_mode_name(m: TaskMode) -> &'static str {
    match m {
        TaskMode::Pool => "pool",
        TaskMode::NodeReadout => "node_readout",
        TaskMode::Paired => "paired",
    }
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Gated => "gated",
        Variant::Original => "original",
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 12] = [
        "in_scalars",
        "node_scalars",
        "node_vectors",
        "edge_scalars",
        "num_layers",
        "msg_gvps",
        "ff_gvps",
        "dropout",
        "head_hidden",
        "output_dim",
        "task_mode",
        "variant",
    ];

    /// Sets `key`. `Ok(false)` means the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "in_scalars" => self.in_scalars = parse(key, value)?,
            "node_scalars" => self.node_dims.0 = parse(key, value)?,
            "node_vectors" => self.node_dims.1 = parse(key, value)?,
            "edge_scalars" => self.edge_dims.0 = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "msg_gvps" => self.msg_gvps = parse(key, value)?,
            "ff_gvps" => self.ff_gvps = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "output_dim" => self.output_dim = parse(key, value)?,
            "task_mode" => {
                self.task_mode = [TaskMode::Pool, TaskMode::NodeReadout, TaskMode::Paired]
                    .into_iter()
                    .find(|m| task_mode_name(*m) == value)
                    .ok_or_else(|| format!("unknown task_mode {value:?} (pool, node_readout, paired)"))?
            }
            "variant" => {
                self.variant = match value {
                    "gated" => Variant::Gated,
                    "original" => Variant::Original,
                    _ => return Err(format!("unknown variant {value:?} (gated, original)")),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "in_scalars = {}", self.in_scalars);
        let _ = writeln!(s, "node_scalars = {}", self.node_dims.0);
        let _ = writeln!(s, "node_vectors = {}", self.node_dims.1);
        let _ = writeln!(s, "edge_scalars = {}", self.edge_dims.0);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "msg_gvps = {}", self.msg_gvps);
        let _ = writeln!(s, "ff_gvps = {}", self.ff_gvps);
        let _ = writeln!(s, "dropout = {:?}", self.dropout);
        let _ = writeln!(s, "head_hidden = {}", self.head_hidden);
        let _ = writeln!(s, "output_dim = {}", self.output_dim);
        let _ = writeln!(s, "task_mode = {}", task_mode_name(self.task_mode));
        let _ = writeln!(s, "variant = {}", variant_name(self.variant));
        s
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 9] = ["lr", "batch_size", "max_epochs", "seed", "loss", "metric", "beta1", "beta2", "eps"];

    /// Sets `key`. `Ok(false)` means the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss" => self.loss = LossKind::from_str(value)?,
            "metric" => self.metric = if value == "none" { None } else { Some(MetricKind::from_str(value)?) },
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss = {}", self.loss.name());
        let _ = writeln!(s, "metric = {}", self.metric.map_or("none", MetricKind::name));
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "eps = {:?}", self.eps);
        s
    }
}

/// Model config plus the initialization seed, as echoed in checkpoints.
pub fn model_text(cfg: &ModelConfig, seed: u64) -> String {
    let mut s = cfg.to_text();
    let _ = writeln!(s, "seed = {seed}");
    s
}

pub fn parse_model_text(text: &str) -> Result<(ModelConfig, u64), ConfigError> {
    let mut cfg = ModelConfig::default();
    let mut seed = None;
    for e in parse_entries(text)? {
        let err = |message: String| ConfigError { line: e.line, message };
        if e.key == "seed" {
            seed = Some(parse(&e.key, &e.value).map_err(err)?);
        } else if !cfg.set(&e.key, &e.value).map_err(err)? {
            return Err(ConfigError { line: e.line, message: format!("unknown key {:?}", e.key) });
        }
    }
    let seed = seed.ok_or_else(|| ConfigError { line: 0, message: "missing seed".to_string() })?;
    Ok((cfg, seed))
}
