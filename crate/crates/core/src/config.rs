//! Plain-text `key=value` configuration with dotted section prefixes.
//!
//! Values use TOML literal syntax (`0.001`, `true`, `[8, 16]`, `"text"`); a value
//! that is not a valid literal is taken as a bare string, so `policy=u-ones`
//! works unquoted. Keys map onto nested serde structs, and unknown keys are
//! rejected by those structs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::backbone::BackboneConfig;
use crate::causalhead::LossWeights;
use crate::error::{Error, Result};
use crate::ingest::UncertainPolicy;
use crate::semfuse::FusionConfig;

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

pub fn parse_kv(text: &str, path: &Path) -> Result<Table> {
    let mut root = Table::new();
    for (no, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: no + 1,
            msg,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty() || !p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')) {
            return Err(err(format!("bad key {:?}", key.trim())));
        }
        let mut table = &mut root;
        for p in &parts[..parts.len() - 1] {
            let slot = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            table = slot.as_table_mut().ok_or_else(|| err(format!("{p} is both a value and a section")))?;
        }
        let last = parts[parts.len() - 1];
        if table.contains_key(last) {
            return Err(err(format!("duplicate key {}", key.trim())));
        }
        table.insert(last.to_string(), parse_value(raw.trim()));
    }
    Ok(root)
}

pub fn from_kv_str<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let table = parse_kv(text, path)?;
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn read_kv<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_kv_str(&text, path)
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push(format!("{key}={other}")),
        }
    }
}

/// Canonical text form: one sorted `key=value` line per leaf.
pub fn to_kv<T: Serialize>(value: &T) -> Result<String> {
    let v = Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    let table = v.as_table().ok_or_else(|| Error::Config("config is not a table".into()))?;
    let mut lines = Vec::new();
    flatten("", table, &mut lines);
    let mut s = lines.join("\n");
    s.push('\n');
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_r: usize,
    pub causal_hidden: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    /// Block the task loss from reaching the confounder branch.
    pub stop_grad_confounder: bool,
    /// Replace the confounder with zeros when scoring.
    pub zero_confounder_at_test: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_r: 64,
            causal_hidden: 128,
            decoder_layers: 2,
            vocab_size: 64,
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            stop_grad_confounder: false,
            zero_confounder_at_test: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = diffcore::AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> diffcore::AdamConfig {
        diffcore::AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Fitting steps per main step.
    pub steps: usize,
    pub lr: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { steps: 3, lr: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 2000,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub iv_learning: bool,
    pub semantic_fusion: bool,
    pub valid_iv_constraints: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Self {
            iv_learning: on,
            semantic_fusion: on,
            valid_iv_constraints: on,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: String,
    pub eval_manifest: String,
    pub policy: UncertainPolicy,
    pub resize_to: usize,
    pub crop_to: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: String::new(),
            eval_manifest: String::new(),
            policy: UncertainPolicy::UOnes,
            resize_to: 256,
            crop_to: 224,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub estimator: EstimatorConfig,
    pub train: LoopConfig,
    pub toggles: Toggles,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            estimator: EstimatorConfig::default(),
            train: LoopConfig::default(),
            toggles: Toggles::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let cfg: Self = read_kv(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr must be positive");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.model.decoder_layers == 0 {
            return bad("model.decoder_layers must be at least 1");
        }
        if self.model.d == 0 || self.model.d_r == 0 || self.model.causal_hidden == 0 {
            return bad("model widths must be positive");
        }
        if self.model.vocab_size < 2 {
            return bad("model.vocab_size must cover <pad> and <cls>");
        }
        if self.model.fusion.max_len == 0 {
            return bad("model.fusion.max_len must be positive");
        }
        self.model.backbone.pooled_blocks().map_err(|e| Error::Config(e.to_string()))?;
        if self.loss.as_array().iter().any(|w| !w.is_finite()) {
            return bad("loss weights must be finite");
        }
        Ok(())
    }

    /// Digest of everything that shapes a run except its length, so a run can
    /// be resumed with a larger step budget.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.train.max_steps = 0;
        let text = to_kv(&c)?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Manifest path resolved against the directory of the config file.
    pub fn resolve(&self, base: &Path, p: &str) -> Option<PathBuf> {
        (!p.is_empty()).then(|| base.join(p))
    }
}
