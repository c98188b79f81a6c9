//! Run configuration: TOML file merged onto defaults, then `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::SegConfig;
use crate::error::{Error, Result};
use crate::maclip::{ContrastiveTargets, MaClipConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub datasets: Vec<String>,
    pub weights: Vec<f64>,
    pub train_per_dataset: usize,
    pub eval_per_dataset: usize,
    pub augment: bool,
    /// Cache root; `RGBX_CACHE_DIR` is used when empty.
    pub cache_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            datasets: ["deliver", "mfnet", "nyu", "rgbp", "urbanlf"].map(String::from).to_vec(),
            weights: vec![1.0; 5],
            train_per_dataset: 200,
            eval_per_dataset: 50,
            augment: true,
            cache_dir: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub targets: ContrastiveTargets,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch: 8, lr: 1e-4, targets: ContrastiveTargets::Index }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 4, lr: 8e-4, weight_decay: 0.01, poly_power: 0.9, eval_every: 0, log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub dataset: String,
    pub steps: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { dataset: "mfnet".into(), steps: 300, lr: 2e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<String>,
    pub pairings: Vec<String>,
    /// Training steps per ablation run; 0 means `train.steps`.
    pub steps: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: vec!["h".into(), "i".into()],
            pairings: vec!["aligned".into(), "cross_modal".into(), "rgb_dominant".into()],
            steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub batch: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self { batch: 1, warmup: 5, repetitions: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `"joint"`, `"finetune"` or `"init"` (untrained weights).
    pub checkpoint: String,
    pub batch: usize,
    pub export_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { checkpoint: "joint".into(), batch: 16, export_samples: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    pub out_dir: String,
    pub data: DataConfig,
    pub maclip: MaClipConfig,
    pub pretrain: PretrainConfig,
    pub model: SegConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub ablate: AblateConfig,
    pub eval: EvalConfig,
    pub latency: LatencyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: "f32".into(),
            out_dir: "runs/default".into(),
            data: DataConfig::default(),
            maclip: MaClipConfig::default(),
            pretrain: PretrainConfig::default(),
            model: SegConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablate: AblateConfig::default(),
            eval: EvalConfig::default(),
            latency: LatencyConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a scalar override; anything that is not valid TOML becomes a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_parts::<&str>(Some(text), &[])
    }

    /// Defaults, then the file contents (if any), then `key=value` overrides.
    pub fn from_parts<S: AsRef<str>>(text: Option<&str>, overrides: &[S]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = text {
            let file: toml::Table = toml::from_str(t).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(file));
        }
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let mut over = parse_value(raw.trim());
            for part in key.trim().rsplit('.') {
                let mut t = toml::Table::new();
                t.insert(part.to_string(), over);
                over = toml::Value::Table(t);
            }
            merge(&mut value, over);
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::from_parts(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32" && self.dtype != "f64" {
            return Err(Error::Config(format!("dtype must be f32 or f64, got `{}`", self.dtype)));
        }
        if self.data.datasets.len() != self.data.weights.len() {
            return Err(Error::Config("data.weights needs one entry per dataset".into()));
        }
        if self.model.embed_dim != self.maclip.embed_dim {
            return Err(Error::Config("model.embed_dim must equal maclip.embed_dim".into()));
        }
        if self.model.image_size != self.maclip.image_size {
            return Err(Error::Config("model.image_size must equal maclip.image_size".into()));
        }
        if self.train.batch == 0 || self.pretrain.batch == 0 || self.eval.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.model.validate()
    }

    pub fn dtype(&self) -> candle_core::DType {
        if self.dtype == "f64" {
            candle_core::DType::F64
        } else {
            candle_core::DType::F32
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }
}
