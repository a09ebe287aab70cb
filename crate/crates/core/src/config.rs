//! Run configuration: a TOML document with defaults for every key, dotted
//! `key=value` overrides, and a canonical resolved form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::FineTuneStrategy;
use crate::batching::AugmentConfig;
use crate::datagen::SourceDatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricsConfig;
use crate::models::{ArchKind, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch_2d: String,
    pub arch_3d: String,
    pub width_2d: usize,
    pub width_3d: usize,
    /// Slices per forward pass when predicting whole volumes with the 2D
    /// model; 0 means all at once.
    pub slice_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch_2d: "unet2d".into(),
            arch_3d: "unet3d".into(),
            width_2d: 8,
            width_3d: 8,
            slice_chunk: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedConfig {
    pub eta_initial_2d: f64,
    pub eta_initial_3d: f64,
    pub eta_final: f64,
    /// Warm-up epochs at the start of stage 1.
    pub warmup: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Volumes per stage-2 batch (`B`).
    pub batch_size: usize,
    /// Slices per stage-1 2D batch.
    pub slice_batch: usize,
    /// One cosine over both stages instead of a fresh one for stage 2.
    pub joint_span: bool,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            eta_initial_2d: 1e-3,
            eta_initial_3d: 1e-4,
            eta_final: 0.0,
            warmup: 10,
            epochs_stage1: 100,
            epochs_stage2: 400,
            batch_size: 5,
            slice_batch: 16,
            joint_span: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CotrainMode {
    /// Alternating teacher roles.
    #[default]
    Full,
    /// The 2D model is frozen after stage 1 and its pseudo-masks stay fixed.
    NoCotrain,
    /// The 3D model sees labeled volumes only; the 2D model is not trained.
    LabeledOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    Lrg,
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Teacher {
    #[default]
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CotrainConfig {
    pub mode: CotrainMode,
    pub sampling: Sampling,
    /// Teacher of the first stage-2 epoch.
    pub first_teacher: Teacher,
    /// Checkpoint period in epochs (0 disables periodic checkpoints; the
    /// final state is always written).
    pub checkpoint_every: usize,
}

impl Default for CotrainConfig {
    fn default() -> Self {
        Self {
            mode: CotrainMode::Full,
            sampling: Sampling::Lrg,
            first_teacher: Teacher::TwoD,
            checkpoint_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub enabled: bool,
    /// A 2D model written by `pretrain-source`; when set it is loaded
    /// instead of pretraining inside the run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub source: SourceDatasetSpec,
    pub train: PretrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            enabled: true,
            model: None,
            source: SourceDatasetSpec::default(),
            train: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset manifest written by `gen-data`.
    pub manifest: Option<PathBuf>,
    pub model: ModelConfig,
    pub finetune: FineTuneStrategy,
    pub loss: LossConfig,
    pub sched: SchedConfig,
    pub augment: AugmentConfig,
    pub cotrain: CotrainConfig,
    pub metrics: MetricsConfig,
    pub pretrain: PretrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            manifest: None,
            model: ModelConfig::default(),
            finetune: FineTuneStrategy::default(),
            loss: LossConfig::default(),
            sched: SchedConfig::default(),
            augment: AugmentConfig::default(),
            cotrain: CotrainConfig::default(),
            metrics: MetricsConfig::default(),
            pretrain: PretrainSection::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_err(format!("empty override key `{key}`")))?;
    let mut cur = root;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    /// Applies `key=value` overrides, e.g. `sched.batch_size=4` or
    /// `finetune.kind=lora`. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let toml::Value::Table(mut table) = toml::Value::try_from(self).map_err(config_err)? else {
            unreachable!("config serializes to a table")
        };
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let a2 = ArchKind::from_id(&self.model.arch_2d)?;
        let a3 = ArchKind::from_id(&self.model.arch_3d)?;
        if !a2.is_planar() || a3.is_planar() {
            return Err(config_err("model.arch_2d must be a 2D and model.arch_3d a 3D architecture"));
        }
        if self.model.width_2d == 0 || self.model.width_3d == 0 {
            return Err(config_err("model widths must be >= 1"));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        let s = &self.sched;
        if s.batch_size == 0 || s.slice_batch == 0 {
            return Err(config_err("sched.batch_size and sched.slice_batch must be >= 1"));
        }
        if !(s.eta_initial_2d > s.eta_final && s.eta_initial_3d > s.eta_final && s.eta_final >= 0.0) {
            return Err(config_err("learning rates must satisfy eta_initial > eta_final >= 0"));
        }
        if s.epochs_stage1 > 0 && s.warmup >= s.epochs_stage1 {
            return Err(config_err("sched.warmup must be smaller than sched.epochs_stage1"));
        }
        if self.finetune.rank == 0 {
            return Err(config_err("finetune.rank must be >= 1"));
        }
        Ok(())
    }
}
