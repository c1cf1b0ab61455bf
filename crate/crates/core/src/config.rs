//! Run configuration: one TOML file, validated in full, with dotted
//! `key=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cpre::{CpreSettings, EraseMode, MixAssignment, MixPolicy};
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::EmbeddingSource;
use crate::losses::LossWeights;
use crate::masks::{LabelSchema, RegionSets};
use crate::model::{AttentionGradient, BackboneKind};
use crate::sample::HairstyleLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Root of a directory dataset.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Identities (ascending) going to training; the rest are evaluated.
    pub train_fraction: f64,
    /// Images of this camera query, all others form the gallery.
    pub query_camera: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            path: None,
            synthetic: SyntheticConfig::default(),
            train_fraction: 0.5,
            query_camera: 0,
        }
    }
}

/// Class-name groups for each region over the default label schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub face: Vec<String>,
    pub hair: Vec<String>,
    pub cloth: Vec<String>,
    pub limbs: Vec<String>,
}

impl Default for RegionConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            face: s(&["face"]),
            hair: s(&["hair"]),
            cloth: s(&["upper-cloth", "dress", "coat", "pants", "jumpsuit", "skirt"]),
            limbs: s(&["left-arm", "right-arm", "left-leg", "right-leg"]),
        }
    }
}

impl RegionConfig {
    pub fn resolve(&self, schema: &LabelSchema) -> Result<RegionSets> {
        fn r(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        RegionSets::from_names(schema, &r(&self.face), &r(&self.hair), &r(&self.cloth), &r(&self.limbs))
            .map_err(|e| Error::Config(format!("regions: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub backbone: BackboneKind,
    pub id_channels: usize,
    pub rpa_enabled: bool,
    pub attention_gradient: AttentionGradient,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::TinyCnn,
            id_channels: 64,
            rpa_enabled: true,
            attention_gradient: AttentionGradient::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpreConfig {
    pub enabled: bool,
    /// Range of the kept fraction `r` of clothing pixels.
    pub keep_min: f64,
    pub keep_max: f64,
    pub mode: EraseMode,
    pub fill: [u8; 3],
    pub assignment: MixAssignment,
    /// Dilation of the cloth mask before erasing, in pixels.
    pub dilation: usize,
}

impl Default for CpreConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            keep_min: 0.1,
            keep_max: 0.3,
            mode: EraseMode::Bernoulli,
            fill: [0, 0, 0],
            assignment: MixAssignment::Half,
            dilation: 0,
        }
    }
}

impl CpreConfig {
    pub fn settings(&self) -> CpreSettings {
        CpreSettings {
            keep_min: self.keep_min,
            keep_max: self.keep_max,
            mode: self.mode,
            fill: self.fill,
            policy: MixPolicy::new(self.assignment),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesizerKind {
    Procedural,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsoaConfig {
    pub enabled: bool,
    pub styles: Vec<HairstyleLabel>,
    pub synthesizer: SynthesizerKind,
    /// Root of precomputed heads for the `files` synthesizer.
    pub heads_dir: Option<PathBuf>,
    pub face_tolerance: Option<u8>,
}

impl Default for HsoaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            styles: HairstyleLabel::SYNTHESIZED.to_vec(),
            synthesizer: SynthesizerKind::Procedural,
            heads_dir: None,
            face_tolerance: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3.5e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Optimizer steps per epoch; 0 means one pass over the identities.
    pub steps_per_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            milestones: vec![20, 40],
            gamma: 0.1,
            steps_per_epoch: 0,
        }
    }
}

impl ScheduleConfig {
    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn factor(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub p: usize,
    pub k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 4, k: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many epochs (and after the last one).
    pub every: usize,
    pub batch_size: usize,
    pub embedding: EmbeddingSource,
    pub cross_camera_only: bool,
    /// 0 evaluates the full gallery; otherwise average this many single-shot galleries.
    pub single_shot_trials: usize,
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 5,
            batch_size: 128,
            embedding: EmbeddingSource::PostBn,
            cross_camera_only: false,
            single_shot_trials: 0,
            probe_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Run every command on one thread so results cannot depend on the core count.
    pub strict: bool,
    pub dataset: DatasetConfig,
    pub regions: RegionConfig,
    pub model: ModelSettings,
    pub loss: LossWeights,
    pub cpre: CpreConfig,
    pub hsoa: HsoaConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            strict: false,
            dataset: DatasetConfig::default(),
            regions: RegionConfig::default(),
            model: ModelSettings::default(),
            loss: LossWeights::default(),
            cpre: CpreConfig::default(),
            hsoa: HsoaConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides in order, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.source == DatasetSource::Directory && d.path.is_none() {
            return Err(Error::Config("dataset.path is required for a directory dataset".into()));
        }
        if d.source == DatasetSource::Synthetic {
            d.synthetic.validate()?;
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset.train_fraction must lie in (0, 1), got {}",
                d.train_fraction
            )));
        }
        self.regions.resolve(&LabelSchema::default())?;
        if self.model.id_channels == 0 {
            return Err(Error::Config("model.id_channels must be > 0".into()));
        }
        self.loss.validate()?;
        self.cpre.settings().validate()?;
        if self.hsoa.enabled {
            if self.hsoa.styles.is_empty() {
                return Err(Error::Config(
                    "hsoa.styles must not be empty when hsoa is enabled".into(),
                ));
            }
            if self.hsoa.styles.contains(&HairstyleLabel::Original) {
                return Err(Error::Config("hsoa.styles cannot contain \"original\"".into()));
            }
            if self.hsoa.synthesizer == SynthesizerKind::Files && self.hsoa.heads_dir.is_none() {
                return Err(Error::Config(
                    "hsoa.heads_dir is required by the files synthesizer".into(),
                ));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            return Err(Error::Config(
                "optimizer.lr and eps must be > 0, weight_decay >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(Error::Config("schedule.epochs must be >= 1".into()));
        }
        if !s.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("schedule.milestones must be strictly increasing".into()));
        }
        if !(s.gamma > 0.0) {
            return Err(Error::Config("schedule.gamma must be > 0".into()));
        }
        if self.sampler.p == 0 || self.sampler.k == 0 {
            return Err(Error::Config("sampler.p and sampler.k must be >= 1".into()));
        }
        if self.eval.every == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.every and eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}
