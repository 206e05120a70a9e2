use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{ToyConfig, DEFAULT_IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::eval::InferConfig;
use crate::model::ModelConfig;
use crate::uda::{Constants, FdConfig, ScheduleConfig, Toggles, TrainConfig, TrainMode};

/// Where training and evaluation images come from.
///
/// With no directory set, the procedural benchmark described by `toy` is
/// generated in memory. Otherwise each directory holds a `manifest.json`
/// dataset and `class_names` must list the classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub toy: ToyConfig,
    pub source: Option<PathBuf>,
    /// Target training images; labels, if present, are used only in oracle mode.
    pub target: Option<PathBuf>,
    pub target_val: Option<PathBuf>,
    pub out_of_target: Option<PathBuf>,
    pub class_names: Vec<String>,
    pub ignore_index: u8,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            toy: ToyConfig::default(),
            source: None,
            target: None,
            target_val: None,
            out_of_target: None,
            class_names: Vec::new(),
            ignore_index: DEFAULT_IGNORE_INDEX,
        }
    }
}

impl DataConfig {
    pub fn uses_directories(&self) -> bool {
        self.source.is_some() || self.target.is_some() || self.target_val.is_some() || self.out_of_target.is_some()
    }

    pub fn num_classes(&self) -> usize {
        if self.uses_directories() {
            self.class_names.len()
        } else {
            self.toy.num_classes
        }
    }
}

/// Training-time augmentation and stream options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub flip: bool,
    pub flip_pseudo_labels: bool,
    pub mic_on_mixed: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        AugmentConfig {
            crop_size: t.crop_size,
            flip: t.flip_augment,
            flip_pseudo_labels: t.flip_pseudo_labels,
            mic_on_mixed: t.mic_on_mixed,
        }
    }
}

/// Bookkeeping of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Steps between progress log lines (0 disables them).
    pub log_every: usize,
    /// Steps between target-val snapshots written to `evals.jsonl` (0 disables them).
    pub eval_every: usize,
    /// Steps between resumable checkpoints (0 keeps only the final one).
    pub checkpoint_every: usize,
    /// Skip training when the output directory already holds a finished run
    /// of the identical resolved config.
    pub reuse_completed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            log_every: 100,
            eval_every: 0,
            checkpoint_every: 1000,
            reuse_completed: false,
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub toggles: Toggles,
    pub constants: Constants,
    pub augment: AugmentConfig,
    pub fd: FdConfig,
    pub eval: InferConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: TrainMode::Uda,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::toy(),
            toggles: Toggles::default(),
            constants: Constants::toy(),
            augment: AugmentConfig::default(),
            fd: FdConfig::default(),
            eval: InferConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            toggles: self.toggles.clone(),
            constants: self.constants.clone(),
            schedule: self.schedule.clone(),
            crop_size: self.augment.crop_size,
            flip_augment: self.augment.flip,
            flip_pseudo_labels: self.augment.flip_pseudo_labels,
            mic_on_mixed: self.augment.mic_on_mixed,
            fd: self.fd.clone(),
        }
    }

    /// Checks every section and the mode/data combination.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate(&self.model).map_err(|e| match e {
            Error::Config { key, msg } if key == "crop_size" => Error::config("augment.crop_size", msg),
            other => other,
        })?;
        let d = &self.data;
        if d.uses_directories() {
            if d.class_names.is_empty() {
                return Err(Error::config(
                    "data.class_names",
                    "required when dataset directories are given",
                ));
            }
            let need = |p: &Option<PathBuf>, key: &str| {
                if p.is_none() {
                    Err(Error::config(key, format!("required in {} mode", mode_name(self.mode))))
                } else {
                    Ok(())
                }
            };
            match self.mode {
                TrainMode::Uda => {
                    need(&d.source, "data.source")?;
                    need(&d.target, "data.target")?;
                }
                TrainMode::SourceOnly => need(&d.source, "data.source")?,
                TrainMode::Oracle => need(&d.target, "data.target")?,
            }
            need(&d.target_val, "data.target_val")?;
        } else {
            d.toy.validate().map_err(|e| Error::config("data.toy", e.to_string()))?;
        }
        if d.num_classes() != self.model.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!(
                    "model predicts {} classes, the data has {}",
                    self.model.num_classes,
                    d.num_classes()
                ),
            ));
        }
        self.eval
            .validate(self.model.encoder.patch_size)
            .map_err(|e| Error::config("eval", e.to_string()))?;
        Ok(())
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Uda => "uda",
        TrainMode::SourceOnly => "source_only",
        TrainMode::Oracle => "oracle",
    }
}

/// Origin of a resolved constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Value stated by the method description.
    Paper,
    /// Built-in convention.
    Default,
    /// Set by the user to some other value.
    User,
}

/// Values fixed by the method description, keyed by config path.
const PAPER_VALUES: [(&str, f64); 8] = [
    ("constants.tau", 0.968),
    ("constants.mask_ratio", 0.7),
    ("schedule.base_lr_decoder", 1.4e-4),
    ("schedule.base_lr_encoder", 1.4e-5),
    ("schedule.layerwise_decay", 0.9),
    ("schedule.warmup_iters", 1500.0),
    ("schedule.total_iters", 40000.0),
    ("schedule.batch_size", 8.0),
];

/// Numeric constants whose provenance is recorded.
const TRACKED: [&str; 15] = [
    "constants.tau",
    "constants.mask_ratio",
    "constants.mask_patch",
    "constants.alpha",
    "constants.rcs_temperature",
    "constants.lambda_fd",
    "constants.lambda_mask",
    "schedule.base_lr_decoder",
    "schedule.base_lr_encoder",
    "schedule.layerwise_decay",
    "schedule.warmup_iters",
    "schedule.total_iters",
    "schedule.batch_size",
    "schedule.weight_decay",
    "schedule.grad_clip",
];

fn lookup(value: &toml::Value, path: &str) -> Option<f64> {
    let v = path.split('.').try_fold(value, |v, k| v.get(k))?;
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn provenance_of(config: &ExperimentConfig) -> Result<BTreeMap<String, Provenance>> {
    let resolved = toml::Value::try_from(config).map_err(|e| Error::config("<root>", e.to_string()))?;
    let defaults = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialise");
    Ok(TRACKED
        .iter()
        .map(|&key| {
            let v = lookup(&resolved, key);
            let paper = PAPER_VALUES.iter().find(|(k, _)| *k == key).map(|p| p.1);
            let tag = if paper.is_some() && v == paper {
                Provenance::Paper
            } else if v == lookup(&defaults, key) {
                Provenance::Default
            } else {
                Provenance::User
            };
            (key.to_string(), tag)
        })
        .collect())
}

/// A validated config with the provenance of its constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub provenance: BTreeMap<String, Provenance>,
}

impl ResolvedConfig {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let provenance = provenance_of(&config)?;
        Ok(ResolvedConfig { config, provenance })
    }

    /// TOML dump of the config followed by a `[provenance]` table. Loading
    /// the dump with [`resolve_config`] reproduces the same config.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.config).map_err(|e| Error::config("<root>", e.to_string()))?;
        let prov: toml::Table = self
            .provenance
            .iter()
            .map(|(k, v)| {
                let tag = serde_json::to_value(v).expect("tag serialises");
                (k.clone(), toml::Value::String(tag.as_str().unwrap_or_default().into()))
            })
            .collect();
        table.insert("provenance".into(), toml::Value::Table(prov));
        toml::to_string(&table).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Copy with `key=value` overrides applied on top.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(&self.config).map_err(|e| Error::config("<root>", e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        ResolvedConfig::new(deserialize(table)?)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.as_str(), "override must look like key=value"))?;
        let key = key.trim();
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::config(key, "malformed key"));
        }
        let mut cur = &mut *table;
        for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
            let slot = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = slot
                .as_table_mut()
                .ok_or_else(|| Error::config(parts[..=i].join("."), "is not a section"))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

fn deserialize(table: toml::Table) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        let key = match msg.split('`').nth(1).filter(|_| msg.starts_with("unknown field")) {
            Some(field) if path == "." => field.to_string(),
            Some(field) if !path.ends_with(field) => format!("{path}.{field}"),
            _ => path,
        };
        Error::config(key, msg.lines().next().unwrap_or_default().to_string())
    })
}

/// Reads an optional TOML file, applies `key=value` overrides, fills
/// defaults and validates the result.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
        }
        None => toml::Table::new(),
    };
    // recomputed, never read back
    table.remove("provenance");
    // merge over the serialized defaults so a partial section keeps the
    // top-level defaults rather than the section type's own
    let mut merged = toml::Table::try_from(ExperimentConfig::default()).expect("default config serializes");
    merge_into(&mut merged, table);
    apply_overrides(&mut merged, overrides)?;
    ResolvedConfig::new(deserialize(merged)?)
}

fn merge_into(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_into(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
