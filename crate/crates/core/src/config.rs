//! Run configuration files.
//!
//! The format is flat `key = value` lines grouped under `[section]`
//! headers, with `#` comments and blank lines ignored. Unknown sections or
//! keys are rejected so typos surface instead of silently falling back to
//! defaults. Serialization emits every key, and parsing a serialized
//! configuration reproduces it exactly.

use std::path::PathBuf;

use crate::eval::{AblationVariant, GroupAxis, SweepParameter};
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("config key {key}: {detail}")]
    Invalid { key: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Data source and output locations.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Per-user fraction of interactions held out for evaluation.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            test_fraction: 0.2,
        }
    }
}

/// Experiment protocol settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub variants: Vec<AblationVariant>,
    pub noise_ratios: Vec<f64>,
    pub sweep_parameter: SweepParameter,
    pub sweep_values: Vec<f64>,
    pub group_axes: Vec<GroupAxis>,
    pub group_boundaries: Vec<usize>,
    pub eval_ks: Vec<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            variants: AblationVariant::ALL.to_vec(),
            noise_ratios: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            sweep_parameter: SweepParameter::Temperature,
            sweep_values: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            group_axes: vec![GroupAxis::Users, GroupAxis::Items],
            group_boundaries: vec![0, 10, 20, 30, 40, 50],
            eval_ks: vec![20, 40],
        }
    }
}

/// A complete run description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Seeds to repeat training over; the train section's per-run seed is
    /// taken from this list.
    pub seeds: Vec<u64>,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            protocol: ProtocolConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    line: line_no,
                    detail: format!("unterminated section header {line:?}"),
                })?;
                if !matches!(name, "data" | "train" | "protocol") {
                    return Err(ConfigError::Parse {
                        line: line_no,
                        detail: format!("unknown section {name:?}"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            config.apply(&section, key, value).map_err(|detail| ConfigError::Parse {
                line: line_no,
                detail,
            })?;
        }
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        match (section, key) {
            ("data", "dataset") => self.data.dataset = PathBuf::from(value),
            ("data", "output_dir") => self.data.output_dir = PathBuf::from(value),
            ("data", "test_fraction") => self.data.test_fraction = num(key, value)?,
            ("train", "d") => self.train.d = int(key, value)?,
            ("train", "layers") => self.train.layers = int(key, value)?,
            ("train", "hops") => self.train.hops = list(key, value)?,
            ("train", "slope") => self.train.slope = num(key, value)?,
            ("train", "readout") => self.train.readout = parse_as(key, value)?,
            ("train", "temperature") => self.train.temperature = num(key, value)?,
            ("train", "gumbel_temperature") => {
                self.train.gumbel_temperature = num(key, value)?
            }
            ("train", "threshold") => self.train.threshold = num(key, value)?,
            ("train", "keep_prob") => self.train.keep_prob = num(key, value)?,
            ("train", "beta1") => self.train.beta1 = num(key, value)?,
            ("train", "beta2") => self.train.beta2 = num(key, value)?,
            ("train", "beta3") => self.train.beta3 = num(key, value)?,
            ("train", "gib_beta") => self.train.gib.beta = num(key, value)?,
            ("train", "gib_both_views") => self.train.gib.both_views = boolean(key, value)?,
            ("train", "learning_rate") => self.train.learning_rate = num(key, value)?,
            ("train", "lr_decay") => self.train.lr_decay = num(key, value)?,
            ("train", "epochs") => self.train.epochs = int(key, value)?,
            ("train", "batch_size") => self.train.batch_size = int(key, value)?,
            ("train", "negatives") => self.train.negatives = parse_as(key, value)?,
            ("train", "optimizer") => self.train.optimizer = parse_as(key, value)?,
            ("train", "candidate_budget") => self.train.candidate_budget = num(key, value)?,
            ("train", "seeds") => {
                self.seeds = list(key, value)?;
                if self.seeds.is_empty() {
                    return Err("seeds list must not be empty".into());
                }
                self.train.seed = self.seeds[0];
            }
            ("protocol", "variants") => self.protocol.variants = list(key, value)?,
            ("protocol", "noise_ratios") => self.protocol.noise_ratios = list(key, value)?,
            ("protocol", "sweep_parameter") => {
                self.protocol.sweep_parameter = parse_as(key, value)?
            }
            ("protocol", "sweep_values") => self.protocol.sweep_values = list(key, value)?,
            ("protocol", "group_axes") => self.protocol.group_axes = list(key, value)?,
            ("protocol", "group_boundaries") => {
                self.protocol.group_boundaries = list(key, value)?
            }
            ("protocol", "eval_ks") => self.protocol.eval_ks = list(key, value)?,
            ("", k) => return Err(format!("key {k:?} appears before any section header")),
            (s, k) => return Err(format!("unknown key {k:?} in section [{s}]")),
        }
        Ok(())
    }

    /// Emits every key; the output parses back to an equal configuration.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut push = |line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        push("[data]".into());
        push(format!("dataset = {}", self.data.dataset.display()));
        push(format!("output_dir = {}", self.data.output_dir.display()));
        push(format!("test_fraction = {}", self.data.test_fraction));
        push(String::new());
        push("[train]".into());
        push(format!("d = {}", self.train.d));
        push(format!("layers = {}", self.train.layers));
        push(format!("hops = {}", join(&self.train.hops)));
        push(format!("slope = {}", self.train.slope));
        push(format!("readout = {}", self.train.readout));
        push(format!("temperature = {}", self.train.temperature));
        push(format!("gumbel_temperature = {}", self.train.gumbel_temperature));
        push(format!("threshold = {}", self.train.threshold));
        push(format!("keep_prob = {}", self.train.keep_prob));
        push(format!("beta1 = {}", self.train.beta1));
        push(format!("beta2 = {}", self.train.beta2));
        push(format!("beta3 = {}", self.train.beta3));
        push(format!("gib_beta = {}", self.train.gib.beta));
        push(format!("gib_both_views = {}", self.train.gib.both_views));
        push(format!("learning_rate = {}", self.train.learning_rate));
        push(format!("lr_decay = {}", self.train.lr_decay));
        push(format!("epochs = {}", self.train.epochs));
        push(format!("batch_size = {}", self.train.batch_size));
        push(format!("negatives = {}", self.train.negatives));
        push(format!("optimizer = {}", self.train.optimizer));
        push(format!("candidate_budget = {}", self.train.candidate_budget));
        push(format!("seeds = {}", join(&self.seeds)));
        push(String::new());
        push("[protocol]".into());
        push(format!("variants = {}", join(&self.protocol.variants)));
        push(format!("noise_ratios = {}", join(&self.protocol.noise_ratios)));
        push(format!("sweep_parameter = {}", self.protocol.sweep_parameter));
        push(format!("sweep_values = {}", join(&self.protocol.sweep_values)));
        push(format!("group_axes = {}", join(&self.protocol.group_axes)));
        push(format!("group_boundaries = {}", join(&self.protocol.group_boundaries)));
        push(format!("eval_ks = {}", join(&self.protocol.eval_ks)));
        out
    }

    /// Cross-field checks beyond what [`TrainConfig::validate`] covers.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid {
            key: "train".into(),
            detail: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&self.data.test_fraction) {
            return Err(ConfigError::Invalid {
                key: "test_fraction".into(),
                detail: format!("must lie in [0, 1], got {}", self.data.test_fraction),
            });
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid {
                key: "seeds".into(),
                detail: "need at least one seed".into(),
            });
        }
        if self.protocol.eval_ks.is_empty() || self.protocol.eval_ks.iter().any(|&k| k == 0) {
            return Err(ConfigError::Invalid {
                key: "eval_ks".into(),
                detail: "cutoffs must be non-empty and positive".into(),
            });
        }
        Ok(())
    }
}

fn num(key: &str, value: &str) -> Result<f64, String> {
    value.parse().map_err(|_| format!("{key}: expected a number, got {value:?}"))
}

fn boolean(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn int<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: expected an integer, got {value:?}"))
}

fn parse_as<T>(key: &str, value: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: {e}"))
}

fn list<T>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let item = item.trim();
            item.parse().map_err(|e| format!("{key}: bad list item {item:?}: {e}"))
        })
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
