//! Experiment configuration: a TOML file of flat dotted keys.
//!
//! ```toml
//! seed = 1
//! data.scenario = "dominant"
//! train.strategy = "pmr"
//! train.alpha = 1.0
//! ```
//!
//! Only `seed` is required. Every other key falls back to the default listed
//! in [`KEYS`]; keys not listed there are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use pmr_core::data::{DatasetSpec, Scenario};
use pmr_core::model::{FusionVariant, ModelSpec};
use pmr_core::train::TrainConfig;
use thiserror::Error;
use toml::Value;

use crate::error::LabError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config syntax error: {0}")]
    Syntax(String),

    #[error("missing key: {0}")]
    MissingKey(String),

    #[error("unknown key: {0}")]
    UnknownKey(String),

    #[error("invalid value for {key}: {message}")]
    InvalidValue { key: String, message: String },
}

fn invalid(key: &str, message: impl Display) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        message: message.to_string(),
    }
}

/// Every accepted key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "required"),
    ("data.scenario", "\"dominant\""),
    ("data.num_classes", "6"),
    ("data.train_per_class", "500"),
    ("data.test_per_class", "100"),
    ("data.dim0", "20"),
    ("data.dim1", "20"),
    ("data.sigma0", "0.3"),
    ("data.sigma1", "1.5 (dominant), 1.0 (spurious)"),
    ("data.separation", "4.0"),
    ("data.q_train", "0.95"),
    ("data.q_test", "1 / num_classes"),
    ("model.hidden_width", "32"),
    ("model.hidden_layers", "1"),
    ("model.rep_dim", "16"),
    ("model.fusion", "\"sum\""),
    ("train.strategy", "\"pmr\""),
    ("train.epochs", "100"),
    ("train.reg_epochs", "10"),
    ("train.batch_size", "64"),
    ("train.lr_initial", "0.001"),
    ("train.lr_final", "0.0001"),
    ("train.lr_schedule", "\"linear\""),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0001"),
    ("train.alpha", "1.0"),
    ("train.mu", "0.01"),
    ("train.epsilon", "0.5"),
    ("train.subset_fraction", "0.1"),
    ("train.distance", "\"squared\""),
    ("train.diag_every", "10"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub rep_dim: usize,
    pub fusion: FusionVariant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSpec::default();
        Self {
            hidden_width: d.hidden_width,
            hidden_layers: d.hidden_layers,
            rep_dim: d.rep_dim,
            fusion: d.fusion,
        }
    }
}

/// Fully resolved configuration. `seed` is copied into both the dataset spec
/// and the training config.
#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
}

struct Keys(BTreeMap<String, Value>);

impl Keys {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
        let mut map = BTreeMap::new();
        flatten("", table, &mut map);
        Ok(Keys(map))
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.0.remove(key)
    }

    fn float(&mut self, key: &str, slot: &mut f64) -> Result<(), ConfigError> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Float(v)) => {
                *slot = v;
                Ok(())
            }
            Some(Value::Integer(v)) => {
                *slot = v as f64;
                Ok(())
            }
            Some(_) => Err(invalid(key, "expected a number")),
        }
    }

    fn int<T: TryFrom<i64>>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Integer(v)) => {
                *slot = T::try_from(v).map_err(|_| invalid(key, format!("{v} is out of range")))?;
                Ok(())
            }
            Some(_) => Err(invalid(key, "expected a non-negative integer")),
        }
    }

    fn named<T>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(()),
            Some(Value::String(s)) => {
                *slot = s.parse().map_err(|e| invalid(key, e))?;
                Ok(())
            }
            Some(_) => Err(invalid(key, "expected a string")),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.0.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

/// Attributes a validation message to the first key of `section` it
/// mentions, or to the section itself.
fn blame(section: &str, message: String) -> ConfigError {
    let prefix = format!("{section}.");
    let named = KEYS
        .iter()
        .filter_map(|(k, _)| k.strip_prefix(&prefix))
        .filter_map(|short| message.find(short).map(|pos| (pos, short)))
        .min();
    match named {
        Some((_, short)) => invalid(&format!("{section}.{short}"), message),
        None => invalid(section, message),
    }
}

fn core_message(e: pmr_core::Error) -> String {
    match e {
        pmr_core::Error::InvalidInput(m) => m,
        other => other.to_string(),
    }
}

fn take_seed(keys: &mut Keys) -> Result<u64, ConfigError> {
    match keys.take("seed") {
        None => Err(ConfigError::MissingKey("seed".into())),
        Some(Value::Integer(v)) if v >= 0 => Ok(v as u64),
        Some(_) => Err(invalid("seed", "expected a non-negative integer")),
    }
}

fn take_data(keys: &mut Keys, seed: u64) -> Result<DatasetSpec, ConfigError> {
    let mut scenario = Scenario::Dominant;
    keys.named("data.scenario", &mut scenario)?;
    let mut d = DatasetSpec {
        seed,
        ..DatasetSpec::for_scenario(scenario)
    };
    keys.int("data.num_classes", &mut d.num_classes)?;
    keys.int("data.train_per_class", &mut d.train_per_class)?;
    keys.int("data.test_per_class", &mut d.test_per_class)?;
    keys.int("data.dim0", &mut d.dim0)?;
    keys.int("data.dim1", &mut d.dim1)?;
    keys.float("data.sigma0", &mut d.sigma0)?;
    keys.float("data.sigma1", &mut d.sigma1)?;
    keys.float("data.separation", &mut d.separation)?;
    keys.float("data.q_train", &mut d.q_train)?;
    d.q_test = 1.0 / d.num_classes.max(1) as f64;
    keys.float("data.q_test", &mut d.q_test)?;
    d.validate().map_err(|e| blame("data", core_message(e)))?;
    Ok(d)
}

impl LabConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut keys = Keys::parse(text)?;
        let seed = take_seed(&mut keys)?;
        if seed > i64::MAX as u64 {
            return Err(invalid("seed", "out of range"));
        }
        let data = take_data(&mut keys, seed)?;

        let mut model = ModelSection::default();
        keys.int("model.hidden_width", &mut model.hidden_width)?;
        keys.int("model.hidden_layers", &mut model.hidden_layers)?;
        keys.int("model.rep_dim", &mut model.rep_dim)?;
        keys.named("model.fusion", &mut model.fusion)?;
        if model.hidden_width == 0 {
            return Err(invalid("model.hidden_width", "must be at least 1"));
        }
        if model.rep_dim == 0 {
            return Err(invalid("model.rep_dim", "must be at least 1"));
        }

        let mut t = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        keys.named("train.strategy", &mut t.strategy)?;
        keys.int("train.epochs", &mut t.epochs)?;
        keys.int("train.reg_epochs", &mut t.reg_epochs)?;
        keys.int("train.batch_size", &mut t.batch_size)?;
        keys.float("train.lr_initial", &mut t.lr_initial)?;
        keys.float("train.lr_final", &mut t.lr_final)?;
        keys.named("train.lr_schedule", &mut t.lr_schedule)?;
        keys.float("train.momentum", &mut t.momentum)?;
        keys.float("train.weight_decay", &mut t.weight_decay)?;
        keys.float("train.alpha", &mut t.alpha)?;
        keys.float("train.mu", &mut t.mu)?;
        keys.float("train.epsilon", &mut t.epsilon)?;
        keys.float("train.subset_fraction", &mut t.subset_fraction)?;
        keys.named("train.distance", &mut t.distance)?;
        keys.int("train.diag_every", &mut t.diag_every)?;
        t.validate().map_err(|e| blame("train", core_message(e)))?;

        keys.finish()?;
        Ok(LabConfig {
            seed,
            data,
            model,
            train: t,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        Ok(Self::parse(&text)?)
    }

    /// Same configuration under another seed, for data and training alike.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.data.seed = seed;
        c.train.seed = seed;
        c
    }

    /// Architecture for data shaped like `data`.
    pub fn model_spec(&self, data: &DatasetSpec) -> ModelSpec {
        ModelSpec {
            dim0: data.dim0,
            dim1: data.dim1,
            hidden_width: self.model.hidden_width,
            hidden_layers: self.model.hidden_layers,
            rep_dim: self.model.rep_dim,
            num_classes: data.num_classes,
            fusion: self.model.fusion,
        }
    }

    /// Canonical text: every key, fixed order, parseable back to `self`.
    pub fn to_toml(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut lines = data_lines(&self.data);
        lines.extend([
            entry("model.hidden_width", int(m.hidden_width)),
            entry("model.hidden_layers", int(m.hidden_layers)),
            entry("model.rep_dim", int(m.rep_dim)),
            entry("model.fusion", string(m.fusion.as_str())),
            entry("train.strategy", string(t.strategy.as_str())),
            entry("train.epochs", int(t.epochs)),
            entry("train.reg_epochs", int(t.reg_epochs)),
            entry("train.batch_size", int(t.batch_size)),
            entry("train.lr_initial", Value::Float(t.lr_initial)),
            entry("train.lr_final", Value::Float(t.lr_final)),
            entry("train.lr_schedule", string(t.lr_schedule.as_str())),
            entry("train.momentum", Value::Float(t.momentum)),
            entry("train.weight_decay", Value::Float(t.weight_decay)),
            entry("train.alpha", Value::Float(t.alpha)),
            entry("train.mu", Value::Float(t.mu)),
            entry("train.epsilon", Value::Float(t.epsilon)),
            entry("train.subset_fraction", Value::Float(t.subset_fraction)),
            entry("train.distance", string(t.distance.as_str())),
            entry("train.diag_every", int(t.diag_every)),
        ]);
        lines.concat()
    }
}

fn entry(key: &str, value: Value) -> String {
    format!("{key} = {value}\n")
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn string(s: &str) -> Value {
    Value::String(s.to_string())
}

fn data_lines(d: &DatasetSpec) -> Vec<String> {
    vec![
        entry("seed", Value::Integer(d.seed as i64)),
        entry("data.scenario", string(d.scenario.as_str())),
        entry("data.num_classes", int(d.num_classes)),
        entry("data.train_per_class", int(d.train_per_class)),
        entry("data.test_per_class", int(d.test_per_class)),
        entry("data.dim0", int(d.dim0)),
        entry("data.dim1", int(d.dim1)),
        entry("data.sigma0", Value::Float(d.sigma0)),
        entry("data.sigma1", Value::Float(d.sigma1)),
        entry("data.separation", Value::Float(d.separation)),
        entry("data.q_train", Value::Float(d.q_train)),
        entry("data.q_test", Value::Float(d.q_test)),
    ]
}

/// `seed` and `data.*` lines describing a dataset.
pub fn data_echo(spec: &DatasetSpec) -> String {
    data_lines(spec).concat()
}

/// Inverse of [`data_echo`]; anything besides `seed` and `data.*` is
/// rejected.
pub fn parse_data_echo(text: &str) -> Result<DatasetSpec, ConfigError> {
    let mut keys = Keys::parse(text)?;
    let seed = take_seed(&mut keys)?;
    let spec = take_data(&mut keys, seed)?;
    keys.finish()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmr_core::pmr::Distance;
    use pmr_core::train::Strategy;

    #[test]
    fn seed_alone_gives_defaults() {
        let c = LabConfig::parse("seed = 3").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data, DatasetSpec { seed: 3, ..DatasetSpec::default() });
        assert_eq!(c.train, TrainConfig { seed: 3, ..TrainConfig::default() });
        assert_eq!(c.model, ModelSection::default());
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = LabConfig::parse("seed = 1\ntrain.alpha = 2.0\ntrain.distance = \"euclidean\"").unwrap();
        let b = LabConfig::parse("seed = 1\n[train]\nalpha = 2\ndistance = \"euclidean\"").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.alpha, 2.0);
        assert_eq!(a.train.distance, Distance::Euclidean);
    }

    #[test]
    fn missing_seed() {
        let e = LabConfig::parse("train.alpha = 1.0").unwrap_err();
        assert_eq!(e.to_string(), "missing key: seed");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = LabConfig::parse("seed = 1\ntrain.alhpa = 1.0").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("train.alhpa".into()));
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("seed = 1\ntrain.alpha = \"x\"", "train.alpha"),
            ("seed = 1\ntrain.strategy = \"nope\"", "train.strategy"),
            ("seed = 1\ndata.sigma0 = -1.0", "data.sigma0"),
            ("seed = 1\ntrain.reg_epochs = 20\ntrain.epochs = 5", "train.reg_epochs"),
            ("seed = 1\ntrain.lr_final = 0.1", "train.lr_final"),
            ("seed = 1\ntrain.batch_size = -4", "train.batch_size"),
            ("seed = -1", "seed"),
        ] {
            match LabConfig::parse(text).unwrap_err() {
                ConfigError::InvalidValue { key: k, .. } => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn scenario_selects_defaults() {
        let c = LabConfig::parse("seed = 1\ndata.scenario = \"spurious\"").unwrap();
        assert_eq!(c.data.sigma1, 1.0);
        let c = LabConfig::parse("seed = 1\ndata.num_classes = 4").unwrap();
        assert_eq!(c.data.q_test, 0.25);
    }

    #[test]
    fn echo_round_trips() {
        let text = "seed = 9\ndata.scenario = \"spurious\"\ndata.sigma0 = 0.123456789\n\
                    model.fusion = \"gated\"\ntrain.strategy = \"acc_boost\"\ntrain.mu = 1e-7\n";
        let c = LabConfig::parse(text).unwrap();
        assert_eq!(c.train.strategy, Strategy::AccBoost);
        let echo = c.to_toml();
        let back = LabConfig::parse(&echo).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), echo);
        assert_eq!(parse_data_echo(&data_echo(&c.data)).unwrap(), c.data);
    }

    #[test]
    fn data_echo_rejects_other_sections() {
        let e = parse_data_echo("seed = 1\ntrain.alpha = 1.0").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("train.alpha".into()));
    }

    #[test]
    fn syntax_errors_are_reported() {
        assert!(matches!(
            LabConfig::parse("seed = = 1"),
            Err(ConfigError::Syntax(_))
        ));
    }

    #[test]
    fn with_seed_moves_every_copy() {
        let c = LabConfig::parse("seed = 1").unwrap().with_seed(7);
        assert_eq!((c.seed, c.data.seed, c.train.seed), (7, 7, 7));
    }
}
