//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]` and
//! `[ablate]` tables. Every key has a default, unknown keys are rejected, and
//! all problems are reported together.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gatectr::gates::{GateConfig, Granularity, Sharing};
use gatectr::model::{Family, FieldDim, HiddenGateConfig, ModelSpec};
use gatectr::tensor::{Activation, InitScheme};
use gatectr::train::{AdamConfig, TrainConfig};
use toml::{Table, Value};

use crate::ablate::Axis;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Planted,
    File,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            DataSource::Planted => "planted",
            DataSource::File => "file",
        }
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "planted" => Ok(DataSource::Planted),
            "file" => Ok(DataSource::File),
            other => Err(format!("unknown data source '{other}': expected planted or file")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub delimiter: char,
    /// Column names after the label column, in file order.
    pub fields: Vec<String>,
    /// Subset of `fields` holding numbers to be discretized.
    pub continuous: Vec<String>,
    pub min_count: usize,
    pub test_fraction: f64,
    pub valid_fraction: f64,
    /// Seed for generation and splitting; falls back to `train.seed`.
    pub seed: Option<u64>,
    pub planted_fields: usize,
    pub planted_signal_fields: usize,
    pub planted_rows: usize,
    pub planted_cardinality: usize,
    pub planted_strength: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Planted,
            train: None,
            test: None,
            delimiter: '\t',
            fields: Vec::new(),
            continuous: Vec::new(),
            min_count: 1,
            test_fraction: 0.2,
            valid_fraction: 0.0,
            seed: None,
            planted_fields: 10,
            planted_signal_fields: 2,
            planted_rows: 50_000,
            planted_cardinality: 100,
            planted_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    pub embedding_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub dropout: f64,
    pub embed_gate: bool,
    pub embed_gate_activation: Activation,
    pub embed_gate_granularity: Granularity,
    pub embed_gate_sharing: Sharing,
    pub embed_gate_bias: bool,
    pub embed_gate_init: InitScheme,
    pub hidden_gate: bool,
    pub hidden_gate_activation: Activation,
    pub hidden_gate_init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = GateConfig::default();
        let h = HiddenGateConfig::default();
        ModelConfig {
            family: Family::Dnn,
            embedding_dim: 10,
            hidden_widths: vec![400, 400, 400],
            hidden_activation: Activation::Relu,
            dropout: 0.5,
            embed_gate: false,
            embed_gate_activation: e.activation,
            embed_gate_granularity: e.granularity,
            embed_gate_sharing: e.sharing,
            embed_gate_bias: e.bias,
            embed_gate_init: e.init,
            hidden_gate: false,
            hidden_gate_activation: h.activation,
            hidden_gate_init: h.init,
        }
    }
}

impl ModelConfig {
    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            granularity: self.embed_gate_granularity,
            sharing: self.embed_gate_sharing,
            activation: self.embed_gate_activation,
            bias: self.embed_gate_bias,
            init: self.embed_gate_init,
        }
    }

    pub fn hidden_gate_config(&self) -> HiddenGateConfig {
        HiddenGateConfig {
            activation: self.hidden_gate_activation,
            init: self.hidden_gate_init,
        }
    }

    pub fn spec(&self, fields: Vec<FieldDim>) -> ModelSpec {
        ModelSpec {
            family: self.family,
            embedding_dim: self.embedding_dim,
            fields,
            hidden_widths: self.hidden_widths.clone(),
            hidden_activation: self.hidden_activation,
            dropout: self.dropout,
            embed_gate: self.embed_gate.then(|| self.gate_config()),
            hidden_gate: self.hidden_gate.then(|| self.hidden_gate_config()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    pub record_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.adam.learning_rate,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            seed: t.seed,
            early_stop_patience: 0,
            record_time: t.record_time,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        self.train_config_with_seed(self.seed)
    }

    pub fn train_config_with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            seed,
            early_stop_patience: (self.early_stop_patience > 0).then_some(self.early_stop_patience),
            record_time: self.record_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    pub embedding_sizes: Vec<usize>,
    pub depths: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axes: vec![Axis::GateCombo],
            seeds: vec![1, 2, 3],
            embedding_sizes: vec![10, 20, 30, 40, 50],
            depths: vec![2, 3, 4, 5, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub ablate: AblateConfig,
}

/// Reads keys of one table, remembering which were consumed and collecting
/// conversion errors.
struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    seen: Vec<&'static str>,
    errors: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn new(root: &'a Table, name: &'static str, errors: &'a mut Vec<String>) -> Self {
        let table = match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                errors.push(format!("'{name}' must be a table"));
                None
            }
        };
        Section {
            name,
            table,
            seen: Vec::new(),
            errors,
        }
    }

    fn read<T>(&mut self, key: &'static str, slot: &mut T, conv: impl Fn(&Value) -> Result<T, String>) {
        self.seen.push(key);
        if let Some(v) = self.table.and_then(|t| t.get(key)) {
            match conv(v) {
                Ok(x) => *slot = x,
                Err(msg) => self.errors.push(format!("{}.{key}: {msg}", self.name)),
            }
        }
    }

    fn finish(self) {
        if let Some(t) = self.table {
            for key in t.keys() {
                if !self.seen.contains(&key.as_str()) {
                    self.errors.push(format!("unknown key '{}.{key}'", self.name));
                }
            }
        }
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

fn as_bool(v: &Value) -> Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("expected true or false, found {}", type_name(v)))
}

fn as_u64(v: &Value) -> Result<u64, String> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as u64),
        Some(i) => Err(format!("expected a non-negative integer, found {i}")),
        None => Err(format!("expected an integer, found {}", type_name(v))),
    }
}

fn as_usize(v: &Value) -> Result<usize, String> {
    as_u64(v).map(|x| x as usize)
}

fn as_f64(v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, found {}", type_name(other))),
    }
}

fn as_string(v: &Value) -> Result<String, String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("expected a string, found {}", type_name(v)))
}

fn as_path(v: &Value) -> Result<Option<PathBuf>, String> {
    as_string(v).map(|s| Some(PathBuf::from(s)))
}

fn parsed<T: FromStr>(v: &Value) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    as_string(v)?.parse::<T>().map_err(|e| e.to_string())
}

fn list<T>(v: &Value, item: impl Fn(&Value) -> Result<T, String>) -> Result<Vec<T>, String> {
    let arr = v
        .as_array()
        .ok_or_else(|| format!("expected an array, found {}", type_name(v)))?;
    arr.iter().map(item).collect()
}

fn as_delimiter(v: &Value) -> Result<char, String> {
    let s = as_string(v)?;
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c != '\n' && c != '\r' => Ok(c),
        _ => Err(format!("expected a single character, found {s:?}")),
    }
}

fn parse_override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` overrides. Values are read as TOML when they
/// parse, otherwise as bare strings, so `model.family=deepfm` works unquoted.
pub fn apply_overrides(root: &mut Table, overrides: &[String]) -> Result<(), CliError> {
    let mut errors = Vec::new();
    for o in overrides {
        let Some((key, raw)) = o.split_once('=') else {
            errors.push(format!("override '{o}' is not of the form section.key=value"));
            continue;
        };
        let Some((section, field)) = key.trim().split_once('.') else {
            errors.push(format!("override key '{key}' must be section.key"));
            continue;
        };
        let entry = root
            .entry(section.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        match entry {
            Value::Table(t) => {
                t.insert(field.to_string(), parse_override_value(raw.trim()));
            }
            _ => errors.push(format!("'{section}' must be a table")),
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(errors))
    }
}

impl RunConfig {
    pub fn from_table(root: &Table) -> Result<Self, CliError> {
        let mut errors = Vec::new();
        for key in root.keys() {
            if !["data", "model", "train", "ablate"].contains(&key.as_str()) {
                errors.push(format!("unknown section '{key}'"));
            }
        }
        let mut cfg = RunConfig::default();

        let d = &mut cfg.data;
        let mut s = Section::new(root, "data", &mut errors);
        s.read("source", &mut d.source, parsed);
        s.read("train", &mut d.train, as_path);
        s.read("test", &mut d.test, as_path);
        s.read("delimiter", &mut d.delimiter, as_delimiter);
        s.read("fields", &mut d.fields, |v| list(v, as_string));
        s.read("continuous", &mut d.continuous, |v| list(v, as_string));
        s.read("min_count", &mut d.min_count, as_usize);
        s.read("test_fraction", &mut d.test_fraction, as_f64);
        s.read("valid_fraction", &mut d.valid_fraction, as_f64);
        s.read("seed", &mut d.seed, |v| as_u64(v).map(Some));
        s.read("planted_fields", &mut d.planted_fields, as_usize);
        s.read("planted_signal_fields", &mut d.planted_signal_fields, as_usize);
        s.read("planted_rows", &mut d.planted_rows, as_usize);
        s.read("planted_cardinality", &mut d.planted_cardinality, as_usize);
        s.read("planted_strength", &mut d.planted_strength, as_f64);
        s.finish();

        let m = &mut cfg.model;
        let mut s = Section::new(root, "model", &mut errors);
        s.read("family", &mut m.family, parsed);
        s.read("embedding_dim", &mut m.embedding_dim, as_usize);
        s.read("hidden_widths", &mut m.hidden_widths, |v| list(v, as_usize));
        s.read("hidden_activation", &mut m.hidden_activation, parsed);
        s.read("dropout", &mut m.dropout, as_f64);
        s.read("embed_gate", &mut m.embed_gate, as_bool);
        s.read("embed_gate_activation", &mut m.embed_gate_activation, parsed);
        s.read("embed_gate_granularity", &mut m.embed_gate_granularity, parsed);
        s.read("embed_gate_sharing", &mut m.embed_gate_sharing, parsed);
        s.read("embed_gate_bias", &mut m.embed_gate_bias, as_bool);
        s.read("embed_gate_init", &mut m.embed_gate_init, parsed);
        s.read("hidden_gate", &mut m.hidden_gate, as_bool);
        s.read("hidden_gate_activation", &mut m.hidden_gate_activation, parsed);
        s.read("hidden_gate_init", &mut m.hidden_gate_init, parsed);
        s.finish();

        let t = &mut cfg.train;
        let mut s = Section::new(root, "train", &mut errors);
        s.read("epochs", &mut t.epochs, as_usize);
        s.read("batch_size", &mut t.batch_size, as_usize);
        s.read("learning_rate", &mut t.learning_rate, as_f64);
        s.read("beta1", &mut t.beta1, as_f64);
        s.read("beta2", &mut t.beta2, as_f64);
        s.read("eps", &mut t.eps, as_f64);
        s.read("seed", &mut t.seed, as_u64);
        s.read("early_stop_patience", &mut t.early_stop_patience, as_usize);
        s.read("record_time", &mut t.record_time, as_bool);
        s.finish();

        let a = &mut cfg.ablate;
        let mut s = Section::new(root, "ablate", &mut errors);
        s.read("axes", &mut a.axes, |v| list(v, parsed));
        s.read("seeds", &mut a.seeds, |v| list(v, as_u64));
        s.read("embedding_sizes", &mut a.embedding_sizes, |v| list(v, as_usize));
        s.read("depths", &mut a.depths, |v| list(v, as_usize));
        s.finish();

        cfg.check(&mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(errors))
        }
    }

    fn check(&self, errors: &mut Vec<String>) {
        let d = &self.data;
        let mut bad = |cond: bool, msg: String| {
            if cond {
                errors.push(msg);
            }
        };
        bad(
            !(d.test_fraction > 0.0 && d.test_fraction < 1.0),
            format!("data.test_fraction must lie in (0, 1), got {}", d.test_fraction),
        );
        bad(
            !(d.valid_fraction >= 0.0 && d.valid_fraction < 1.0),
            format!("data.valid_fraction must lie in [0, 1), got {}", d.valid_fraction),
        );
        bad(d.min_count == 0, "data.min_count must be at least 1".into());
        match d.source {
            DataSource::File => {
                bad(d.train.is_none(), "data.train is required when data.source = \"file\"".into());
                bad(
                    d.fields.is_empty(),
                    "data.fields must list the column names when data.source = \"file\"".into(),
                );
                for c in &d.continuous {
                    bad(
                        !d.fields.contains(c),
                        format!("data.continuous names '{c}', which is not in data.fields"),
                    );
                }
            }
            DataSource::Planted => {
                bad(d.planted_fields == 0, "data.planted_fields must be at least 1".into());
                bad(d.planted_rows == 0, "data.planted_rows must be at least 1".into());
                bad(d.planted_cardinality == 0, "data.planted_cardinality must be at least 1".into());
                bad(
                    d.planted_signal_fields > d.planted_fields,
                    format!(
                        "data.planted_signal_fields ({}) exceeds data.planted_fields ({})",
                        d.planted_signal_fields, d.planted_fields
                    ),
                );
            }
        }

        let m = &self.model;
        bad(m.embedding_dim == 0, "model.embedding_dim must be at least 1".into());
        bad(
            !(m.dropout >= 0.0 && m.dropout < 1.0),
            format!("model.dropout must lie in [0, 1), got {}", m.dropout),
        );
        if m.family.has_deep() {
            bad(
                m.hidden_widths.is_empty() || m.hidden_widths.contains(&0),
                "model.hidden_widths must be a non-empty list of positive widths".into(),
            );
        }
        bad(
            m.hidden_gate && !m.family.has_deep(),
            format!("model.hidden_gate needs a deep component; family '{}' has none", m.family.name()),
        );

        let t = &self.train;
        bad(t.batch_size == 0, "train.batch_size must be at least 1".into());
        bad(
            !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()),
            format!("train.learning_rate must be a finite non-negative number, got {}", t.learning_rate),
        );
        bad(
            !(0.0..1.0).contains(&t.beta1),
            format!("train.beta1 must lie in [0, 1), got {}", t.beta1),
        );
        bad(
            !(0.0..1.0).contains(&t.beta2),
            format!("train.beta2 must lie in [0, 1), got {}", t.beta2),
        );
        bad(!(t.eps > 0.0), format!("train.eps must be positive, got {}", t.eps));

        let a = &self.ablate;
        bad(a.seeds.is_empty(), "ablate.seeds must not be empty".into());
        bad(
            a.embedding_sizes.is_empty() || a.embedding_sizes.contains(&0),
            "ablate.embedding_sizes must be a non-empty list of positive sizes".into(),
        );
        bad(
            a.depths.is_empty() || a.depths.contains(&0),
            "ablate.depths must be a non-empty list of positive depths".into(),
        );
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(vec![format!("config is not valid TOML: {}", e.message())]))?;
        apply_overrides(&mut root, overrides)?;
        Self::from_table(&root)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(vec![format!("cannot read config {}: {e}", p.display())]))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// The effective configuration with every key spelled out; parsing it
    /// back yields an equal `RunConfig`.
    pub fn to_toml(&self) -> String {
        fn s(x: &str) -> Value {
            Value::String(x.to_string())
        }
        fn f(x: f64) -> Value {
            Value::Float(x)
        }
        fn i(x: u64) -> Value {
            Value::Integer(x as i64)
        }
        fn arr<T>(xs: &[T], g: impl Fn(&T) -> Value) -> Value {
            Value::Array(xs.iter().map(g).collect())
        }

        let d = &self.data;
        let mut data: Vec<(&str, Value)> = vec![("source", s(d.source.name()))];
        if let Some(p) = &d.train {
            data.push(("train", s(&p.to_string_lossy())));
        }
        if let Some(p) = &d.test {
            data.push(("test", s(&p.to_string_lossy())));
        }
        data.extend([
            ("delimiter", s(&d.delimiter.to_string())),
            ("fields", arr(&d.fields, |x| s(x))),
            ("continuous", arr(&d.continuous, |x| s(x))),
            ("min_count", i(d.min_count as u64)),
            ("test_fraction", f(d.test_fraction)),
            ("valid_fraction", f(d.valid_fraction)),
        ]);
        if let Some(seed) = d.seed {
            data.push(("seed", i(seed)));
        }
        data.extend([
            ("planted_fields", i(d.planted_fields as u64)),
            ("planted_signal_fields", i(d.planted_signal_fields as u64)),
            ("planted_rows", i(d.planted_rows as u64)),
            ("planted_cardinality", i(d.planted_cardinality as u64)),
            ("planted_strength", f(d.planted_strength)),
        ]);

        let m = &self.model;
        let model = vec![
            ("family", s(m.family.name())),
            ("embedding_dim", i(m.embedding_dim as u64)),
            ("hidden_widths", arr(&m.hidden_widths, |x| i(*x as u64))),
            ("hidden_activation", s(m.hidden_activation.name())),
            ("dropout", f(m.dropout)),
            ("embed_gate", Value::Boolean(m.embed_gate)),
            ("embed_gate_activation", s(m.embed_gate_activation.name())),
            ("embed_gate_granularity", s(m.embed_gate_granularity.name())),
            ("embed_gate_sharing", s(m.embed_gate_sharing.name())),
            ("embed_gate_bias", Value::Boolean(m.embed_gate_bias)),
            ("embed_gate_init", s(m.embed_gate_init.name())),
            ("hidden_gate", Value::Boolean(m.hidden_gate)),
            ("hidden_gate_activation", s(m.hidden_gate_activation.name())),
            ("hidden_gate_init", s(m.hidden_gate_init.name())),
        ];

        let t = &self.train;
        let train = vec![
            ("epochs", i(t.epochs as u64)),
            ("batch_size", i(t.batch_size as u64)),
            ("learning_rate", f(t.learning_rate)),
            ("beta1", f(t.beta1)),
            ("beta2", f(t.beta2)),
            ("eps", f(t.eps)),
            ("seed", i(t.seed)),
            ("early_stop_patience", i(t.early_stop_patience as u64)),
            ("record_time", Value::Boolean(t.record_time)),
        ];

        let a = &self.ablate;
        let ablate = vec![
            ("axes", arr(&a.axes, |x| s(x.name()))),
            ("seeds", arr(&a.seeds, |x| i(*x))),
            ("embedding_sizes", arr(&a.embedding_sizes, |x| i(*x as u64))),
            ("depths", arr(&a.depths, |x| i(*x as u64))),
        ];

        let mut out = String::new();
        for (i, (name, entries)) in [("data", data), ("model", model), ("train", train), ("ablate", ablate)]
            .into_iter()
            .enumerate()
        {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors_of(text: &str) -> Vec<String> {
        match RunConfig::parse(text, &[]) {
            Err(CliError::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn defaults() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c.model.embedding_dim, 10);
        assert_eq!(c.model.hidden_widths, vec![400, 400, 400]);
        assert_eq!(c.model.hidden_activation, Activation::Relu);
        assert_eq!(c.model.dropout, 0.5);
        assert_eq!(c.model.embed_gate_activation, Activation::Sigmoid);
        assert_eq!(c.model.hidden_gate_activation, Activation::Tanh);
        assert_eq!(c.model.embed_gate_sharing, Sharing::FieldPrivate);
        assert_eq!(c.model.embed_gate_granularity, Granularity::VectorWise);
        assert_eq!(c.train.batch_size, 1000);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.ablate.seeds.len(), 3);
    }

    #[test]
    fn all_errors_are_reported_together() {
        let e = errors_of(
            "[model]\nhidden_activation = \"swish\"\nbogus = 1\ndropout = 1.5\n[train]\nepochs = \"many\"\n[extra]\nx = 1\n",
        );
        assert_eq!(e.len(), 5, "{e:?}");
        assert!(e.iter().any(|m| m.contains("model.hidden_activation")
            && m.contains("linear, relu, sigmoid, tanh")));
        assert!(e.iter().any(|m| m.contains("unknown key 'model.bogus'")));
        assert!(e.iter().any(|m| m.contains("model.dropout")));
        assert!(e.iter().any(|m| m.contains("train.epochs")));
        assert!(e.iter().any(|m| m.contains("unknown section 'extra'")));
    }

    #[test]
    fn overrides_accept_bare_strings_and_toml_values() {
        let c = RunConfig::parse(
            "",
            &[
                "model.family=deepfm".into(),
                "model.hidden_widths=[8, 4]".into(),
                "train.learning_rate=0.01".into(),
                "model.embed_gate=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.family, Family::DeepFm);
        assert_eq!(c.model.hidden_widths, vec![8, 4]);
        assert_eq!(c.train.learning_rate, 0.01);
        assert!(c.model.embed_gate);
        assert!(RunConfig::parse("", &["nodot=1".into()]).is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut c = RunConfig::default();
        c.data.source = DataSource::File;
        c.data.train = Some("a b/train.tsv".into());
        c.data.fields = vec!["x".into(), "y \"q\"".into()];
        c.data.continuous = vec!["x".into()];
        c.data.delimiter = ',';
        c.data.seed = Some(9);
        c.model.family = Family::DeepFm;
        c.model.embed_gate = true;
        c.model.embed_gate_sharing = Sharing::FieldShared;
        c.train.learning_rate = 0.1 + 0.2;
        c.ablate.axes = vec![Axis::Depth, Axis::Sharing];
        let text = c.to_toml();
        assert_eq!(RunConfig::parse(&text, &[]).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_toml(), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn file_source_requires_paths_and_fields() {
        let e = errors_of("[data]\nsource = \"file\"\ncontinuous = [\"z\"]\n");
        assert_eq!(e.len(), 3, "{e:?}");
    }
}
