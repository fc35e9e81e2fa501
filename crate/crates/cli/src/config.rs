//! Run configuration: one TOML file with `data`, `model`, `perturb`, `train`,
//! `eval`, `ablate` and `checkpoint` sections, every key optional.
//!
//! Keys are checked against the defaults before deserialization so that a
//! misspelled or mistyped key is reported by its full dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use unimlip::datagen::CorpusSpec;
use unimlip::encoders::ModelConfig;
use unimlip::eval::{ProbeConfig, VqaConfig};
use unimlip::perturb::PerturbConfig;
use unimlip::trainer::TrainConfig;

use crate::error::CliError;
use crate::ablation::VARIANTS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub corpus: CorpusSpec,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            split: [0.9, 0.0, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Rows per eval-mode forward.
    pub chunk: usize,
    pub probe: ProbeConfig,
    pub vqa: VqaConfig,
    /// Also fine-tune a randomly initialized model for comparison.
    pub vqa_random_baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            chunk: 100,
            probe: ProbeConfig::default(),
            vqa: VqaConfig::default(),
            vqa_random_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Variant names, run in this order.
    pub variants: Vec<String>,
    /// Each seed is shared by every variant.
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: VARIANTS.iter().map(|v| v.to_string()).collect(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointSection {
    /// Periodic checkpoint interval in epochs, 0 to disable. Phase
    /// boundaries are always checkpointed.
    pub every_epochs: usize,
}

impl Default for CheckpointSection {
    fn default() -> Self {
        Self { every_epochs: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub perturb: PerturbConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub checkpoint: CheckpointSection,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, then validates.
    pub fn resolve(text: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut tree = match text {
            Some(t) => t.parse::<Table>().map_err(|e| CliError::Usage(format!("config is not valid TOML: {e}")))?,
            None => Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not of the form key=value")))?;
            set_dotted(&mut tree, key.trim(), parse_scalar(raw.trim()))?;
        }
        if let Some(s) = seed {
            set_dotted(&mut tree, "train.seed", Value::Integer(s as i64))?;
        }
        let defaults = Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut root = Value::Table(tree);
        conform(&mut root, &defaults, "")?;
        let cfg: RunConfig = root.try_into().map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides, seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: unimlip::Error| CliError::Usage(e.to_string());
        self.data.corpus.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.train_config().validate().map_err(usage)?;
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(CliError::Usage(format!("data.split = {:?} must be fractions summing to 1", self.data.split)));
        }
        if self.data.corpus.image_size != self.model.image_size {
            return Err(CliError::Usage(format!(
                "model.image_size = {} differs from data.corpus.image_size = {}",
                self.model.image_size, self.data.corpus.image_size
            )));
        }
        if self.data.corpus.n_channels != self.model.in_channels {
            return Err(CliError::Usage(format!(
                "model.in_channels = {} differs from data.corpus.n_channels = {}",
                self.model.in_channels, self.data.corpus.n_channels
            )));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::Usage("eval.ks must list positive cut-offs".into()));
        }
        if self.eval.chunk == 0 {
            return Err(CliError::Usage("eval.chunk must be positive".into()));
        }
        for v in &self.ablate.variants {
            if !VARIANTS.contains(&v.as_str()) {
                return Err(CliError::Usage(format!(
                    "ablate.variants: unknown variant `{v}` (known: {})",
                    VARIANTS.join(", ")
                )));
            }
        }
        if self.ablate.seeds.is_empty() {
            return Err(CliError::Usage("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Training config with the `perturb` section attached.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            perturb: self.perturb.clone(),
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        let mut tree = Value::try_from(self).expect("config serializes");
        tidy_floats(&mut tree);
        toml::to_string(&tree).expect("config serializes")
    }
}

/// Single-precision fields widen to noisy doubles such as
/// `0.10000000149011612`; print any value that is exactly an `f32` in its
/// shortest single-precision form, which reads back to the same `f32`.
fn tidy_floats(v: &mut Value) {
    match v {
        Value::Float(f) => {
            let narrow = *f as f32;
            if f64::from(narrow) == *f {
                *f = narrow.to_string().parse().expect("f32 display parses");
            }
        }
        Value::Array(items) => items.iter_mut().for_each(tidy_floats),
        Value::Table(t) => t.iter_mut().for_each(|(_, v)| tidy_floats(v)),
        _ => {}
    }
}

/// Integers, floats, booleans and arrays parse as TOML; anything else is a
/// bare string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(tree: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed config key `{key}`")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("config key `{key}`: `{p}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a section",
    }
}

/// Rejects keys absent from the defaults and leaves of the wrong kind;
/// integers are widened where a float is expected.
fn conform(given: &mut Value, default: &Value, path: &str) -> Result<(), CliError> {
    match (given, default) {
        (Value::Table(g), Value::Table(d)) => {
            for (k, v) in g.iter_mut() {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let dv = d.get(k).ok_or_else(|| CliError::Usage(format!("unknown config key `{full}`")))?;
                conform(v, dv, &full)?;
            }
            Ok(())
        }
        (g @ Value::Integer(_), Value::Float(_)) => {
            if let Value::Integer(i) = *g {
                *g = Value::Float(i as f64);
            }
            Ok(())
        }
        (Value::Array(g), Value::Array(d)) => {
            if let Some(proto) = d.first() {
                for (i, item) in g.iter_mut().enumerate() {
                    conform(item, proto, &format!("{path}[{i}]"))?;
                }
            }
            Ok(())
        }
        (g, d) if std::mem::discriminant(g) == std::mem::discriminant(d) => Ok(()),
        (g, d) => Err(CliError::Usage(format!(
            "config key `{path}` expects {}, got {}",
            kind(d),
            kind(g)
        ))),
    }
}
