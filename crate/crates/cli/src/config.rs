//! Run configuration: a sectioned TOML file whose every key can be
//! overridden with `--set section.key=value`.
//!
//! The `[model]` section starts from a recipe (`synthetic` or `real`) picked
//! by `recipe`, `kind`, `latent_dim`, `data_dim` and `head`; any other key
//! overrides a single field of that recipe.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};
use vhrnn::models::{HeadKind, ModelConfig, ModelKind};
use vhrnn::objectives::{BoundConfig, BoundKind, OptimConfig, Resample, TrainConfig};
use vhrnn::synthdata::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("bad --set {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("--set {key}: {msg}")]
    Override { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    #[default]
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResamplePolicy {
    Never,
    #[default]
    Ess,
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub bound: BoundKind,
    pub train_particles: usize,
    pub valid_particles: usize,
    pub eval_particles: usize,
    pub resample: ResamplePolicy,
    /// Resample when ESS drops below this fraction of the particle count.
    pub ess_fraction: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            bound: BoundKind::Fivo,
            train_particles: 4,
            valid_particles: 16,
            eval_particles: 128,
            resample: ResamplePolicy::Ess,
            ess_fraction: 0.5,
        }
    }
}

impl ObjectiveSection {
    pub fn resample(&self) -> Resample {
        match self.resample {
            ResamplePolicy::Never => Resample::Never,
            ResamplePolicy::Ess => Resample::Ess {
                fraction: self.ess_fraction,
            },
            ResamplePolicy::Always => Resample::Always,
        }
    }

    pub fn eval_bound(&self, kind: BoundKind, particles: usize) -> BoundConfig {
        BoundConfig {
            kind,
            particles,
            resample: self.resample(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSONL paths; when `train` is empty the synthetic train and valid
    /// settings are generated from `[synth]` with `synth_seed`.
    pub train: String,
    pub valid: String,
    pub synth_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub workers: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub recipe: Recipe,
    pub model: ModelConfig,
    pub objective: ObjectiveSection,
    pub optim: OptimConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            recipe: Recipe::Synthetic,
            model: ModelConfig::default(),
            objective: ObjectiveSection::default(),
            optim: OptimConfig::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            synth: SynthConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

const SECTIONS: [&str; 7] = ["model", "objective", "optim", "train", "data", "synth", "eval"];

fn to_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("config sections serialize to tables")
}

fn from_value<T: for<'de> Deserialize<'de>>(section: &str, v: Value) -> Result<T> {
    v.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(format!("[{section}] {}", e.message())))
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> Value {
    let doc = format!("v = {value}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(value.into())),
        Err(_) => Value::String(value.into()),
    }
}

/// Applies `section.key=value` (or `key=value` for top-level keys).
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, value) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) || path.len() > 2 {
        return Err(ConfigError::BadOverride(spec.into()));
    }
    let value = parse_literal(value.trim());
    match path.as_slice() {
        [k] => {
            table.insert((*k).into(), value);
        }
        [section, k] => {
            if !SECTIONS.contains(section) {
                return Err(ConfigError::Override {
                    key: key.into(),
                    msg: format!("unknown section `{section}`"),
                });
            }
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            match entry {
                Value::Table(t) => {
                    t.insert((*k).into(), value);
                }
                _ => {
                    return Err(ConfigError::Override {
                        key: key.into(),
                        msg: format!("`{section}` is not a section"),
                    })
                }
            }
        }
        _ => unreachable!("path length checked above"),
    }
    Ok(())
}

fn take_section(table: &mut Table, name: &str) -> Result<Table> {
    match table.remove(name) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(ConfigError::Invalid(format!("`{name}` must be a section"))),
    }
}

fn take<T: for<'de> Deserialize<'de>>(t: &mut Table, key: &str, section: &str) -> Result<Option<T>> {
    t.remove(key).map(|v| from_value(section, v)).transpose()
}

fn resolve_model(mut t: Table) -> Result<(Recipe, ModelConfig)> {
    let recipe: Recipe = take(&mut t, "recipe", "model")?.unwrap_or_default();
    let kind: ModelKind = take(&mut t, "kind", "model")?.unwrap_or_default();
    let z: usize = take(&mut t, "latent_dim", "model")?.unwrap_or(4);
    let d: usize = take(&mut t, "data_dim", "model")?.unwrap_or(2);
    let head: HeadKind = take(&mut t, "head", "model")?.unwrap_or_default();
    let base = match recipe {
        Recipe::Synthetic => ModelConfig {
            data_dim: d,
            head,
            ..ModelConfig::synthetic(kind, z)
        },
        Recipe::Real => ModelConfig::real(kind, d, z, head),
    };
    let mut merged = to_table(&base);
    merged.extend(t);
    let model: ModelConfig = from_value("model", Value::Table(merged))?;
    model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok((recipe, model))
}

impl RunConfig {
    pub fn from_table(mut table: Table) -> Result<Self> {
        let seed: u64 = take(&mut table, "seed", "top level")?.unwrap_or(0);
        let (recipe, model) = resolve_model(take_section(&mut table, "model")?)?;
        let mut sec = |name: &str| take_section(&mut table, name).map(Value::Table);
        let cfg = Self {
            seed,
            recipe,
            model,
            objective: from_value("objective", sec("objective")?)?,
            optim: from_value("optim", sec("optim")?)?,
            train: from_value("train", sec("train")?)?,
            data: from_value("data", sec("data")?)?,
            synth: from_value("synth", sec("synth")?)?,
            eval: from_value("eval", sec("eval")?)?,
        };
        if let Some(k) = table.keys().next() {
            return Err(ConfigError::Invalid(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses TOML text and applies overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Loads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        let mut model = to_table(&self.model);
        model.insert("recipe".into(), Value::try_from(self.recipe).expect("recipe serializes"));
        t.insert("model".into(), Value::Table(model));
        t.insert("objective".into(), Value::Table(to_table(&self.objective)));
        t.insert("optim".into(), Value::Table(to_table(&self.optim)));
        t.insert("train".into(), Value::Table(to_table(&self.train)));
        t.insert("data".into(), Value::Table(to_table(&self.data)));
        t.insert("synth".into(), Value::Table(to_table(&self.synth)));
        t.insert("eval".into(), Value::Table(to_table(&self.eval)));
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seed > i64::MAX as u64 {
            return bad("seed must fit in a signed 64-bit integer".into());
        }
        let o = &self.objective;
        for (name, v) in [
            ("objective.train_particles", o.train_particles),
            ("objective.valid_particles", o.valid_particles),
            ("objective.eval_particles", o.eval_particles),
            ("train.batch_size", self.train.batch_size),
            ("eval.workers", self.eval.workers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&o.ess_fraction) {
            return bad(format!("objective.ess_fraction must lie in [0, 1], got {}", o.ess_fraction));
        }
        if !(self.optim.lr >= 0.0) {
            return bad(format!("optim.lr must be non-negative, got {}", self.optim.lr));
        }
        if self.data.train.is_empty() != self.data.valid.is_empty() {
            return bad("data.train and data.valid must both be set or both be empty".into());
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            bound: self.objective.bound,
            train_particles: self.objective.train_particles,
            valid_particles: self.objective.valid_particles,
            resample: self.objective.resample(),
            patience: self.train.patience,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn recipe_follows_kind() {
        let cfg = RunConfig::parse("[model]\nkind = \"vrnn\"\n", &[]).unwrap();
        assert_eq!(cfg.model, ModelConfig::synthetic(ModelKind::Vrnn, 4));
        let cfg = RunConfig::parse("", &["model.recipe=real".into(), "model.data_dim=88".into(), "model.head=bernoulli".into()])
            .unwrap();
        assert_eq!(cfg.model, ModelConfig::real(ModelKind::Vhrnn, 88, 4, HeadKind::Bernoulli));
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::parse(
            "seed = 3\n[optim]\nlr = 0.1\n",
            &["optim.lr=0".into(), "seed=9".into(), "objective.resample=never".into(), "model.omega_width=5".into()],
        )
        .unwrap();
        assert_eq!(cfg.optim.lr, 0.0);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.objective.resample(), Resample::Never);
        assert_eq!(cfg.model.omega_width, 5);
        let back = RunConfig::parse(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_overrides() {
        assert!(RunConfig::parse("[optim]\nlearning_rate = 1.0\n", &[]).is_err());
        assert!(RunConfig::parse("bogus = 1\n", &[]).is_err());
        assert!(RunConfig::parse("", &["nonsense".into()]).is_err());
        assert!(RunConfig::parse("", &["widgets.x=1".into()]).is_err());
        assert!(RunConfig::parse("", &["objective.train_particles=0".into()]).is_err());
        assert!(RunConfig::parse("", &["model.kind=vhrnn".into(), "model.decoder_split_heads=true".into()]).is_err());
    }

    #[test]
    fn string_overrides_fall_back_to_bare_words() {
        let cfg = RunConfig::parse("", &["data.train=a.jsonl".into(), "data.valid=b.jsonl".into()]).unwrap();
        assert_eq!(cfg.data.train, "a.jsonl");
    }
}
