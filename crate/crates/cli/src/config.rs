//! Run configuration: a preset, overlaid by a TOML file, then `HCAT_SEED`,
//! then `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hcat::loss::LossWeights;
use hcat::model::ModelConfig;
use hcat::tracker::TrackerConfig;
use hcat::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SEED_ENV: &str = "HCAT_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The full-size network.
    #[default]
    Full,
    /// The reduced network used for training on generated data.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub weights: PathBuf,
    pub trace: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            weights: "hcat.weights".into(),
            trace: "trace.txt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, loss) = match preset {
            Preset::Full => (ModelConfig::default(), LossWeights::default()),
            Preset::Toy => (ModelConfig::toy(), LossWeights::toy()),
        };
        Self {
            preset,
            seed: 0,
            model,
            loss,
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            paths: Paths::default(),
        }
    }

    /// Builds a config from optional file text, seed override and `key=value`
    /// overrides, validating the result.
    pub fn resolve(preset: Option<Preset>, file: Option<&str>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let mut user = match file {
            Some(text) => text.parse::<Table>().context("config file is not valid TOML")?,
            None => Table::new(),
        };
        for o in overrides {
            let (key, value) = o.split_once('=').with_context(|| format!("override `{o}` is not of the form key=value"))?;
            set_path(&mut user, key.trim(), parse_value(value.trim()))?;
        }
        if user.get("train").and_then(|t| t.get("seed")).is_some() {
            bail!("`train.seed` is not a key; use the top-level `seed`");
        }
        let preset = match (preset, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.clone().try_into().context("invalid preset")?,
            (None, None) => Preset::default(),
        };
        user.insert("preset".into(), Value::try_from(preset)?);

        let mut merged = Value::try_from(Self::preset(preset))?;
        merge(&mut merged, Value::Table(user));
        let mut cfg: RunConfig = merged.try_into().context("invalid configuration")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given and applies `HCAT_SEED` and the overrides.
    pub fn load(preset: Option<Preset>, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display())))
            .transpose()?;
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s} is not an unsigned integer"))?),
            Err(_) => None,
        };
        Self::resolve(preset, text.as_deref(), seed, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        Ok(())
    }

    /// The effective configuration in the file format.
    pub fn to_toml(&self) -> String {
        let mut v = Value::try_from(self).expect("config serialises");
        if let Some(t) = v.get_mut("train").and_then(Value::as_table_mut) {
            t.remove("seed");
        }
        toml::to_string(&v).expect("config serialises")
    }
}

fn parse_value(s: &str) -> Value {
    // anything that is not a TOML literal is taken as a bare string
    match format!("v = {s}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(s.to_string()),
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key `{key}`");
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().with_context(|| format!("`{p}` in `{key}` is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Overlays `top` onto `base`; keys absent from `base` are kept so that
/// deserialisation rejects them.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
