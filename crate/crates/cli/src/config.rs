//! Run configuration: one JSON file with `model`, `train`, `pretrain` and
//! `data` sections, plus `--section.key value` overrides from the command
//! line.

use std::path::Path;

use rlt::config::{ModelConfig, TrainConfig};
use rlt::datagen::{Relation, Shape};
use rlt::pretrain::PretrainConfig;
use rlt::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "RLT_SEED";

/// Parameters of the generated training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub relation: String,
    pub count: usize,
    pub seed: u64,
    /// Subject shapes to draw pairs from; held-out shapes are left out here.
    pub shapes: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { relation: "approach".into(), count: 16, seed: 0, shapes: Shape::ALL.iter().map(|s| s.name().to_string()).collect() }
    }
}

impl DataConfig {
    pub fn relation(&self) -> Result<Relation> {
        Relation::parse(&self.relation)
    }

    pub fn shapes(&self) -> Result<Vec<Shape>> {
        self.shapes.iter().map(|s| Shape::parse(s)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
}

/// Splits `--section.key value` and `--section.key=value` pairs out of
/// `args`, returning the remaining arguments and the overrides in order.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--").filter(|b| b.contains('.') && !b.starts_with('.')) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("override --{body} needs a value")))?;
                (body.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Literal JSON when it parses, a string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn has_key(root: &Value, section: &str, key: &str) -> bool {
    root.get(section).and_then(|s| s.get(key)).is_some()
}

impl RunConfig {
    /// Reads `path` (or starts empty), applies `overrides`, then fills any
    /// seed left unset from `RLT_SEED`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !root.is_object() {
            return Err(Error::Config("config root must be a JSON object".into()));
        }
        for (key, raw) in overrides {
            let (section, field) = key.split_once('.').ok_or_else(|| Error::Config(format!("override `{key}` is not section.key")))?;
            if !["model", "train", "pretrain", "data"].contains(&section) || field.is_empty() || field.contains('.') {
                return Err(Error::Config(format!("unknown override `--{key}`; use --model.KEY, --train.KEY, --pretrain.KEY or --data.KEY")));
            }
            let obj = root.as_object_mut().expect("checked object");
            let sec = obj.entry(section).or_insert_with(|| Value::Object(Map::new()));
            let sec = sec.as_object_mut().ok_or_else(|| Error::Config(format!("config section `{section}` must be an object")))?;
            sec.insert(field.to_string(), override_value(raw));
        }
        if let Some(seed) = env_seed()? {
            for section in ["train", "pretrain", "data"] {
                if !has_key(&root, section, "seed") {
                    let obj = root.as_object_mut().expect("checked object");
                    let sec = obj.entry(section).or_insert_with(|| Value::Object(Map::new()));
                    if let Some(sec) = sec.as_object_mut() {
                        sec.insert("seed".into(), Value::from(seed));
                    }
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(format!("config schema: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.pretrain.validate()?;
        cfg.data.relation()?;
        cfg.data.shapes()?;
        Ok(cfg)
    }
}

/// `RLT_SEED` when set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// An explicit `--seed`, else `RLT_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}
