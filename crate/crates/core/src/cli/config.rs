//! Flat JSON run configuration: defaults, then the config file, then flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::Disturbance;
use crate::pointset::{CloudFormat, Split};
use crate::tasks::TrainConfig;

/// Command inputs that are not part of a training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandOptions {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub cloud: Option<PathBuf>,
    /// Cloud format; inferred from the file extension when absent.
    pub format: Option<CloudFormat>,
    pub threads: Option<usize>,
    pub shapes: usize,
    pub points: usize,
    pub kind: Option<Disturbance>,
    pub magnitude: f64,
    pub grid: Vec<f64>,
    pub split: Split,
    pub max_pairs: Option<usize>,
    pub k_max: usize,
    pub radii: Vec<f64>,
    pub n_thresholds: usize,
}

impl Default for CommandOptions {
    fn default() -> Self {
        CommandOptions {
            manifest: None,
            out: None,
            ckpt: None,
            cloud: None,
            format: None,
            threads: None,
            shapes: 55,
            points: 1024,
            kind: None,
            magnitude: 0.0,
            grid: Vec::new(),
            split: Split::Test,
            max_pairs: None,
            k_max: 20,
            radii: (0..=20).map(|i| f64::from(i) * 0.01).collect(),
            n_thresholds: 100,
        }
    }
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub options: CommandOptions,
}

fn object_of<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("configuration structs serialize to objects"),
    }
}

fn usage(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Every accepted key.
    pub fn keys() -> BTreeSet<String> {
        object_of(&TrainConfig::default())
            .into_iter()
            .map(|(k, _)| k)
            .chain(
                object_of(&CommandOptions::default())
                    .into_iter()
                    .map(|(k, _)| k),
            )
            .collect()
    }

    /// Resolve `file` (if any) and then `overrides` on top of the defaults.
    /// Each key is validated on its own so errors name the offending key.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| {
                Error::parse(
                    path,
                    format!("line {} column {}", e.line(), e.column()),
                    e.to_string(),
                )
            })?;
            match doc {
                Value::Object(m) => entries.extend(m),
                _ => {
                    return Err(Error::parse(
                        path,
                        "line 1".into(),
                        "config must be a JSON object",
                    ))
                }
            }
        }
        entries.extend(overrides.iter().cloned());

        let mut train = object_of(&TrainConfig::default());
        let mut options = object_of(&CommandOptions::default());
        for (key, value) in entries {
            let in_train = train.contains_key(&key);
            if !in_train && !options.contains_key(&key) {
                return Err(usage(&key, "unknown configuration key"));
            }
            let target = if in_train { &mut train } else { &mut options };
            target.insert(key.clone(), value);
            let doc = Value::Object(target.clone());
            let checked = if in_train {
                serde_json::from_value::<TrainConfig>(doc).map(|_| ())
            } else {
                serde_json::from_value::<CommandOptions>(doc).map(|_| ())
            };
            if let Err(e) = checked {
                return Err(usage(&key, format!("invalid value: {e}")));
            }
        }
        let train: TrainConfig = serde_json::from_value(Value::Object(train))?;
        train.validate()?;
        let options: CommandOptions = serde_json::from_value(Value::Object(options))?;
        Ok(RunConfig { train, options })
    }

    /// One flat JSON object holding every key; feeding it back through
    /// [`RunConfig::resolve`] reproduces this configuration.
    pub fn to_json(&self) -> Value {
        let mut m = object_of(&self.train);
        m.extend(object_of(&self.options));
        Value::Object(m)
    }

    pub fn require_path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "manifest" => &self.options.manifest,
            "out" => &self.options.out,
            "ckpt" => &self.options.ckpt,
            "cloud" => &self.options.cloud,
            _ => &None,
        };
        p.as_deref().ok_or_else(|| usage(key, "required"))
    }
}
