//! Resolved run configuration and flat dotted-key overrides.
//!
//! Resolution order: scale profile, then the `--config` file, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use fibro_core::{ModelConfig, PreprocessConfig, SynthConfig, Task, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Keys that are derived rather than set: the seed lives at the top level and
/// the class count follows the task.
const DERIVED_KEYS: [&str; 2] = ["synth.seed", "model.num_classes"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn profile(scale: Scale, task: Task) -> Self {
        let k = task.num_classes();
        let (model, preprocess) = match scale {
            Scale::Paper => (ModelConfig::paper(k), PreprocessConfig::default()),
            Scale::Desk => (ModelConfig::desk(k), PreprocessConfig::desk([16, 16, 16])),
        };
        Self { seed: 0, synth: SynthConfig::default(), preprocess, model, train: TrainConfig::default() }
    }

    /// Applies file entries then flag entries, keeping seeds and class count
    /// consistent, and re-validates every section.
    pub fn resolve(
        scale: Scale,
        task: Task,
        file: Option<&Path>,
        flags: &[(&str, String)],
    ) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(Self::profile(scale, task)).expect("config serializes");
        if let Some(path) = file {
            for (key, value) in read_config_file(path)? {
                set_key(&mut tree, &key, value)?;
            }
        }
        for (key, raw) in flags {
            let value = parse_flag(&tree, key, raw)?;
            set_key(&mut tree, key, value)?;
        }
        let mut cfg: Self = serde_json::from_value(tree).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        cfg.synth.seed = cfg.seed;
        cfg.model.num_classes = task.num_classes();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: &dyn std::fmt::Display| CliError::InvalidConfig(e.to_string());
        self.synth.validate().map_err(|e| invalid(&e))?;
        self.preprocess.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    /// Flat `{"section.field": value}` view with sorted keys.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.flat()).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn read_config_file(path: &Path) -> Result<Vec<(String, Value)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        _ => Err(CliError::Usage(format!("config {} must be a flat JSON object", path.display()))),
    }
}

fn slot<'a>(tree: &'a mut Value, key: &str) -> Result<&'a mut Value, CliError> {
    if DERIVED_KEYS.contains(&key) {
        return Err(CliError::UnknownKey(key.to_string()));
    }
    let mut node = tree;
    for part in key.split('.') {
        node = node.get_mut(part).ok_or_else(|| CliError::UnknownKey(key.to_string()))?;
    }
    if node.is_object() {
        return Err(CliError::UnknownKey(key.to_string()));
    }
    Ok(node)
}

/// Replaces one leaf and checks that its section still deserializes.
fn set_key(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let old = std::mem::replace(slot(tree, key)?, value.clone());
    if let Err(e) = serde_json::from_value::<RunConfig>(tree.clone()) {
        *slot(tree, key)? = old;
        return Err(CliError::BadValue { key: key.to_string(), value: value.to_string(), reason: e.to_string() });
    }
    Ok(())
}

/// Interprets a flag string according to the type of the value it replaces.
fn parse_flag(tree: &Value, key: &str, raw: &str) -> Result<Value, CliError> {
    let mut current = tree.clone();
    let current = slot(&mut current, key)?.clone();
    let bad = |reason: &str| CliError::BadValue { key: flag_name(key).to_string(), value: raw.to_string(), reason: reason.to_string() };
    let scalar = |s: &str, like: &Value| -> Result<Value, CliError> {
        let s = s.trim();
        match like {
            Value::Bool(_) => s.parse::<bool>().map(Value::Bool).map_err(|_| bad("expected true or false")),
            Value::Number(n) if n.is_u64() => {
                s.parse::<u64>().map(Value::from).map_err(|_| bad("expected a non-negative integer"))
            }
            Value::Number(_) => match s.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(Value::from(x)),
                _ => Err(bad("expected a finite number")),
            },
            _ => Ok(Value::String(s.to_string())),
        }
    };
    match &current {
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != items.len() {
                return Err(bad(&format!("expected {} comma-separated values", items.len())));
            }
            parts.iter().zip(items).map(|(p, like)| scalar(p, like)).collect::<Result<Vec<_>, _>>().map(Value::Array)
        }
        like => scalar(raw, like),
    }
}

/// Short name used in messages: `train.lr` is reported as `lr`.
fn flag_name(key: &str) -> &str {
    key.rsplit('.').next().unwrap_or(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_profile() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train.lr": 0.01, "train.epochs": 7, "train.patience": 3, "model.token_dim": 32}"#).unwrap();
        let cfg = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, Some(&p), &[("train.lr", "0.5".into())]).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.token_dim, 32);
        assert_eq!(cfg.model.base_width, 2);
    }

    #[test]
    fn paper_profile_defaults() {
        let cfg = RunConfig::resolve(Scale::Paper, Task::FourClass, None, &[]).unwrap();
        assert_eq!(cfg.model.token_dim, 256);
        assert_eq!(cfg.model.num_classes, 4);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.preprocess.output_extents(), [200, 200, 44]);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, None, &[("train.lr", "abc".into())]).unwrap_err();
        assert!(matches!(&err, CliError::BadValue { key, .. } if key == "lr"), "{err}");
        let err = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, None, &[("synth.extents", "16,16".into())]).unwrap_err();
        assert!(matches!(&err, CliError::BadValue { key, .. } if key == "extents"), "{err}");
    }

    #[test]
    fn file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train.learning_rate": 0.01}"#).unwrap();
        let err = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, Some(&p), &[]).unwrap_err();
        assert!(matches!(&err, CliError::UnknownKey(k) if k == "train.learning_rate"));
        std::fs::write(&p, r#"{"train.epochs": "many"}"#).unwrap();
        let err = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, Some(&p), &[]).unwrap_err();
        assert!(matches!(&err, CliError::BadValue { key, .. } if key == "train.epochs"));
        std::fs::write(&p, r#"{"model.num_classes": 3}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Scale::Desk, Task::Cirrhosis, Some(&p), &[]), Err(CliError::UnknownKey(_))));
        std::fs::write(&p, r#"{"train.patience": 500}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Scale::Desk, Task::Cirrhosis, Some(&p), &[]), Err(CliError::InvalidConfig(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, None, &[]).unwrap();
        let b = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, None, &[("seed", "1".into())]).unwrap();
        assert_eq!(a.hash(), RunConfig::resolve(Scale::Desk, Task::Cirrhosis, None, &[]).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        assert!(a.flat().contains_key("train.lr"));
    }
}
