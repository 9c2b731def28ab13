//! Run configuration: defaults, then the TOML file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tig_core::{EvalMode, TrainConfig};

use crate::error::CliError;

pub const CACHE_ENV: &str = "TIG_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out: PathBuf,
    /// Whether the dataset CSV starts with a header row.
    pub header: bool,
    pub mode: EvalMode,
    pub train: TrainConfig,
    /// Where every key's value came from.
    pub provenance: BTreeMap<String, Source>,
}

const RUN_KEYS: [&str; 5] = ["dataset", "cache_dir", "out", "header", "mode"];

/// Resolves the configuration. `flags` are `(key, value)` pairs using config
/// file key names and win over the file; the cache directory falls back to
/// `TIG_CACHE_DIR` before its default.
pub fn resolve(file: Option<&Path>, flags: Vec<(String, toml::Value)>) -> Result<RunConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::User(format!("config {}: {}", path.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    if let Some(v) = table.remove("p_r") {
        if table.insert("restart_prob".into(), v).is_some() {
            return Err(CliError::User("config sets both p_r and restart_prob".into()));
        }
    }

    let train_keys: Vec<String> = match serde_json::to_value(TrainConfig::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("config serializes to an object"),
    };
    let mut provenance: BTreeMap<String, Source> =
        train_keys.iter().map(String::as_str).chain(RUN_KEYS).map(|k| (k.to_string(), Source::Default)).collect();
    for key in table.keys() {
        match provenance.get_mut(key) {
            Some(s) => *s = Source::File,
            None => return Err(CliError::User(format!("unknown config key `{key}`"))),
        }
    }
    for (key, value) in flags {
        let key = if key == "p_r" { "restart_prob".to_string() } else { key };
        match provenance.get_mut(&key) {
            Some(s) => *s = Source::Flag,
            None => return Err(CliError::User(format!("unknown config key `{key}`"))),
        }
        table.insert(key, value);
    }

    let string = |table: &mut toml::Table, key: &str| -> Result<Option<String>, CliError> {
        match table.remove(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(CliError::User(format!("`{key}` must be a string, found {}", other.type_str()))),
        }
    };
    let dataset = string(&mut table, "dataset")?.map(PathBuf::from);
    let out = string(&mut table, "out")?.map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let cache_dir = match string(&mut table, "cache_dir")? {
        Some(dir) => PathBuf::from(dir),
        None => match std::env::var_os(CACHE_ENV) {
            Some(dir) => {
                provenance.insert("cache_dir".into(), Source::Env);
                PathBuf::from(dir)
            }
            None => PathBuf::from(".tig-cache"),
        },
    };
    let header = match table.remove("header") {
        None => true,
        Some(toml::Value::Boolean(b)) => b,
        Some(other) => return Err(CliError::User(format!("`header` must be a boolean, found {}", other.type_str()))),
    };
    let mode = match string(&mut table, "mode")?.as_deref() {
        None | Some("transductive") => EvalMode::Transductive,
        Some("inductive") => EvalMode::Inductive,
        Some(other) => return Err(CliError::User(format!("`mode` must be transductive or inductive, found {other:?}"))),
    };
    let train: TrainConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::User(e.message().to_string()))?;
    train.validate()?;
    Ok(RunConfig { dataset, cache_dir, out, header, mode, train, provenance })
}

/// Parses `key=value`, reading the value as TOML and falling back to a bare
/// string.
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value), String> {
    let (key, value) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}
