//! Run configuration: TOML file, then `--set key=value` overrides, then the
//! dedicated flags.

use std::path::{Path, PathBuf};

use cardio_core::config::RunConfig;
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Config file used when `--config` is not given.
pub const CONFIG_ENV: &str = "CARDIO4D_CONFIG";

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Dotted `section.key=value` assignments; values use TOML syntax and
    /// fall back to a bare string.
    pub set: Vec<String>,
}

pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let file_keys = leaf_paths(&table);

    let mut set_keys = Vec::new();
    for item in &ov.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("`{item}` is not of the form key=value")))?;
        let key = key.trim();
        insert(&mut table, key, parse_value(raw.trim()))?;
        set_keys.push(key.to_string());
    }
    if let Some(seed) = ov.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Config("seed does not fit in a TOML integer".into()))?;
        insert(&mut table, "seed", Value::Integer(seed))?;
    }
    for (key, value) in [
        ("paths.dataset", &ov.dataset),
        ("paths.checkpoint", &ov.checkpoint),
        ("paths.output", &ov.output),
    ] {
        if let Some(p) = value {
            insert(&mut table, key, Value::String(p.display().to_string()))?;
        }
    }

    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    let resolved = Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    for key in file_keys.iter().chain(&set_keys) {
        if lookup(&resolved, key).is_none() {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn insert(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |v, p| v.as_table()?.get(p))
}

/// Dotted paths of every non-table value.
fn leaf_paths(table: &Table) -> Vec<String> {
    let mut out = Vec::new();
    for (k, v) in table {
        match v {
            Value::Table(t) => out.extend(leaf_paths(t).into_iter().map(|s| format!("{k}.{s}"))),
            _ => out.push(k.clone()),
        }
    }
    out
}
