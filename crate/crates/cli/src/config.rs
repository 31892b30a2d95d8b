//! Flat `key = value` settings: an optional file plus `--set` overrides,
//! routed to the config structs that own each key.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::CliError;

/// Parsed settings, in key order.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    table: toml::Table,
}

impl Settings {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let parsed = item
                .parse::<toml::Table>()
                .or_else(|_| {
                    // bare strings: key=value without quotes
                    let (k, v) = item.split_once('=').ok_or(())?;
                    let mut t = toml::Table::new();
                    t.insert(k.trim().to_string(), toml::Value::String(v.trim().to_string()));
                    Ok::<_, ()>(t)
                })
                .map_err(|_| CliError::Invalid(format!("--set expects key=value, got '{item}'")))?;
            table.extend(parsed);
        }
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(CliError::Invalid(format!("setting '{k}' is a table; only flat key = value pairs are allowed")));
        }
        if table.contains_key("seed") {
            return Err(CliError::Invalid("'seed' cannot be set in a config; use the global --seed flag".into()));
        }
        Ok(Self { table })
    }

    /// Takes the keys that are fields of `T` (judged by its serialized
    /// default) and deserializes them over the defaults.
    pub fn take<T: Serialize + DeserializeOwned + Default>(&mut self) -> Result<T, CliError> {
        let defaults = toml::Table::try_from(T::default()).expect("defaults serialize");
        let mut picked = toml::Table::new();
        for key in defaults.keys() {
            if let Some(v) = self.table.remove(key) {
                picked.insert(key.clone(), v);
            }
        }
        picked
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Invalid(format!("config: {}", e.message())))
    }

    /// Fails on any key no config struct claimed.
    pub fn finish(self) -> Result<(), CliError> {
        match self.table.keys().next() {
            Some(k) => Err(CliError::Invalid(format!("unknown setting '{k}'"))),
            None => Ok(()),
        }
    }
}

/// Pipeline-level settings shared by the training subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub n_folds: usize,
    pub stratified_split: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.2, n_folds: 5, stratified_split: false }
    }
}

/// Provenance record embedded in every artifact.
pub fn run_config(subcommand: &str, seed: u64, args: Value, settings: Map<String, Value>) -> Value {
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "seed": seed,
        "args": args,
        "settings": Value::Object(settings),
        "formats": {
            "manifest": triage_core::dataset::MANIFEST_VERSION,
            "feature_file": triage_core::dataset::FEATURE_FILE_VERSION,
            "checkpoint": triage_core::aggregator::CHECKPOINT_VERSION,
        },
    })
}

/// The run config as a CSV comment line (without the leading `# `).
pub fn comment(run_config: &Value) -> Vec<String> {
    vec![format!("run_config {run_config}")]
}

/// Reads the run config back from a CSV's leading comment lines.
pub fn embedded_run_config(text: &str) -> Option<Value> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# run_config "))
        .and_then(|s| serde_json::from_str(s).ok())
}
