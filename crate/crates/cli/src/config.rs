use std::fs;

use serde_json::Value;
use undersea::trainer::TrainConfig;

use crate::{CliError, CliResult, Global};

/// Recursively overlays `patch` onto `base`; objects merge key by key, any
/// other value replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

/// Preset, then `--config`, then flags. Unknown keys in the file are
/// rejected by the config types themselves.
pub fn resolve_config(g: &Global) -> CliResult<TrainConfig> {
    let preset = TrainConfig::preset(g.preset.name()).expect("every preset flag has a config");
    let mut cfg = match &g.config {
        None => preset,
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(CliError::usage(format!(
                    "{}: top level must be an object",
                    path.display()
                )));
            }
            let mut base =
                serde_json::to_value(&preset).map_err(|e| CliError::usage(e.to_string()))?;
            merge(&mut base, patch);
            serde_json::from_value(base)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}
