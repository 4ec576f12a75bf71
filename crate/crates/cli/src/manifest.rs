use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use undersea::trainer::TrainConfig;

use crate::{CliError, CliResult};

/// Reproducibility record written next to every command's outputs. Contains
/// no timestamps or absolute paths, so identical invocations produce
/// identical files.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub cli_version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: TrainConfig,
    /// Produced files, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub results: Value,
}

impl Manifest {
    pub fn new(command: &str, args: &[String], config: &TrainConfig) -> Self {
        Manifest {
            tool: "undersea",
            cli_version: env!("CARGO_PKG_VERSION"),
            core_version: undersea::VERSION,
            command: command.to_string(),
            args: args.to_vec(),
            seed: config.seed,
            config: config.clone(),
            outputs: Vec::new(),
            results: Value::Null,
        }
    }

    pub fn output(&mut self, root: &Path, path: &Path) {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
    }

    /// Writes `path`, creating parent directories.
    pub fn write(mut self, path: &Path) -> CliResult<PathBuf> {
        self.outputs.sort();
        let text =
            serde_json::to_string_pretty(&self).map_err(|e| CliError::usage(e.to_string()))?;
        write_text(path, &(text + "\n"))?;
        Ok(path.to_path_buf())
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
