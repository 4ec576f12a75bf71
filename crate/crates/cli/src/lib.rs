//! `undersea` command line: synthesize data, degrade, enhance, train,
//! evaluate, gradient-check and run ablations.
//!
//! Every command writes a `manifest.json` recording the seed, the resolved
//! configuration and the files it produced. Failures print one JSON line on
//! stderr and exit with 2 (bad arguments or configuration), 3 (I/O) or 4
//! (numeric failure).

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::resolve_config;
pub use manifest::Manifest;

/// Maximum relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "undersea",
    version,
    about = "Physics-informed underwater image enhancement"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Global {
    /// JSON file overriding preset values; field names follow the train config.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialization, data synthesis and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (for `degrade` and `enhance`, the output image).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Fusion,
    Loss,
    Enhancer,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset (clear/, degraded/, truth/).
    Synth {
        #[arg(long)]
        count: Option<usize>,
        /// Side of the square images.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Degrade one image; transmission and background maps are drawn from the
    /// seed unless given.
    Degrade {
        #[arg(long = "in", value_name = "PPM")]
        input: PathBuf,
        #[arg(long = "t-map", value_name = "PFM", requires = "b_map")]
        t_map: Option<PathBuf>,
        #[arg(long = "b-map", value_name = "PFM", requires = "t_map")]
        b_map: Option<PathBuf>,
    },
    /// Enhance one image with a trained checkpoint.
    Enhance {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long = "in", value_name = "PPM")]
        input: PathBuf,
    },
    /// Train on synthetic data or on a dataset directory.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        /// Dataset directory laid out as `synth` writes it.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from a checkpoint; its configuration wins.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, or check a dataset directory's stored pairs.
    Eval {
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Re-degrade every clear image with its truth maps and compare.
        #[arg(long)]
        verify_pairs: bool,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 120)]
        coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
    },
    /// Train every variant of an ablation axis and write a CSV.
    Ablate {
        #[arg(long, value_enum, default_value_t = AxisArg::All)]
        axis: AxisArg,
        #[arg(long)]
        steps: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Degrade { .. } => "degrade",
            Command::Enhance { .. } => "enhance",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate { .. } => "ablate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Numeric => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Numeric,
            message: message.into(),
        }
    }

    /// The single stderr line.
    pub fn to_line(&self, command: &str) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "code": self.kind.exit_code(),
            "command": command,
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<undersea::Error> for CliError {
    fn from(e: undersea::Error) -> Self {
        let kind = if e.is_io() {
            ErrorKind::Io
        } else if e.is_numeric() {
            ErrorKind::Numeric
        } else {
            ErrorKind::Usage
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                let first = e
                    .to_string()
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .trim_start_matches("error: ")
                    .to_string();
                eprintln!("{}", CliError::usage(first).to_line("-"));
            }
            return code;
        }
    };
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::dispatch(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_line(cli.command.name()));
            e.kind.exit_code()
        }
    }
}
