//! Command-line front end for the hybrid CTC/attention recognizer: run
//! configuration, the tensor container used for checkpoints and datasets,
//! and the `train`, `lm-train`, `decode`, `eval`, `gradcheck` and `gen-data`
//! commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod model_io;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use e2ea_core::{DecodeMode, Error};
use thiserror::Error as ThisError;

pub use checkpoint::{Container, FormatError};
pub use config::RunConfig;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("tensor container: {0}")]
    Container(#[from] FormatError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for invalid configuration, 3 for I/O and unreadable files, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config(_)) => 2,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Container(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "e2ea", version, about = "Joint CTC/attention speech recognition on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (key=value); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the shared-encoder model.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint written after initialization and after every epoch.
        #[arg(long)]
        ckpt: PathBuf,
        /// Pretrained LM for separate fusion, or the initial LM for joint fusion.
        #[arg(long)]
        lm_ckpt: Option<PathBuf>,
    },
    /// Train the character LM on the training transcripts.
    LmTrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        lm_ckpt: PathBuf,
    },
    /// Decode the test split and report corpus CER.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lm_ckpt: Option<PathBuf>,
        #[arg(long)]
        mode: Option<DecodeMode>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
        /// LM weight; enables separate fusion unless a fusion mode is configured.
        #[arg(long)]
        gamma: Option<f64>,
        /// Per-utterance records; written to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute corpus CER from decode records.
    Eval {
        results: PathBuf,
    },
    /// Finite-difference check of every layer and loss.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write the configured splits as tensor containers.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn flush(out: &mut dyn Write) -> Result<(), CliError> {
    out.flush().map_err(|e| CliError::io(Path::new("stdout"), e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { config, ckpt, lm_ckpt } => {
            let cfg = load_config(&config)?;
            commands::cmd_train(&cfg, &ckpt, lm_ckpt.as_deref(), &mut out)?;
        }
        Command::LmTrain { config, lm_ckpt } => {
            let cfg = load_config(&config)?;
            commands::cmd_lm_train(&cfg, &lm_ckpt, &mut out)?;
        }
        Command::Decode {
            config,
            ckpt,
            lm_ckpt,
            mode,
            lambda,
            beam,
            gamma,
            out: records,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.decode.mode = m;
            }
            if let Some(l) = lambda {
                cfg.decode.lambda = l;
            }
            if let Some(b) = beam {
                cfg.decode.beam_width = b;
            }
            if let Some(g) = gamma {
                commands::gamma_override(&mut cfg.decode.fusion, g);
            }
            cfg.validate()?;
            match records {
                Some(path) => {
                    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
                    let mut w = BufWriter::new(file);
                    let summary = commands::cmd_decode(&cfg, &ckpt, lm_ckpt.as_deref(), &mut w)?;
                    w.flush().map_err(|e| CliError::io(&path, e))?;
                    writeln!(out, "{}", summary.line()).map_err(|e| CliError::io(Path::new("stdout"), e))?;
                }
                None => {
                    let summary = commands::cmd_decode(&cfg, &ckpt, lm_ckpt.as_deref(), &mut out)?;
                    eprintln!("{}", summary.line());
                }
            }
        }
        Command::Eval { results } => {
            let file = File::open(&results).map_err(|e| CliError::io(&results, e))?;
            let summary = commands::cmd_eval(&mut BufReader::new(file))?;
            writeln!(out, "{}", summary.line()).map_err(|e| CliError::io(Path::new("stdout"), e))?;
        }
        Command::Gradcheck { seed, corrupt } => {
            let seed = seed.unwrap_or(e2ea_core::gradsuite::DEFAULT_SEED);
            commands::cmd_gradcheck(seed, corrupt, &mut out)?;
        }
        Command::GenData { config, out: dir } => {
            let cfg = load_config(&config)?;
            commands::cmd_gen_data(&cfg, &dir, &mut out)?;
        }
    }
    flush(&mut out)
}
