//! `lde`: the latent-domain-expansion workflow in one binary.
//!
//! Subcommands cover the whole pipeline — `gen` (synthetic dataset),
//! `split` (protocol splits), `train`, `embed`, `eval` — plus `verify`,
//! which runs the numeric oracle suite. Configuration layers: built-in
//! defaults, then `--config file.toml`, then `--set key=value` overrides,
//! then dedicated flags; every run writes the resolved result next to its
//! outputs. `LDE_LOG=info` enables progress logging.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 validation
//! error (bad flags, config, or inputs), 2 runtime or numeric error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use lde_core::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "lde",
    version,
    about = "Latent domain expansion at desk scale: synthetic ReID data, protocol splits, \
             training, embedding export, retrieval evaluation, and numeric verification"
)]
struct Cli {
    /// Configuration file (TOML); built-in defaults apply where omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key (TOML literal or bare string), e.g.
    /// --set train.loss.lambda=0.5; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", action = ArgAction::Append)]
    set: Vec<String>,

    /// Override every section's seed (gen, split, model, train).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for outputs and the resolved-config snapshot.
    #[arg(long, global = true, value_name = "DIR", default_value = "lde-out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (images/ + manifest.jsonl).
    Gen,

    /// Split a manifest into train/query/gallery under a protocol.
    Split {
        /// Manifest to split (JSON Lines).
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// close_scene, open_scene, or day_night; defaults to the config's
        /// split.protocol.
        #[arg(long, value_name = "NAME")]
        protocol: Option<String>,
    },

    /// Train on a split's train records; writes model.ckpt + train_log.csv.
    Train {
        /// Dataset root that the manifest's image paths are relative to.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Split directory containing train.jsonl.
        #[arg(long, value_name = "DIR")]
        split: PathBuf,
        /// Resume from a checkpoint; its embedded configuration governs the
        /// run (explicit flags still win).
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Shorthand for --set train.loss.lambda=<V>; 0 disables expansion.
        #[arg(long, value_name = "V")]
        lambda: Option<f64>,
    },

    /// Export eval-mode embeddings for every record in a manifest.
    Embed {
        /// Training checkpoint (model part is extracted automatically).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Records to embed (JSON Lines manifest).
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Dataset root that the manifest's image paths are relative to.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },

    /// Score query/gallery manifests against exported embeddings.
    Eval {
        /// Embedding file written by `lde embed`.
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        /// Query manifest (JSON Lines).
        #[arg(long, value_name = "FILE")]
        query: PathBuf,
        /// Gallery manifest (JSON Lines).
        #[arg(long, value_name = "FILE")]
        gallery: PathBuf,
    },

    /// Run the oracle suite and print a check table.
    Verify {
        /// quick (subset, well under a minute) or full (complete suite).
        #[arg(long, value_name = "LEVEL", default_value = "quick")]
        level: String,
        /// Inject a known defect (trace-sign) to show the suite catches it.
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let app = config::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    let out = &cli.out;
    match &cli.cmd {
        Cmd::Gen => commands::cmd_gen(app, out),
        Cmd::Split { manifest, protocol } => {
            commands::cmd_split(app, out, manifest, protocol.as_deref())
        }
        Cmd::Train { data, split, resume, lambda } => {
            commands::cmd_train(app, out, data, split, resume.as_deref(), *lambda)
        }
        Cmd::Embed { checkpoint, manifest, data } => {
            commands::cmd_embed(app, out, checkpoint, manifest, data)
        }
        Cmd::Eval { embeddings, query, gallery } => {
            commands::cmd_eval(app, out, embeddings, query, gallery)
        }
        Cmd::Verify { level, inject_fault } => {
            commands::cmd_verify(app, out, level, inject_fault.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version surface as non-error "errors"; real
            // parse failures are validation problems (exit 1, not clap's
            // default 2, which this tool reserves for runtime failures).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LDE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
