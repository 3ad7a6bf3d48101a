mod commands;
mod config;
mod pairs;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use avdkf::enhance::GainMode;
use avdkf::models::ModelKind;
use avdkf::presets::PresetName;
use clap::{Parser, Subcommand};

use crate::commands::EnhanceJob;
use crate::config::RunConfig;

/// Audio-visual speech enhancement with deep Kalman filter priors.
#[derive(Debug, Parser)]
#[command(name = "avdkf", version)]
struct Cli {
    /// TOML configuration; keys not given fall back to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset to start from (desk or paper).
    #[arg(long, global = true)]
    preset: Option<PresetName>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic audio-visual corpus.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of clean utterances.
        #[arg(long)]
        utterances: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a speech prior on a corpus's train and valid splits.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run directory for the checkpoint and logs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        kind: Option<ModelKind>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Copy matching parameters from an existing checkpoint first.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Enhance one recording, or every recording in a noisy list.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "list")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        output: Option<PathBuf>,
        /// Visual features for --input.
        #[arg(long, requires = "input")]
        features: Option<PathBuf>,
        /// Noisy list (noisy.tsv) to process.
        #[arg(long)]
        list: Option<PathBuf>,
        #[arg(long, requires = "list")]
        out_dir: Option<PathBuf>,
        /// gamma_map or multiplicative.
        #[arg(long)]
        gain_mode: Option<GainMode>,
        #[arg(long)]
        em_iters: Option<usize>,
    },
    /// Score enhanced recordings listed in a pairs file.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        /// Directory for report.csv and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Synth { utterances: Some(n), .. } => cfg.corpus.utterances = *n,
        Command::Train { kind, epochs, .. } => {
            if let Some(k) = kind {
                cfg.kind = *k;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
        }
        Command::Enhance { gain_mode, em_iters, .. } => {
            if let Some(m) = gain_mode {
                cfg.enhance.gain_mode = *m;
            }
            if let Some(n) = em_iters {
                cfg.enhance.em_iters = *n;
            }
        }
        _ => {}
    }
    cfg.finalize()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::Synth { out, force, .. } => commands::synth(&cfg, out, force),
        Command::Train {
            corpus,
            out,
            init_from,
            force,
            ..
        } => avdkf::par::with_jobs(cli.jobs, || commands::train(&cfg, corpus, out, init_from, force)),
        Command::Enhance {
            checkpoint,
            input,
            output,
            features,
            list,
            out_dir,
            ..
        } => {
            let model = commands::load_model(&checkpoint)?;
            cfg.kind = model.kind;
            cfg.model = model.dims.clone();
            let cfg = cfg.finalize()?;
            let job = EnhanceJob {
                input,
                features,
                output,
                list,
                out_dir,
            };
            avdkf::par::with_jobs(cli.jobs, || commands::enhance_cmd(&cfg, &model, job))
        }
        Command::Eval { pairs, out } => avdkf::par::with_jobs(cli.jobs, || commands::eval(&cfg, &pairs, &out)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
