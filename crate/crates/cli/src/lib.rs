//! `pairdiff` command line: phantom generation, coupled training, sampling,
//! downstream evaluation and inspection, each writing into its own run
//! directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod run_dir;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pairdiff_core::sampler::SampleMode;

use crate::config::RunConfig;
use crate::error::Category;

pub const OUT_ENV: &str = "PAIRDIFF_OUT";

#[derive(Debug, Parser)]
#[command(name = "pairdiff", version, about = "Paired multi-modal diffusion on phantom data")]
pub struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Global seed, copied into every section
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Root for run directories [default: config `out`, then $PAIRDIFF_OUT, then ./runs]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_mode(s: &str) -> Result<SampleMode, String> {
    match s {
        "ancestral" => Ok(SampleMode::Ancestral),
        "strided" => Ok(SampleMode::Strided),
        _ => Err(format!("unknown mode {s:?}, expected ancestral or strided")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with train/val/test splits
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a coupled model set
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Sever the conditional paths (baseline)
        #[arg(long)]
        severed: bool,
    },
    /// Sample from a checkpoint
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset whose test split seeds the chains
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SampleMode>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed_fraction: Option<f64>,
    },
    /// Train segmenters per arm and run the statistics battery
    Eval {
        /// Per-case Dice records; skips training
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        seeded: Option<PathBuf>,
    },
    /// Filter heatmaps and x0 preview strips for a checkpoint
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Inspect { .. } => "inspect",
        }
    }
}

/// Config file, then flag overrides, then seed propagation.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let (mut cfg, file_sets_out) = match &cli.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let text = std::fs::read_to_string(p)?;
            let table: toml::Table = text.parse().context("parsing config").context(Category::Config)?;
            (cfg, table.contains_key("out"))
        }
        None => (RunConfig::default(), false),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match (&cli.out, std::env::var_os(OUT_ENV)) {
        (Some(o), _) => cfg.out = o.clone(),
        (None, Some(env)) if !file_sets_out => cfg.out = PathBuf::from(env),
        _ => {}
    }
    match &cli.command {
        Command::GenData { count } => {
            if let Some(c) = count {
                cfg.data.count = *c;
            }
        }
        Command::Train { dataset, epochs, severed } => {
            if dataset.is_some() {
                cfg.train.dataset = dataset.clone();
            }
            if let Some(e) = epochs {
                cfg.train.optim.epochs = *e;
            }
            if *severed {
                cfg.train.conditioning = pairdiff_nets::denoiser::Conditioning::Severed;
            }
        }
        Command::Sample {
            checkpoint,
            dataset,
            count,
            mode,
            stride,
            seed_fraction,
        } => {
            let s = &mut cfg.sample;
            if checkpoint.is_some() {
                s.checkpoint = checkpoint.clone();
            }
            if dataset.is_some() {
                s.dataset = dataset.clone();
            }
            if let Some(c) = count {
                s.request.count = *c;
            }
            if let Some(m) = mode {
                s.request.mode = *m;
            }
            if let Some(st) = stride {
                s.request.stride = *st;
            }
            if seed_fraction.is_some() {
                s.request.seed_fraction = *seed_fraction;
            }
        }
        Command::Eval {
            fixtures,
            real,
            synthetic,
            seeded,
        } => {
            let e = &mut cfg.eval;
            for (dst, src) in [
                (&mut e.fixtures, fixtures),
                (&mut e.real, real),
                (&mut e.synthetic, synthetic),
                (&mut e.seeded, seeded),
            ] {
                if src.is_some() {
                    *dst = src.clone();
                }
            }
        }
        Command::Inspect { checkpoint, count } => {
            if checkpoint.is_some() {
                cfg.inspect.checkpoint = checkpoint.clone();
            }
            if let Some(c) = count {
                cfg.inspect.count = *c;
            }
        }
    }
    Ok(cfg.resolve())
}

/// Runs one command; returns its run directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let dir = run_dir::create(&cfg.out, cli.command.name(), &cfg)?;
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, &dir).map(drop)?,
        Command::Train { .. } => commands::train(&cfg, &dir).map(drop)?,
        Command::Sample { .. } => commands::sample(&cfg, &dir).map(drop)?,
        Command::Eval { .. } => commands::eval(&cfg, &dir).map(drop)?,
        Command::Inspect { .. } => commands::inspect(&cfg, &dir)?,
    }
    Ok(dir)
}
