mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitkd::distill::KlDirection;
use vitkd::preprocess::Split;

use crate::commands::{Command, Job};
use crate::config::Config;
use crate::error::{Failure, Result};
use crate::manifest::RunManifest;

/// Air-bubble patch classification with a ViT student distilled from a CNN teacher.
#[derive(Parser, Debug)]
#[command(name = "vitkd", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads; 1 runs single-threaded, 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Debug, Clone)]
struct KdFlags {
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_direction)]
    kl_direction: Option<KlDirection>,
}

fn parse_direction(s: &str) -> std::result::Result<KlDirection, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic image + mask corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Segment foreground and cut labelled patches from a corpus.
    Patch {
        #[arg(long)]
        corpus: PathBuf,
        /// Minimum fraction of a patch covered by one annotation class.
        #[arg(long)]
        overlap: Option<f64>,
        /// Minimum foreground fraction of a patch.
        #[arg(long)]
        foreground: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the CNN teacher on hard labels.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the ViT student on hard labels only.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the ViT student against a frozen teacher.
    Distill {
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint directory.
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        kd: KdFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Run the temperature × alpha grid plus the standalone baseline.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint directories; repeat for several teachers.
        #[arg(long, required = true)]
        teacher: Vec<PathBuf>,
        #[arg(long, value_parser = parse_direction)]
        kl_direction: Option<KlDirection>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-execute a command from its run.manifest.
    Replay {
        manifest: PathBuf,
        /// Output directory; defaults to the one recorded in the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn resolve(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).map_err(Failure::config)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn job(command: Command, common: &Common, config: Config, inputs: Vec<(&str, PathBuf)>) -> Job {
    Job {
        command,
        config,
        inputs: inputs
            .into_iter()
            .map(|(k, p)| (k.to_string(), absolute(&p).display().to_string()))
            .collect(),
        out: absolute(&common.out),
        force: common.force,
        workers: common.workers,
        split: None,
    }
}

fn build(cmd: Cmd) -> Result<Job> {
    Ok(match cmd {
        Cmd::Synth { common } => job(Command::Synth, &common, resolve(&common)?, vec![]),
        Cmd::Patch { corpus, overlap, foreground, common } => {
            let mut cfg = resolve(&common)?;
            if let Some(v) = overlap {
                cfg.overlap_threshold = v;
            }
            if let Some(v) = foreground {
                cfg.foreground_threshold = v;
            }
            job(Command::Patch, &common, cfg, vec![("corpus", corpus)])
        }
        Cmd::TrainTeacher { data, common } => {
            job(Command::TrainTeacher, &common, resolve(&common)?, vec![("data", data)])
        }
        Cmd::Train { data, common } => job(Command::Train, &common, resolve(&common)?, vec![("data", data)]),
        Cmd::Distill { data, teacher, kd, common } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = kd.temperature {
                cfg.temperature = t;
            }
            if let Some(a) = kd.alpha {
                cfg.alpha = a;
            }
            if let Some(d) = kd.kl_direction {
                cfg.kl_direction = d;
            }
            job(Command::Distill, &common, cfg, vec![("data", data), ("teacher.0", teacher)])
        }
        Cmd::Eval { data, model, split, common } => {
            let mut j = job(Command::Eval, &common, resolve(&common)?, vec![("data", data), ("model", model)]);
            j.split = Some(split);
            j
        }
        Cmd::Sweep { data, teacher, kl_direction, common } => {
            let mut cfg = resolve(&common)?;
            if let Some(d) = kl_direction {
                cfg.kl_direction = d;
            }
            let names: Vec<String> = (0..teacher.len()).map(|i| format!("teacher.{i}")).collect();
            let mut inputs = vec![("data", data)];
            inputs.extend(names.iter().map(String::as_str).zip(teacher));
            job(Command::Sweep, &common, cfg, inputs)
        }
        Cmd::Replay { manifest, out, force, workers } => {
            let m = RunManifest::read(&manifest).map_err(Failure::config)?;
            let command: Command = m.command.parse().map_err(Failure::config)?;
            Job {
                command,
                config: m.config.clone(),
                inputs: m.inputs.clone(),
                out: out.map_or_else(|| m.out.clone(), |o| absolute(&o)),
                force,
                workers: workers.unwrap_or(m.workers),
                split: m
                    .split
                    .as_deref()
                    .map(str::parse)
                    .transpose()
                    .map_err(Failure::config)?,
            }
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match build(cli.cmd).and_then(|j| commands::execute(&j)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vitkd: {e}");
            ExitCode::from(e.code())
        }
    }
}
