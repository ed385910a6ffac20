use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use onda_cli::config::{self, ConfigError, ExperimentConfig};
use onda_cli::runner::{self, ReplayResult};
use onda_cli::verify;

#[derive(Parser)]
#[command(name = "onda", version, about = "Streaming distributionally robust decisions with anytime certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its run directory.
    Run {
        /// Built-in parameter set (study1 or study2).
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// TOML experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Enable the incremental cover.
        #[arg(long, conflicts_with = "no_cover")]
        cover: bool,
        /// Disable the incremental cover.
        #[arg(long)]
        no_cover: bool,
        /// Stop after this many data points.
        #[arg(long)]
        n0: Option<usize>,
        #[arg(long, default_value = "onda-run")]
        out_dir: PathBuf,
    },
    /// Re-check every posted certificate in an event log.
    Verify {
        /// events.jsonl of a run directory.
        events: PathBuf,
        /// Defaults to config.toml next to the log.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to stream.jsonl next to the log.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Largest n for which the transport check runs.
        #[arg(long, default_value_t = verify::DEFAULT_W1_MAX_N)]
        w1_max_n: usize,
    },
    /// Re-run a run directory and compare event logs byte for byte.
    Replay {
        dir: PathBuf,
        /// Also write the re-run's outputs here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print a preset as a TOML config.
    Preset {
        name: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn resolve(
    preset: Option<String>,
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    cover: bool,
    no_cover: bool,
    n0: Option<usize>,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match config_path {
        Some(p) => runner::load_config(&p)?,
        None => config::preset(preset.as_deref().unwrap_or("study1"), seed.unwrap_or(7))?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cover {
        cfg.run.cover.enabled = true;
    }
    if no_cover {
        cfg.run.cover.enabled = false;
    }
    if n0.is_some() {
        cfg.run.n0 = n0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main_inner(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { preset, config, seed, cover, no_cover, n0, out_dir } => {
            let cfg = resolve(preset, config, seed, cover, no_cover, n0)?;
            let a = runner::execute(&cfg, None)?;
            runner::write_outputs(&out_dir, &a)?;
            let s = runner::summary_json(&a);
            println!(
                "n = {}, J = {}, j* ≈ {}, rel_error = {}, CP solves = {}, cover size = {}",
                a.outcome.n,
                s["final"]["j_eps1"],
                a.jstar.j_star,
                s["final"]["rel_error"],
                a.outcome.counters.cp_calls,
                s["cover_size"],
            );
            println!("wrote {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { events, config, stream, w1_max_n } => {
            let dir = events.parent().map(PathBuf::from).unwrap_or_default();
            let cfg = runner::load_config(&config.unwrap_or_else(|| dir.join(runner::CONFIG)))?;
            let samples = runner::load_stream(&stream.unwrap_or_else(|| dir.join(runner::STREAM)))?;
            let f = fs::File::open(&events).with_context(|| format!("reading {}", events.display()))?;
            let log = onda_core::onda::read_events(BufReader::new(f))?;
            let report = verify::verify(&log, &cfg, &samples, w1_max_n)?;
            if report.w1_skipped > 0 {
                println!("notice: transport check skipped for {} certificates with n > {w1_max_n}", report.w1_skipped);
            }
            for f in &report.failures {
                println!("event {}: {}", f.line, f.message);
            }
            println!(
                "{} events, {} certificates, {} transport checks: {}",
                report.events,
                report.certificates,
                report.w1_checked,
                if report.ok() { "ok" } else { "FAILED" }
            );
            Ok(if report.ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Replay { dir, out_dir } => match runner::replay(&dir, out_dir.as_ref())? {
            ReplayResult::Identical { events } => {
                println!("{events} events, identical");
                Ok(ExitCode::SUCCESS)
            }
            ReplayResult::Differs { line } => {
                println!("event logs differ at line {line}");
                Ok(ExitCode::from(1))
            }
        },
        Command::Preset { name, seed } => {
            print!("{}", config::to_toml(&config::preset(&name, seed)?));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
