//! `run` and `replay`: execute a config and write the run directory.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use onda_core::certgen::Counters;
use onda_core::onda::{self, EventKind, OndaEvent, RunOutcome};
use onda_core::stream::{self, JStarEstimate, JStarOptions, TimedSample};
use serde::Serialize;

use crate::config::{self, ExperimentConfig};

pub const EVENTS: &str = "events.jsonl";
pub const TRAJECTORY: &str = "trajectory.csv";
pub const SUMMARY: &str = "summary.json";
pub const STREAM: &str = "stream.jsonl";
pub const CONFIG: &str = "config.toml";

pub struct Artifacts {
    pub config: ExperimentConfig,
    pub samples: Vec<TimedSample>,
    pub outcome: RunOutcome,
    pub jstar: JStarEstimate,
}

/// Run a config on its own seeded stream, or on `samples` when given.
pub fn execute(cfg: &ExperimentConfig, samples: Option<Vec<TimedSample>>) -> anyhow::Result<Artifacts> {
    let built = cfg.build()?;
    let samples = match samples {
        Some(s) => s,
        None => cfg.samples(&built.mixture)?,
    };
    if samples.is_empty() {
        bail!("the stream is empty");
    }
    let validation = stream::validation_set(&built.mixture, cfg.seed, cfg.validation.n_val)?;
    let opts = JStarOptions {
        max_iters: cfg.validation.max_iters,
        diameter: cfg.validation.diameter,
        policy: cfg.policy(),
        ..JStarOptions::default()
    };
    let d = built.model.decision_dim();
    let jstar = stream::estimate_jstar(&*built.model, &validation, &vec![0.0; d], &opts)?;
    if !jstar.converged {
        log::warn!("validation optimizer stopped after {} iterations without converging", jstar.iters);
    }
    let outcome = onda::run_threaded(&built.run, samples.clone(), &*built.model, built.x0)
        .map_err(|f| anyhow::anyhow!("{} (after {} events)", f.error, f.events.len()))?;
    Ok(Artifacts { config: cfg.clone(), samples, outcome, jstar })
}

fn rel_error(j: f64, jstar: f64) -> f64 {
    (j - jstar) / jstar.abs()
}

#[derive(Debug, Serialize)]
struct EpochRow {
    n: usize,
    t: f64,
    r: u64,
    j_eps1: f64,
    rel_error: f64,
    cp_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cover_size: Option<usize>,
}

#[derive(Debug, Serialize)]
struct FinalCertificate {
    x_best: Vec<f64>,
    j_eps1: Option<f64>,
    rel_error: Option<f64>,
    beta: f64,
    radius: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    preset: Option<&'a str>,
    seed: u64,
    n: usize,
    r: u64,
    epochs_converged: usize,
    stop_disagreements: usize,
    #[serde(rename = "final")]
    last: FinalCertificate,
    first_epoch_x: Option<Vec<f64>>,
    j_star_est: f64,
    j_star_std: f64,
    x_star_est: &'a [f64],
    j_star_converged: bool,
    counters: Counters,
    cover_size: Option<usize>,
    epochs: Vec<EpochRow>,
}

/// Per-epoch statistics from the event log.
fn epoch_rows(events: &[OndaEvent], jstar: f64) -> Vec<EpochRow> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::EpochConverged)
        .filter_map(|e| {
            e.j.map(|j| EpochRow {
                n: e.n,
                t: e.t,
                r: e.r,
                j_eps1: j,
                rel_error: rel_error(j, jstar),
                cp_count: e.progress.cp,
                cover_size: e.progress.cover,
            })
        })
        .collect()
}

pub fn summary_json(a: &Artifacts) -> serde_json::Value {
    let events = &a.outcome.events;
    let last_cert = events.iter().rev().find_map(|e| e.cert.as_ref());
    let last = FinalCertificate {
        x_best: a.outcome.x_best.clone(),
        j_eps1: a.outcome.j_best,
        rel_error: a.outcome.j_best.map(|j| rel_error(j, a.jstar.j_star)),
        beta: a.config.schedule().beta(a.outcome.n),
        radius: last_cert.map(|c| c.radius),
    };
    let summary = Summary {
        preset: a.config.preset.as_deref(),
        seed: a.config.seed,
        n: a.outcome.n,
        r: a.outcome.r,
        epochs_converged: a.outcome.epochs_converged,
        stop_disagreements: a.outcome.stop_disagreements,
        last,
        first_epoch_x: events.iter().find(|e| e.kind == EventKind::EpochConverged).map(|e| e.x.clone()),
        j_star_est: a.jstar.j_star,
        j_star_std: a.jstar.std_dev,
        x_star_est: &a.jstar.x,
        j_star_converged: a.jstar.converged,
        counters: a.outcome.counters,
        cover_size: a.outcome.cover.as_ref().map(|c| c.centers.len()),
        epochs: epoch_rows(events, a.jstar.j_star),
    };
    serde_json::to_value(summary).expect("summary serializes")
}

/// One row per event. `J_eps1` is the most recently posted certificate
/// (blank before the first one).
pub fn write_trajectory(out: impl Write, events: &[OndaEvent], jstar: f64) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["virtual_time", "n", "r", "J_eps1", "rel_error", "cover_size", "cp_count"])?;
    let mut posted: Option<f64> = None;
    for e in events {
        if e.kind == EventKind::DataArrival {
            posted = None;
        }
        if e.j.is_some() {
            posted = e.j;
        }
        let (j, rel) = match posted {
            Some(j) => (j.to_string(), rel_error(j, jstar).to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            e.t.to_string(),
            e.n.to_string(),
            e.r.to_string(),
            j,
            rel,
            e.progress.cover.map(|c| c.to_string()).unwrap_or_default(),
            e.progress.cp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn events_text(events: &[OndaEvent]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    onda::write_events(&mut buf, events)?;
    Ok(buf)
}

pub fn write_outputs(dir: &Path, a: &Artifacts) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG), config::to_toml(&a.config))?;
    let mut s = BufWriter::new(fs::File::create(dir.join(STREAM))?);
    stream::write_stream(&mut s, &a.samples)?;
    s.flush()?;
    fs::write(dir.join(EVENTS), events_text(&a.outcome.events)?)?;
    write_trajectory(BufWriter::new(fs::File::create(dir.join(TRAJECTORY))?), &a.outcome.events, a.jstar.j_star)?;
    let summary = serde_json::to_string_pretty(&summary_json(a))?;
    fs::write(dir.join(SUMMARY), summary + "\n")?;
    Ok(())
}

pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(config::parse(&text)?)
}

pub fn load_stream(path: &Path) -> anyhow::Result<Vec<TimedSample>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(stream::read_stream(BufReader::new(f))?)
}

pub enum ReplayResult {
    Identical { events: usize },
    Differs { line: usize },
}

/// Re-run a run directory from its stored config and stream and compare
/// the event log byte for byte.
pub fn replay(dir: &Path, out_dir: Option<&PathBuf>) -> anyhow::Result<ReplayResult> {
    let cfg = load_config(&dir.join(CONFIG))?;
    let samples = load_stream(&dir.join(STREAM))?;
    let a = execute(&cfg, Some(samples))?;
    if let Some(out) = out_dir {
        write_outputs(out, &a)?;
    }
    let fresh = events_text(&a.outcome.events)?;
    let stored = fs::read(dir.join(EVENTS)).with_context(|| format!("reading {}", dir.join(EVENTS).display()))?;
    if fresh == stored {
        return Ok(ReplayResult::Identical { events: a.outcome.events.len() });
    }
    let line = fresh
        .split(|b| *b == b'\n')
        .zip(stored.split(|b| *b == b'\n'))
        .position(|(x, y)| x != y)
        .unwrap_or_else(|| fresh.iter().filter(|b| **b == b'\n').count().min(stored.iter().filter(|b| **b == b'\n').count()));
    Ok(ReplayResult::Differs { line: line + 1 })
}
