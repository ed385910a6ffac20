//! The online data-assimilation loop.
//!
//! Time is virtual: every LP round, every restricted-solve iteration and
//! every subgradient step costs one unit, and one period of the data stream
//! is `cost_budget_per_period` units. Arrivals sit in a queue that is
//! polled between subgradient steps and between certificate rounds; a due
//! arrival interrupts the current epoch, is absorbed, and the loop restarts
//! certificate generation from the best decision with the adapted warm
//! start. Because arrivals carry their own timestamps the event log is the
//! same whether the queue is fed from a channel or from memory.

use std::collections::VecDeque;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::ambiguity::{ConcentrationParams, ConfidenceSchedule};
use crate::certgen::{
    adapt, generate, CertConfig, CertProblem, CertificateResult, Counters, DataWindow, Generation, Support, Tick,
    WarmStart,
};
use crate::icover::{inflated_radius, BallMetric, Cover, CoverSnapshot};
use crate::model::{CostModel, DecisionVector, Tolerances};
use crate::par::ExecPolicy;
use crate::stream::TimedSample;
use crate::subgrad::{reuse_or_refresh, step, Refresh, StepNorm, StepSizeRule, StepVariant};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRuleSpec {
    pub variant: StepVariant,
    /// `M`.
    pub diameter: f64,
    /// `L`, a bound on subgradient norms.
    pub subgradient_bound: f64,
    #[serde(default)]
    pub norm: StepNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverSpec {
    pub omega: f64,
    #[serde(default)]
    pub metric: BallMetric,
}

/// How an epoch ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochStop {
    /// `‖x⁽ʳ⁾ − x⁽ʳ⁻¹⁾‖₂ < ε₂`.
    #[default]
    Table,
    /// `r − r_n ≥ r̄`.
    Horizon,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub tolerances: Tolerances,
    pub schedule: ConfidenceSchedule,
    pub concentration: ConcentrationParams,
    pub step_rule: StepRuleSpec,
    /// Stop after the epoch with this many points converges.
    pub n0: Option<usize>,
    pub cover: Option<CoverSpec>,
    /// Work units per stream period.
    pub cost_budget_per_period: u64,
    /// Length of one period in seconds.
    pub period: f64,
    pub epoch_stop: EpochStop,
    /// Safety valve on steps per epoch.
    pub max_epoch_steps: u64,
    pub max_afwa_iters: usize,
    pub policy: ExecPolicy,
}

impl RunConfig {
    pub fn new(
        tolerances: Tolerances,
        schedule: ConfidenceSchedule,
        concentration: ConcentrationParams,
        step_rule: StepRuleSpec,
    ) -> Self {
        RunConfig {
            tolerances,
            schedule,
            concentration,
            step_rule,
            n0: None,
            cover: None,
            cost_budget_per_period: 1_000_000_000,
            period: 1.0,
            epoch_stop: EpochStop::Table,
            max_epoch_steps: 1_000_000,
            max_afwa_iters: crate::simplex::DEFAULT_MAX_ITERS,
            policy: ExecPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<StepSizeRule> {
        self.concentration.validate()?;
        if self.n0 == Some(0) {
            return Err(Error::Config("n0 must be at least 1".into()));
        }
        if self.cost_budget_per_period == 0 {
            return Err(Error::Config("cost_budget_per_period must be positive".into()));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Config(format!("period {} must be positive", self.period)));
        }
        if self.max_epoch_steps == 0 {
            return Err(Error::Config("max_epoch_steps must be positive".into()));
        }
        if let Some(c) = &self.cover {
            if !(c.omega > 0.0 && c.omega.is_finite()) {
                return Err(Error::Config(format!("cover radius {} must be positive", c.omega)));
            }
        }
        let t = &self.tolerances;
        Tolerances::new(t.eps1, t.eps2, t.eps_sa, self.step_rule.subgradient_bound)?;
        StepSizeRule::new(self.step_rule.variant, self.step_rule.diameter, t.eps2, t.eps_sa, self.step_rule.subgradient_bound)
    }

    pub fn cert_config(&self) -> CertConfig {
        CertConfig { max_afwa_iters: self.max_afwa_iters, policy: self.policy, ..CertConfig::new(self.tolerances.eps1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    DataArrival,
    CertificatePosted,
    DecisionStep,
    BestUpdated,
    EpochConverged,
    Terminated,
}

/// Cover state behind a weighted certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverPayload {
    /// Arrival index of each center's point.
    pub origins: Vec<usize>,
    pub theta: Vec<f64>,
    pub omega: f64,
    pub metric: BallMetric,
    /// `ε(β_n)` before inflation.
    pub base_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertPayload {
    pub radius: f64,
    pub eps1: f64,
    pub eta: f64,
    /// Nonzero entries `[k, j, z_kj]` of the perturbation.
    pub z: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover: Option<CoverPayload>,
}

impl CertPayload {
    pub fn dense_z(&self, p: usize, m: usize) -> Result<Vec<f64>> {
        let mut z = vec![0.0; p * m];
        for &(k, j, v) in &self.z {
            if k >= p || j >= m {
                return Err(Error::Dimension { expected: p * m, got: k * m + j });
            }
            z[k * m + j] = v;
        }
        Ok(z)
    }
}

/// Cumulative work at the time of an event.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub lp: usize,
    pub cp: usize,
    pub afwa: usize,
    /// Number of cover centers, when a cover is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OndaEvent {
    pub t: f64,
    pub kind: EventKind,
    pub n: usize,
    pub r: u64,
    pub l: u64,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    pub beta: f64,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cert: Option<CertPayload>,
    pub progress: Progress,
}

/// A source of timestamped samples, consumed in order.
pub trait ArrivalSource {
    fn next_arrival(&mut self) -> Option<TimedSample>;
}

impl ArrivalSource for VecDeque<TimedSample> {
    fn next_arrival(&mut self) -> Option<TimedSample> {
        self.pop_front()
    }
}

/// Blocks until the producer sends or hangs up.
impl ArrivalSource for crossbeam_channel::Receiver<TimedSample> {
    fn next_arrival(&mut self) -> Option<TimedSample> {
        self.recv().ok()
    }
}

struct Queue<'s> {
    src: &'s mut dyn ArrivalSource,
    head: Option<TimedSample>,
    exhausted: bool,
}

impl Queue<'_> {
    fn peek_time(&mut self) -> Option<f64> {
        if self.head.is_none() && !self.exhausted {
            self.head = self.src.next_arrival();
            self.exhausted = self.head.is_none();
        }
        self.head.as_ref().map(|s| s.t)
    }

    fn pop(&mut self) -> Option<TimedSample> {
        self.peek_time()?;
        self.head.take()
    }
}

/// Virtual clock plus the queue it watches.
struct Clock<'s> {
    t: f64,
    unit: f64,
    queue: Queue<'s>,
    /// False once `n0` points have been taken.
    accepting: bool,
    l: u64,
    counters: Counters,
}

impl Clock<'_> {
    fn advance(&mut self, units: usize) {
        self.t += units as f64 * self.unit;
    }

    fn due(&mut self) -> bool {
        self.accepting && self.queue.peek_time().is_some_and(|ta| ta <= self.t)
    }

    fn tick(&mut self, tick: Tick) -> ControlFlow<()> {
        match tick {
            Tick::Lp => {
                self.l += 1;
                self.advance(1);
            }
            Tick::Cp { iters } => self.advance(iters.max(1)),
        }
        if self.due() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub events: Vec<OndaEvent>,
    pub counters: Counters,
    pub x_best: Vec<f64>,
    pub j_best: Option<f64>,
    pub n: usize,
    pub r: u64,
    pub epochs_converged: usize,
    /// Epochs where the table stop and the horizon stop disagreed.
    pub stop_disagreements: usize,
    pub cover: Option<CoverSnapshot>,
}

/// A hard error with the events emitted before it.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} events)", events.len())]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub events: Vec<OndaEvent>,
}

enum Phase {
    Converged,
    Interrupted,
}

struct Sim<'a, 's> {
    cfg: &'a RunConfig,
    model: &'a dyn CostModel,
    rule: StepSizeRule,
    cert_cfg: CertConfig,
    clock: Clock<'s>,
    n: usize,
    r: u64,
    r_n: u64,
    window: DataWindow,
    cover: Option<Cover>,
    support: Option<Support>,
    base_radius: f64,
    radius: f64,
    x: Vec<f64>,
    x_best: Option<Vec<f64>>,
    j_best: f64,
    g: Vec<f64>,
    prev: Option<CertificateResult>,
    warm: Option<WarmStart>,
    events: Vec<OndaEvent>,
    epochs_converged: usize,
    stop_disagreements: usize,
}

/// Run the loop until the stream is exhausted (or `n0` points have been
/// used) and the last epoch has converged.
pub fn run(
    cfg: &RunConfig,
    source: &mut dyn ArrivalSource,
    model: &dyn CostModel,
    x0: DecisionVector,
) -> std::result::Result<RunOutcome, RunFailure> {
    let fail = |error| RunFailure { error, events: Vec::new() };
    let rule = cfg.validate().map_err(fail)?;
    if x0.len() != model.decision_dim() {
        return Err(fail(Error::Dimension { expected: model.decision_dim(), got: x0.len() }));
    }
    let cover = match &cfg.cover {
        Some(c) => Some(Cover::new(c.omega, c.metric).map_err(fail)?),
        None => None,
    };
    let mut x = x0.into_inner();
    model.project_decision(&mut x);
    let mut sim = Sim {
        cfg,
        model,
        rule,
        cert_cfg: cfg.cert_config(),
        clock: Clock {
            t: 0.0,
            unit: cfg.period / cfg.cost_budget_per_period as f64,
            queue: Queue { src: source, head: None, exhausted: false },
            accepting: true,
            l: 0,
            counters: Counters::default(),
        },
        n: 0,
        r: 1,
        r_n: 1,
        window: DataWindow::new(model.sample_dim()),
        cover,
        support: None,
        base_radius: 0.0,
        radius: 0.0,
        g: vec![0.0; x.len()],
        x,
        x_best: None,
        j_best: f64::INFINITY,
        prev: None,
        warm: None,
        events: Vec::new(),
        epochs_converged: 0,
        stop_disagreements: 0,
    };
    match sim.drive() {
        Ok(()) => Ok(RunOutcome {
            counters: sim.clock.counters,
            x_best: sim.x_best.clone().unwrap_or_else(|| sim.x.clone()),
            j_best: sim.j_best.is_finite().then_some(sim.j_best),
            n: sim.n,
            r: sim.r,
            epochs_converged: sim.epochs_converged,
            stop_disagreements: sim.stop_disagreements,
            cover: sim.cover.as_ref().map(Cover::snapshot),
            events: sim.events,
        }),
        Err(error) => Err(RunFailure { error, events: sim.events }),
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Sim<'_, '_> {
    fn drive(&mut self) -> Result<()> {
        let Some(first) = self.clock.queue.peek_time() else {
            return Err(Error::Stream("the stream yields no points".into()));
        };
        self.clock.t = self.clock.t.max(first);
        self.absorb()?;
        loop {
            match self.epoch()? {
                Phase::Interrupted => {
                    self.absorb()?;
                    continue;
                }
                Phase::Converged => {}
            }
            self.epochs_converged += 1;
            let x = self.x_best.clone().expect("an epoch converges only after a certificate");
            self.emit(EventKind::EpochConverged, Some(self.j_best), x, None);
            if !self.clock.accepting {
                break;
            }
            match self.clock.queue.peek_time() {
                None => break,
                Some(ta) => {
                    self.clock.t = self.clock.t.max(ta);
                    self.absorb()?;
                }
            }
        }
        let x = self.x_best.clone().unwrap_or_else(|| self.x.clone());
        self.emit(EventKind::Terminated, Some(self.j_best), x, None);
        Ok(())
    }

    /// Certificate generation at the current decision, then subgradient
    /// steps until the epoch stop fires or an arrival is due.
    fn epoch(&mut self) -> Result<Phase> {
        let support = self.support.as_ref().expect("absorbed");
        let problem = CertProblem { model: self.model, x: &self.x, support, radius: self.radius, policy: self.cfg.policy };
        let clock = &mut self.clock;
        let outcome = generate(&problem, &self.cert_cfg, self.warm.take(), &mut |tk| clock.tick(tk))?;
        let cert = match outcome {
            Generation::Complete(c) => c,
            Generation::Interrupted { warm, counters } => {
                self.clock.counters += counters;
                self.warm = Some(warm);
                return Ok(Phase::Interrupted);
            }
        };
        self.clock.counters += cert.counters;
        self.g = crate::subgrad::subgradient(self.model, &self.x, &cert.worst_case)?;
        self.warm = Some(cert.warm.clone());
        self.consider(&cert);
        self.prev = Some(cert);

        let eps2 = self.cfg.tolerances.eps2;
        let mut disagreed = false;
        loop {
            let alpha = self.rule.alpha(self.r, self.r_n);
            let mut next = step(&self.x, &self.g, alpha, self.cfg.step_rule.norm);
            self.model.project_decision(&mut next);
            let moved = l2_distance(&next, &self.x);
            self.x = next;
            self.r += 1;
            self.clock.advance(1);
            if self.clock.due() {
                return Ok(Phase::Interrupted);
            }

            let prev = self.prev.take().expect("certificate present during steps");
            let support = self.support.as_ref().expect("absorbed");
            let problem =
                CertProblem { model: self.model, x: &self.x, support, radius: self.radius, policy: self.cfg.policy };
            let clock = &mut self.clock;
            let refresh = reuse_or_refresh(
                &problem,
                &prev,
                self.cfg.tolerances.eps_sa,
                &self.cert_cfg,
                self.j_best,
                &mut |tk| clock.tick(tk),
            )?;
            match refresh {
                Refresh::Reused { state, cert, certified } => {
                    self.clock.counters += cert.counters;
                    self.g = state.g;
                    if certified {
                        self.consider(&cert);
                    }
                    self.prev = Some(prev);
                }
                Refresh::Fresh { state, cert } => {
                    self.clock.counters += cert.counters;
                    self.g = state.g;
                    self.warm = Some(cert.warm.clone());
                    self.consider(&cert);
                    self.prev = Some(cert);
                }
                Refresh::Interrupted { warm, counters } => {
                    self.clock.counters += counters;
                    self.warm = Some(warm);
                    return Ok(Phase::Interrupted);
                }
            }

            let steps = self.r - self.r_n;
            let table = moved < eps2;
            let horizon = steps >= self.rule.r_bar;
            if table != horizon && !disagreed {
                disagreed = true;
                self.stop_disagreements += 1;
                let level = if self.stop_disagreements == 1 { log::Level::Warn } else { log::Level::Debug };
                log::log!(
                    level,
                    "n = {}: table stop {} but horizon stop {} after {steps} steps (r̄ = {})",
                    self.n,
                    if table { "fired" } else { "did not fire" },
                    if horizon { "fired" } else { "did not fire" },
                    self.rule.r_bar
                );
            }
            let stop = match self.cfg.epoch_stop {
                EpochStop::Table => table,
                EpochStop::Horizon => horizon,
            };
            if stop {
                return Ok(Phase::Converged);
            }
            if steps >= self.cfg.max_epoch_steps {
                log::warn!("n = {}: epoch stopped by the step cap after {steps} steps", self.n);
                return Ok(Phase::Converged);
            }
            self.emit(EventKind::DecisionStep, None, self.x.clone(), None);
        }
    }

    /// Update and post the best decision when `cert` improves on it.
    fn consider(&mut self, cert: &CertificateResult) {
        if !(cert.j_eps1 < self.j_best) {
            return;
        }
        let replacing = self.j_best.is_finite();
        self.j_best = cert.j_eps1;
        self.x_best = Some(cert.x.clone());
        if replacing {
            self.emit(EventKind::BestUpdated, Some(cert.j_eps1), cert.x.clone(), None);
        }
        let payload = self.payload(cert);
        self.emit(EventKind::CertificatePosted, Some(cert.j_eps1), cert.x.clone(), Some(payload));
    }

    fn payload(&self, cert: &CertificateResult) -> CertPayload {
        let m = self.model.sample_dim();
        let z = cert
            .z
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i / m, i % m, *v))
            .collect();
        let cover = self.cover.as_ref().map(|c| CoverPayload {
            origins: c.origins().to_vec(),
            theta: self.support.as_ref().expect("absorbed").theta().to_vec(),
            omega: c.omega(),
            metric: c.metric(),
            base_radius: self.base_radius,
        });
        CertPayload { radius: cert.radius, eps1: self.cfg.tolerances.eps1, eta: cert.eta, z, cover }
    }

    /// Take every due arrival, rebuild the support and radius, and restart
    /// the epoch from the best decision.
    fn absorb(&mut self) -> Result<()> {
        let limit = self.cfg.n0.unwrap_or(usize::MAX);
        while self.n < limit && self.clock.queue.peek_time().is_some_and(|ta| ta <= self.clock.t) {
            let s = self.clock.queue.pop().expect("peeked");
            let point = s.point();
            if let Some(c) = &mut self.cover {
                c.insert(&point)?;
            }
            self.window.push(point)?;
            self.n += 1;
            let x = self.x_best.clone().unwrap_or_else(|| self.x.clone());
            self.emit(EventKind::DataArrival, None, x, None);
        }
        self.clock.accepting = self.n < limit;

        let support = match &self.cover {
            Some(c) => c.support()?,
            None => Support::empirical(&self.window)?,
        };
        self.base_radius = self.cfg.schedule.radius(&self.cfg.concentration, self.n)?;
        self.radius = match &self.cover {
            Some(c) => inflated_radius(self.base_radius, c.transport_radius()),
            None => self.base_radius,
        };
        let scale = support.n_total() * self.radius;
        self.warm = self.warm.take().map(|w| adapt(&w, self.n, scale));
        self.support = Some(support);
        self.prev = None;
        if let Some(xb) = &self.x_best {
            self.x = xb.clone();
        }
        self.j_best = f64::INFINITY;
        self.r_n = self.r;
        self.clock.l = 0;
        Ok(())
    }

    fn emit(&mut self, kind: EventKind, j: Option<f64>, x: Vec<f64>, cert: Option<CertPayload>) {
        let c = self.clock.counters;
        self.events.push(OndaEvent {
            t: self.clock.t,
            kind,
            n: self.n,
            r: self.r,
            l: self.clock.l,
            j: j.filter(|v| v.is_finite()),
            beta: self.cfg.schedule.beta(self.n),
            x,
            cert,
            progress: Progress {
                lp: c.lp_calls,
                cp: c.cp_calls,
                afwa: c.afwa_iters,
                cover: self.cover.as_ref().map(Cover::len),
            },
        });
    }
}

/// One JSON object per event.
pub fn write_events(out: &mut impl std::io::Write, events: &[OndaEvent]) -> Result<()> {
    for e in events {
        let line = serde_json::to_string(e).map_err(|err| Error::Stream(err.to_string()))?;
        writeln!(out, "{line}").map_err(|err| Error::Stream(err.to_string()))?;
    }
    Ok(())
}

pub fn read_events(input: impl std::io::BufRead) -> Result<Vec<OndaEvent>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Stream(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Stream(format!("event line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Run with the stream fed from a producer thread through a channel.
pub fn run_threaded(
    cfg: &RunConfig,
    samples: Vec<TimedSample>,
    model: &dyn CostModel,
    x0: DecisionVector,
) -> std::result::Result<RunOutcome, RunFailure> {
    let (tx, mut rx) = crossbeam_channel::bounded(16);
    std::thread::scope(|s| {
        s.spawn(move || {
            for sample in samples {
                if tx.send(sample).is_err() {
                    break;
                }
            }
        });
        let out = run(cfg, &mut rx, model, x0);
        drop(rx);
        out
    })
}
