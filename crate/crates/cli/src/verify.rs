//! Offline re-check of every posted certificate in an event log.

use onda_core::ambiguity;
use onda_core::certgen::{certificate_value, CertProblem, Support};
use onda_core::icover::{inflated_radius, Cover};
use onda_core::model::CostModel;
use onda_core::onda::{EventKind, OndaEvent};
use onda_core::par::ExecPolicy;
use onda_core::stream::TimedSample;
use onda_core::transport::w1_distance;

use crate::config::ExperimentConfig;

pub const DEFAULT_W1_MAX_N: usize = 50;
const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    /// 1-based line of the event in the log.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Report {
    pub events: usize,
    pub certificates: usize,
    pub w1_checked: usize,
    pub w1_skipped: usize,
    pub failures: Vec<Finding>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Context<'a> {
    model: &'a dyn CostModel,
    cfg: &'a ExperimentConfig,
    samples: &'a [TimedSample],
    w1_max_n: usize,
}

pub fn verify(
    events: &[OndaEvent],
    cfg: &ExperimentConfig,
    samples: &[TimedSample],
    w1_max_n: usize,
) -> anyhow::Result<Report> {
    let built = cfg.build()?;
    let ctx = Context { model: &*built.model, cfg, samples, w1_max_n };
    let mut report = Report { events: events.len(), ..Report::default() };
    let mut epoch_best: Option<(f64, &[f64])> = None;

    for i in 0..events.len() {
        let mut msgs = Vec::new();
        check_event(&ctx, events, i, &mut epoch_best, &mut report, &mut msgs);
        report.failures.extend(msgs.into_iter().map(|message| Finding { line: i + 1, message }));
    }
    if report.w1_skipped > 0 {
        log::info!("W1 check skipped for {} certificates with n > {w1_max_n}", report.w1_skipped);
    }
    Ok(report)
}

fn check_event<'e>(
    ctx: &Context<'_>,
    events: &'e [OndaEvent],
    i: usize,
    epoch_best: &mut Option<(f64, &'e [f64])>,
    report: &mut Report,
    fail: &mut Vec<String>,
) {
    let e = &events[i];
    if let Some(prev) = i.checked_sub(1).map(|p| &events[p]) {
        if e.t < prev.t || e.n < prev.n || e.r < prev.r {
            fail.push("time, n or r went backwards".into());
        }
    }
    if e.n > ctx.samples.len() {
        fail.push(format!("n = {} exceeds the {} streamed points", e.n, ctx.samples.len()));
        return;
    }
    let beta = ctx.cfg.schedule().beta(e.n);
    if e.n > 0 && e.beta.to_bits() != beta.to_bits() {
        fail.push(format!("beta {} differs from the schedule value {beta}", e.beta));
    }
    match e.kind {
        EventKind::DataArrival => *epoch_best = None,
        EventKind::CertificatePosted => {
            let Some(j) = e.j else {
                fail.push("certificate without a value".into());
                return;
            };
            if let Some((prev, _)) = *epoch_best {
                if !(j < prev) {
                    fail.push(format!("posted value {j} does not improve on {prev}"));
                }
            }
            match check_certificate(ctx, e, j) {
                Ok(W1::Checked) => report.w1_checked += 1,
                Ok(W1::Skipped) => report.w1_skipped += 1,
                Err(msgs) => fail.extend(msgs),
            }
            report.certificates += 1;
            *epoch_best = Some((j, &e.x));
        }
        EventKind::BestUpdated => match events.get(i + 1) {
            Some(next) if next.kind == EventKind::CertificatePosted && bits(next.j) == bits(e.j) && next.x == e.x => {}
            _ => fail.push("best update is not followed by its certificate".into()),
        },
        EventKind::EpochConverged | EventKind::Terminated => match (*epoch_best, e.j) {
            (Some((j, x)), Some(v)) if j.to_bits() == v.to_bits() && x == e.x.as_slice() => {}
            (None, None) if e.kind == EventKind::Terminated => {}
            _ => fail.push(format!("{:?} does not repeat the best posted certificate", e.kind)),
        },
        EventKind::DecisionStep => {
            if e.j.is_some() {
                fail.push("decision steps carry no certificate value".into());
            }
        }
    }
}

fn bits(v: Option<f64>) -> Option<u64> {
    v.map(f64::to_bits)
}

enum W1 {
    Checked,
    Skipped,
}

fn check_certificate(ctx: &Context<'_>, e: &OndaEvent, j: f64) -> Result<W1, Vec<String>> {
    let mut errs = Vec::new();
    let Some(cert) = &e.cert else {
        return Err(vec!["certificate payload missing".into()]);
    };
    let (d, m) = (ctx.model.decision_dim(), ctx.model.sample_dim());
    if e.x.len() != d {
        return Err(vec![format!("decision has {} entries, expected {d}", e.x.len())]);
    }
    if e.n == 0 {
        return Err(vec!["certificate before any data".into()]);
    }
    let n = e.n;
    let points: Vec<Vec<f64>> = ctx.samples[..n].iter().map(|s| s.values.clone()).collect();
    let base = match ambiguity::radius(&ctx.cfg.concentration(), e.beta, n) {
        Ok(r) => r,
        Err(err) => return Err(vec![format!("radius undefined: {err}")]),
    };
    if cert.eps1.to_bits() != ctx.cfg.run.eps1.to_bits() {
        errs.push(format!("eps1 {} differs from the configured {}", cert.eps1, ctx.cfg.run.eps1));
    }

    let (support, expected_radius, cover) = match &cert.cover {
        None => match Support::from_points(&points) {
            Ok(s) => (s, base, None),
            Err(err) => return Err(vec![err.to_string()]),
        },
        Some(cp) => {
            let mut c = match Cover::new(cp.omega, cp.metric) {
                Ok(c) => c,
                Err(err) => return Err(vec![err.to_string()]),
            };
            for s in &ctx.samples[..n] {
                if let Err(err) = c.insert(&s.point()) {
                    return Err(vec![err.to_string()]);
                }
            }
            if c.origins() != cp.origins.as_slice() {
                errs.push("cover centers differ from a replay of the stream".into());
            }
            let theta = c.theta();
            if theta.iter().map(|t| t.to_bits()).ne(cp.theta.iter().map(|t| t.to_bits())) {
                errs.push("cover multiplicities differ from a replay of the stream".into());
            }
            if cp.base_radius.to_bits() != base.to_bits() {
                errs.push(format!("base radius {} differs from ε(β_n) = {base}", cp.base_radius));
            }
            match c.support() {
                Ok(s) => (s, inflated_radius(base, c.transport_radius()), Some(c)),
                Err(err) => return Err(vec![err.to_string()]),
            }
        }
    };
    if cert.radius.to_bits() != expected_radius.to_bits() {
        errs.push(format!("radius {} differs from the recomputed {expected_radius}", cert.radius));
    }
    let z = match cert.dense_z(support.len(), m) {
        Ok(z) => z,
        Err(err) => {
            errs.push(err.to_string());
            return Err(errs);
        }
    };
    let budget = z.iter().map(|v| v.abs()).sum::<f64>() / support.n_total();
    if budget > expected_radius + SLACK {
        errs.push(format!("perturbation budget {budget} exceeds the radius {expected_radius}"));
    }
    match certificate_value(ctx.model, &e.x, &support, &z) {
        Ok(v) if v.to_bits() == j.to_bits() => {}
        Ok(v) => errs.push(format!("posted J = {j:e} but the perturbation gives {v:e}")),
        Err(err) => errs.push(err.to_string()),
    }
    let problem =
        CertProblem { model: ctx.model, x: &e.x, support: &support, radius: expected_radius, policy: ExecPolicy::Sequential };
    match problem.gap(&z) {
        Ok(ps) if ps.eta <= cert.eps1 => {}
        Ok(ps) => errs.push(format!("recomputed gap {:e} exceeds eps1 = {:e}", ps.eta, cert.eps1)),
        Err(err) => errs.push(err.to_string()),
    }

    let mut w1 = W1::Skipped;
    if n <= ctx.w1_max_n {
        w1 = W1::Checked;
        let result = (|| -> onda_core::Result<()> {
            let worst = problem.worst_case(&z)?;
            let center = support.distribution()?;
            let (dist, _) = w1_distance(&center, &worst)?;
            if dist > expected_radius + SLACK {
                errs.push(format!("worst case lies {dist} from the data, beyond the radius {expected_radius}"));
            }
            if let Some(c) = &cover {
                let empirical = Support::from_points(&points)?.distribution()?;
                let (gap, _) = w1_distance(&empirical, &center)?;
                if gap > c.lemma_bound() + SLACK {
                    errs.push(format!("cover measure lies {gap} from the data, beyond {}", c.lemma_bound()));
                }
            }
            Ok(())
        })();
        if let Err(err) = result {
            errs.push(err.to_string());
        }
    }
    if errs.is_empty() {
        Ok(w1)
    } else {
        Err(errs)
    }
}
