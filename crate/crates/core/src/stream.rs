//! Seeded data generators, arrival schedules and the validation estimate of
//! the optimal expected cost.
//!
//! Every generator is a ChaCha20 stream keyed by the run seed, with a fixed
//! stream id per purpose so that, say, changing the arrival schedule never
//! perturbs the sample values.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{CostModel, QuadraticModel, SamplePoint};
use crate::par::{self, ExecPolicy};
use crate::subgrad::{step, StepNorm};
use crate::{Error, Result};

/// Stream ids, one per purpose.
pub mod purpose {
    pub const COMPONENT: u64 = 1;
    pub const GAUSSIAN: u64 = 2;
    pub const ARRIVAL: u64 = 3;
    pub const VALIDATION_COMPONENT: u64 = 4;
    pub const VALIDATION_GAUSSIAN: u64 = 5;
    pub const MATRICES: u64 = 6;
    pub const MEANS: u64 = 7;
    pub const INITIAL_DECISION: u64 = 8;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    /// Row-major covariance rows.
    pub covariance: Vec<Vec<f64>>,
    pub weight: f64,
}

/// A Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

/// Validated sampler with precomputed Cholesky factors.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    m: usize,
    means: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
    choice: WeightedIndex<f64>,
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn sampler(&self) -> Result<MixtureSampler> {
        let m = self.dim();
        if m == 0 {
            return Err(Error::Config("mixture needs at least one component of positive dimension".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::Config(format!("mixture weights must be nonnegative and sum to 1 (sum {total})")));
        }
        let mut means = Vec::new();
        let mut factors = Vec::new();
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != m {
                return Err(Error::Dimension { expected: m, got: c.mean.len() });
            }
            if c.covariance.len() != m || c.covariance.iter().any(|r| r.len() != m) {
                return Err(Error::Config(format!("component {i}: covariance must be {m}×{m}")));
            }
            let cov = DMatrix::from_fn(m, m, |r, s| c.covariance[r][s]);
            if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
                return Err(Error::Config(format!("component {i}: covariance must be symmetric")));
            }
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::Config(format!("component {i}: covariance is not positive definite")))?;
            means.push(DVector::from_column_slice(&c.mean));
            factors.push(chol.l());
        }
        let choice = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .map_err(|e| Error::Config(format!("mixture weights: {e}")))?;
        Ok(MixtureSampler { m, means, factors, choice })
    }

    /// `E‖ξ‖² = Σ wᵢ (‖μᵢ‖² + tr Σᵢ)`.
    pub fn second_moment(&self) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let mu2: f64 = c.mean.iter().map(|v| v * v).sum();
                let tr: f64 = (0..c.mean.len()).map(|i| c.covariance[i][i]).sum();
                c.weight * (mu2 + tr)
            })
            .sum()
    }
}

impl MixtureSampler {
    pub fn dim(&self) -> usize {
        self.m
    }

    /// Draw `count` values; component choices and Gaussian draws come from
    /// separate generators.
    pub fn draw(&self, component_rng: &mut impl Rng, gaussian_rng: &mut impl Rng, count: usize) -> Vec<(usize, Vec<f64>)> {
        (0..count)
            .map(|_| {
                let c = self.choice.sample(component_rng);
                let z = DVector::from_fn(self.m, |_, _| gaussian_rng.sample::<f64, _>(StandardNormal));
                let v = &self.means[c] + &self.factors[c] * z;
                (c, v.iter().copied().collect())
            })
            .collect()
    }
}

/// Component labels and values of a seeded draw.
pub fn sample_labeled(spec: &MixtureSpec, seed: u64, count: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let sampler = spec.sampler()?;
    let mut crng = rng_for(seed, purpose::COMPONENT);
    let mut grng = rng_for(seed, purpose::GAUSSIAN);
    Ok(sampler.draw(&mut crng, &mut grng, count))
}

/// Seeded samples numbered from 1.
pub fn sample_stream(spec: &MixtureSpec, seed: u64, count: usize) -> Result<Vec<SamplePoint>> {
    if count == 0 {
        return Err(Error::Config("stream needs at least one sample".into()));
    }
    Ok(sample_labeled(spec, seed, count)?
        .into_iter()
        .enumerate()
        .map(|(i, (_, values))| SamplePoint { values, arrival_index: i + 1 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalSchedule {
    /// One point per period.
    FixedPeriod,
    /// Gaps drawn uniformly from `[lo, hi]` periods.
    UniformRandomPeriod { lo: f64, hi: f64 },
}

impl ArrivalSchedule {
    pub fn validate(&self) -> Result<()> {
        if let ArrivalSchedule::UniformRandomPeriod { lo, hi } = *self {
            if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!("arrival gaps [{lo}, {hi}] must satisfy 1 ≤ lo ≤ hi")));
            }
        }
        Ok(())
    }

    /// Arrival times in seconds; the first point arrives at 0.
    pub fn times(&self, seed: u64, count: usize, period: f64) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = rng_for(seed, purpose::ARRIVAL);
        let mut t = 0.0;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            if i > 0 {
                let gap = match *self {
                    ArrivalSchedule::FixedPeriod => 1.0,
                    ArrivalSchedule::UniformRandomPeriod { lo, hi } => {
                        if hi > lo {
                            rng.random_range(lo..=hi)
                        } else {
                            lo
                        }
                    }
                };
                t += gap * period;
            }
            out.push(t);
        }
        Ok(out)
    }
}

/// A sample with its arrival time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedSample {
    pub index: usize,
    pub t: f64,
    pub values: Vec<f64>,
}

impl TimedSample {
    pub fn point(&self) -> SamplePoint {
        SamplePoint { values: self.values.clone(), arrival_index: self.index }
    }
}

pub fn timed(points: Vec<SamplePoint>, times: &[f64]) -> Result<Vec<TimedSample>> {
    if points.len() != times.len() {
        return Err(Error::Dimension { expected: points.len(), got: times.len() });
    }
    Ok(points
        .into_iter()
        .zip(times)
        .map(|(p, &t)| TimedSample { index: p.arrival_index, t, values: p.values })
        .collect())
}

/// One JSON object per line.
pub fn write_stream(out: &mut impl Write, samples: &[TimedSample]) -> Result<()> {
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::Stream(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::Stream(e.to_string()))?;
    }
    Ok(())
}

pub fn read_stream(input: impl BufRead) -> Result<Vec<TimedSample>> {
    let mut out: Vec<TimedSample> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Stream(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TimedSample =
            serde_json::from_str(&line).map_err(|e| Error::Stream(format!("line {}: {e}", i + 1)))?;
        if s.index != out.len() + 1 {
            return Err(Error::Stream(format!("line {}: expected sample #{}, found #{}", i + 1, out.len() + 1, s.index)));
        }
        if let Some(prev) = out.last() {
            if s.t < prev.t {
                return Err(Error::Stream(format!("line {}: arrival times go backwards", i + 1)));
            }
            if s.values.len() != prev.values.len() {
                return Err(Error::Dimension { expected: prev.values.len(), got: s.values.len() });
            }
        }
        out.push(s);
    }
    Ok(out)
}

fn diag(v: &[f64]) -> Vec<Vec<f64>> {
    (0..v.len()).map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect()).collect()
}

/// Three-center mixture in `ℝ³` of the first simulation study.
pub fn study1_mixture() -> MixtureSpec {
    MixtureSpec {
        components: vec![
            MixtureComponent { mean: vec![2.0, -4.0, 3.0], covariance: diag(&[1.0, 3.0, 2.0]), weight: 0.25 },
            MixtureComponent { mean: vec![-3.0, 5.0, 0.0], covariance: diag(&[2.0, 2.0, 2.0]), weight: 0.5 },
            MixtureComponent { mean: vec![0.0, 0.0, -6.0], covariance: diag(&[1.0, 1.0, 1.0]), weight: 0.25 },
        ],
    }
}

/// Second study: three equally weighted unit-covariance centers in `ℝ¹⁰`
/// with means uniform in `[−10, 10]`, and the cost
/// `A = GᵀG`, `C = −(HᵀH + I)`, `B` standard normal.
pub fn study2_problem(seed: u64, d: usize, m: usize) -> Result<(MixtureSpec, QuadraticModel)> {
    let mut rng = rng_for(seed, purpose::MEANS);
    let components = (0..3)
        .map(|_| MixtureComponent {
            mean: (0..m).map(|_| rng.random_range(-10.0..=10.0)).collect(),
            covariance: diag(&vec![1.0; m]),
            weight: 1.0 / 3.0,
        })
        .collect();
    let mut rng = rng_for(seed, purpose::MATRICES);
    let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = normal(d, d);
    let b = normal(d, m);
    let h = normal(m, m);
    let a = g.transpose() * &g;
    let c = -(h.transpose() * &h + DMatrix::identity(m, m));
    // exact symmetry for the model's checks
    let a = (&a + a.transpose()) * 0.5;
    let c = (&c + c.transpose()) * 0.5;
    Ok((MixtureSpec { components }, QuadraticModel::new(a, b, c)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JStarOptions {
    pub max_iters: usize,
    /// Stop once a step moves less than this (Euclidean norm).
    pub step_tol: f64,
    /// Harmonic step scale.
    pub diameter: f64,
    pub policy: ExecPolicy,
}

impl Default for JStarOptions {
    fn default() -> Self {
        JStarOptions { max_iters: 20_000, step_tol: 1e-9, diameter: 10.0, policy: ExecPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JStarEstimate {
    pub x: Vec<f64>,
    pub j_star: f64,
    /// Sample standard deviation of the cost at `x` over the validation set.
    pub std_dev: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Minimize the validation-set average cost with normalized subgradient
/// steps `α = M/(i+1)` from `x0`, keeping the best iterate.
pub fn estimate_jstar(
    model: &dyn CostModel,
    validation: &[Vec<f64>],
    x0: &[f64],
    opts: &JStarOptions,
) -> Result<JStarEstimate> {
    if validation.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let n = validation.len() as f64;
    let d = model.decision_dim();
    let average = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let terms = par::map_indexed(opts.policy, validation.len(), |k| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; d];
            model.grad_x(x, &validation[k], &mut g)?;
            Ok((model.eval(x, &validation[k])?, g))
        });
        let mut v = 0.0;
        let mut g = vec![0.0; d];
        for t in terms {
            let (fv, gv) = t?;
            v += fv;
            for (a, b) in g.iter_mut().zip(&gv) {
                *a += b;
            }
        }
        g.iter_mut().for_each(|a| *a /= n);
        Ok((v / n, g))
    };

    let mut x = x0.to_vec();
    model.project_decision(&mut x);
    let (mut best_v, mut g) = average(&x)?;
    let mut best_x = x.clone();
    let mut converged = false;
    let mut iters = 0;
    for i in 0..opts.max_iters {
        let mut next = step(&x, &g, opts.diameter / (i as f64 + 1.0), StepNorm::L2);
        model.project_decision(&mut next);
        let moved: f64 = next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        x = next;
        iters = i + 1;
        let (v, gn) = average(&x)?;
        g = gn;
        if v < best_v {
            best_v = v;
            best_x = x.clone();
        }
        if moved < opts.step_tol {
            converged = true;
            break;
        }
    }
    let vals = par::map_indexed(opts.policy, validation.len(), |k| model.eval(&best_x, &validation[k]));
    let mut sq = 0.0;
    for v in vals {
        let v = v?;
        sq += (v - best_v) * (v - best_v);
    }
    let std_dev = if validation.len() > 1 { (sq / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(JStarEstimate { x: best_x, j_star: best_v, std_dev, iters, converged })
}

/// Seeded validation draw from generators separate from the stream's.
pub fn validation_set(spec: &MixtureSpec, seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
    let sampler = spec.sampler()?;
    let mut crng = rng_for(seed, purpose::VALIDATION_COMPONENT);
    let mut grng = rng_for(seed, purpose::VALIDATION_GAUSSIAN);
    Ok(sampler.draw(&mut crng, &mut grng, count).into_iter().map(|(_, v)| v).collect())
}
