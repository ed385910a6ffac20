//! Solvers over scaled simplices.
//!
//! [`point_search`] solves the linearized certificate problem over the
//! `2mn` signed extreme points exactly and returns the Frank-Wolfe gap.
//! [`afwa_maximize`] is the away-step Frank-Wolfe method for a concave
//! objective over the unit simplex `Δ_T`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sign of the single nonzero entry of a [`SparseVertex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub fn of(v: f64) -> Sign {
        if v < 0.0 {
            Sign::Minus
        } else {
            Sign::Plus
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Minus => -1.0,
            Sign::Plus => 1.0,
        }
    }
}

/// An extreme point of the scaled simplex: one signed coordinate
/// `(k, j)` of the stacked perturbation, with magnitude `n·ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseVertex {
    /// Data (or cover-center) index, 0-based.
    pub k: usize,
    /// Sample coordinate, 0-based.
    pub j: usize,
    pub sign: Sign,
    pub magnitude: f64,
}

impl SparseVertex {
    pub fn key(&self) -> (usize, usize, Sign) {
        (self.k, self.j, self.sign)
    }

    /// The signed nonzero entry.
    pub fn entry(&self) -> f64 {
        self.sign.value() * self.magnitude
    }

    /// Flat index of the nonzero entry in a stacked `p × m` vector.
    pub fn index(&self, m: usize) -> usize {
        self.k * m + self.j
    }

    pub fn densify(&self, p: usize, m: usize) -> Vec<f64> {
        let mut v = vec![0.0; p * m];
        v[self.index(m)] = self.entry();
        v
    }
}

/// Outcome of the linearized problem at the current perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSearch {
    /// Every maximizing signed vertex. Empty when all gradients vanish, in
    /// which case the origin is the (degenerate) maximizer.
    pub vertices: Vec<SparseVertex>,
    /// Frank-Wolfe gap; an upper bound on the remaining suboptimality.
    pub eta: f64,
}

impl PointSearch {
    pub fn converged(&self, tol: f64) -> bool {
        self.eta <= tol
    }
}

/// Relative tolerance under which two signed gradient entries tie.
const TIE_RTOL: f64 = 1e-12;

/// Solve `max (1/n) Σ_k ⟨∇h_k, ỹ_k − y_k⟩` over `scale · Δ_{2mp}`.
///
/// `grads` and `current` are stacked `p × m` arrays; `n_total` is the
/// normalizing data count (equal to `p` without a cover).
pub fn point_search(grads: &[f64], m: usize, n_total: f64, scale: f64, current: &[f64]) -> Result<PointSearch> {
    if grads.len() != current.len() {
        return Err(Error::Dimension { expected: current.len(), got: grads.len() });
    }
    if m == 0 || !grads.len().is_multiple_of(m) {
        return Err(Error::Dimension { expected: m, got: grads.len() });
    }
    if !(scale > 0.0) || !(n_total > 0.0) {
        return Err(Error::Config(format!("point search needs positive scale ({scale}) and count ({n_total})")));
    }

    let mut best = 0.0f64;
    for &g in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(g));
        }
        best = best.max(g.abs());
    }
    let base: f64 = grads.iter().zip(current).map(|(g, y)| g * y).sum();

    if best == 0.0 {
        return Ok(PointSearch { vertices: Vec::new(), eta: -base / n_total });
    }

    let cutoff = best - TIE_RTOL * best;
    let vertices: Vec<SparseVertex> = grads
        .iter()
        .enumerate()
        .filter(|(_, g)| g.abs() >= cutoff)
        .map(|(idx, &g)| SparseVertex { k: idx / m, j: idx % m, sign: Sign::of(g), magnitude: scale })
        .collect();

    let first = vertices[0];
    let eta = (grads[first.index(m)] * first.entry() - base) / n_total;
    Ok(PointSearch { vertices, eta })
}

/// A point of the unit simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("simplex weights must be nonempty".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("simplex weights must be finite and nonnegative".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Unnormalized(s));
        }
        let mut w = SimplexWeights(weights);
        w.renormalize();
        Ok(w)
    }

    pub fn vertex(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        SimplexWeights(v)
    }

    pub fn uniform(dim: usize) -> Self {
        SimplexWeights(vec![1.0 / dim as f64; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Append zero-weight coordinates.
    pub fn extend_zeros(&mut self, extra: usize) {
        self.0.extend(std::iter::repeat_n(0.0, extra));
    }

    fn renormalize(&mut self) {
        for w in self.0.iter_mut() {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let s: f64 = self.0.iter().sum();
        if s != 1.0 {
            for w in self.0.iter_mut() {
                *w /= s;
            }
        }
    }
}

/// A concave objective over the unit simplex.
pub trait SimplexObjective {
    fn dim(&self) -> usize;

    /// Objective value at `gamma`; writes the gradient into `grad`.
    fn evaluate(&mut self, gamma: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Second derivative of `t ↦ F(γ + t·dir)` when the objective is
    /// quadratic along `dir`. `None` selects a bisection line search.
    fn curvature(&mut self, _gamma: &[f64], _dir: &[f64]) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfwaStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct AfwaResult {
    pub weights: SimplexWeights,
    pub value: f64,
    pub iters: usize,
    pub status: AfwaStatus,
    /// Frank-Wolfe gap recorded before each iteration (and at the end).
    pub gaps: Vec<f64>,
    /// Number of away steps among `iters`.
    pub away_steps: usize,
}

pub const DEFAULT_MAX_ITERS: usize = 100_000;

const BISECTION_STEPS: usize = 60;
const BISECTION_TOL: f64 = 1e-12;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn line_search(
    objective: &mut dyn SimplexObjective,
    gamma: &[f64],
    dir: &[f64],
    slope: f64,
    t_max: f64,
    scratch: &mut [f64],
) -> Result<f64> {
    if let Some(curv) = objective.curvature(gamma, dir) {
        return Ok(if curv < 0.0 { (slope / -curv).min(t_max) } else { t_max });
    }
    let mut trial = gamma.to_vec();
    let mut derivative = |t: f64, scratch: &mut [f64]| -> Result<f64> {
        for ((p, g), d) in trial.iter_mut().zip(gamma).zip(dir) {
            *p = g + t * d;
        }
        let v = objective.evaluate(&trial, scratch)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(v));
        }
        Ok(dot(scratch, dir))
    };
    if derivative(t_max, scratch)? >= 0.0 {
        return Ok(t_max);
    }
    let (mut lo, mut hi) = (0.0, t_max);
    for _ in 0..BISECTION_STEPS {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if derivative(mid, scratch)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Away-step Frank-Wolfe maximization of a concave objective over `Δ_T`.
///
/// Stops when the Frank-Wolfe gap is at most `eps` (the away gap is not
/// part of the stopping rule) or after `max_iters` steps.
pub fn afwa_maximize(
    objective: &mut dyn SimplexObjective,
    eps: f64,
    start: SimplexWeights,
    max_iters: usize,
) -> Result<AfwaResult> {
    let dim = objective.dim();
    if start.len() != dim {
        return Err(Error::Dimension { expected: dim, got: start.len() });
    }
    let mut gamma = start;
    let mut grad = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut dir = vec![0.0; dim];
    let mut value = objective.evaluate(gamma.as_slice(), &mut grad)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(value));
    }
    let mut gaps = Vec::new();
    let mut away_steps = 0;

    for iter in 0..max_iters {
        let g_dot = dot(&grad, gamma.as_slice());
        let s = argmax(&grad);
        let fw_gap = grad[s] - g_dot;
        gaps.push(fw_gap);
        if fw_gap <= eps {
            return Ok(AfwaResult { weights: gamma, value, iters: iter, status: AfwaStatus::Converged, gaps, away_steps });
        }

        let w = &gamma.0;
        let mut v = usize::MAX;
        for i in 0..dim {
            if w[i] > 0.0 && (v == usize::MAX || grad[i] < grad[v]) {
                v = i;
            }
        }
        let away_gap = g_dot - grad[v];

        let toward = fw_gap >= away_gap;
        let (slope, t_max) = if toward {
            for i in 0..dim {
                dir[i] = -w[i];
            }
            dir[s] += 1.0;
            (fw_gap, 1.0)
        } else {
            dir.copy_from_slice(&w[..dim]);
            dir[v] -= 1.0;
            (away_gap, w[v] / (1.0 - w[v]))
        };

        let t = line_search(objective, gamma.as_slice(), &dir, slope, t_max, &mut scratch)?;

        let w = &mut gamma.0;
        if toward {
            if t >= 1.0 {
                w.iter_mut().for_each(|x| *x = 0.0);
                w[s] = 1.0;
            } else {
                for x in w.iter_mut() {
                    *x *= 1.0 - t;
                }
                w[s] += t;
            }
        } else {
            away_steps += 1;
            for x in w.iter_mut() {
                *x *= 1.0 + t;
            }
            w[v] -= t;
            if t >= t_max {
                w[v] = 0.0;
            }
        }
        gamma.renormalize();

        let next = objective.evaluate(gamma.as_slice(), &mut grad)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(next));
        }
        if next < value - 1e-10 * (1.0 + value.abs()) {
            return Err(Error::NonConcave { before: value, after: next });
        }
        value = next;
    }

    let g_dot = dot(&grad, gamma.as_slice());
    let fw_gap = grad[argmax(&grad)] - g_dot;
    gaps.push(fw_gap);
    let status = if fw_gap <= eps { AfwaStatus::Converged } else { AfwaStatus::MaxIterations };
    Ok(AfwaResult { weights: gamma, value, iters: max_iters, status, gaps, away_steps })
}
