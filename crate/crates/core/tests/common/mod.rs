//! Reference solutions that share no code with the library.
#![allow(dead_code)]

use onda_core::certgen::DiscreteDistribution;

/// Quadratic cost `xᵀAx + xᵀBξ + Σ c_j ξ_j²` with diagonal `C`.
#[derive(Debug, Clone)]
pub struct DiagQuadratic {
    pub d: usize,
    pub m: usize,
    /// Row-major `d × d`.
    pub a: Vec<f64>,
    /// Row-major `d × m`.
    pub b: Vec<f64>,
    /// Diagonal of `C`, all negative.
    pub c: Vec<f64>,
}

impl DiagQuadratic {
    pub fn c_matrix(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.m * self.m];
        for j in 0..self.m {
            c[j * self.m + j] = self.c[j];
        }
        c
    }

    fn xax(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.d {
            for k in 0..self.d {
                s += x[i] * self.a[i * self.d + k] * x[k];
            }
        }
        s
    }

    /// `Bᵀx`.
    fn bx(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m).map(|j| (0..self.d).map(|i| x[i] * self.b[i * self.m + j]).sum()).collect()
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        let bx = self.bx(x);
        self.xax(x) + (0..self.m).map(|j| bx[j] * xi[j] + self.c[j] * xi[j] * xi[j]).sum::<f64>()
    }

    /// `max (1/n) Σ_k f(x, ζ_k − y_k)` subject to `(1/n) Σ_k ‖y_k‖₁ ≤ eps`.
    ///
    /// Each coordinate `u = ζ_kj − y_kj` contributes the concave parabola
    /// `b_j u + c_j u²`. Moving `u` uphill by `t` costs `t` and the marginal
    /// gain falls linearly, so the optimum equalizes marginal gains at a level
    /// `λ` fixed by the budget.
    pub fn worst_case(&self, x: &[f64], atoms: &[Vec<f64>], eps: f64) -> (f64, Vec<Vec<f64>>) {
        let n = atoms.len() as f64;
        let bx = self.bx(x);
        // (initial gain, curvature 2|c|) per coordinate
        let mut coords = Vec::new();
        for a in atoms {
            for j in 0..self.m {
                let g = bx[j] + 2.0 * self.c[j] * a[j];
                coords.push((g.abs(), -2.0 * self.c[j]));
            }
        }
        let budget = n * eps;
        let full: f64 = coords.iter().map(|(g, k)| g / k).sum();
        let lambda = if full <= budget {
            0.0
        } else {
            let mut order: Vec<usize> = (0..coords.len()).collect();
            order.sort_by(|&p, &q| coords[q].0.total_cmp(&coords[p].0));
            let (mut s_gk, mut s_k) = (0.0, 0.0);
            let mut level = 0.0;
            for (pos, &i) in order.iter().enumerate() {
                let (g, k) = coords[i];
                s_gk += g / k;
                s_k += 1.0 / k;
                level = (s_gk - budget) / s_k;
                let next = order.get(pos + 1).map_or(0.0, |&q| coords[q].0);
                if level >= next {
                    break;
                }
            }
            level
        };
        let mut moved = Vec::with_capacity(atoms.len());
        let mut total = 0.0;
        for a in atoms {
            let mut u = a.clone();
            for j in 0..self.m {
                let g = bx[j] + 2.0 * self.c[j] * a[j];
                let t = ((g.abs() - lambda) / (-2.0 * self.c[j])).max(0.0);
                u[j] += g.signum() * t;
            }
            total += self.eval(x, &u);
            moved.push(u);
        }
        (total / n, moved)
    }
}

/// Exact W1 between two uniform distributions with the same number of atoms:
/// by Birkhoff, an optimal plan is a permutation.
pub fn w1_by_permutation(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    assert_eq!(p.len(), q.len());
    let n = p.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    loop {
        let c: f64 = (0..n).map(|i| l1(&p[i], &q[perm[i]])).sum();
        best = best.min(c);
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best / n as f64
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn uniform(atoms: Vec<Vec<f64>>) -> DiscreteDistribution {
    DiscreteDistribution::uniform(atoms).unwrap()
}

/// Least-squares slope of `ln v` against the index.
pub fn log_slope(v: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> =
        v.iter().enumerate().filter(|(_, g)| **g > 0.0).map(|(i, g)| (i as f64, g.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Outcome of a fixed-window constant-step run checked against the grid.
#[derive(Debug)]
pub struct FixedWindowRun {
    pub min_j: f64,
    pub j_star: f64,
    pub x_star: f64,
    pub eps2: f64,
    pub r_bar: u64,
    pub steps: usize,
}

/// Three points arrive at once; one epoch runs the constant rule for its
/// whole horizon. Every iterate is valued by the water-filling oracle and
/// the minimizer is located on a dense grid, then refined by ternary search.
pub fn fixed_window_run(points: [f64; 3], x0: f64) -> FixedWindowRun {
    use onda_core::ambiguity::{ConcentrationParams, ConfidenceSchedule};
    use onda_core::model::{DecisionVector, QuadraticModel, Tolerances};
    use onda_core::onda::{run, EpochStop, EventKind, RunConfig, StepRuleSpec};
    use onda_core::stream::TimedSample;
    use onda_core::subgrad::{StepNorm, StepVariant};
    use std::collections::VecDeque;

    let q = DiagQuadratic { d: 1, m: 1, a: vec![1.0], b: vec![1.0], c: vec![-1.0] };
    let model = QuadraticModel::from_rows(1, 1, &q.a, &q.b, &q.c_matrix()).unwrap();
    let atoms: Vec<Vec<f64>> = points.iter().map(|p| vec![*p]).collect();
    let (eps2, eps_sa, m_diam) = (0.02, 0.005, 3.0);
    let conc = ConcentrationParams::new(2.0, 1.0, 2.0, 1).unwrap();
    let schedule = ConfidenceSchedule::study();
    let eps = schedule.radius(&conc, 3).unwrap();
    let j = |x: f64| q.worst_case(&[x], &atoms, eps).0;

    let (mut lo, mut hi) = (-10.0, 10.0);
    let grid = 200_000;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=grid {
        let x = lo + (hi - lo) * i as f64 / grid as f64;
        let v = j(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    let h = (hi - lo) / grid as f64;
    (lo, hi) = (best.1 - h, best.1 + h);
    for _ in 0..200 {
        let (a, b) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
        if j(a) < j(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let x_star = 0.5 * (lo + hi);
    let j_star = j(x_star).min(best.0);
    assert!((x0 - x_star).abs() <= m_diam, "M must cover the distance to the minimizer");

    let mut cfg = RunConfig::new(
        Tolerances::new(1e-7, eps2, eps_sa, 1.0).unwrap(),
        schedule,
        conc,
        StepRuleSpec { variant: StepVariant::Constant, diameter: m_diam, subgradient_bound: 1.0, norm: StepNorm::L2 },
    );
    cfg.epoch_stop = EpochStop::Horizon;
    cfg.n0 = Some(3);
    let r_bar = cfg.validate().unwrap().r_bar;
    cfg.max_epoch_steps = r_bar + 10;
    let mut source: VecDeque<TimedSample> =
        points.iter().enumerate().map(|(i, p)| TimedSample { index: i + 1, t: 0.0, values: vec![*p] }).collect();
    let out = run(&cfg, &mut source, &model, DecisionVector::new(vec![x0]).unwrap()).unwrap();
    let iterates: Vec<f64> = std::iter::once(x0)
        .chain(out.events.iter().filter(|e| matches!(e.kind, EventKind::DecisionStep | EventKind::EpochConverged) && e.n == 3).map(|e| e.x[0]))
        .collect();
    let min_j = iterates.iter().map(|x| j(*x)).fold(f64::INFINITY, f64::min);
    FixedWindowRun { min_j, j_star, x_star, eps2, r_bar, steps: iterates.len() - 1 }
}

/// `−‖γ − c‖²`, strongly concave.
pub struct Distance {
    pub c: Vec<f64>,
}

impl onda_core::simplex::SimplexObjective for Distance {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn evaluate(&mut self, gamma: &[f64], grad: &mut [f64]) -> onda_core::Result<f64> {
        let mut v = 0.0;
        for ((g, x), c) in grad.iter_mut().zip(gamma).zip(&self.c) {
            *g = -2.0 * (x - c);
            v -= (x - c) * (x - c);
        }
        Ok(v)
    }
}

pub fn euclidean_projection(c: &[f64]) -> Vec<f64> {
    let mut u = c.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, v) in u.iter().enumerate() {
        cum += v;
        let t = (cum - 1.0) / (i + 1) as f64;
        if v - t > 0.0 {
            tau = t;
        }
    }
    c.iter().map(|v| (v - tau).max(0.0)).collect()
}
