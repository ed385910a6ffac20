//! Exact 1-Wasserstein distance between small discrete distributions,
//! with the 1-norm as ground cost.
//!
//! Solved as a min-cost flow on the complete bipartite graph by
//! successive shortest paths.

use crate::certgen::DiscreteDistribution;
use crate::{Error, Result};

/// An optimal coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    pi: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pi[i * self.cols + j]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.pi[i * self.cols..(i + 1) * self.cols].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, j)).sum()
    }
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

const FLOW_EPS: f64 = 1e-15;
const RELAX_TOL: f64 = 1e-13;

/// `W₁(p, q)` and an optimal plan.
pub fn w1_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<(f64, TransportPlan)> {
    p.check_normalized()?;
    q.check_normalized()?;
    if p.dim() != q.dim() {
        return Err(Error::Dimension { expected: p.dim(), got: q.dim() });
    }
    let (rows, cols) = (p.len(), q.len());
    let cost: Vec<f64> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| l1(p.atom(i), q.atom(j)))
        .collect();

    let mut supply: Vec<f64> = p.weights().to_vec();
    let mut demand: Vec<f64> = q.weights().to_vec();
    let mut flow = vec![0.0; rows * cols];

    // Nodes: sources 0..rows, sinks rows..rows+cols. The super source is
    // implicit (distance 0 to every source with supply left). Residual
    // graphs of min-cost flows have no negative cycles, so label-correcting
    // shortest paths are exact.
    let nodes = rows + cols;
    let mut dist = vec![f64::INFINITY; nodes];
    let mut prev = vec![usize::MAX; nodes];

    loop {
        if supply.iter().all(|s| *s <= FLOW_EPS) || demand.iter().all(|d| *d <= FLOW_EPS) {
            break;
        }
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        for i in 0..rows {
            if supply[i] > FLOW_EPS {
                dist[i] = 0.0;
            }
        }
        for _pass in 0..nodes {
            let mut changed = false;
            for i in 0..rows {
                if !dist[i].is_finite() {
                    continue;
                }
                for j in 0..cols {
                    let d = dist[i] + cost[i * cols + j];
                    if d < dist[rows + j] - RELAX_TOL {
                        dist[rows + j] = d;
                        prev[rows + j] = i;
                        changed = true;
                    }
                }
            }
            for j in 0..cols {
                let u = rows + j;
                if !dist[u].is_finite() {
                    continue;
                }
                for i in 0..rows {
                    if flow[i * cols + j] > FLOW_EPS {
                        let d = dist[u] - cost[i * cols + j];
                        if d < dist[i] - RELAX_TOL {
                            dist[i] = d;
                            prev[i] = u;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }

        let mut sink = usize::MAX;
        for (j, &dem) in demand.iter().enumerate().take(cols) {
            let v = rows + j;
            if dem > FLOW_EPS && dist[v].is_finite() && (sink == usize::MAX || dist[v] < dist[sink]) {
                sink = v;
            }
        }
        if sink == usize::MAX {
            break;
        }

        let mut amount = demand[sink - rows];
        let mut v = sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= rows {
                // backward arc sink u -> source v
                amount = amount.min(flow[v * cols + (u - rows)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);

        let mut v = sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < rows {
                flow[u * cols + (v - rows)] += amount;
            } else {
                flow[v * cols + (u - rows)] -= amount;
            }
            v = u;
        }
        supply[v] -= amount;
        demand[sink - rows] -= amount;
    }

    let total: f64 = flow.iter().zip(&cost).map(|(f, c)| f * c).sum();
    Ok((total, TransportPlan { rows, cols, pi: flow, cost: total }))
}

/// Cost of moving each atom `ξ_k` to `ξ_k − y_k` with weight `w_k`:
/// `Σ w_k ‖y_k‖₁`, an upper bound on the 1-Wasserstein distance between the
/// two measures.
pub fn displacement_cost(weights: &[f64], displacements: &[f64], m: usize) -> f64 {
    weights
        .iter()
        .zip(displacements.chunks(m))
        .map(|(w, y)| w * y.iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}
