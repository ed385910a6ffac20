//! Incremental ball cover of the stream.
//!
//! Each arriving point either lands in one or more existing balls of radius
//! `ω` (adding `1/ℓ` to the multiplicity of each of the `ℓ` covering balls)
//! or becomes a new center with multiplicity 1. The multiplicities sum to
//! the number of points seen, and the weighted measure over the centers is
//! within `((n − p)/n)·ω` of the empirical measure in 1-Wasserstein
//! distance.

use serde::{Deserialize, Serialize};

use crate::certgen::{DiscreteDistribution, Support};
use crate::model::SamplePoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallMetric {
    #[default]
    L1,
    Euclidean,
}

impl BallMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            BallMetric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            BallMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cover {
    omega: f64,
    metric: BallMetric,
    centers: Vec<Vec<f64>>,
    /// Arrival index (1-based) of the point that opened each ball.
    origins: Vec<usize>,
    theta: Vec<CompensatedSum>,
    n_total: usize,
}

/// Serializable view of a cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverSnapshot {
    pub omega: f64,
    pub metric: BallMetric,
    pub n_total: usize,
    pub origins: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

/// `ε̃ = ε + ω`.
pub fn inflated_radius(eps: f64, omega: f64) -> f64 {
    eps + omega
}

impl Cover {
    pub fn new(omega: f64, metric: BallMetric) -> Result<Self> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::Config(format!("cover radius {omega} must be finite and nonnegative")));
        }
        Ok(Cover { omega, metric, centers: Vec::new(), origins: Vec::new(), theta: Vec::new(), n_total: 0 })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn metric(&self) -> BallMetric {
        self.metric
    }

    /// Number of centers `p`.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn theta(&self) -> Vec<f64> {
        self.theta.iter().map(CompensatedSum::value).collect()
    }

    /// Bound on the 1-norm distance from any covered point to its centers.
    /// Euclidean balls of radius `ω` sit inside 1-norm balls of radius
    /// `√m·ω`.
    pub fn transport_radius(&self) -> f64 {
        match self.metric {
            BallMetric::L1 => self.omega,
            BallMetric::Euclidean => {
                let m = self.centers.first().map_or(1, Vec::len);
                (m as f64).sqrt() * self.omega
            }
        }
    }

    /// `((n − p)/n)·ω` in the 1-norm.
    pub fn lemma_bound(&self) -> f64 {
        if self.n_total == 0 {
            return 0.0;
        }
        (self.n_total - self.len()) as f64 / self.n_total as f64 * self.transport_radius()
    }

    /// Absorb points in arrival order.
    pub fn update(&mut self, points: &[SamplePoint]) -> Result<()> {
        for p in points {
            self.insert(p)?;
        }
        Ok(())
    }

    pub fn insert(&mut self, point: &SamplePoint) -> Result<()> {
        if let Some(c) = self.centers.first() {
            if c.len() != point.values.len() {
                return Err(Error::Dimension { expected: c.len(), got: point.values.len() });
            }
        }
        let covering: Vec<usize> = (0..self.centers.len())
            .filter(|&k| self.metric.distance(&self.centers[k], &point.values) <= self.omega)
            .collect();
        if covering.is_empty() {
            self.centers.push(point.values.clone());
            self.origins.push(point.arrival_index);
            let mut t = CompensatedSum::default();
            t.add(1.0);
            self.theta.push(t);
        } else {
            let share = 1.0 / covering.len() as f64;
            for k in covering {
                self.theta[k].add(share);
            }
        }
        self.n_total += 1;
        Ok(())
    }

    /// `Σθ = n` within 1e-9 and every multiplicity positive.
    pub fn check_invariants(&self) -> Result<()> {
        let mut total = CompensatedSum::default();
        for t in &self.theta {
            let v = t.value();
            if !(v > 0.0) {
                return Err(Error::Cover(format!("multiplicity {v} is not positive")));
            }
            total.add(v);
        }
        if (total.value() - self.n_total as f64).abs() >= 1e-9 {
            return Err(Error::Cover(format!("multiplicities sum to {} for {} points", total.value(), self.n_total)));
        }
        if self.len() > self.n_total {
            return Err(Error::Cover("more centers than points".into()));
        }
        Ok(())
    }

    /// Largest distance from a point to its nearest center.
    pub fn max_gap<'a>(&self, points: impl IntoIterator<Item = &'a [f64]>) -> f64 {
        points
            .into_iter()
            .map(|p| self.centers.iter().map(|c| self.metric.distance(c, p)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    }

    /// `(1/n) Σ θ_k δ_{ζ_k}`.
    pub fn weighted_empirical(&self) -> Result<DiscreteDistribution> {
        if self.n_total == 0 {
            return Err(Error::Cover("empty cover".into()));
        }
        let n = self.n_total as f64;
        DiscreteDistribution::new(self.centers.clone(), self.theta().iter().map(|t| t / n).collect())
    }

    /// Certificate support over the centers.
    pub fn support(&self) -> Result<Support> {
        if self.n_total == 0 {
            return Err(Error::Cover("empty cover".into()));
        }
        Support::weighted(&self.centers, &self.theta(), self.n_total)
    }

    pub fn snapshot(&self) -> CoverSnapshot {
        CoverSnapshot {
            omega: self.omega,
            metric: self.metric,
            n_total: self.n_total,
            origins: self.origins.clone(),
            centers: self.centers.clone(),
            theta: self.theta(),
        }
    }
}
