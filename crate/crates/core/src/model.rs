//! Cost models `f(x, ξ)` with their two gradient oracles.
//!
//! The certificate machinery only ever sees a model through [`CostModel`]:
//! the value, the decision gradient `∇ₓf(x, ξ)` and the perturbation
//! gradient `∇_y f(x, ξ − y)`. Models must be pure so that oracles can be
//! evaluated concurrently over data points.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("decision {x:?} outside the model domain ({domain})")]
    Domain { x: Vec<f64>, domain: &'static str },
    #[error("non-finite value while evaluating the cost model")]
    Overflow,
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

/// A cost function and its gradients.
///
/// `grad_y` is the gradient of `y ↦ f(x, ξ − y)`, which is what the
/// certificate problem differentiates.
pub trait CostModel: Send + Sync {
    fn decision_dim(&self) -> usize;
    fn sample_dim(&self) -> usize;

    fn eval(&self, x: &[f64], xi: &[f64]) -> ModelResult<f64>;

    fn grad_x(&self, x: &[f64], xi: &[f64], out: &mut [f64]) -> ModelResult<()>;

    fn grad_y(&self, x: &[f64], xi: &[f64], y: &[f64], out: &mut [f64]) -> ModelResult<()>;

    /// Second derivative of `t ↦ f(x, ξ − y − t·dir)`, when it does not
    /// depend on `ξ` or `y` (the model is quadratic in the sample).
    /// Enables closed-form line searches.
    fn curvature_y(&self, _x: &[f64], _dir: &[f64]) -> Option<f64> {
        None
    }

    /// Map a decision back into the model's domain after a step.
    fn project_decision(&self, _x: &mut [f64]) {}
}

impl<M: CostModel + ?Sized> CostModel for Arc<M> {
    fn decision_dim(&self) -> usize {
        (**self).decision_dim()
    }
    fn sample_dim(&self) -> usize {
        (**self).sample_dim()
    }
    fn eval(&self, x: &[f64], xi: &[f64]) -> ModelResult<f64> {
        (**self).eval(x, xi)
    }
    fn grad_x(&self, x: &[f64], xi: &[f64], out: &mut [f64]) -> ModelResult<()> {
        (**self).grad_x(x, xi, out)
    }
    fn grad_y(&self, x: &[f64], xi: &[f64], y: &[f64], out: &mut [f64]) -> ModelResult<()> {
        (**self).grad_y(x, xi, y, out)
    }
    fn curvature_y(&self, x: &[f64], dir: &[f64]) -> Option<f64> {
        (**self).curvature_y(x, dir)
    }
    fn project_decision(&self, x: &mut [f64]) {
        (**self).project_decision(x)
    }
}

/// The decision `x ∈ ℝᵈ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionVector(Vec<f64>);

impl DecisionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("decision has non-finite entries: {values:?}")));
        }
        Ok(DecisionVector(values))
    }

    pub fn zeros(d: usize) -> Self {
        DecisionVector(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for DecisionVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A streamed sample with the data count at which it arrived (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub values: Vec<f64>,
    pub arrival_index: usize,
}

impl SamplePoint {
    pub fn new(values: Vec<f64>, arrival_index: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("sample has non-finite entries: {values:?}")));
        }
        if arrival_index == 0 {
            return Err(Error::Config("arrival index is 1-based".into()));
        }
        Ok(SamplePoint { values, arrival_index })
    }
}

/// Certificate, decision and subgradient-reuse tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub eps1: f64,
    pub eps2: f64,
    pub eps_sa: f64,
}

impl Tolerances {
    /// Checks `0 < eps1 ≤ eps_sa < eps2 / max(L, 1)`.
    pub fn new(eps1: f64, eps2: f64, eps_sa: f64, subgradient_bound: f64) -> Result<Self> {
        let mu = subgradient_bound.max(1.0);
        if !(eps1 > 0.0 && eps2 > 0.0) {
            return Err(Error::Config(format!("eps1 = {eps1} and eps2 = {eps2} must be positive")));
        }
        if eps1 > eps_sa {
            return Err(Error::Config(format!("eps1 = {eps1} must not exceed eps_sa = {eps_sa}")));
        }
        if eps_sa >= eps2 / mu {
            return Err(Error::Config(format!(
                "eps_sa = {eps_sa} must be below eps2 / max(L, 1) = {}",
                eps2 / mu
            )));
        }
        Ok(Tolerances { eps1, eps2, eps_sa })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `f(x, ξ) = xᵀAx + xᵀBξ + ξᵀCξ` with `A ⪰ 0` and `C ≺ 0`.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    a_sym: DMatrix<f64>,
    c_sym: DMatrix<f64>,
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
        }
    }
    Ok(())
}

impl QuadraticModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        let m = c.nrows();
        if a.ncols() != d {
            return Err(Error::Dimension { expected: d, got: a.ncols() });
        }
        if c.ncols() != m {
            return Err(Error::Dimension { expected: m, got: c.ncols() });
        }
        if b.nrows() != d {
            return Err(Error::Dimension { expected: d, got: b.nrows() });
        }
        if b.ncols() != m {
            return Err(Error::Dimension { expected: m, got: b.ncols() });
        }
        if d == 0 || m == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        check_symmetric("A", &a)?;
        check_symmetric("C", &c)?;
        let a_scale = a.amax().max(1.0);
        let a_min = SymmetricEigen::new(a.clone()).eigenvalues.min();
        if a_min < -1e-10 * a_scale {
            return Err(Error::Config(format!("A is not positive semi-definite (min eigenvalue {a_min})")));
        }
        let c_max = SymmetricEigen::new(c.clone()).eigenvalues.max();
        if c_max >= 0.0 {
            return Err(Error::Config(format!("C is not negative definite (max eigenvalue {c_max})")));
        }
        let a_sym = &a + a.transpose();
        let c_sym = &c + c.transpose();
        Ok(QuadraticModel { a, b, c, a_sym, c_sym })
    }

    /// Convenience constructor from row-major slices.
    pub fn from_rows(d: usize, m: usize, a: &[f64], b: &[f64], c: &[f64]) -> Result<Self> {
        if a.len() != d * d {
            return Err(Error::Dimension { expected: d * d, got: a.len() });
        }
        if b.len() != d * m {
            return Err(Error::Dimension { expected: d * m, got: b.len() });
        }
        if c.len() != m * m {
            return Err(Error::Dimension { expected: m * m, got: c.len() });
        }
        Self::new(
            DMatrix::from_row_slice(d, d, a),
            DMatrix::from_row_slice(d, m, b),
            DMatrix::from_row_slice(m, m, c),
        )
    }

    /// `f(x, ξ) = ‖x‖² − ‖ξ‖²`.
    pub fn isotropic(d: usize, m: usize) -> Self {
        Self::new(DMatrix::identity(d, d), DMatrix::zeros(d, m), -DMatrix::identity(m, m))
            .expect("identity blocks are valid")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// `Bᵀx`, the sample-linear coefficient at a fixed decision.
    pub fn linear_coefficient(&self, x: &[f64]) -> Vec<f64> {
        let m = self.c.nrows();
        (0..m).map(|j| (0..x.len()).map(|i| self.b[(i, j)] * x[i]).sum()).collect()
    }
}

impl CostModel for QuadraticModel {
    fn decision_dim(&self) -> usize {
        self.a.nrows()
    }

    fn sample_dim(&self) -> usize {
        self.c.nrows()
    }

    fn eval(&self, x: &[f64], xi: &[f64]) -> ModelResult<f64> {
        let xv = DVector::from_column_slice(x);
        let sv = DVector::from_column_slice(xi);
        let v = xv.dot(&(&self.a * &xv)) + xv.dot(&(&self.b * &sv)) + sv.dot(&(&self.c * &sv));
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::Overflow)
        }
    }

    fn grad_x(&self, x: &[f64], xi: &[f64], out: &mut [f64]) -> ModelResult<()> {
        let d = x.len();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row_a: f64 = (0..d).map(|k| self.a_sym[(i, k)] * x[k]).sum();
            let row_b: f64 = (0..xi.len()).map(|j| self.b[(i, j)] * xi[j]).sum();
            *o = row_a + row_b;
        }
        Ok(())
    }

    fn grad_y(&self, x: &[f64], xi: &[f64], y: &[f64], out: &mut [f64]) -> ModelResult<()> {
        // ∇_y f(x, ξ − y) = −Bᵀx − (C + Cᵀ)(ξ − y)
        let m = xi.len();
        for (j, o) in out.iter_mut().enumerate().take(m) {
            let bx: f64 = (0..x.len()).map(|i| self.b[(i, j)] * x[i]).sum();
            let cs: f64 = (0..m).map(|l| self.c_sym[(j, l)] * (xi[l] - y[l])).sum();
            *o = -bx - cs;
        }
        Ok(())
    }

    fn curvature_y(&self, _x: &[f64], dir: &[f64]) -> Option<f64> {
        let m = dir.len();
        let mut acc = 0.0;
        for j in 0..m {
            if dir[j] == 0.0 {
                continue;
            }
            let row: f64 = (0..m).map(|l| self.c_sym[(j, l)] * dir[l]).sum();
            acc += dir[j] * row;
        }
        Some(acc)
    }
}

/// Two-asset portfolio with a log barrier:
/// `f(x, ξ) = −ξ₁x − ξ₂(1 − x) − ρ(log x + log(1 − x)) − ξᵀξ`.
#[derive(Debug, Clone, Copy)]
pub struct PortfolioModel {
    rho: f64,
}

impl PortfolioModel {
    /// Distance from the barrier boundary that projected iterates keep.
    pub const CLAMP: f64 = 1e-6;

    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho = {rho} must be positive")));
        }
        Ok(PortfolioModel { rho })
    }

    fn check(&self, x: &[f64]) -> ModelResult<f64> {
        let w = x[0];
        if w > 0.0 && w < 1.0 {
            Ok(w)
        } else {
            Err(ModelError::Domain { x: x.to_vec(), domain: "0 < x < 1" })
        }
    }
}

impl CostModel for PortfolioModel {
    fn decision_dim(&self) -> usize {
        1
    }

    fn sample_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64], xi: &[f64]) -> ModelResult<f64> {
        let w = self.check(x)?;
        let v = -xi[0] * w - xi[1] * (1.0 - w) - self.rho * (w.ln() + (1.0 - w).ln()) - dot(xi, xi);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::Overflow)
        }
    }

    fn grad_x(&self, x: &[f64], xi: &[f64], out: &mut [f64]) -> ModelResult<()> {
        let w = self.check(x)?;
        out[0] = -xi[0] + xi[1] - self.rho * (1.0 / w - 1.0 / (1.0 - w));
        Ok(())
    }

    fn grad_y(&self, x: &[f64], xi: &[f64], y: &[f64], out: &mut [f64]) -> ModelResult<()> {
        let w = self.check(x)?;
        out[0] = w + 2.0 * (xi[0] - y[0]);
        out[1] = 1.0 - w + 2.0 * (xi[1] - y[1]);
        Ok(())
    }

    fn curvature_y(&self, _x: &[f64], dir: &[f64]) -> Option<f64> {
        Some(-2.0 * dot(dir, dir))
    }

    fn project_decision(&self, x: &mut [f64]) {
        x[0] = x[0].clamp(Self::CLAMP, 1.0 - Self::CLAMP);
    }
}

type EvalFn = dyn Fn(&[f64], &[f64]) -> ModelResult<f64> + Send + Sync;
type GradXFn = dyn Fn(&[f64], &[f64], &mut [f64]) -> ModelResult<()> + Send + Sync;
type GradYFn = dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) -> ModelResult<()> + Send + Sync;

/// A user-supplied cost model built from closures.
pub struct FnModel {
    d: usize,
    m: usize,
    eval: Box<EvalFn>,
    grad_x: Box<GradXFn>,
    grad_y: Box<GradYFn>,
}

impl FnModel {
    pub fn new(
        d: usize,
        m: usize,
        eval: impl Fn(&[f64], &[f64]) -> ModelResult<f64> + Send + Sync + 'static,
        grad_x: impl Fn(&[f64], &[f64], &mut [f64]) -> ModelResult<()> + Send + Sync + 'static,
        grad_y: impl Fn(&[f64], &[f64], &[f64], &mut [f64]) -> ModelResult<()> + Send + Sync + 'static,
    ) -> Self {
        FnModel { d, m, eval: Box::new(eval), grad_x: Box::new(grad_x), grad_y: Box::new(grad_y) }
    }
}

impl fmt::Debug for FnModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnModel").field("d", &self.d).field("m", &self.m).finish_non_exhaustive()
    }
}

impl CostModel for FnModel {
    fn decision_dim(&self) -> usize {
        self.d
    }
    fn sample_dim(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], xi: &[f64]) -> ModelResult<f64> {
        (self.eval)(x, xi)
    }
    fn grad_x(&self, x: &[f64], xi: &[f64], out: &mut [f64]) -> ModelResult<()> {
        (self.grad_x)(x, xi, out)
    }
    fn grad_y(&self, x: &[f64], xi: &[f64], y: &[f64], out: &mut [f64]) -> ModelResult<()> {
        (self.grad_y)(x, xi, y, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut p = at.to_vec();
                let mut q = at.to_vec();
                p[i] += h;
                q[i] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0)
    }

    fn check_gradients(model: &dyn CostModel, rng: &mut ChaCha8Rng, x_range: (f64, f64)) {
        let (d, m) = (model.decision_dim(), model.sample_dim());
        for _ in 0..120 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(x_range.0..x_range.1)).collect();
            let xi: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();

            let mut gx = vec![0.0; d];
            model.grad_x(&x, &xi, &mut gx).unwrap();
            let fd = central_diff(|p| model.eval(p, &xi).unwrap(), &x, 1e-6);
            for (a, b) in gx.iter().zip(&fd) {
                assert!(close(*a, *b), "grad_x {a} vs fd {b}");
            }

            let mut gy = vec![0.0; m];
            model.grad_y(&x, &xi, &y, &mut gy).unwrap();
            let fd = central_diff(
                |p| {
                    let s: Vec<f64> = xi.iter().zip(p).map(|(a, b)| a - b).collect();
                    model.eval(&x, &s).unwrap()
                },
                &y,
                1e-6,
            );
            for (a, b) in gy.iter().zip(&fd) {
                assert!(close(*a, *b), "grad_y {a} vs fd {b}");
            }

            // midpoint concavity in ξ
            let other: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mid: Vec<f64> = xi.iter().zip(&other).map(|(a, b)| 0.5 * (a + b)).collect();
            let lhs = model.eval(&x, &mid).unwrap();
            let rhs = 0.5 * (model.eval(&x, &xi).unwrap() + model.eval(&x, &other).unwrap());
            assert!(lhs >= rhs - 1e-9 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn quadratic_scalar_examples() {
        let model = QuadraticModel::from_rows(1, 1, &[1.0], &[0.0], &[-1.0]).unwrap();
        assert_eq!(model.eval(&[2.0], &[3.0]).unwrap(), -5.0);
        let mut g = [0.0];
        model.grad_y(&[0.0], &[2.0], &[0.5], &mut g).unwrap();
        assert_relative_eq!(g[0], 3.0);
    }

    #[test]
    fn isotropic_matches_study_one_cost() {
        let model = QuadraticModel::isotropic(1, 3);
        let xi = [1.0, -2.0, 0.5];
        assert_relative_eq!(model.eval(&[1.5], &xi).unwrap(), 2.25 - (1.0 + 4.0 + 0.25));
    }

    #[test]
    fn quadratic_eval_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, m) = (4, 3);
        let g: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gm = DMatrix::from_row_slice(d, d, &g);
        let hm = DMatrix::from_row_slice(m, m, &h);
        let a = gm.transpose() * &gm;
        let c = -(hm.transpose() * &hm + DMatrix::identity(m, m));
        let b = DMatrix::from_fn(d, m, |_, _| rng.random_range(-2.0..2.0));
        let model = QuadraticModel::new(a.clone(), b.clone(), c.clone()).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let xi: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut naive = 0.0;
            for i in 0..d {
                for k in 0..d {
                    naive += x[i] * a[(i, k)] * x[k];
                }
                for j in 0..m {
                    naive += x[i] * b[(i, j)] * xi[j];
                }
            }
            for j in 0..m {
                for l in 0..m {
                    naive += xi[j] * c[(j, l)] * xi[l];
                }
            }
            let v = model.eval(&x, &xi).unwrap();
            assert!((v - naive).abs() <= 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn quadratic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = QuadraticModel::from_rows(
            2,
            2,
            &[2.0, 0.5, 0.5, 1.0],
            &[1.0, -0.5, 0.3, 2.0],
            &[-1.5, 0.2, 0.2, -0.7],
        )
        .unwrap();
        check_gradients(&model, &mut rng, (-3.0, 3.0));
    }

    #[test]
    fn portfolio_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = PortfolioModel::new(0.3).unwrap();
        check_gradients(&model, &mut rng, (0.05, 0.95));
    }

    #[test]
    fn portfolio_grad_y_differs_from_published_display() {
        // The published ∇h couples both sample coordinates in each entry;
        // differentiation of f gives one coordinate per entry.
        let model = PortfolioModel::new(1.0).unwrap();
        let (x, xi, y) = ([0.3], [1.0, 2.0], [0.25, -0.5]);
        let mut g = [0.0; 2];
        model.grad_y(&x, &xi, &y, &mut g).unwrap();
        let displayed = [
            x[0] + 2.0 * (xi[0] + xi[1] - y[0] - y[1]),
            1.0 - x[0] + 2.0 * (xi[0] + xi[1] - y[0] - y[1]),
        ];
        assert_relative_eq!(g[0], 0.3 + 2.0 * 0.75);
        assert_relative_eq!(g[1], 0.7 + 2.0 * 2.5);
        assert!((g[0] - displayed[0]).abs() > 1.0);
    }

    #[test]
    fn portfolio_barrier() {
        let model = PortfolioModel::new(1.0).unwrap();
        assert_relative_eq!(model.eval(&[0.5], &[0.0, 0.0]).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert!(matches!(model.eval(&[0.0], &[0.0, 0.0]), Err(ModelError::Domain { .. })));
        assert!(matches!(model.eval(&[1.2], &[0.0, 0.0]), Err(ModelError::Domain { .. })));
        let mut x = [1.7];
        model.project_decision(&mut x);
        assert_eq!(x[0], 1.0 - PortfolioModel::CLAMP);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(QuadraticModel::from_rows(1, 1, &[1.0], &[0.0], &[1.0]).is_err());
        assert!(QuadraticModel::from_rows(1, 2, &[1.0], &[0.0, 0.0], &[-1.0, 0.5, 0.0, -1.0]).is_err());
        assert!(QuadraticModel::from_rows(1, 1, &[-1.0], &[0.0], &[-1.0]).is_err());
        assert!(QuadraticModel::from_rows(2, 1, &[1.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn tolerance_precondition() {
        assert!(Tolerances::new(1e-5, 1e-4, 5e-5, 1.0).is_ok());
        assert!(Tolerances::new(1e-5, 1e-4, 5e-5, 10.0).is_err());
        assert!(Tolerances::new(1e-4, 1e-3, 1e-5, 1.0).is_err());
    }

    #[test]
    fn closure_models_plug_in() {
        let model = FnModel::new(
            1,
            1,
            |x, xi| Ok(x[0] * x[0] - xi[0] * xi[0]),
            |x, _xi, out| {
                out[0] = 2.0 * x[0];
                Ok(())
            },
            |_x, xi, y, out| {
                out[0] = 2.0 * (xi[0] - y[0]);
                Ok(())
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        check_gradients(&model, &mut rng, (-2.0, 2.0));
    }
}
