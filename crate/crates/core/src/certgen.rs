//! Certificate generation.
//!
//! The worst-case expected cost over the Wasserstein ball is
//!
//! ```text
//! J(x) = max  (1/n) Σ_k θ_k f(x, ζ_k − z_k/θ_k)   s.t.  Σ_k ‖z_k‖₁ ≤ n·ε
//! ```
//!
//! over the stacked perturbation `z` (θ ≡ 1 and ζ = the data without a
//! cover). The feasible set is the scaled simplex whose extreme points are
//! single signed coordinates. [`generate`] alternates [`point_search`] (a
//! linear program over all extreme points, which also yields the optimality
//! gap) with away-step Frank-Wolfe over the convex hull of the vertices
//! found so far, until the gap drops below `eps1`.
//!
//! The restricted problem always contains the origin as atom 0, so `z = 0`
//! is a feasible cold start and the certificate never falls below the
//! sample average.

use std::collections::HashSet;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::model::{CostModel, SamplePoint};
use crate::par::{self, ExecPolicy};
use crate::simplex::{
    afwa_maximize, point_search, AfwaStatus, PointSearch, Sign, SimplexObjective, SimplexWeights, SparseVertex,
};
use crate::{Error, Result};

/// Weighted atoms in `ℝᵐ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

const NORMALIZATION_TOL: f64 = 1e-9;

impl DiscreteDistribution {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let d = Self::from_parts_unchecked(atoms, weights);
        if d.atoms.is_empty() {
            return Err(Error::Config("distribution needs at least one atom".into()));
        }
        if d.atoms.len() != d.weights.len() {
            return Err(Error::Dimension { expected: d.atoms.len(), got: d.weights.len() });
        }
        let m = d.atoms[0].len();
        for a in &d.atoms {
            if a.len() != m {
                return Err(Error::Dimension { expected: m, got: a.len() });
            }
            if let Some(v) = a.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(*v));
            }
        }
        if d.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("distribution weights must be finite and nonnegative".into()));
        }
        d.check_normalized()?;
        Ok(d)
    }

    /// Equal weights.
    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / atoms.len() as f64;
        let n = atoms.len();
        Self::new(atoms, vec![w; n])
    }

    /// Skips validation; [`check_normalized`](Self::check_normalized) can
    /// be called later.
    pub fn from_parts_unchecked(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        DiscreteDistribution { atoms, weights }
    }

    pub fn check_normalized(&self) -> Result<()> {
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Unnormalized(s));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms.first().map_or(0, Vec::len)
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i]
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ wᵢ g(atomᵢ)`.
    pub fn expectation<E>(&self, mut g: impl FnMut(&[f64]) -> std::result::Result<f64, E>) -> std::result::Result<f64, E> {
        let mut acc = 0.0;
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            acc += w * g(a)?;
        }
        Ok(acc)
    }
}

/// The streamed samples seen so far, in arrival order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataWindow {
    m: usize,
    points: Vec<SamplePoint>,
}

impl DataWindow {
    pub fn new(m: usize) -> Self {
        DataWindow { m, points: Vec::new() }
    }

    pub fn push(&mut self, point: SamplePoint) -> Result<()> {
        if point.values.len() != self.m {
            return Err(Error::Dimension { expected: self.m, got: point.values.len() });
        }
        if point.arrival_index != self.points.len() + 1 {
            return Err(Error::Stream(format!(
                "sample arrived as #{} but the window holds {} points",
                point.arrival_index,
                self.points.len()
            )));
        }
        self.points.push(point);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn points(&self) -> &[SamplePoint] {
        &self.points
    }

    pub fn empirical(&self) -> Result<DiscreteDistribution> {
        DiscreteDistribution::uniform(self.points.iter().map(|p| p.values.clone()).collect())
    }
}

/// Atoms `ζ_k` with multiplicities `θ_k` summing to the data count `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    m: usize,
    atoms: Vec<f64>,
    theta: Vec<f64>,
    n_total: f64,
    weighted: bool,
}

impl Support {
    /// Every data point with weight 1.
    pub fn empirical(window: &DataWindow) -> Result<Self> {
        if window.is_empty() {
            return Err(Error::Config("certificate needs at least one sample".into()));
        }
        let atoms = window.points.iter().flat_map(|p| p.values.iter().copied()).collect();
        let n = window.len();
        Ok(Support { m: window.m, atoms, theta: vec![1.0; n], n_total: n as f64, weighted: false })
    }

    /// Unit-weight support from raw points.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let m = points.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::Config("certificate needs at least one nonempty sample".into()));
        }
        let mut atoms = Vec::with_capacity(points.len() * m);
        for p in points {
            if p.len() != m {
                return Err(Error::Dimension { expected: m, got: p.len() });
            }
            atoms.extend_from_slice(p);
        }
        let n = points.len();
        Ok(Support { m, atoms, theta: vec![1.0; n], n_total: n as f64, weighted: false })
    }

    /// Cover centers with multiplicities; `n_total` is the number of data
    /// points the cover represents.
    pub fn weighted(centers: &[Vec<f64>], theta: &[f64], n_total: usize) -> Result<Self> {
        if centers.len() != theta.len() {
            return Err(Error::Dimension { expected: centers.len(), got: theta.len() });
        }
        if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Cover(format!("multiplicity {t} must be positive")));
        }
        let mut s = Self::from_points(centers)?;
        s.theta = theta.to_vec();
        s.n_total = n_total as f64;
        s.weighted = true;
        Ok(s)
    }

    /// Number of atoms `p`.
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k * self.m..(k + 1) * self.m]
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_total(&self) -> f64 {
        self.n_total
    }

    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    /// Displacement of atom `k` for a stacked perturbation `z`.
    fn displacement(&self, k: usize, z: &[f64], out: &mut [f64]) {
        let t = self.theta[k];
        for (o, v) in out.iter_mut().zip(&z[k * self.m..(k + 1) * self.m]) {
            *o = if self.weighted { v / t } else { *v };
        }
    }

    fn shifted(&self, k: usize, y: &[f64], out: &mut [f64]) {
        for ((o, a), v) in out.iter_mut().zip(self.atom(k)).zip(y) {
            *o = a - v;
        }
    }

    /// Weighted empirical measure `(1/n) Σ θ_k δ_{ζ_k}`.
    pub fn distribution(&self) -> Result<DiscreteDistribution> {
        DiscreteDistribution::new(
            (0..self.len()).map(|k| self.atom(k).to_vec()).collect(),
            self.theta.iter().map(|t| t / self.n_total).collect(),
        )
    }
}

/// Value of the certificate objective at the stacked perturbation `z`,
/// summed sequentially in atom order. Posted certificates carry exactly this
/// number, so offline checks can reproduce it bit for bit.
pub fn certificate_value(model: &dyn CostModel, x: &[f64], support: &Support, z: &[f64]) -> Result<f64> {
    let m = support.m;
    let mut y = vec![0.0; m];
    let mut s = vec![0.0; m];
    let mut acc = 0.0;
    for k in 0..support.len() {
        support.displacement(k, z, &mut y);
        support.shifted(k, &y, &mut s);
        let v = model.eval(x, &s)?;
        acc += if support.weighted { support.theta[k] * v } else { v };
    }
    Ok(acc / support.n_total)
}

/// A certificate problem at a fixed decision.
pub struct CertProblem<'a> {
    pub model: &'a dyn CostModel,
    pub x: &'a [f64],
    pub support: &'a Support,
    /// Ball radius `ε` (already inflated in cover mode).
    pub radius: f64,
    pub policy: ExecPolicy,
}

impl CertProblem<'_> {
    /// Magnitude `n·ε` of every extreme point.
    pub fn scale(&self) -> f64 {
        self.support.n_total * self.radius
    }

    pub fn dim(&self) -> usize {
        self.support.len() * self.support.m
    }

    /// `∇_y f(x, ζ_k − z_k/θ_k)` for every atom, stacked.
    pub fn perturbation_grads(&self, z: &[f64]) -> Result<Vec<f64>> {
        let m = self.support.m;
        let mut out = vec![0.0; self.dim()];
        let errors = std::sync::Mutex::new(None);
        par::fill_chunks(self.policy, &mut out, m, |k, chunk| {
            let mut y = vec![0.0; m];
            self.support.displacement(k, z, &mut y);
            if let Err(e) = self.model.grad_y(self.x, self.support.atom(k), &y, chunk) {
                errors.lock().expect("poisoned").get_or_insert(e);
            }
        });
        if let Some(e) = errors.into_inner().expect("poisoned") {
            return Err(e.into());
        }
        if let Some(v) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*v));
        }
        Ok(out)
    }

    /// The linearized problem at `z`.
    pub fn gap(&self, z: &[f64]) -> Result<PointSearch> {
        let grads = self.perturbation_grads(z)?;
        point_search(&grads, self.support.m, self.support.n_total, self.scale(), z)
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        certificate_value(self.model, self.x, self.support, z)
    }

    /// The certificate at `z = 0`.
    pub fn sample_average(&self) -> Result<f64> {
        self.value(&vec![0.0; self.dim()])
    }

    /// Atoms `ζ_k − z_k/θ_k` with weights `θ_k/n`.
    pub fn worst_case(&self, z: &[f64]) -> Result<DiscreteDistribution> {
        let m = self.support.m;
        let mut y = vec![0.0; m];
        let mut atoms = Vec::with_capacity(self.support.len());
        for k in 0..self.support.len() {
            let mut s = vec![0.0; m];
            self.support.displacement(k, z, &mut y);
            self.support.shifted(k, &y, &mut s);
            atoms.push(s);
        }
        let weights = self.support.theta.iter().map(|t| t / self.support.n_total).collect();
        DiscreteDistribution::new(atoms, weights)
    }
}

/// The candidate vertex set, in discovery order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VertexSet {
    vertices: Vec<SparseVertex>,
    /// Data count the magnitudes were built for.
    pub n_context: usize,
    #[serde(skip)]
    keys: HashSet<(usize, usize, Sign)>,
}

impl VertexSet {
    pub fn new(n_context: usize) -> Self {
        VertexSet { vertices: Vec::new(), n_context, keys: HashSet::new() }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[SparseVertex] {
        &self.vertices
    }

    pub fn contains(&self, v: &SparseVertex) -> bool {
        self.keys.contains(&v.key())
    }

    /// Returns false if a vertex with the same coordinate and sign exists.
    pub fn insert(&mut self, v: SparseVertex) -> bool {
        if !self.keys.insert(v.key()) {
            return false;
        }
        self.vertices.push(v);
        true
    }

    fn rebuild_keys(&mut self) {
        self.keys = self.vertices.iter().map(SparseVertex::key).collect();
    }

    /// Stacked perturbation `Σ γ_{i+1} v_i` (atom 0 of `gamma` is the
    /// origin).
    pub fn combine(&self, gamma: &SimplexWeights, p: usize, m: usize) -> Vec<f64> {
        let mut z = vec![0.0; p * m];
        for (v, g) in self.vertices.iter().zip(&gamma.as_slice()[1..]) {
            if *g > 0.0 {
                z[v.index(m)] += g * v.entry();
            }
        }
        z
    }
}

/// Restricted-problem state that can seed a later [`generate`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub vertices: VertexSet,
    /// Weights over `[origin, v_1, …, v_T]`.
    pub gamma: SimplexWeights,
}

impl WarmStart {
    pub fn cold(n: usize) -> Self {
        WarmStart { vertices: VertexSet::new(n), gamma: SimplexWeights::vertex(1, 0) }
    }
}

/// Carry a vertex set to a larger data window. Each vertex keeps its
/// coordinate and sign (the nearest extreme point of the new simplex) and
/// takes the new magnitude; the weights are unchanged, so new atoms start
/// unperturbed.
pub fn adapt(old: &WarmStart, new_n: usize, new_scale: f64) -> WarmStart {
    let mut vertices = old.vertices.clone();
    for v in &mut vertices.vertices {
        v.magnitude = new_scale;
    }
    vertices.n_context = new_n;
    vertices.rebuild_keys();
    WarmStart { vertices, gamma: old.gamma.clone() }
}

/// One point search at an adapted warm start. If the gap is already within
/// `eps1`, the adapted value is a valid certificate for the new window and
/// no restricted solve is needed.
pub fn revalidate(problem: &CertProblem<'_>, warm: &WarmStart, eps1: f64) -> Result<(bool, f64)> {
    let z = warm.vertices.combine(&warm.gamma, problem.support.len(), problem.support.m);
    let ps = problem.gap(&z)?;
    Ok((ps.eta <= eps1, ps.eta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertConfig {
    pub eps1: f64,
    /// Restricted problems are solved to `cp_gap_factor · eps1`.
    pub cp_gap_factor: f64,
    pub max_afwa_iters: usize,
    /// Safety valve on (LP, CP) rounds within one call.
    pub max_rounds: usize,
    pub policy: ExecPolicy,
}

impl CertConfig {
    pub fn new(eps1: f64) -> Self {
        CertConfig {
            eps1,
            cp_gap_factor: 0.5,
            max_afwa_iters: crate::simplex::DEFAULT_MAX_ITERS,
            max_rounds: 100_000,
            policy: ExecPolicy::default(),
        }
    }
}

/// Work reported to the caller between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tick {
    Lp,
    Cp { iters: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub lp_calls: usize,
    pub cp_calls: usize,
    pub afwa_iters: usize,
    pub away_steps: usize,
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        self.lp_calls += o.lp_calls;
        self.cp_calls += o.cp_calls;
        self.afwa_iters += o.afwa_iters;
        self.away_steps += o.away_steps;
    }
}

#[derive(Debug, Clone)]
pub struct CertificateResult {
    pub j_eps1: f64,
    /// Gap of the final point search.
    pub eta: f64,
    /// Stacked perturbation in simplex coordinates (`z_k = θ_k y_k`).
    pub z: Vec<f64>,
    pub worst_case: DiscreteDistribution,
    pub warm: WarmStart,
    pub radius: f64,
    /// Decision the value was computed at.
    pub x: Vec<f64>,
    pub counters: Counters,
}

impl CertificateResult {
    /// `(1/n) Σ ‖z_k‖₁`, at most the radius.
    pub fn budget(&self, n_total: f64) -> f64 {
        self.z.iter().map(|v| v.abs()).sum::<f64>() / n_total
    }
}

#[derive(Debug, Clone)]
pub enum Generation {
    Complete(CertificateResult),
    /// Stopped by the caller between rounds; the partial state can be
    /// adapted and resumed.
    Interrupted { warm: WarmStart, counters: Counters },
}

impl Generation {
    pub fn complete(self) -> Option<CertificateResult> {
        match self {
            Generation::Complete(c) => Some(c),
            Generation::Interrupted { .. } => None,
        }
    }
}

/// The restricted problem over `conv({0} ∪ I)` in barycentric coordinates.
struct Restricted<'p, 'a> {
    problem: &'p CertProblem<'a>,
    vertices: &'p [SparseVertex],
    /// Atoms touched by any vertex, and the slot of each vertex's atom.
    touched: Vec<usize>,
    slot: Vec<usize>,
    base_terms: Vec<f64>,
    base_total: f64,
    zt: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    g: Vec<f64>,
}

impl<'p, 'a> Restricted<'p, 'a> {
    fn new(problem: &'p CertProblem<'a>, vertices: &'p [SparseVertex], base_terms_all: &[f64], base_total: f64) -> Self {
        let mut touched: Vec<usize> = vertices.iter().map(|v| v.k).collect();
        touched.sort_unstable();
        touched.dedup();
        let slot = vertices.iter().map(|v| touched.binary_search(&v.k).expect("present")).collect();
        let base_terms = touched.iter().map(|&k| base_terms_all[k]).collect();
        let m = problem.support.m;
        let len = touched.len() * m;
        Restricted {
            problem,
            vertices,
            touched,
            slot,
            base_terms,
            base_total,
            zt: vec![0.0; len],
            y: vec![0.0; m],
            s: vec![0.0; m],
            g: vec![0.0; len],
        }
    }

    fn load(&mut self, gamma: &[f64]) {
        let m = self.problem.support.m;
        self.zt.fill(0.0);
        for (i, v) in self.vertices.iter().enumerate() {
            let w = gamma[i + 1];
            if w != 0.0 {
                self.zt[self.slot[i] * m + v.j] += w * v.entry();
            }
        }
    }
}

impl SimplexObjective for Restricted<'_, '_> {
    fn dim(&self) -> usize {
        self.vertices.len() + 1
    }

    fn evaluate(&mut self, gamma: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.load(gamma);
        let sup = self.problem.support;
        let m = sup.m;
        let mut delta = 0.0;
        for (t, &k) in self.touched.iter().enumerate() {
            let theta = sup.theta[k];
            let zk = &self.zt[t * m..(t + 1) * m];
            for (y, v) in self.y.iter_mut().zip(zk) {
                *y = if sup.weighted { v / theta } else { *v };
            }
            sup.shifted(k, &self.y, &mut self.s);
            let v = self.problem.model.eval(self.problem.x, &self.s)?;
            delta += theta * v - self.base_terms[t];
            self.problem.model.grad_y(self.problem.x, sup.atom(k), &self.y, &mut self.g[t * m..(t + 1) * m])?;
        }
        let n = sup.n_total;
        grad[0] = 0.0;
        for (i, v) in self.vertices.iter().enumerate() {
            grad[i + 1] = self.g[self.slot[i] * m + v.j] * v.entry() / n;
        }
        Ok((self.base_total + delta) / n)
    }

    fn curvature(&mut self, _gamma: &[f64], dir: &[f64]) -> Option<f64> {
        self.load(dir);
        let sup = self.problem.support;
        let m = sup.m;
        let mut acc = 0.0;
        for (t, &k) in self.touched.iter().enumerate() {
            let dz = &self.zt[t * m..(t + 1) * m];
            if dz.iter().all(|v| *v == 0.0) {
                continue;
            }
            acc += self.problem.model.curvature_y(self.problem.x, dz)? / sup.theta[k];
        }
        Some(acc / sup.n_total)
    }
}

/// Certificate generation, optionally warm-started from an adapted vertex
/// set. `poll` is called after every LP and CP round with the work done; a
/// `Break` stops the call and returns the partial state.
pub fn generate(
    problem: &CertProblem<'_>,
    cfg: &CertConfig,
    warm: Option<WarmStart>,
    poll: &mut dyn FnMut(Tick) -> ControlFlow<()>,
) -> Result<Generation> {
    let sup = problem.support;
    let (p, m) = (sup.len(), sup.m);
    let n_context = sup.n_total.round() as usize;
    if !(problem.radius >= 0.0 && problem.radius.is_finite()) {
        return Err(Error::Config(format!("radius {} must be finite and nonnegative", problem.radius)));
    }
    if !(cfg.eps1 > 0.0) {
        return Err(Error::Config(format!("eps1 = {} must be positive", cfg.eps1)));
    }
    let mut counters = Counters::default();

    if problem.radius == 0.0 {
        let z = vec![0.0; p * m];
        let j = problem.value(&z)?;
        return Ok(Generation::Complete(CertificateResult {
            j_eps1: j,
            eta: 0.0,
            worst_case: problem.worst_case(&z)?,
            z,
            warm: WarmStart::cold(n_context),
            radius: 0.0,
            x: problem.x.to_vec(),
            counters,
        }));
    }

    let scale = problem.scale();
    let mut state = warm.unwrap_or_else(|| WarmStart::cold(n_context));
    if state.gamma.len() != state.vertices.len() + 1 {
        return Err(Error::Dimension { expected: state.vertices.len() + 1, got: state.gamma.len() });
    }
    for v in state.vertices.vertices() {
        if v.k >= p || v.j >= m {
            return Err(Error::Config(format!("vertex ({}, {}) outside a {p}×{m} problem", v.k, v.j)));
        }
        if v.magnitude != scale {
            return Err(Error::Config(format!("stale vertex magnitude {} (scale is {scale})", v.magnitude)));
        }
    }

    // per-atom terms at z = 0, shared by every restricted solve
    let base_terms: Vec<f64> = {
        let vals = par::map_indexed(problem.policy, p, |k| problem.model.eval(problem.x, sup.atom(k)));
        let mut out = Vec::with_capacity(p);
        for (k, v) in vals.into_iter().enumerate() {
            out.push(sup.theta[k] * v?);
        }
        out
    };
    let base_total: f64 = base_terms.iter().sum();

    // a warm start below the sample average restarts from the origin
    if !state.vertices.is_empty() {
        let mut grad = vec![0.0; state.gamma.len()];
        let mut r = Restricted::new(problem, state.vertices.vertices(), &base_terms, base_total);
        let warm_value = r.evaluate(state.gamma.as_slice(), &mut grad)?;
        if warm_value < base_total / sup.n_total {
            state.gamma = SimplexWeights::vertex(state.gamma.len(), 0);
        }
    }

    let full = 2 * m * p;
    let mut eps_cp = cfg.cp_gap_factor * cfg.eps1;
    let mut last_cp_converged = false;
    for round in 0..cfg.max_rounds {
        let z = state.vertices.combine(&state.gamma, p, m);
        let ps = problem.gap(&z)?;
        counters.lp_calls += 1;
        log::debug!("round {round}: gap {:e} over {} vertices", ps.eta, state.vertices.len());
        if ps.eta <= cfg.eps1 {
            let j = problem.value(&z)?;
            let _ = poll(Tick::Lp);
            return Ok(Generation::Complete(CertificateResult {
                j_eps1: j,
                eta: ps.eta,
                worst_case: problem.worst_case(&z)?,
                z,
                warm: state,
                radius: problem.radius,
                x: problem.x.to_vec(),
                counters,
            }));
        }

        let mut added = 0;
        for v in &ps.vertices {
            if state.vertices.insert(*v) {
                added += 1;
            }
        }
        if added == 0 {
            if last_cp_converged {
                // the restricted gap bounds the full gap once every argmax
                // vertex is present; a violation means rounding, so tighten
                log::debug!("point search found no new vertex at gap {}; tightening restricted solve", ps.eta);
                eps_cp = (eps_cp * 0.1).max(f64::EPSILON);
            }
        } else if last_cp_converged && ps.vertices.iter().any(|v| state.vertices.vertices()[..state.vertices.len() - added].contains(v)) {
            return Err(Error::NotConverged("point search returned an explored vertex after a converged restricted solve".into()));
        }
        state.gamma.extend_zeros(added);
        debug_assert!(state.vertices.len() <= full);
        if poll(Tick::Lp).is_break() {
            return Ok(Generation::Interrupted { warm: state, counters });
        }

        let mut obj = Restricted::new(problem, state.vertices.vertices(), &base_terms, base_total);
        let res = afwa_maximize(&mut obj, eps_cp, state.gamma.clone(), cfg.max_afwa_iters)?;
        counters.cp_calls += 1;
        counters.afwa_iters += res.iters;
        counters.away_steps += res.away_steps;
        last_cp_converged = res.status == AfwaStatus::Converged;
        if !last_cp_converged {
            log::warn!("restricted solve stopped after {} iterations with gap {:?}", res.iters, res.gaps.last());
        }
        state.gamma = res.weights;
        if poll(Tick::Cp { iters: res.iters }).is_break() {
            return Ok(Generation::Interrupted { warm: state, counters });
        }
    }
    Err(Error::NotConverged(format!("certificate gap above {} after {} rounds", cfg.eps1, cfg.max_rounds)))
}

/// [`generate`] without interruption.
pub fn generate_blocking(problem: &CertProblem<'_>, cfg: &CertConfig, warm: Option<WarmStart>) -> Result<CertificateResult> {
    match generate(problem, cfg, warm, &mut |_| ControlFlow::Continue(()))? {
        Generation::Complete(c) => Ok(c),
        Generation::Interrupted { .. } => unreachable!("never interrupted"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuadraticModel;
    use approx::assert_relative_eq;

    fn window(points: &[&[f64]]) -> DataWindow {
        let mut w = DataWindow::new(points[0].len());
        for (i, p) in points.iter().enumerate() {
            w.push(SamplePoint::new(p.to_vec(), i + 1).unwrap()).unwrap();
        }
        w
    }

    fn solve(model: &dyn CostModel, x: &[f64], sup: &Support, radius: f64, eps1: f64) -> CertificateResult {
        let problem = CertProblem { model, x, support: sup, radius, policy: ExecPolicy::Sequential };
        generate_blocking(&problem, &CertConfig::new(eps1), None).unwrap()
    }

    #[test]
    fn single_point_spends_budget() {
        let model = QuadraticModel::isotropic(1, 1);
        let sup = Support::empirical(&window(&[&[2.0]])).unwrap();
        let c = solve(&model, &[0.0], &sup, 0.5, 1e-9);
        assert_relative_eq!(c.j_eps1, -2.25, epsilon = 1e-9);
        assert_relative_eq!(c.worst_case.atom(0)[0], 1.5, epsilon = 1e-9);
    }

    #[test]
    fn zero_radius_is_sample_average() {
        let model = QuadraticModel::isotropic(1, 2);
        let sup = Support::empirical(&window(&[&[1.0, 2.0], &[0.0, -1.0]])).unwrap();
        let c = solve(&model, &[0.5], &sup, 0.0, 1e-9);
        assert_eq!(c.j_eps1, 0.25 - 0.5 * (5.0 + 1.0));
        assert!(c.z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn budget_goes_to_larger_atom() {
        let model = QuadraticModel::isotropic(1, 1);
        let sup = Support::empirical(&window(&[&[1.0], &[3.0]])).unwrap();
        let c = solve(&model, &[0.0], &sup, 0.5, 1e-9);
        assert_relative_eq!(c.j_eps1, -2.5, epsilon = 1e-8);
        assert_relative_eq!(c.worst_case.atom(1)[0], 2.0, epsilon = 1e-6);
        assert!(c.budget(2.0) <= 0.5 + 1e-9);
    }

    #[test]
    fn unit_weight_cover_matches_plain_problem() {
        let model = QuadraticModel::isotropic(1, 2);
        let pts = [vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.2]];
        let plain = Support::from_points(&pts).unwrap();
        let weighted = Support::weighted(&pts, &[1.0, 1.0, 1.0], 3).unwrap();
        let a = solve(&model, &[0.3], &plain, 0.7, 1e-10);
        let b = solve(&model, &[0.3], &weighted, 0.7, 1e-10);
        assert_relative_eq!(a.j_eps1, b.j_eps1, epsilon = 1e-9);
    }

    #[test]
    fn single_heavy_center_is_single_atom_problem() {
        let model = QuadraticModel::isotropic(1, 2);
        let one = Support::from_points(&[vec![1.5, -0.5]]).unwrap();
        let heavy = Support::weighted(&[vec![1.5, -0.5]], &[4.0], 4).unwrap();
        let a = solve(&model, &[0.0], &one, 0.8, 1e-10);
        let b = solve(&model, &[0.0], &heavy, 0.8, 1e-10);
        assert_relative_eq!(a.j_eps1, b.j_eps1, epsilon = 1e-9);
        assert_relative_eq!(a.worst_case.atom(0)[0], b.worst_case.atom(0)[0], epsilon = 1e-6);
    }

    #[test]
    fn adapt_keeps_coordinates() {
        let mut set = VertexSet::new(1);
        set.insert(SparseVertex { k: 0, j: 1, sign: Sign::Minus, magnitude: 0.9 });
        let warm = WarmStart { vertices: set, gamma: SimplexWeights::new(vec![0.25, 0.75]).unwrap() };
        let a = adapt(&warm, 2, 1.4);
        let v = a.vertices.vertices()[0];
        assert_eq!((v.k, v.j, v.sign, v.magnitude), (0, 1, Sign::Minus, 1.4));
        assert_eq!(a.gamma, warm.gamma);
        assert_eq!(a.vertices.n_context, 2);
        let empty = adapt(&WarmStart::cold(1), 2, 1.0);
        assert!(empty.vertices.is_empty());
        assert!(empty.vertices.combine(&empty.gamma, 2, 3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adapted_value_adds_new_unperturbed_term() {
        let model = QuadraticModel::isotropic(1, 2);
        let old = Support::from_points(&[vec![2.0, -1.0], vec![0.5, 0.0]]).unwrap();
        let c = solve(&model, &[0.0], &old, 0.4, 1e-10);
        let new_pts = [vec![2.0, -1.0], vec![0.5, 0.0], vec![1.0, 1.0]];
        let new = Support::from_points(&new_pts).unwrap();
        let (r_old, r_new) = (0.4, 0.35);
        let warm = adapt(&c.warm, 3, 3.0 * r_new);
        let z_old = c.z.clone();
        let z_new = warm.vertices.combine(&warm.gamma, 3, 2);
        let ratio = 3.0 * r_new / (2.0 * r_old);
        for (a, b) in z_old.iter().zip(&z_new) {
            assert_relative_eq!(a * ratio, *b, epsilon = 1e-12);
        }
        assert!(z_new[4..].iter().all(|v| *v == 0.0));
        let problem = CertProblem { model: &model, x: &[0.0], support: &new, radius: r_new, policy: ExecPolicy::Sequential };
        let v_new = problem.value(&z_new).unwrap();
        let old_terms: f64 = (0..2)
            .map(|k| model.eval(&[0.0], &[new_pts[k][0] - z_new[2 * k], new_pts[k][1] - z_new[2 * k + 1]]).unwrap())
            .sum();
        assert_relative_eq!(v_new, (old_terms + model.eval(&[0.0], &new_pts[2]).unwrap()) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_point_revalidates() {
        let model = QuadraticModel::isotropic(1, 1);
        let x = [0.0];
        // the whole budget sits on the atom at 3
        let old = Support::from_points(&[vec![3.0], vec![0.1]]).unwrap();
        let c = solve(&model, &x, &old, 0.5, 1e-12);
        assert!(c.eta <= 1e-12);

        // the small atom repeats and n·ε stays 1
        let new = Support::from_points(&[vec![3.0], vec![0.1], vec![0.1]]).unwrap();
        let problem = CertProblem { model: &model, x: &x, support: &new, radius: 1.0 / 3.0, policy: ExecPolicy::Sequential };
        let warm = adapt(&c.warm, 3, problem.scale());
        let (valid, eta) = revalidate(&problem, &warm, 1e-9).unwrap();
        assert!(valid, "eta = {eta}");

        // a far-out arrival forces a fresh solve
        let far = Support::from_points(&[vec![3.0], vec![0.1], vec![50.0]]).unwrap();
        let problem = CertProblem { model: &model, x: &x, support: &far, radius: 1.0 / 3.0, policy: ExecPolicy::Sequential };
        let (valid, eta) = revalidate(&problem, &warm, 1e-9).unwrap();
        assert!(!valid && eta > 1.0);
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let model = QuadraticModel::isotropic(1, 1);
        let x = [0.0];
        let old = Support::from_points(&[vec![2.0], vec![-2.0]]).unwrap();
        let c = solve(&model, &x, &old, 0.5, 1e-12);
        let new = Support::from_points(&[vec![2.0], vec![-2.0], vec![2.5]]).unwrap();
        let problem = CertProblem { model: &model, x: &x, support: &new, radius: 0.45, policy: ExecPolicy::Sequential };
        let warm = adapt(&c.warm, 3, problem.scale());
        let g = generate_blocking(&problem, &CertConfig::new(1e-10), Some(warm)).unwrap();
        let cold = generate_blocking(&problem, &CertConfig::new(1e-10), None).unwrap();
        assert_relative_eq!(g.j_eps1, cold.j_eps1, epsilon = 1e-9);
    }

    #[test]
    fn certificate_dominates_sample_average() {
        let model = QuadraticModel::from_rows(2, 2, &[1.0, 0.0, 0.0, 2.0], &[1.0, -1.0, 0.5, 0.3], &[-1.0, 0.0, 0.0, -0.5])
            .unwrap();
        let sup = Support::from_points(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![2.0, -1.0]]).unwrap();
        let x = [0.4, -0.7];
        let problem = CertProblem { model: &model, x: &x, support: &sup, radius: 0.6, policy: ExecPolicy::Sequential };
        let c = generate_blocking(&problem, &CertConfig::new(1e-8), None).unwrap();
        assert!(c.j_eps1 >= problem.sample_average().unwrap() - 1e-9);
        assert!(c.eta <= 1e-8);
        assert!(c.budget(3.0) <= 0.6 + 1e-9);
        assert_eq!(c.j_eps1, certificate_value(&model, &x, &sup, &c.z).unwrap());
    }

    #[test]
    fn interruption_returns_partial_state() {
        let model = QuadraticModel::isotropic(1, 2);
        let sup = Support::from_points(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let problem = CertProblem { model: &model, x: &[0.0], support: &sup, radius: 0.5, policy: ExecPolicy::Sequential };
        let mut ticks = 0;
        let g = generate(&problem, &CertConfig::new(1e-9), None, &mut |_| {
            ticks += 1;
            if ticks == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        match g {
            Generation::Interrupted { warm, counters } => {
                assert_eq!(counters.lp_calls, 1);
                assert_eq!(counters.cp_calls, 1);
                assert_eq!(warm.gamma.len(), warm.vertices.len() + 1);
            }
            Generation::Complete(_) => panic!("expected interruption"),
        }
    }

    #[test]
    fn stale_magnitudes_are_rejected() {
        let model = QuadraticModel::isotropic(1, 1);
        let sup = Support::from_points(&[vec![1.0]]).unwrap();
        let mut set = VertexSet::new(1);
        set.insert(SparseVertex { k: 0, j: 0, sign: Sign::Plus, magnitude: 0.3 });
        let warm = WarmStart { vertices: set, gamma: SimplexWeights::uniform(2) };
        let problem = CertProblem { model: &model, x: &[0.0], support: &sup, radius: 0.5, policy: ExecPolicy::Sequential };
        assert!(generate_blocking(&problem, &CertConfig::new(1e-9), Some(warm)).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(DiscreteDistribution::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![vec![f64::NAN]], vec![1.0]).is_err());
        assert!(DiscreteDistribution::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        let d = DiscreteDistribution::uniform(vec![vec![0.0], vec![2.0]]).unwrap();
        assert_relative_eq!(d.expectation(|a| Ok::<_, ()>(a[0])).unwrap(), 1.0);
    }

    #[test]
    fn window_bookkeeping() {
        let mut w = DataWindow::new(2);
        assert!(w.push(SamplePoint::new(vec![0.0, 0.0], 2).unwrap()).is_err());
        assert!(w.push(SamplePoint::new(vec![0.0], 1).unwrap()).is_err());
        w.push(SamplePoint::new(vec![0.0, 1.0], 1).unwrap()).unwrap();
        assert_eq!(w.len(), 1);
    }
}
