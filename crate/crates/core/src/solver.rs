//! Exact minimisation of the piecewise-linear convex objectives
//!
//! ```text
//! f(b) = Σᵢ aᵢ |yᵢ − zᵢᵀb| + cᵀb + Σₖ γₖ |bₖ|
//! ```
//!
//! that appear at every step of the grid estimator.
//!
//! The objective is the linear program with split residuals and split
//! coefficients. Instead of carrying a tableau with `2n + 2d` columns the
//! solver walks the vertices of the arrangement of hyperplanes
//! `{yᵢ = zᵢᵀb}` (one per observation with `aᵢ > 0`) and `{bₖ = 0}` (one per
//! coordinate with finite `γₖ`). A vertex is described by a basis of `d`
//! hyperplanes. From a vertex the `2d` edge directions are the signed
//! columns of the inverse basis matrix; an improving edge is chosen by
//! Bland's rule and followed by an exact line search across the breakpoints
//! of `f` restricted to that edge. Each move is a sequence of primal simplex
//! pivots on the split formulation, so the iterate is always a basic
//! solution and terminates at an exact minimiser.
//!
//! Pivot selection is deterministic:
//!
//! * hyperplanes are indexed observations first (in input order), then
//!   coordinates (in column order);
//! * the leaving hyperplane is the one with the smallest index whose edge has
//!   negative slope, trying the `+` edge before the `−` edge;
//! * the entering hyperplane is the breakpoint at which the slope along the
//!   edge turns non-negative, ties in the step length broken by smallest index.
//!
//! Coordinates with `γₖ = ∞` are deleted before solving and reinserted as
//! exact zeros; observations with `aᵢ = 0` contribute nothing and are dropped.
//! Coordinates whose hyperplane is basic at the optimum are returned as exact
//! zeros, which is how penalised coefficients are set to zero.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on `‖b‖∞`. Minimisers outside of it are reported as unbounded.
pub const DEFAULT_BOX_BOUND: f64 = 1e6;

/// Relative tolerance under which a residual counts as zero.
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;

const PIVOT_RESIDUAL_TOLERANCE: f64 = 1e-10;
const SLOPE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("objective is unbounded below or its minimiser leaves the box ‖b‖∞ ≤ {bound:e}")]
    UnboundedObjective { bound: f64 },

    #[error("coordinate {coordinate} has an all-zero design column and a dominating linear term")]
    DegenerateDesign { coordinate: usize },

    #[error("instance too large for vertex enumeration (n = {n}, d = {d})")]
    InstanceTooLarge { n: usize, d: usize },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("basis matrix became singular")]
    SingularBasis,

    #[error("no convergence after {0} pivots")]
    IterationLimit(usize),
}

/// One grid-step objective: absolute-residual weights, a linear term and
/// per-coordinate L1 weights (`∞` pins a coordinate to zero, `0` leaves it
/// unpenalised).
#[derive(Debug, Clone, PartialEq)]
pub struct PwlProblem {
    responses: Vec<f64>,
    design: DMatrix<f64>,
    abs_weights: Vec<f64>,
    linear_term: Vec<f64>,
    l1_weights: Vec<f64>,
    box_bound: f64,
}

impl PwlProblem {
    pub fn new(
        responses: Vec<f64>,
        design: DMatrix<f64>,
        abs_weights: Vec<f64>,
        linear_term: Vec<f64>,
        l1_weights: Vec<f64>,
    ) -> Result<Self, SolverError> {
        let (n, d) = design.shape();
        let invalid = |msg: String| Err(SolverError::InvalidProblem(msg));
        if n == 0 || d == 0 {
            return invalid(format!("empty design ({n} x {d})"));
        }
        if responses.len() != n || abs_weights.len() != n {
            return invalid(format!(
                "{} responses and {} weights for {n} design rows",
                responses.len(),
                abs_weights.len()
            ));
        }
        if linear_term.len() != d || l1_weights.len() != d {
            return invalid(format!(
                "linear term of length {} and {} l1 weights for {d} columns",
                linear_term.len(),
                l1_weights.len()
            ));
        }
        if !design.iter().all(|v| v.is_finite()) || !responses.iter().all(|v| v.is_finite()) {
            return invalid("non-finite design entry or response".into());
        }
        if !abs_weights.iter().all(|&a| a.is_finite() && a >= 0.0) {
            return invalid("absolute weights must be finite and non-negative".into());
        }
        if !linear_term.iter().all(|v| v.is_finite()) {
            return invalid("non-finite linear term".into());
        }
        if !l1_weights.iter().all(|&g| g >= 0.0) {
            return invalid("l1 weights must lie in [0, ∞]".into());
        }
        Ok(Self {
            responses,
            design,
            abs_weights,
            linear_term,
            l1_weights,
            box_bound: DEFAULT_BOX_BOUND,
        })
    }

    /// The problem `min Σ wᵢ ρ_τ(yᵢ − zᵢᵀb)`, scaled by two so that it reads
    /// `Σ wᵢ|yᵢ − zᵢᵀb| − (2τ − 1) Σ wᵢ zᵢᵀb` up to a constant.
    pub fn weighted_quantile(
        responses: Vec<f64>,
        design: DMatrix<f64>,
        weights: Vec<f64>,
        tau: f64,
        l1_weights: Vec<f64>,
    ) -> Result<Self, SolverError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(SolverError::InvalidProblem(format!(
                "tau = {tau} outside (0, 1)"
            )));
        }
        if weights.len() != design.nrows() {
            return Err(SolverError::InvalidProblem(
                "one weight per row required".into(),
            ));
        }
        let d = design.ncols();
        let mut linear = vec![0.0; d];
        for (i, &w) in weights.iter().enumerate() {
            for (k, c) in linear.iter_mut().enumerate() {
                *c -= (2.0 * tau - 1.0) * w * design[(i, k)];
            }
        }
        Self::new(responses, design, weights, linear, l1_weights)
    }

    pub fn with_box_bound(mut self, bound: f64) -> Result<Self, SolverError> {
        if !(bound > 0.0) {
            return Err(SolverError::InvalidProblem(
                "box bound must be positive".into(),
            ));
        }
        self.box_bound = bound;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn d(&self) -> usize {
        self.design.ncols()
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn abs_weights(&self) -> &[f64] {
        &self.abs_weights
    }

    pub fn linear_term(&self) -> &[f64] {
        &self.linear_term
    }

    pub fn l1_weights(&self) -> &[f64] {
        &self.l1_weights
    }

    pub fn box_bound(&self) -> f64 {
        self.box_bound
    }

    fn fitted(&self, i: usize, b: &[f64]) -> f64 {
        (0..self.d()).map(|k| self.design[(i, k)] * b[k]).sum()
    }

    /// Evaluates `f(b)`; `∞` if a coordinate pinned by `γₖ = ∞` is nonzero.
    pub fn objective(&self, b: &[f64]) -> f64 {
        assert_eq!(b.len(), self.d(), "coefficient length mismatch");
        let mut total = 0.0;
        for i in 0..self.n() {
            let a = self.abs_weights[i];
            if a > 0.0 {
                total += a * (self.responses[i] - self.fitted(i, b)).abs();
            }
        }
        for k in 0..self.d() {
            total += self.linear_term[k] * b[k];
            let g = self.l1_weights[k];
            if b[k] != 0.0 && g > 0.0 {
                total += g * b[k].abs();
            }
        }
        total
    }
}

/// A coefficient vector `b`; the active set is the set of nonzero coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoefVector {
    values: Vec<f64>,
}

impl CoefVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            values: vec![0.0; d],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn active_set(&self) -> Vec<usize> {
        (0..self.values.len())
            .filter(|&k| self.values[k] != 0.0)
            .collect()
    }
}

impl std::ops::Index<usize> for CoefVector {
    type Output = f64;

    fn index(&self, k: usize) -> &f64 {
        &self.values[k]
    }
}

impl From<Vec<f64>> for CoefVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

/// A hyperplane of the arrangement, in the indexing of the original problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hyperplane {
    Observation(usize),
    Coordinate(usize),
}

/// The hyperplanes defining an optimal vertex. Can seed a neighbouring solve.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Basis(pub Vec<Hyperplane>);

#[derive(Debug, Clone)]
pub struct Solution {
    pub coef: CoefVector,
    pub objective: f64,
    pub basis: Basis,
    pub pivots: usize,
}

/// Minimises `f`. See the module documentation for the pivoting rule.
pub fn solve_pwl_l1(problem: &PwlProblem) -> Result<CoefVector, SolverError> {
    solve_from(problem, None).map(|s| s.coef)
}

/// Minimises `f` starting from the vertex spanned by a previous `basis`
/// where possible. The hint only changes the starting vertex.
pub fn solve_from(problem: &PwlProblem, hint: Option<&Basis>) -> Result<Solution, SolverError> {
    let reduced = Reduced::build(problem)?;
    let d = problem.d();
    if reduced.dim == 0 {
        let coef = CoefVector::zeros(d);
        return Ok(Solution {
            objective: problem.objective(coef.values()),
            coef,
            basis: Basis::default(),
            pivots: 0,
        });
    }
    let start = reduced.initial_basis(hint);
    let (local, basis, pivots) = reduced.pivot(start)?;

    let mut values = vec![0.0; d];
    for (p, &col) in reduced.cols.iter().enumerate() {
        values[col] = local[p];
    }
    for &r in &basis {
        if let Hyperplane::Coordinate(k) = reduced.origin[r] {
            values[k] = 0.0;
        }
    }
    if values.iter().any(|v| v.abs() > problem.box_bound) {
        return Err(SolverError::UnboundedObjective {
            bound: problem.box_bound,
        });
    }
    let coef = CoefVector::new(values);
    Ok(Solution {
        objective: problem.objective(coef.values()),
        basis: Basis(basis.iter().map(|&r| reduced.origin[r]).collect()),
        coef,
        pivots,
    })
}

/// The problem restricted to finite-weight columns and positive-weight rows,
/// with one extra row per coordinate hyperplane.
struct Reduced {
    cols: Vec<usize>,
    dim: usize,
    g: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    origin: Vec<Hyperplane>,
    c: Vec<f64>,
}

impl Reduced {
    fn build(problem: &PwlProblem) -> Result<Self, SolverError> {
        let cols: Vec<usize> = (0..problem.d())
            .filter(|&k| problem.l1_weights[k].is_finite())
            .collect();
        let dim = cols.len();
        let mut reduced = Reduced {
            dim,
            g: Vec::new(),
            y: Vec::new(),
            w: Vec::new(),
            origin: Vec::new(),
            c: cols.iter().map(|&k| problem.linear_term[k]).collect(),
            cols,
        };
        if dim == 0 {
            return Ok(reduced);
        }
        for i in 0..problem.n() {
            let a = problem.abs_weights[i];
            if a > 0.0 {
                reduced
                    .g
                    .extend(reduced.cols.iter().map(|&k| problem.design[(i, k)]));
                reduced.y.push(problem.responses[i]);
                reduced.w.push(a);
                reduced.origin.push(Hyperplane::Observation(i));
            }
        }
        let n_obs = reduced.y.len();
        for (p, &k) in reduced.cols.clone().iter().enumerate() {
            let zero_column = (0..n_obs).all(|r| reduced.g[r * dim + p] == 0.0);
            if zero_column && reduced.c[p].abs() > problem.l1_weights[k] {
                return Err(SolverError::DegenerateDesign { coordinate: k });
            }
            reduced
                .g
                .extend((0..dim).map(|q| if q == p { 1.0 } else { 0.0 }));
            reduced.y.push(0.0);
            reduced.w.push(problem.l1_weights[k]);
            reduced.origin.push(Hyperplane::Coordinate(k));
        }
        Ok(reduced)
    }

    fn rows(&self) -> usize {
        self.y.len()
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.g[r * self.dim..(r + 1) * self.dim]
    }

    fn locate(&self, h: Hyperplane) -> Option<usize> {
        match h {
            Hyperplane::Coordinate(k) => {
                let p = self.cols.iter().position(|&c| c == k)?;
                Some(self.rows() - self.dim + p)
            }
            Hyperplane::Observation(i) => self.origin[..self.rows() - self.dim]
                .binary_search(&Hyperplane::Observation(i))
                .ok(),
        }
    }

    /// Greedily picks independent hyperplanes: the hint first, then coordinates.
    fn initial_basis(&self, hint: Option<&Basis>) -> Vec<usize> {
        let d = self.dim;
        let coords = self.rows() - d..self.rows();
        let hinted = hint
            .into_iter()
            .flat_map(|b| b.0.iter())
            .filter_map(|&h| self.locate(h));
        let mut chosen = Vec::with_capacity(d);
        let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(d);
        for r in hinted.chain(coords) {
            if chosen.len() == d {
                break;
            }
            if chosen.contains(&r) {
                continue;
            }
            let row = self.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let mut v = row.to_vec();
            for q in &ortho {
                let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
            let rest = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if rest > 1e-8 * norm {
                v.iter_mut().for_each(|a| *a /= rest);
                ortho.push(v);
                chosen.push(r);
            }
        }
        debug_assert_eq!(chosen.len(), d);
        chosen
    }

    fn pivot(&self, basis: Vec<usize>) -> Result<(Vec<f64>, Vec<usize>, usize), SolverError> {
        let m = self.rows();
        let d = self.dim;
        let scale = 1.0
            + self.c.iter().fold(0.0f64, |s, v| s.max(v.abs()))
            + (0..m)
                .map(|r| self.w[r] * self.row(r).iter().fold(0.0f64, |s, v| s.max(v.abs())))
                .sum::<f64>();
        let eps = SLOPE_TOLERANCE * scale;
        let max_pivots = 50 * (m + d) + 1000;

        let mut state = PivotState::new(self, basis);
        state.refresh(self)?;
        let mut since_refresh = 0usize;
        let mut crossings: Vec<Reverse<Breakpoint>> = Vec::with_capacity(m);
        let mut crossed: Vec<usize> = Vec::with_capacity(m);
        let mut reduced_cost = vec![0.0; d];
        let mut xi = vec![0.0; d];

        let mut pivots = 0;
        loop {
            for (p, rc) in reduced_cost.iter_mut().enumerate() {
                *rc = (0..d).map(|k| state.inv[k * d + p] * state.grad[k]).sum();
            }
            // Bland: smallest hyperplane index with an improving edge.
            let mut entering: Option<(usize, f64, f64)> = None;
            for p in 0..d {
                if entering.is_some_and(|(q, _, _)| state.basis[q] < state.basis[p]) {
                    continue;
                }
                for dir in [1.0, -1.0] {
                    let slope = dir * reduced_cost[p] + self.w[state.basis[p]];
                    if slope < -eps {
                        entering = Some((p, dir, slope));
                        break;
                    }
                }
            }
            let Some((p, dir, mut slope)) = entering else {
                if since_refresh == 0 {
                    return Ok((state.b, state.basis, pivots));
                }
                state.refresh(self)?;
                since_refresh = 0;
                continue;
            };
            if pivots == max_pivots {
                return Err(SolverError::IterationLimit(max_pivots));
            }

            for (k, x) in xi.iter_mut().enumerate() {
                *x = dir * state.inv[k * d + p];
            }
            let xi_size = xi.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            crossings.clear();
            for (r, row) in self.g.chunks_exact(d).enumerate() {
                if state.in_basis[r] {
                    continue;
                }
                let v: f64 = row.iter().zip(&xi).map(|(a, b)| a * b).sum();
                state.slope_along[r] = v;
                if state.sign[r] * v > 1e-12 * state.row_size[r] * xi_size {
                    let res = state.residual[r];
                    let t = if res == 0.0 { 0.0 } else { (res / v).max(0.0) };
                    crossings.push(Reverse(Breakpoint { t, row: r }));
                }
            }

            // Only the breakpoints up to the stopping one are ever ordered.
            let mut heap = BinaryHeap::from(std::mem::take(&mut crossings));
            crossed.clear();
            let mut stop = None;
            while let Some(Reverse(bp)) = heap.pop() {
                slope += 2.0 * self.w[bp.row] * state.slope_along[bp.row].abs();
                if slope >= -eps {
                    stop = Some(bp);
                    break;
                }
                crossed.push(bp.row);
            }
            crossings = heap.into_vec();
            let Some(stop) = stop else {
                return Err(SolverError::UnboundedObjective {
                    bound: f64::INFINITY,
                });
            };
            state.step(self, p, dir, &xi, stop, &crossed);
            pivots += 1;
            since_refresh += 1;
            if since_refresh >= REFRESH_INTERVAL || !state.inv_ok {
                state.refresh(self)?;
                since_refresh = 0;
            }
        }
    }
}

const REFRESH_INTERVAL: usize = 50;

/// The current vertex with incrementally maintained residuals, signs,
/// gradient and inverse basis matrix.
struct PivotState {
    d: usize,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    row_size: Vec<f64>,
    sign: Vec<f64>,
    residual: Vec<f64>,
    slope_along: Vec<f64>,
    /// Row-major `G_B⁻¹`.
    inv: Vec<f64>,
    inv_ok: bool,
    b: Vec<f64>,
    grad: Vec<f64>,
}

impl PivotState {
    fn new(red: &Reduced, basis: Vec<usize>) -> Self {
        let (m, d) = (red.rows(), red.dim);
        let mut in_basis = vec![false; m];
        basis.iter().for_each(|&r| in_basis[r] = true);
        Self {
            d,
            basis,
            in_basis,
            row_size: (0..m)
                .map(|r| red.row(r).iter().fold(0.0f64, |s, v| s.max(v.abs())))
                .collect(),
            sign: vec![1.0; m],
            residual: vec![0.0; m],
            slope_along: vec![0.0; m],
            inv: vec![0.0; d * d],
            inv_ok: true,
            b: vec![0.0; d],
            grad: vec![0.0; d],
        }
    }

    /// Recomputes everything from the basis.
    fn refresh(&mut self, red: &Reduced) -> Result<(), SolverError> {
        let d = self.d;
        let gb = DMatrix::from_fn(d, d, |p, k| red.g[self.basis[p] * d + k]);
        let yb = DVector::from_fn(d, |p, _| red.y[self.basis[p]]);
        let lu = gb.lu();
        let b = lu.solve(&yb).ok_or(SolverError::SingularBasis)?;
        let inv = lu.try_inverse().ok_or(SolverError::SingularBasis)?;
        self.b.copy_from_slice(b.as_slice());
        for i in 0..d {
            for j in 0..d {
                self.inv[i * d + j] = inv[(i, j)];
            }
        }
        self.inv_ok = true;

        self.grad.copy_from_slice(&red.c);
        for (r, row) in red.g.chunks_exact(d).enumerate() {
            if self.in_basis[r] {
                self.residual[r] = 0.0;
                continue;
            }
            let mut fit = 0.0;
            let mut size = 0.0;
            for (a, bk) in row.iter().zip(&self.b) {
                let t = a * bk;
                fit += t;
                size += t.abs();
            }
            let res = red.y[r] - fit;
            if res.abs() > PIVOT_RESIDUAL_TOLERANCE * (1.0 + red.y[r].abs() + size) {
                self.residual[r] = res;
                self.sign[r] = res.signum();
            } else {
                self.residual[r] = 0.0;
            }
            let ws = red.w[r] * self.sign[r];
            if ws != 0.0 {
                self.grad
                    .iter_mut()
                    .zip(row)
                    .for_each(|(g, a)| *g -= ws * a);
            }
        }
        Ok(())
    }

    /// Moves along edge `(p, dir)` to breakpoint `stop`, flipping `crossed`.
    fn step(
        &mut self,
        red: &Reduced,
        p: usize,
        dir: f64,
        xi: &[f64],
        stop: Breakpoint,
        crossed: &[usize],
    ) {
        let d = self.d;
        let t = stop.t;
        let incoming = stop.row;
        let outgoing = self.basis[p];

        for (bk, x) in self.b.iter_mut().zip(xi) {
            *bk += t * x;
        }
        if t != 0.0 {
            for ((res, v), basic) in self
                .residual
                .iter_mut()
                .zip(&self.slope_along)
                .zip(&self.in_basis)
            {
                if !basic {
                    *res -= t * v;
                }
            }
        }
        for &r in crossed {
            let ws = 2.0 * red.w[r] * self.sign[r];
            self.sign[r] = -self.sign[r];
            self.grad
                .iter_mut()
                .zip(red.row(r))
                .for_each(|(g, a)| *g += ws * a);
        }
        let ws_in = red.w[incoming] * self.sign[incoming];
        self.grad
            .iter_mut()
            .zip(red.row(incoming))
            .for_each(|(g, a)| *g += ws_in * a);
        self.sign[outgoing] = -dir;
        let ws_out = red.w[outgoing] * self.sign[outgoing];
        self.grad
            .iter_mut()
            .zip(red.row(outgoing))
            .for_each(|(g, a)| *g -= ws_out * a);

        self.in_basis[outgoing] = false;
        self.residual[outgoing] = -dir * t;
        self.in_basis[incoming] = true;
        self.residual[incoming] = 0.0;
        self.basis[p] = incoming;

        // Replace row p of G_B: alpha = g_in · G_B⁻¹.
        let g_in = red.row(incoming);
        let alpha: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|k| g_in[k] * self.inv[k * d + j]).sum())
            .collect();
        let pivot = alpha[p];
        let alpha_size = alpha.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        if pivot.abs() <= 1e-9 * alpha_size {
            self.inv_ok = false;
            return;
        }
        for k in 0..d {
            let col_p = self.inv[k * d + p] / pivot;
            for j in 0..d {
                if j != p {
                    self.inv[k * d + j] -= alpha[j] * col_p;
                }
            }
            self.inv[k * d + p] = col_p;
        }
    }
}

/// A breakpoint on the current edge, ordered by step length then hyperplane index.
#[derive(Debug, Clone, Copy)]
struct Breakpoint {
    t: f64,
    row: usize,
}

impl PartialEq for Breakpoint {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Breakpoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.row.cmp(&other.row))
    }
}

fn residual_is_zero(problem: &PwlProblem, i: usize, b: &[f64]) -> (f64, bool) {
    let mut fit = 0.0;
    let mut size = 0.0;
    for k in 0..problem.d() {
        let t = problem.design[(i, k)] * b[k];
        fit += t;
        size += t.abs();
    }
    let res = problem.responses[i] - fit;
    let zero = res.abs() <= RESIDUAL_TOLERANCE * (1.0 + problem.responses[i].abs() + size);
    (res, zero)
}

/// One-sided directional derivative `f′(b; ξ)`. Residuals within
/// [`RESIDUAL_TOLERANCE`] (relative) are treated as exact zeros.
pub fn directional_derivative(problem: &PwlProblem, b: &CoefVector, xi: &[f64]) -> f64 {
    let d = problem.d();
    assert_eq!(b.len(), d, "coefficient length mismatch");
    assert_eq!(xi.len(), d, "direction length mismatch");
    let bv = b.values();
    let mut total = 0.0;
    for i in 0..problem.n() {
        let a = problem.abs_weights[i];
        if a == 0.0 {
            continue;
        }
        let zx: f64 = (0..d).map(|k| problem.design[(i, k)] * xi[k]).sum();
        let (res, zero) = residual_is_zero(problem, i, bv);
        total += if zero {
            a * zx.abs()
        } else {
            -a * res.signum() * zx
        };
    }
    for k in 0..d {
        if xi[k] == 0.0 {
            continue;
        }
        total += problem.linear_term[k] * xi[k];
        let g = problem.l1_weights[k];
        if g == 0.0 {
            continue;
        }
        total += if bv[k] != 0.0 {
            g * bv[k].signum() * xi[k]
        } else {
            g * xi[k].abs()
        };
    }
    total
}

#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub optimal: bool,
    /// Direction with the smallest normalised derivative `f′(b; ξ)/(1 + ‖ξ‖₁)`.
    pub worst_direction: Vec<f64>,
    pub worst_derivative: f64,
}

/// Checks `f′(b; ξ) ≥ −tol·(1 + ‖ξ‖₁)` along `±eₖ` (skipping pinned
/// coordinates) and along `n_random_dirs` seeded random unit directions.
pub fn check_optimality(
    problem: &PwlProblem,
    b: &CoefVector,
    tol: f64,
    n_random_dirs: usize,
    seed: u64,
) -> OptimalityReport {
    assert!(tol > 0.0, "tolerance must be positive");
    let d = problem.d();
    let free: Vec<usize> = (0..d)
        .filter(|&k| problem.l1_weights[k].is_finite())
        .collect();
    let mut directions = Vec::with_capacity(2 * free.len() + n_random_dirs);
    for &k in &free {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[k] = s;
            directions.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !free.is_empty() {
        while directions.len() < 2 * free.len() + n_random_dirs {
            let mut v = vec![0.0; d];
            for &k in &free {
                v[k] = rng.sample(StandardNormal);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
                directions.push(v);
            }
        }
    }

    let mut report = OptimalityReport {
        optimal: true,
        worst_direction: vec![0.0; d],
        worst_derivative: f64::INFINITY,
    };
    let mut worst_ratio = f64::INFINITY;
    for xi in directions {
        let l1: f64 = xi.iter().map(|v| v.abs()).sum();
        let dd = directional_derivative(problem, b, &xi);
        if dd < -tol * (1.0 + l1) {
            report.optimal = false;
        }
        let ratio = dd / (1.0 + l1);
        if ratio < worst_ratio {
            worst_ratio = ratio;
            report.worst_derivative = dd;
            report.worst_direction = xi;
        }
    }
    report
}

/// Enumerates every vertex of the hyperplane arrangement and returns the
/// best one. Among vertices within `1e-12` relative of the best objective the
/// first in lexicographic hyperplane order wins. Only for `d ≤ 3`, `n ≤ 12`.
pub fn brute_force_solve(problem: &PwlProblem) -> Result<CoefVector, SolverError> {
    let (n, d) = (problem.n(), problem.d());
    if n > 12 || d > 3 {
        return Err(SolverError::InstanceTooLarge { n, d });
    }
    let cols: Vec<usize> = (0..d)
        .filter(|&k| problem.l1_weights[k].is_finite())
        .collect();
    let dim = cols.len();
    if dim == 0 {
        return Ok(CoefVector::zeros(d));
    }
    // (row over kept columns, right-hand side, coordinate it pins)
    let mut planes: Vec<(Vec<f64>, f64, Option<usize>)> = Vec::new();
    for i in 0..n {
        planes.push((
            cols.iter().map(|&k| problem.design[(i, k)]).collect(),
            problem.responses[i],
            None,
        ));
    }
    for (p, &k) in cols.iter().enumerate() {
        planes.push((
            (0..dim).map(|q| if q == p { 1.0 } else { 0.0 }).collect(),
            0.0,
            Some(k),
        ));
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut subset: Vec<usize> = (0..dim).collect();
    loop {
        let a = DMatrix::from_fn(dim, dim, |r, c| planes[subset[r]].0[c]);
        let rhs = DVector::from_fn(dim, |r, _| planes[subset[r]].1);
        let cond_ok = a.clone().svd(false, false).singular_values;
        let smax = cond_ok.max();
        let smin = cond_ok.min();
        if smax > 0.0 && smin > 1e-10 * smax {
            if let Some(sol) = a.lu().solve(&rhs) {
                let mut values = vec![0.0; d];
                for (p, &k) in cols.iter().enumerate() {
                    values[k] = sol[p];
                }
                for &s in &subset {
                    if let Some(k) = planes[s].2 {
                        values[k] = 0.0;
                    }
                }
                if values.iter().all(|v| v.abs() <= problem.box_bound) {
                    let obj = problem.objective(&values);
                    let better = match &best {
                        None => true,
                        Some((f, _)) => obj < *f - 1e-12 * (1.0 + f.abs()),
                    };
                    if better {
                        best = Some((obj, values));
                    }
                }
            }
        }
        if !next_combination(&mut subset, planes.len()) {
            break;
        }
    }
    let (_, values) = best.ok_or(SolverError::UnboundedObjective {
        bound: problem.box_bound,
    })?;
    let coef = CoefVector::new(values);
    if !check_optimality(problem, &coef, 1e-9, 200, 0x5eed).optimal {
        return Err(SolverError::UnboundedObjective {
            bound: problem.box_bound,
        });
    }
    Ok(coef)
}

fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] < n - k + i {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Minimises `Σ wᵢ ρ_τ(yᵢ − zᵢᵀb)` through the split
/// `ρ_τ(r) = ½|r| + (τ − ½) r`.
pub fn solve_weighted_qr(
    responses: &[f64],
    design: &DMatrix<f64>,
    weights: &[f64],
    tau: f64,
) -> Result<CoefVector, SolverError> {
    let problem = PwlProblem::weighted_quantile(
        responses.to_vec(),
        design.clone(),
        weights.to_vec(),
        tau,
        vec![0.0; design.ncols()],
    )?;
    solve_pwl_l1(&problem)
}
