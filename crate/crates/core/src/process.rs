//! The sequential grid estimator.
//!
//! Row 0 of the process is a quantile regression at `τ₀ = τ_L` that ignores
//! censoring. Row `j ≥ 1` minimises
//!
//! ```text
//! (1/n) Σ δᵢ |Xᵢ − Zᵢᵀb| + (1/n) Σ Zᵢᵀb (δᵢ − 2wᵢ(j) − 2τ₀) + Σ γₖ |bₖ|
//! ```
//!
//! where `wᵢ(j) = ∫_[τ₀, τ_j) I{Xᵢ ≥ Zᵢᵀβ̂(u)} dH(u)` and `H(u) = −log(1 − u)`.
//! Because `β̂` is constant between grid points the integral is an exact sum
//! over cells.
//!
//! The sign of the linear term makes the stationarity condition the
//! estimating equation `Σ Zᵢ (δᵢ I{Xᵢ ≤ Zᵢᵀb} − wᵢ(j) − τ₀) ≈ 0`, and makes
//! the objective at `j = 0` twice the `τ₀` check loss when nothing is censored.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::PenaltyProvider;
use crate::solver::{self, Basis, CoefVector, PwlProblem, DEFAULT_BOX_BOUND};

const GRID_TOLERANCE: f64 = 1e-9;

/// `H(u) = −log(1 − u)`.
pub fn h(u: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Domain(format!("H(u) needs 0 <= u < 1, got {u}")));
    }
    Ok(-(-u).ln_1p())
}

/// `H(b) − H(a) = log((1 − a)/(1 − b))`.
pub fn h_increment(a: f64, b: f64) -> f64 {
    (-a).ln_1p() - (-b).ln_1p()
}

/// Observed triples `(Xᵢ, δᵢ, Zᵢ)`; the first design column is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    delta: Vec<bool>,
    z: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, delta: Vec<bool>, z: DMatrix<f64>) -> Result<Self> {
        let (n, d) = z.shape();
        if x.len() != n || delta.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} responses and {} indicators for {n} design rows",
                x.len(),
                delta.len()
            )));
        }
        if d == 0 || n < d {
            return Err(Error::InvalidInput(format!(
                "need n >= d >= 1, got n = {n}, d = {d}"
            )));
        }
        if !x.iter().all(|v| v.is_finite()) || !z.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "non-finite response or design entry".into(),
            ));
        }
        if (0..n).any(|i| z[(i, 0)] != 1.0) {
            return Err(Error::InvalidInput(
                "first design column must be all ones".into(),
            ));
        }
        Ok(Self { x, delta, z })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn censoring_fraction(&self) -> f64 {
        self.delta.iter().filter(|&&d| !d).count() as f64 / self.n() as f64
    }

    /// `Zᵢᵀb`.
    pub fn fitted(&self, i: usize, b: &[f64]) -> f64 {
        (0..self.d()).map(|k| self.z[(i, k)] * b[k]).sum()
    }

    /// The observations with the given indices, in that order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let z = DMatrix::from_fn(rows.len(), self.d(), |r, k| self.z[(rows[r], k)]);
        Self::new(
            rows.iter().map(|&i| self.x[i]).collect(),
            rows.iter().map(|&i| self.delta[i]).collect(),
            z,
        )
    }

    /// The design restricted to the given columns (which must include 0).
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let z = DMatrix::from_fn(self.n(), cols.len(), |i, c| self.z[(i, cols[c])]);
        Self::new(self.x.clone(), self.delta.clone(), z)
    }

    /// The same covariates with every observation marked as an event.
    pub fn uncensored(&self) -> Self {
        Self {
            x: self.x.clone(),
            delta: vec![true; self.n()],
            z: self.z.clone(),
        }
    }

    /// Writes `x,delta,z1,...,zd`.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["x".to_string(), "delta".to_string()];
        header.extend((1..=self.d()).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut record = vec![
                fmt_f64(self.x[i]),
                if self.delta[i] { "1" } else { "0" }.to_string(),
            ];
            record.extend((0..self.d()).map(|k| fmt_f64(self.z[(i, k)])));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let bad = |msg: String| Error::InvalidInput(msg);
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let d = header.len().saturating_sub(2);
        let expected: Vec<String> = ["x".to_string(), "delta".to_string()]
            .into_iter()
            .chain((1..=d).map(|k| format!("z{k}")))
            .collect();
        if d == 0
            || header
                .iter()
                .map(str::trim)
                .ne(expected.iter().map(String::as_str))
        {
            return Err(bad(format!(
                "expected header x,delta,z1,...,zd, got {:?}",
                header
            )));
        }
        let (mut x, mut delta, mut z) = (Vec::new(), Vec::new(), Vec::new());
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let field = |c: usize| -> Result<f64> {
                record[c].trim().parse::<f64>().map_err(|_| {
                    bad(format!(
                        "row {}: column {} is not a number",
                        line + 1,
                        c + 1
                    ))
                })
            };
            x.push(field(0)?);
            delta.push(match record[1].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(bad(format!(
                        "row {}: delta must be 0 or 1, got {other}",
                        line + 1
                    )))
                }
            });
            for c in 2..2 + d {
                z.push(field(c)?);
            }
        }
        let n = x.len();
        Self::new(x, delta, DMatrix::from_row_slice(n, d, &z))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|source| Error::Csv {
                path: path.into(),
                source,
            })
    }
}

/// Shortest representation that parses back to the same value.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct GridSpec {
    tau_l: f64,
    tau_u: f64,
    step: f64,
}

/// Uniform grid `τ_L = τ₀ < τ₁ < … < τ_N = τ_U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct TauGrid {
    tau_l: f64,
    tau_u: f64,
    step: f64,
    points: Vec<f64>,
}

impl TryFrom<GridSpec> for TauGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        TauGrid::new(spec.tau_l, spec.tau_u, spec.step)
    }
}

impl From<TauGrid> for GridSpec {
    fn from(grid: TauGrid) -> Self {
        GridSpec {
            tau_l: grid.tau_l,
            tau_u: grid.tau_u,
            step: grid.step,
        }
    }
}

impl TauGrid {
    /// The step must divide `τ_U − τ_L`; a single-point grid has `τ_L = τ_U`.
    pub fn new(tau_l: f64, tau_u: f64, step: f64) -> Result<Self> {
        if !(tau_l > 0.0 && tau_u < 1.0 && tau_l <= tau_u) {
            return Err(Error::Domain(format!(
                "need 0 < tau_l <= tau_u < 1, got [{tau_l}, {tau_u}]"
            )));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Domain(format!(
                "grid step must be positive, got {step}"
            )));
        }
        let cells = ((tau_u - tau_l) / step).round();
        if ((tau_l + cells * step) - tau_u).abs() > GRID_TOLERANCE.max(1e-6 * step) {
            return Err(Error::Domain(format!(
                "step {step} does not divide [{tau_l}, {tau_u}]"
            )));
        }
        let cells = cells as usize;
        let mut points: Vec<f64> = (0..=cells).map(|j| tau_l + j as f64 * step).collect();
        points[cells] = tau_u;
        Ok(Self {
            tau_l,
            tau_u,
            step,
            points,
        })
    }

    /// Parses `lo:hi:step`.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidInput(format!("grid must read lo:hi:step, got {spec:?}")))?;
        match parts[..] {
            [lo, hi, step] => Self::new(lo, hi, step),
            _ => Err(Error::InvalidInput(format!(
                "grid must read lo:hi:step, got {spec:?}"
            ))),
        }
    }

    pub fn tau_l(&self) -> f64 {
        self.tau_l
    }

    pub fn tau_u(&self) -> f64 {
        self.tau_u
    }

    /// The grid width `a_n`.
    pub fn step(&self) -> f64 {
        self.step
    }

    /// `b_n = a_n/(1 − τ_U)`.
    pub fn b_n(&self) -> f64 {
        self.step / (1.0 - self.tau_u)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the cell `[τ_j, τ_{j+1})` containing `τ` (the last point maps to itself).
    pub fn locate(&self, tau: f64) -> Result<usize> {
        if tau < self.tau_l - GRID_TOLERANCE || tau > self.tau_u + GRID_TOLERANCE || tau.is_nan() {
            return Err(Error::Domain(format!(
                "tau = {tau} outside [{}, {}]",
                self.tau_l, self.tau_u
            )));
        }
        let j = ((tau - self.tau_l) / self.step + GRID_TOLERANCE)
            .floor()
            .max(0.0) as usize;
        Ok(j.min(self.len() - 1))
    }
}

/// Row `j` is `β̂(τ_j)`; the path is constant on `[τ_j, τ_{j+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileProcess {
    grid: TauGrid,
    coefs: Vec<Vec<f64>>,
}

impl QuantileProcess {
    pub fn new(grid: TauGrid, coefs: Vec<Vec<f64>>) -> Result<Self> {
        if coefs.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "{} coefficient rows for {} grid points",
                coefs.len(),
                grid.len()
            )));
        }
        let d = coefs[0].len();
        if d == 0
            || coefs
                .iter()
                .any(|row| row.len() != d || !row.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidInput(
                "coefficient rows must be finite and of equal length".into(),
            ));
        }
        Ok(Self { grid, coefs })
    }

    pub fn grid(&self) -> &TauGrid {
        &self.grid
    }

    pub fn coefs(&self) -> &[Vec<f64>] {
        &self.coefs
    }

    pub fn d(&self) -> usize {
        self.coefs[0].len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.coefs[j]
    }

    pub fn evaluate(&self, tau: f64) -> Result<CoefVector> {
        Ok(CoefVector::new(self.coefs[self.grid.locate(tau)?].clone()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: QuantileProcess = serde_json::from_str(text)?;
        Self::new(raw.grid, raw.coefs)
    }
}

/// `wᵢ(j)`, the censoring integral accumulated over the cells before `τ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringIntegralState {
    values: Vec<f64>,
}

impl CensoringIntegralState {
    pub fn new(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Adds `I{Xᵢ ≥ Zᵢᵀβ̂(τ_j)}·(H(τ_{j+1}) − H(τ_j))` to every `wᵢ`.
    pub fn update(
        &mut self,
        dataset: &Dataset,
        beta_j: &[f64],
        tau_j: f64,
        tau_j1: f64,
    ) -> Result<()> {
        if !(tau_j < tau_j1 && tau_j1 < 1.0) {
            return Err(Error::Domain(format!(
                "need tau_j < tau_j1 < 1, got {tau_j}, {tau_j1}"
            )));
        }
        let dh = h_increment(tau_j, tau_j1);
        for (i, w) in self.values.iter_mut().enumerate() {
            if dataset.x[i] >= dataset.fitted(i, beta_j) {
                *w += dh;
            }
        }
        Ok(())
    }
}

pub fn update_censoring_integral(
    mut state: CensoringIntegralState,
    dataset: &Dataset,
    beta_j: &CoefVector,
    tau_j: f64,
    tau_j1: f64,
) -> Result<CensoringIntegralState> {
    state.update(dataset, beta_j.values(), tau_j, tau_j1)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Penalise the intercept like any other coefficient.
    pub penalize_intercept: bool,
    pub box_bound: f64,
    /// Start each grid step from the previous step's optimal vertex.
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            penalize_intercept: false,
            box_bound: DEFAULT_BOX_BOUND,
            warm_start: true,
        }
    }
}

/// `γₖ = 2λ/pₖ` with `λ/0 = ∞` (forced exclusion) and `λ/∞ = 0`.
pub fn l1_weights(p: &[f64], lambda: f64, penalize_intercept: bool) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(k, &pk)| {
            if k == 0 && !penalize_intercept {
                0.0
            } else if pk == 0.0 {
                f64::INFINITY
            } else if pk.is_infinite() {
                0.0
            } else {
                2.0 * lambda / pk
            }
        })
        .collect()
}

/// The objective of grid step `j` given the censoring state before that step.
pub fn step_problem(
    dataset: &Dataset,
    grid: &TauGrid,
    j: usize,
    state: &CensoringIntegralState,
    l1: Vec<f64>,
    box_bound: f64,
) -> Result<PwlProblem> {
    let (n, d) = (dataset.n(), dataset.d());
    let nf = n as f64;
    let tau0 = grid.tau_l();
    let mut linear = vec![0.0; d];
    let abs_weights: Vec<f64>;
    if j == 0 {
        abs_weights = vec![1.0 / nf; n];
        for i in 0..n {
            for (k, c) in linear.iter_mut().enumerate() {
                *c -= (2.0 * tau0 - 1.0) * dataset.z[(i, k)] / nf;
            }
        }
    } else {
        abs_weights = dataset
            .delta
            .iter()
            .map(|&e| if e { 1.0 / nf } else { 0.0 })
            .collect();
        for i in 0..n {
            let di = if dataset.delta[i] { 1.0 } else { 0.0 };
            let factor = di - 2.0 * state.values[i] - 2.0 * tau0;
            for (k, c) in linear.iter_mut().enumerate() {
                *c += dataset.z[(i, k)] * factor / nf;
            }
        }
    }
    let problem = PwlProblem::new(
        dataset.x.clone(),
        dataset.z.clone(),
        abs_weights,
        linear,
        l1,
    )?;
    Ok(problem.with_box_bound(box_bound)?)
}

/// Fits the whole grid. `penalty` supplies `p(n, τ_j)`; `lambda` is `λ_n`.
pub fn estimate_process(
    dataset: &Dataset,
    grid: &TauGrid,
    penalty: &PenaltyProvider,
    lambda: f64,
    config: &FitConfig,
) -> Result<QuantileProcess> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let scales = penalty.all_weights(grid, dataset.d())?;
    let mut state = CensoringIntegralState::new(dataset.n());
    let mut coefs: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    let mut basis: Option<Basis> = None;
    for (j, &tau) in grid.points().iter().enumerate() {
        if j > 0 {
            state.update(dataset, &coefs[j - 1], grid.points()[j - 1], tau)?;
        }
        let gamma = l1_weights(&scales[j], lambda, config.penalize_intercept);
        let problem = step_problem(dataset, grid, j, &state, gamma, config.box_bound)?;
        let hint = if config.warm_start {
            basis.as_ref()
        } else {
            None
        };
        let solution = solver::solve_from(&problem, hint).map_err(|source| Error::Step {
            index: j,
            tau,
            source,
        })?;
        basis = Some(solution.basis);
        coefs.push(solution.coef.into_values());
    }
    QuantileProcess::new(grid.clone(), coefs)
}

/// The unpenalised fit.
pub fn estimate_unpenalized(dataset: &Dataset, grid: &TauGrid) -> Result<QuantileProcess> {
    estimate_process(
        dataset,
        grid,
        &PenaltyProvider::None,
        0.0,
        &FitConfig::default(),
    )
}
