//! Penalty selection by K-fold cross-validation with mass-redistribution weights.
//!
//! A full-data unpenalised fit gives each censored observation a crossing
//! time `r_j` and weights `ŵ_j(τ)`; the held-out loss of a censored point is
//! split between `X_j` and a large pseudo-response `X^∞`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::{CellWeight, Partition, PenaltyProvider, SupportMap};
use crate::process::{
    estimate_process, estimate_unpenalized, Dataset, FitConfig, QuantileProcess, TauGrid,
};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_X_INF: f64 = 1e3;

/// `r_j` for every observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingTimes(pub Vec<f64>);

/// `0` for events below the top plane, `1` above it, and for a censored
/// point below the top plane the first grid `τ_k` with
/// `Zᵀβ̂(τ_{k−1}) < X ≤ Zᵀβ̂(τ_k)`. If no such `k` exists the first grid point
/// with `X ≤ Zᵀβ̂(τ_k)` is used.
pub fn crossing_times(dataset: &Dataset, pilot: &QuantileProcess) -> CrossingTimes {
    let pts = pilot.grid().points();
    let last = pts.len() - 1;
    let r = (0..dataset.n())
        .map(|j| {
            let x = dataset.x()[j];
            let fit = |k: usize| dataset.fitted(j, pilot.row(k));
            if x > fit(last) {
                1.0
            } else if dataset.delta()[j] {
                0.0
            } else {
                let fits: Vec<f64> = (0..=last).map(fit).collect();
                (1..=last)
                    .find(|&k| fits[k - 1] < x && x <= fits[k])
                    .or_else(|| (0..=last).find(|&k| x <= fits[k]))
                    .map_or(1.0, |k| pts[k])
            }
        })
        .collect();
    CrossingTimes(r)
}

/// `ŵ_j(τ_i)`, observations by grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct PortnoyWeights {
    values: Vec<Vec<f64>>,
    clipped: usize,
}

impl PortnoyWeights {
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j][i]
    }

    /// Number of raw weights outside `[0, 1]` that were clipped.
    pub fn clipped(&self) -> usize {
        self.clipped
    }

    /// All weights equal to one, as for uncensored data.
    pub fn ones(n: usize, grid_len: usize) -> Self {
        Self {
            values: vec![vec![1.0; grid_len]; n],
            clipped: 0,
        }
    }
}

/// `ŵ_j(τ) = δ_j + (1 − δ_j)[I{X_j > Zᵀβ̂(τ)} + I{X_j ≤ Zᵀβ̂(τ)}(τ − r_j)/(1 − r_j)]`
/// with `0/0 = 0`, clipped to `[0, 1]`.
pub fn portnoy_weights(
    dataset: &Dataset,
    pilot: &QuantileProcess,
    crossing: &CrossingTimes,
) -> Result<PortnoyWeights> {
    if crossing.0.len() != dataset.n() {
        return Err(Error::InvalidInput(
            "one crossing time per observation required".into(),
        ));
    }
    let pts = pilot.grid().points();
    let mut clipped = 0;
    let values = (0..dataset.n())
        .map(|j| {
            if dataset.delta()[j] {
                return vec![1.0; pts.len()];
            }
            let r = crossing.0[j];
            let x = dataset.x()[j];
            pts.iter()
                .enumerate()
                .map(|(k, &tau)| {
                    if x > dataset.fitted(j, pilot.row(k)) {
                        return 1.0;
                    }
                    let raw = if r == 1.0 { 0.0 } else { (tau - r) / (1.0 - r) };
                    if !(0.0..=1.0).contains(&raw) {
                        clipped += 1;
                    }
                    raw.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    Ok(PortnoyWeights { values, clipped })
}

/// `ρ_τ(r) = r(τ − I{r < 0})`.
pub fn check_loss(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        r * (tau - 1.0)
    } else {
        r * tau
    }
}

/// Fold index of every observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    /// Seeded shuffle cut into `k` equal blocks; the remainder goes round-robin.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > n {
            return Err(Error::InvalidInput(format!(
                "need 2 <= K <= n, got K = {k}, n = {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let size = n / k;
        let mut fold_of = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            fold_of[i] = if pos < size * k {
                pos / size
            } else {
                pos - size * k
            };
        }
        Ok(Self { k, fold_of })
    }

    pub fn from_labels(k: usize, fold_of: Vec<usize>) -> Result<Self> {
        if k < 2 || fold_of.iter().any(|&f| f >= k) || (0..k).any(|f| !fold_of.contains(&f)) {
            return Err(Error::InvalidInput(
                "every fold must be nonempty and labelled below K".into(),
            ));
        }
        Ok(Self { k, fold_of })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn held_out(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }
}

/// How to build a penalty from a pilot fit on the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PenaltyKind {
    None,
    Oracle {
        support: SupportMap,
    },
    Adaptive,
    AverageInt {
        #[serde(default)]
        partition: Option<Partition>,
        #[serde(default)]
        weight: CellWeight,
    },
    AverageMax {
        #[serde(default)]
        partition: Option<Partition>,
    },
    GroupMax {
        #[serde(default)]
        partition: Option<Partition>,
        groups: Vec<Vec<usize>>,
    },
}

impl PenaltyKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::None),
            "adaptive" | "local" => Ok(Self::Adaptive),
            "average" | "average-int" => Ok(Self::AverageInt {
                partition: None,
                weight: CellWeight::Uniform,
            }),
            "average-max" => Ok(Self::AverageMax { partition: None }),
            _ => Err(Error::InvalidInput(format!(
                "unknown penalty {name:?} (none, adaptive, average-int, average-max)"
            ))),
        }
    }

    pub fn needs_pilot(&self) -> bool {
        !matches!(self, Self::None | Self::Oracle { .. })
    }

    /// The penalty for a given pilot; a missing partition means one cell.
    pub fn build(
        &self,
        pilot: Option<&QuantileProcess>,
        grid: &TauGrid,
    ) -> Result<PenaltyProvider> {
        let part = |p: &Option<Partition>| -> Result<Partition> {
            let p = p.clone().unwrap_or_else(|| Partition::whole(grid));
            p.check_covers(grid)?;
            Ok(p)
        };
        let pilot = || {
            pilot
                .cloned()
                .ok_or_else(|| Error::InvalidInput("this penalty needs a pilot fit".into()))
        };
        Ok(match self {
            Self::None => PenaltyProvider::None,
            Self::Oracle { support } => PenaltyProvider::Oracle(support.clone()),
            Self::Adaptive => PenaltyProvider::AdaptiveLasso { pilot: pilot()? },
            Self::AverageInt { partition, weight } => PenaltyProvider::AverageInt {
                pilot: pilot()?,
                partition: part(partition)?,
                weight: *weight,
            },
            Self::AverageMax { partition } => PenaltyProvider::AverageMax {
                pilot: pilot()?,
                partition: part(partition)?,
            },
            Self::GroupMax { partition, groups } => PenaltyProvider::GroupMax {
                pilot: pilot()?,
                partition: part(partition)?,
                groups: groups.clone(),
            },
        })
    }
}

/// Candidate penalty levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    /// 12 log-spaced values in `[10⁻⁴, 10^−½]·n^−½`.
    #[default]
    Auto,
    List(Vec<f64>),
}

impl LambdaGrid {
    pub fn parse(text: &str) -> Result<Self> {
        if text == "auto" {
            return Ok(Self::Auto);
        }
        let values = text
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| {
                Error::InvalidInput(format!(
                    "lambdas must be auto or a comma list, got {text:?}"
                ))
            })?;
        Ok(Self::List(values))
    }

    pub fn values(&self, n: usize) -> Vec<f64> {
        match self {
            Self::Auto => auto_lambdas(n),
            Self::List(v) => v.clone(),
        }
    }
}

pub fn auto_lambdas(n: usize) -> Vec<f64> {
    let scale = 1.0 / (n as f64).sqrt();
    (0..12)
        .map(|i| 10f64.powf(-4.0 + 3.5 * i as f64 / 11.0) * scale)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub lambdas: LambdaGrid,
    pub x_inf: f64,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_FOLDS,
            lambdas: LambdaGrid::Auto,
            x_inf: DEFAULT_X_INF,
            seed: 0,
        }
    }
}

/// Everything about the split that does not depend on the penalty: the
/// folds, training subsets, their unpenalised pilots and the weights from
/// the full-data pilot.
#[derive(Debug, Clone)]
pub struct CvPlan {
    pub folds: FoldAssignment,
    pub x_inf: f64,
    grid: TauGrid,
    held_out: Vec<Vec<usize>>,
    training: Vec<Dataset>,
    pilots: Vec<QuantileProcess>,
    weights: PortnoyWeights,
    full_pilot: Option<QuantileProcess>,
    fit: FitConfig,
}

impl CvPlan {
    /// Fits the full-data pilot and one pilot per training fold.
    pub fn new(dataset: &Dataset, grid: &TauGrid, k: usize, x_inf: f64, seed: u64) -> Result<Self> {
        let full = estimate_unpenalized(dataset, grid)?;
        let weights = portnoy_weights(dataset, &full, &crossing_times(dataset, &full))?;
        let folds = FoldAssignment::new(dataset.n(), k, seed)?;
        let mut plan = Self::with_parts(dataset, grid, folds, weights, x_inf)?;
        plan.full_pilot = Some(full);
        Ok(plan)
    }

    pub fn with_parts(
        dataset: &Dataset,
        grid: &TauGrid,
        folds: FoldAssignment,
        weights: PortnoyWeights,
        x_inf: f64,
    ) -> Result<Self> {
        if folds.fold_of().len() != dataset.n() || weights.values.len() != dataset.n() {
            return Err(Error::InvalidInput(
                "folds and weights must cover every observation".into(),
            ));
        }
        let training: Vec<Dataset> = (0..folds.k())
            .map(|f| dataset.subset(&folds.training(f)))
            .collect::<Result<_>>()?;
        let pilots = training
            .par_iter()
            .enumerate()
            .map(|(f, train)| {
                estimate_unpenalized(train, grid).map_err(|e| Error::Fold {
                    fold: f,
                    lambda: 0.0,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            held_out: (0..folds.k()).map(|f| folds.held_out(f)).collect(),
            folds,
            x_inf,
            grid: grid.clone(),
            training,
            pilots,
            weights,
            full_pilot: None,
            fit: FitConfig::default(),
        })
    }

    pub fn weights(&self) -> &PortnoyWeights {
        &self.weights
    }

    /// The unpenalised fit on all data, when the plan fitted it.
    pub fn full_pilot(&self) -> Option<&QuantileProcess> {
        self.full_pilot.as_ref()
    }

    /// Held-out loss of fold `f` for one penalty level.
    fn fold_score(
        &self,
        dataset: &Dataset,
        kind: &PenaltyKind,
        lambda: f64,
        f: usize,
    ) -> Result<f64> {
        let wrap = |e: Error| Error::Fold {
            fold: f,
            lambda,
            source: Box::new(e),
        };
        let pilot = kind.needs_pilot().then(|| &self.pilots[f]);
        let penalty = kind.build(pilot, &self.grid).map_err(wrap)?;
        let fit = estimate_process(&self.training[f], &self.grid, &penalty, lambda, &self.fit)
            .map_err(wrap)?;
        Ok(held_out_loss(
            dataset,
            &fit,
            &self.held_out[f],
            &self.weights,
            self.x_inf,
        ))
    }

    /// `CV(λ)` summed over folds in fold order.
    pub fn score(&self, dataset: &Dataset, kind: &PenaltyKind, lambda: f64) -> Result<f64> {
        let parts = (0..self.folds.k())
            .into_par_iter()
            .map(|f| self.fold_score(dataset, kind, lambda, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.iter().sum())
    }

    /// Scores every candidate and picks the minimiser, ties toward larger `λ`.
    ///
    /// A candidate whose fit fails numerically on some fold is disqualified
    /// (its score is `None`); the selection fails only if every candidate does.
    pub fn select(
        &self,
        dataset: &Dataset,
        kind: &PenaltyKind,
        lambdas: &[f64],
    ) -> Result<CvReport> {
        if lambdas.is_empty() {
            return Err(Error::InvalidInput("candidate set is empty".into()));
        }
        let pairs: Vec<(usize, usize)> = (0..lambdas.len())
            .flat_map(|l| (0..self.folds.k()).map(move |f| (l, f)))
            .collect();
        let mut parts: Vec<Result<f64>> = pairs
            .par_iter()
            .map(|&(l, f)| self.fold_score(dataset, kind, lambdas[l], f))
            .collect();
        if let Some(pos) = parts
            .iter()
            .position(|p| matches!(p, Err(e) if !e.is_numerical()))
        {
            return Err(parts.swap_remove(pos).unwrap_err());
        }
        let mut scores = Vec::with_capacity(lambdas.len());
        for (chunk, &lambda) in parts.chunks(self.folds.k()).zip(lambdas) {
            let mut cv = Some(0.0);
            for part in chunk {
                match part {
                    Ok(v) => cv = cv.map(|c| c + v),
                    Err(_) => cv = None,
                }
            }
            scores.push(LambdaScore { lambda, cv });
        }
        match argmin_larger(&scores) {
            Some(lambda_star) => Ok(CvReport {
                lambda_star,
                scores,
            }),
            None => {
                let err = parts
                    .into_iter()
                    .find_map(|p| p.err())
                    .expect("a failure was recorded");
                Err(err)
            }
        }
    }
}

fn argmin_larger(scores: &[LambdaScore]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for s in scores {
        let Some(cv) = s.cv else { continue };
        best = match best {
            Some((bl, bc)) if !(cv < bc || (cv == bc && s.lambda > bl)) => Some((bl, bc)),
            _ => Some((s.lambda, cv)),
        };
    }
    best.map(|(l, _)| l)
}

/// `Σ_j Σ_{i ≥ 1} ŵ_j(τ_i)ρ_{τ_i}(X_j − Zⱼᵀβ̂(τ_i)) + (1 − ŵ_j(τ_i))ρ_{τ_i}(X^∞ − Zⱼᵀβ̂(τ_i))`.
pub fn held_out_loss(
    dataset: &Dataset,
    fit: &QuantileProcess,
    rows: &[usize],
    weights: &PortnoyWeights,
    x_inf: f64,
) -> f64 {
    let pts = fit.grid().points();
    let mut total = 0.0;
    for &j in rows {
        for (i, &tau) in pts.iter().enumerate().skip(1) {
            let f = dataset.fitted(j, fit.row(i));
            let w = weights.get(j, i);
            total += w * check_loss(dataset.x()[j] - f, tau);
            if w < 1.0 {
                total += (1.0 - w) * check_loss(x_inf - f, tau);
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    /// `None` when a fold fit failed numerically.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub lambda_star: f64,
    pub scores: Vec<LambdaScore>,
}

/// `CV(λ)` for one candidate with explicit weights and folds.
#[allow(clippy::too_many_arguments)]
pub fn cv_score(
    dataset: &Dataset,
    lambda: f64,
    grid: &TauGrid,
    kind: &PenaltyKind,
    weights: &PortnoyWeights,
    x_inf: f64,
    folds: &FoldAssignment,
) -> Result<f64> {
    let plan = CvPlan::with_parts(dataset, grid, folds.clone(), weights.clone(), x_inf)?;
    plan.score(dataset, kind, lambda)
}

/// Fits the pilots, scores the candidate set and returns the report.
pub fn select_lambda(
    dataset: &Dataset,
    config: &CvConfig,
    kind: &PenaltyKind,
    grid: &TauGrid,
) -> Result<CvReport> {
    let plan = CvPlan::new(dataset, grid, config.k, config.x_inf, config.seed)?;
    plan.select(dataset, kind, &config.lambdas.values(dataset.n()))
}
