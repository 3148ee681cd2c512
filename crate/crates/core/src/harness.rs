//! Monte Carlo driver: simulate, select `λ`, fit every method, summarise.
//!
//! Replications run in a rayon pool but are reduced in replication order, so
//! the tables do not depend on the thread count.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{CvConfig, CvPlan, PenaltyKind};
use crate::error::{Error, Result};
use crate::penalty::{CellWeight, SupportMap};
use crate::process::{
    estimate_process, estimate_unpenalized, fmt_f64, Dataset, FitConfig, QuantileProcess, TauGrid,
};
use crate::simulate::SimulationModel;

/// An estimator configuration compared in the tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pointwise adaptive lasso.
    Local,
    /// Integrated average penalty over the whole grid.
    Average,
    AverageMax,
    /// True zero block excluded, everything else unpenalised.
    Oracle,
    None,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Average => "average",
            Self::AverageMax => "average_max",
            Self::Oracle => "oracle",
            Self::None => "none",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        [
            Self::Local,
            Self::Average,
            Self::AverageMax,
            Self::Oracle,
            Self::None,
        ]
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown method {name:?}")))
    }

    pub fn kind(&self, model: SimulationModel, grid: &TauGrid) -> PenaltyKind {
        match self {
            Self::Local => PenaltyKind::Adaptive,
            Self::Average => PenaltyKind::AverageInt {
                partition: None,
                weight: CellWeight::Uniform,
            },
            Self::AverageMax => PenaltyKind::AverageMax { partition: None },
            Self::Oracle => PenaltyKind::Oracle {
                support: SupportMap::constant(grid, model.support()),
            },
            Self::None => PenaltyKind::None,
        }
    }

    /// Whether the penalty level matters at all.
    pub fn uses_lambda(&self) -> bool {
        !matches!(self, Self::Oracle | Self::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Outputs {
    pub table: Option<PathBuf>,
    pub curves: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: SimulationModel,
    pub n: Vec<usize>,
    pub replications: usize,
    #[serde(default = "default_grid")]
    pub grid: TauGrid,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub cv: CvConfig,
    /// Skip cross-validation and use this level for every penalised method.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub outputs: Outputs,
    /// Keep every fitted process in the report.
    #[serde(default)]
    pub keep_fits: bool,
    #[serde(default)]
    pub on_failure: FailurePolicy,
}

/// What to do when a replication fails numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Stop and report the completed replications.
    #[default]
    Abort,
    /// Replace the dataset by a fresh draw, up to [`MAX_REDRAWS`] times.
    Redraw,
}

pub const MAX_REDRAWS: usize = 10;

fn default_grid() -> TauGrid {
    TauGrid::new(0.15, 0.7, 0.01).expect("default grid")
}

fn default_methods() -> Vec<Method> {
    vec![Method::Local, Method::Average]
}

impl RunConfig {
    pub fn new(model: SimulationModel, n: usize, replications: usize) -> Self {
        Self {
            model,
            n: vec![n],
            replications,
            grid: default_grid(),
            methods: default_methods(),
            cv: CvConfig::default(),
            lambda: None,
            seed: 0,
            threads: None,
            outputs: Outputs::default(),
            keep_fits: false,
            on_failure: FailurePolicy::Abort,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidInput(
                "replications must be at least 1".into(),
            ));
        }
        if self.n.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidInput(
                "need at least one sample size and one method".into(),
            ));
        }
        if self.n.iter().any(|&n| n < self.model.d()) {
            return Err(Error::InvalidInput(format!(
                "every n must be at least d = {}",
                self.model.d()
            )));
        }
        Ok(())
    }

    /// Seed of the datasets at sample size `n`.
    fn data_seed(&self, n: usize) -> u64 {
        self.seed
            .wrapping_add((n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Coefficients reported in the tables (0-based) and the true-zero block pooled into `p0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedSet {
    pub imse: Vec<usize>,
    pub zero_prob: Vec<usize>,
    pub zero_block: Vec<usize>,
}

impl ReportedSet {
    pub fn for_model(model: SimulationModel) -> Self {
        match model {
            SimulationModel::Model2 => Self {
                imse: vec![0, 1, 2, 6],
                zero_prob: vec![1, 2, 6],
                zero_block: model.zero_block(),
            },
            _ => Self {
                imse: vec![0, 1, 2, 3, 4],
                zero_prob: vec![1, 2, 3, 4],
                zero_block: model.zero_block(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub n: usize,
    pub method: String,
    /// `n·IMSE` per reported coefficient.
    pub imse: Vec<f64>,
    /// Percent of (replication, grid point) pairs with the coefficient exactly zero.
    pub p: Vec<f64>,
    pub p0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// 0-based indices behind the `imse_b*` columns.
    pub imse_coefs: Vec<usize>,
    /// 0-based indices behind the `p*` columns.
    pub p_coefs: Vec<usize>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn empty(set: &ReportedSet) -> Self {
        Self {
            imse_coefs: set.imse.clone(),
            p_coefs: set.zero_prob.clone(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["n".to_string(), "method".to_string()];
        h.extend(self.imse_coefs.iter().map(|k| format!("imse_b{}", k + 1)));
        h.extend(self.p_coefs.iter().map(|k| format!("p{}", k + 1)));
        h.push("p0".into());
        h
    }

    pub fn row(&self, n: usize, method: Method) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.method == method.name())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Csv {
            path: PathBuf::from("<table>"),
            source: e,
        };
        w.write_record(self.header()).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.n.to_string(), r.method.clone()];
            rec.extend(r.imse.iter().map(|&v| fmt_f64(v)));
            rec.extend(r.p.iter().map(|&v| fmt_f64(v)));
            rec.push(fmt_f64(r.p0));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: PathBuf::from("<table>"),
            source: e,
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidInput(format!("metrics csv: {msg}"));
        let csv_err = |e: csv::Error| Error::Csv {
            path: PathBuf::from("<table>"),
            source: e,
        };
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(String::from)
            .collect();
        if header.len() < 3
            || header[0] != "n"
            || header[1] != "method"
            || header.last().unwrap() != "p0"
        {
            return Err(bad("header must read n,method,...,p0"));
        }
        let coef = |name: &str, prefix: &str| -> Option<usize> {
            name.strip_prefix(prefix)?
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .map(|k| k - 1)
        };
        let middle = &header[2..header.len() - 1];
        let imse_coefs: Vec<usize> = middle.iter().map_while(|h| coef(h, "imse_b")).collect();
        let p_coefs: Vec<usize> = middle[imse_coefs.len()..]
            .iter()
            .map(|h| coef(h, "p").ok_or_else(|| bad("unexpected column")))
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let num =
                |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad("unparseable number")) };
            let a = imse_coefs.len();
            let b = p_coefs.len();
            rows.push(MetricsRow {
                n: rec[0].parse().map_err(|_| bad("unparseable n"))?,
                method: rec[1].to_string(),
                imse: (2..2 + a).map(num).collect::<Result<_>>()?,
                p: (2 + a..2 + a + b).map(num).collect::<Result<_>>()?,
                p0: num(2 + a + b)?,
            });
        }
        Ok(Self {
            imse_coefs,
            p_coefs,
            rows,
        })
    }
}

/// `n·MSE` of one coefficient at every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub n: usize,
    pub method: String,
    /// 0-based coefficient index.
    pub coef: usize,
    pub tau: Vec<f64>,
    pub n_mse: Vec<f64>,
}

impl Curve {
    /// Largest value over grid points inside `[lo, hi]`, and where it occurs.
    pub fn max_on(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        self.tau
            .iter()
            .zip(&self.n_mse)
            .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
            .fold(None, |best: Option<(f64, f64)>, (&t, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((t, v)),
            })
    }

    pub fn argmax(&self) -> Option<(f64, f64)> {
        self.max_on(f64::NEG_INFINITY, f64::INFINITY)
    }
}

pub fn write_curves_csv<W: Write>(curves: &[Curve], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Csv {
        path: PathBuf::from("<curves>"),
        source: e,
    };
    w.write_record(["n", "method", "coef", "tau", "n_mse"])
        .map_err(csv_err)?;
    for c in curves {
        for (t, v) in c.tau.iter().zip(&c.n_mse) {
            w.write_record([
                c.n.to_string(),
                c.method.clone(),
                (c.coef + 1).to_string(),
                fmt_f64(*t),
                fmt_f64(*v),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from("<curves>"),
        source: e,
    })?;
    Ok(())
}

/// One method's result on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFit {
    pub method: Method,
    pub lambda: f64,
    /// Candidates dropped from the CV because a fold fit failed.
    pub disqualified: usize,
    pub fit: QuantileProcess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub replication: usize,
    pub fits: Vec<MethodFit>,
    /// Portnoy weights that needed clipping.
    pub clipped: usize,
    /// Datasets discarded after a numerical failure before this one succeeded.
    #[serde(default)]
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub n: usize,
    pub method: String,
    /// Total candidates disqualified over all replications.
    pub disqualified: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub table: MetricsTable,
    /// One curve per (n, method, coefficient), all coefficients.
    pub curves: Vec<Curve>,
    pub lambdas: Vec<LambdaSummary>,
    pub clipped_weights: usize,
    /// Datasets replaced after numerical failures.
    pub redrawn_datasets: usize,
    pub completed_replications: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fits: Option<Vec<ReplicationRecord>>,
}

impl McReport {
    pub fn curve(&self, n: usize, method: Method, coef: usize) -> Option<&Curve> {
        self.curves
            .iter()
            .find(|c| c.n == n && c.method == method.name() && c.coef == coef)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes whichever outputs the config names.
    pub fn emit(&self, outputs: &Outputs) -> Result<()> {
        let create = |path: &Path| {
            std::fs::File::create(path).map_err(|source| Error::Io {
                path: path.into(),
                source,
            })
        };
        let with_path = |path: &Path, e: Error| match e {
            Error::Csv { source, .. } => Error::Csv {
                path: path.into(),
                source,
            },
            Error::Io { source, .. } => Error::Io {
                path: path.into(),
                source,
            },
            other => other,
        };
        if let Some(p) = &outputs.table {
            self.table
                .write_csv(create(p)?)
                .map_err(|e| with_path(p, e))?;
        }
        if let Some(p) = &outputs.curves {
            write_curves_csv(&self.curves, create(p)?).map_err(|e| with_path(p, e))?;
        }
        if let Some(p) = &outputs.json {
            std::fs::write(p, self.to_json()?).map_err(|source| Error::Io {
                path: p.into(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Simulates replication `rep` at size `n` and fits every method. Under
/// [`FailurePolicy::Redraw`] attempt `k` uses the data stream
/// `rep + k·replications`.
pub fn run_replication(config: &RunConfig, n: usize, rep: usize) -> Result<ReplicationRecord> {
    let attempts = match config.on_failure {
        FailurePolicy::Abort => 1,
        FailurePolicy::Redraw => MAX_REDRAWS + 1,
    };
    let mut last = None;
    for k in 0..attempts {
        let stream = (rep + k * config.replications) as u64;
        let data = config
            .model
            .generate_replication(n, config.data_seed(n), stream)?;
        match fit_methods(config, &data, n, stream as usize) {
            Ok(mut rec) => {
                rec.replication = rep;
                rec.redraws = k;
                return Ok(rec);
            }
            Err(e) if e.is_numerical() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn fit_methods(
    config: &RunConfig,
    data: &Dataset,
    n: usize,
    rep: usize,
) -> Result<ReplicationRecord> {
    let grid = &config.grid;
    let cv_seed = config.cv.seed
        ^ config.data_seed(n).rotate_left(17)
        ^ (rep as u64).wrapping_mul(0xa076_1d64_78bd_642f);
    let needs_cv = config.lambda.is_none() && config.methods.iter().any(Method::uses_lambda);
    let plan = if needs_cv {
        Some(CvPlan::new(
            data,
            grid,
            config.cv.k,
            config.cv.x_inf,
            cv_seed,
        )?)
    } else {
        None
    };
    let needs_pilot = config
        .methods
        .iter()
        .any(|m| m.kind(config.model, grid).needs_pilot());
    let own_pilot = match &plan {
        None if needs_pilot => Some(estimate_unpenalized(data, grid)?),
        _ => None,
    };
    let pilot = plan
        .as_ref()
        .and_then(CvPlan::full_pilot)
        .or(own_pilot.as_ref());
    let lambdas = config.cv.lambdas.values(n);
    let fits = config
        .methods
        .iter()
        .map(|&method| {
            let kind = method.kind(config.model, grid);
            let (lambda, disqualified) = match (method.uses_lambda(), config.lambda) {
                (false, _) => (0.0, 0),
                (true, Some(l)) => (l, 0),
                (true, None) => {
                    let plan = plan.as_ref().expect("cross-validation plan");
                    let report = plan.select(data, &kind, &lambdas)?;
                    (
                        report.lambda_star,
                        report.scores.iter().filter(|s| s.cv.is_none()).count(),
                    )
                }
            };
            let penalty = kind.build(pilot, grid)?;
            let fit = estimate_process(data, grid, &penalty, lambda, &FitConfig::default())?;
            Ok(MethodFit {
                method,
                lambda,
                disqualified,
                fit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationRecord {
        n,
        replication: rep,
        fits,
        clipped: plan.as_ref().map_or(0, |p| p.weights().clipped()),
        redraws: 0,
    })
}

/// Runs every replication; on failure returns the summary of the replications
/// that completed before the first failing one, plus the error.
pub fn run_monte_carlo_partial(config: &RunConfig) -> Result<(McReport, Option<Error>)> {
    config.validate()?;
    let work = || -> Vec<(usize, Vec<Result<ReplicationRecord>>)> {
        config
            .n
            .iter()
            .map(|&n| {
                let recs = (0..config.replications)
                    .into_par_iter()
                    .map(|rep| {
                        run_replication(config, n, rep).map_err(|e| Error::Replication {
                            replication: rep,
                            source: Box::new(e),
                        })
                    })
                    .collect();
                (n, recs)
            })
            .collect()
    };
    let results = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut records = Vec::new();
    let mut failure = None;
    'outer: for (_, recs) in results {
        for r in recs {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    failure = Some(e);
                    break 'outer;
                }
            }
        }
    }
    let report = summarize(config, records);
    Ok((report, failure))
}

pub fn run_monte_carlo(config: &RunConfig) -> Result<McReport> {
    let (report, failure) = run_monte_carlo_partial(config)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Per-grid-point `n·MSE` curves of one coefficient, one per method.
pub fn mse_by_tau(config: &RunConfig, coef: usize) -> Result<Vec<Curve>> {
    Ok(run_monte_carlo(config)?
        .curves
        .into_iter()
        .filter(|c| c.coef == coef)
        .collect())
}

/// Accumulates records (in the given order) into tables and curves.
pub fn summarize(config: &RunConfig, records: Vec<ReplicationRecord>) -> McReport {
    let set = ReportedSet::for_model(config.model);
    let truth = config.model.true_path(&config.grid);
    let (g, d) = (config.grid.len(), config.model.d());
    let mut table = MetricsTable::empty(&set);
    let mut curves = Vec::new();
    let mut lambdas = Vec::new();
    for &n in &config.n {
        for (mi, &method) in config.methods.iter().enumerate() {
            let mut sse = vec![vec![0.0; d]; g];
            let mut zeros = vec![0usize; d];
            let mut chosen = Vec::new();
            let mut disqualified = 0;
            let mut reps = 0usize;
            for rec in records.iter().filter(|r| r.n == n) {
                let mf = &rec.fits[mi];
                reps += 1;
                chosen.push(mf.lambda);
                disqualified += mf.disqualified;
                for j in 0..g {
                    let row = mf.fit.row(j);
                    for k in 0..d {
                        let e = row[k] - truth[j][k];
                        sse[j][k] += e * e;
                        if row[k] == 0.0 {
                            zeros[k] += 1;
                        }
                    }
                }
            }
            if reps == 0 {
                continue;
            }
            let nf = n as f64;
            let mse = |j: usize, k: usize| nf * sse[j][k] / reps as f64;
            let imse = |k: usize| (0..g).map(|j| mse(j, k)).sum::<f64>() / g as f64;
            let pct = |k: usize| 100.0 * zeros[k] as f64 / (reps * g) as f64;
            table.rows.push(MetricsRow {
                n,
                method: method.name().into(),
                imse: set.imse.iter().map(|&k| imse(k)).collect(),
                p: set.zero_prob.iter().map(|&k| pct(k)).collect(),
                p0: set.zero_block.iter().map(|&k| pct(k)).sum::<f64>()
                    / set.zero_block.len() as f64,
            });
            for k in 0..d {
                curves.push(Curve {
                    n,
                    method: method.name().into(),
                    coef: k,
                    tau: config.grid.points().to_vec(),
                    n_mse: (0..g).map(|j| mse(j, k)).collect(),
                });
            }
            chosen.sort_by(f64::total_cmp);
            lambdas.push(LambdaSummary {
                n,
                method: method.name().into(),
                disqualified,
                median: chosen[chosen.len() / 2],
                min: chosen[0],
                max: chosen[chosen.len() - 1],
            });
        }
    }
    McReport {
        table,
        curves,
        lambdas,
        clipped_weights: records.iter().map(|r| r.clipped).sum(),
        redrawn_datasets: records.iter().map(|r| r.redraws).sum(),
        completed_replications: records.len(),
        fits: config.keep_fits.then_some(records),
    }
}
