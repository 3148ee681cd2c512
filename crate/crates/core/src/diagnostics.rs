//! Empirical checks of the asymptotic linearisation.
//!
//! `μ(b) = E[Z I{X ≤ Zᵀb, δ = 1}]` and `μ̃(b) = E[Z I{X ≥ Zᵀb}]` are estimated
//! from a large sample of the generating model; their derivatives use the
//! closed-form Gaussian conditional laws averaged over sampled covariates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::process::{h_increment, Dataset, QuantileProcess, TauGrid};
use crate::simulate::SimulationModel;

pub const DEFAULT_ORACLE_SAMPLES: usize = 1_000_000;
/// Covariate draws used for the derivative matrices.
pub const DERIVATIVE_SAMPLES: usize = 100_000;
pub const CLOUD_SIZE: usize = 100;
pub const CLOUD_RADIUS: f64 = 0.25;
const SINGULAR_RCOND: f64 = 1e-10;

/// Population moments of one simulation model.
#[derive(Debug, Clone)]
pub struct OracleMoments {
    model: SimulationModel,
    m: usize,
    seed: u64,
    sample: Dataset,
    covariate_mean: Vec<f64>,
}

impl OracleMoments {
    pub fn new(model: SimulationModel, m: usize, seed: u64) -> Result<Self> {
        // the dependent variant shares model 1's marginals; sample it i.i.d.
        let iid = match model {
            SimulationModel::DependentModel1 { .. } => SimulationModel::Model1,
            other => other,
        };
        let sample = iid.generate_replication(m, seed, u64::MAX / 64)?;
        let mean = if model == SimulationModel::Model2 {
            0.7
        } else {
            0.5
        };
        let mut covariate_mean = vec![mean; model.d()];
        covariate_mean[0] = 1.0;
        Ok(Self {
            model: iid,
            m,
            seed,
            sample,
            covariate_mean,
        })
    }

    pub fn model(&self) -> SimulationModel {
        self.model
    }

    pub fn samples(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    /// `E Z`.
    pub fn covariate_mean(&self) -> &[f64] {
        &self.covariate_mean
    }

    pub fn mu(&self, b: &[f64]) -> Vec<f64> {
        indicator_mean(&self.sample, b, |x, d, f| d && x <= f)
    }

    pub fn mu_tilde(&self, b: &[f64]) -> Vec<f64> {
        indicator_mean(&self.sample, b, |x, _, f| x >= f)
    }

    /// `μ′(b) = E[ZZᵀ f(Zᵀb|Z)]` with `f(t|z) = f_T(t|z)P(C > t|z)`.
    pub fn mu_prime(&self, b: &[f64]) -> DMatrix<f64> {
        self.weighted_gram(b, |t, ev, cen| {
            let surv_c = cen.map_or(1.0, |c: Normal| c.sf(t));
            ev.pdf(t) * surv_c
        })
    }

    /// `μ̃′(b) = −E[ZZᵀ f̃(Zᵀb|Z)]` with `f̃` the density of `X = T ∧ C`.
    pub fn mu_tilde_prime(&self, b: &[f64]) -> DMatrix<f64> {
        -self.weighted_gram(b, |t, ev, cen| match cen {
            None => ev.pdf(t),
            Some(c) => ev.pdf(t) * c.sf(t) + c.pdf(t) * ev.sf(t),
        })
    }

    fn weighted_gram(
        &self,
        b: &[f64],
        density: impl Fn(f64, Normal, Option<Normal>) -> f64,
    ) -> DMatrix<f64> {
        let m = self.m.min(DERIVATIVE_SAMPLES);
        let d = self.d();
        let z = self.sample.z().rows(0, m);
        let mut row = vec![0.0; d];
        let weights = DVector::from_fn(m, |i, _| {
            for (k, r) in row.iter_mut().enumerate() {
                *r = z[(i, k)];
            }
            let law = self.model.conditional_law(&row);
            let ev = Normal::new(law.event_mean, law.event_sd).expect("positive event scale");
            let cen = law
                .censoring
                .map(|(mu, sd)| Normal::new(mu, sd).expect("positive censoring scale"));
            let t: f64 = row.iter().zip(b).map(|(z, b)| z * b).sum();
            density(t, ev, cen) / m as f64
        });
        let mut zw = z.clone_owned();
        for mut col in zw.column_iter_mut() {
            col.component_mul_assign(&weights);
        }
        zw.tr_mul(&z)
    }
}

fn indicator_mean(data: &Dataset, b: &[f64], keep: impl Fn(f64, bool, f64) -> bool) -> Vec<f64> {
    let fitted = data.z() * DVector::from_column_slice(b);
    let ind = DVector::from_fn(data.n(), |i, _| {
        if keep(data.x()[i], data.delta()[i], fitted[i]) {
            1.0
        } else {
            0.0
        }
    });
    (data.z().tr_mul(&ind) / data.n() as f64)
        .iter()
        .copied()
        .collect()
}

fn check_dims(dataset: &Dataset, d: usize) -> Result<()> {
    if dataset.d() != d {
        return Err(Error::OracleMismatch {
            oracle: d,
            data: dataset.d(),
        });
    }
    Ok(())
}

/// `(ν_n(b), ν̃_n(b))`.
pub fn empirical_nu(
    dataset: &Dataset,
    b: &[f64],
    oracle: &OracleMoments,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(dataset, oracle.d())?;
    if b.len() != oracle.d() {
        return Err(Error::OracleMismatch {
            oracle: oracle.d(),
            data: b.len(),
        });
    }
    let nu = sub(
        &indicator_mean(dataset, b, |x, d, f| d && x <= f),
        &oracle.mu(b),
    );
    let nu_t = sub(
        &indicator_mean(dataset, b, |x, _, f| x >= f),
        &oracle.mu_tilde(b),
    );
    Ok((nu, nu_t))
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a - b).collect()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Oracle quantities along the true path on one grid.
#[derive(Debug, Clone)]
pub struct PathOracle {
    grid: TauGrid,
    beta: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    mu_tilde: Vec<Vec<f64>>,
    mu_prime_inv: Vec<DMatrix<f64>>,
    /// `μ̃′(β(u))μ′(β(u))⁻¹`.
    kernel: Vec<DMatrix<f64>>,
    covariate_mean: Vec<f64>,
}

impl PathOracle {
    pub fn new(oracle: &OracleMoments, grid: &TauGrid) -> Result<Self> {
        let beta = oracle.model().true_path(grid);
        let mut mu_prime_inv = Vec::with_capacity(grid.len());
        let mut kernel = Vec::with_capacity(grid.len());
        for (b, &tau) in beta.iter().zip(grid.points()) {
            let mp = oracle.mu_prime(b);
            let svd = mp.clone().svd(false, false);
            let (hi, lo) = (svd.singular_values.max(), svd.singular_values.min());
            let inv = mp.try_inverse().filter(|_| lo > SINGULAR_RCOND * hi);
            let inv = inv.ok_or(Error::SingularDerivative { tau })?;
            kernel.push(oracle.mu_tilde_prime(b) * &inv);
            mu_prime_inv.push(inv);
        }
        Ok(Self {
            grid: grid.clone(),
            mu: beta.iter().map(|b| oracle.mu(b)).collect(),
            mu_tilde: beta.iter().map(|b| oracle.mu_tilde(b)).collect(),
            beta,
            mu_prime_inv,
            kernel,
            covariate_mean: oracle.covariate_mean().to_vec(),
        })
    }

    pub fn grid(&self) -> &TauGrid {
        &self.grid
    }

    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    pub fn mu_prime_inv(&self, j: usize) -> &DMatrix<f64> {
        &self.mu_prime_inv[j]
    }

    pub fn kernel(&self, j: usize) -> &DMatrix<f64> {
        &self.kernel[j]
    }
}

/// `w_n(τ_j) = τ₀(Z̄ − EZ) − ν_n(β(τ_j)) + Σ_{k<j} ν̃_n(β(τ_k))ΔH_k`.
pub fn w_n_path(dataset: &Dataset, path: &PathOracle) -> Result<Vec<Vec<f64>>> {
    let d = path.covariate_mean.len();
    check_dims(dataset, d)?;
    let pts = path.grid.points();
    let tau0 = pts[0];
    let ones = vec![1.0; dataset.n()];
    let zbar = dataset.z().tr_mul(&DVector::from_vec(ones)) / dataset.n() as f64;
    let base: Vec<f64> = (0..d)
        .map(|k| tau0 * (zbar[k] - path.covariate_mean[k]))
        .collect();
    let mut integral = vec![0.0; d];
    let mut out = Vec::with_capacity(pts.len());
    for j in 0..pts.len() {
        let b = &path.beta[j];
        let nu = sub(
            &indicator_mean(dataset, b, |x, d, f| d && x <= f),
            &path.mu[j],
        );
        out.push((0..d).map(|k| base[k] - nu[k] + integral[k]).collect());
        if j + 1 < pts.len() {
            let dh = h_increment(pts[j], pts[j + 1]);
            let nu_t = sub(
                &indicator_mean(dataset, b, |x, _, f| x >= f),
                &path.mu_tilde[j],
            );
            for k in 0..d {
                integral[k] += nu_t[k] * dh;
            }
        }
    }
    Ok(out)
}

/// Solves `v(τ_j) = w_n(τ_j) + Σ_{k<j} μ̃′(β(τ_k))μ′(β(τ_k))⁻¹ v(τ_k) ΔH_k`,
/// the discrete form of the product-integral representation.
pub fn volterra_solve(w: &[Vec<f64>], path: &PathOracle) -> Vec<Vec<f64>> {
    let pts = path.grid.points();
    let d = path.covariate_mean.len();
    let mut acc = DVector::zeros(d);
    let mut out = Vec::with_capacity(w.len());
    for (j, wj) in w.iter().enumerate() {
        let v = DVector::from_column_slice(wj) + &acc;
        if j + 1 < pts.len() {
            acc += &path.kernel[j] * &v * h_increment(pts[j], pts[j + 1]);
        }
        out.push(v.iter().copied().collect());
    }
    out
}

/// `μ′(β(s))⁻¹ v(s)` on the grid.
pub fn leading_term(w: &[Vec<f64>], path: &PathOracle) -> Vec<Vec<f64>> {
    volterra_solve(w, path)
        .iter()
        .enumerate()
        .map(|(j, v)| {
            (&path.mu_prime_inv[j] * DVector::from_column_slice(v))
                .iter()
                .copied()
                .collect()
        })
        .collect()
}

/// `R_n(τ_j) = β̂(τ_j) − β(τ_j) − leading(τ_j)` in every row.
pub fn remainder_path(
    process: &QuantileProcess,
    dataset: &Dataset,
    path: &PathOracle,
) -> Result<Vec<Vec<f64>>> {
    if process.grid() != &path.grid {
        return Err(Error::InvalidInput(
            "fit and oracle use different grids".into(),
        ));
    }
    let lead = leading_term(&w_n_path(dataset, path)?, path);
    Ok((0..path.grid.len())
        .map(|j| {
            let (bh, b) = (process.row(j), &path.beta[j]);
            (0..b.len()).map(|k| bh[k] - b[k] - lead[j][k]).collect()
        })
        .collect())
}

/// `sup_j ‖R_n(τ_j)‖∞`.
pub fn bahadur_remainder(
    process: &QuantileProcess,
    dataset: &Dataset,
    path: &PathOracle,
) -> Result<f64> {
    Ok(remainder_path(process, dataset, path)?
        .iter()
        .map(|r| sup_norm(r))
        .fold(0.0, f64::max))
}

/// `−(1/n)Σ Z_i(I{X_i ≤ Z_iᵀβ(s)} − s)`, the uncensored representation.
pub fn classical_representation(dataset: &Dataset, path: &PathOracle) -> Vec<Vec<f64>> {
    path.grid
        .points()
        .iter()
        .zip(&path.beta)
        .map(|(&s, b)| {
            let emp = indicator_mean(dataset, b, |x, _, f| x <= f);
            let zbar = indicator_mean(dataset, b, |_, _, _| true);
            (0..b.len()).map(|k| -(emp[k] - s * zbar[k])).collect()
        })
        .collect()
}

/// Ordered product `Π (I + M_kᵀ ΔH_k)` over the cells between grid points `u ≤ s`,
/// with `m[k]` the value on `[τ_k, τ_{k+1})`.
pub fn product_integral(
    m: &[DMatrix<f64>],
    grid: &TauGrid,
    u: f64,
    s: f64,
) -> Result<DMatrix<f64>> {
    if u > s {
        return Err(Error::Domain(format!(
            "product integral needs u <= s, got u = {u}, s = {s}"
        )));
    }
    let (iu, is) = (grid.locate(u)?, grid.locate(s)?);
    if m.len() + 1 < grid.len() {
        return Err(Error::InvalidInput(
            "one matrix per grid cell required".into(),
        ));
    }
    let d = m.first().map_or(0, |x| x.nrows());
    let pts = grid.points();
    let mut out = DMatrix::identity(d, d);
    for k in iu..is {
        let factor = DMatrix::identity(d, d) + m[k].transpose() * h_increment(pts[k], pts[k + 1]);
        out *= factor;
    }
    Ok(out)
}

/// Points drawn uniformly from the sup-norm tube of radius `eps` around the path.
pub fn b_cloud(
    model: SimulationModel,
    grid: &TauGrid,
    size: usize,
    eps: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let tau = rng.gen_range(grid.tau_l()..=grid.tau_u());
            let beta = model
                .true_beta(tau)
                .expect("grid inside (0,1)")
                .into_values();
            beta.iter()
                .map(|b| b + eps * rng.gen_range(-1.0..=1.0))
                .collect()
        })
        .collect()
}

/// `ω_a(g)`: largest `‖g(b₁) − g(b₂)‖∞` over cloud pairs with `‖b₁ − b₂‖∞ ≤ a`.
pub fn oscillation(cloud: &[Vec<f64>], values: &[Vec<f64>], a: f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..cloud.len() {
        for j in i + 1..cloud.len() {
            if sup_norm(&sub(&cloud[i], &cloud[j])) <= a {
                best = best.max(sup_norm(&sub(&values[i], &values[j])));
            }
        }
    }
    best
}

/// Empirical-process summary for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalProcessReport {
    pub nu_sup: f64,
    pub nu_tilde_sup: f64,
    /// `(a, ω_a(√n ν_n), ω_a(√n ν̃_n))`.
    pub oscillation: Vec<(f64, f64, f64)>,
    pub w_n: Vec<Vec<f64>>,
}

/// A b-cloud with `μ` and `μ̃` evaluated once at every point.
#[derive(Debug, Clone)]
pub struct CloudOracle {
    points: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    mu_tilde: Vec<Vec<f64>>,
}

impl CloudOracle {
    pub fn new(oracle: &OracleMoments, points: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(b) = points.iter().find(|b| b.len() != oracle.d()) {
            return Err(Error::OracleMismatch {
                oracle: oracle.d(),
                data: b.len(),
            });
        }
        Ok(Self {
            mu: points.iter().map(|b| oracle.mu(b)).collect(),
            mu_tilde: points.iter().map(|b| oracle.mu_tilde(b)).collect(),
            points,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// `(ν_n(b), ν̃_n(b))` at every cloud point.
    pub fn nu(&self, dataset: &Dataset) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if let Some(b) = self.points.first() {
            check_dims(dataset, b.len())?;
        }
        Ok(self
            .points
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let nu = sub(
                    &indicator_mean(dataset, b, |x, d, f| d && x <= f),
                    &self.mu[i],
                );
                let nu_t = sub(
                    &indicator_mean(dataset, b, |x, _, f| x >= f),
                    &self.mu_tilde[i],
                );
                (nu, nu_t)
            })
            .collect())
    }
}

pub fn empirical_process_report(
    dataset: &Dataset,
    cloud: &CloudOracle,
    path: &PathOracle,
    radii: &[f64],
) -> Result<EmpiricalProcessReport> {
    let pairs = cloud.nu(dataset)?;
    let rn = (dataset.n() as f64).sqrt();
    let scaled = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<Vec<f64>> {
        pairs
            .iter()
            .map(|p| pick(p).iter().map(|v| v * rn).collect())
            .collect()
    };
    let (nu, nu_t) = (scaled(|p| &p.0), scaled(|p| &p.1));
    let pts = cloud.points();
    Ok(EmpiricalProcessReport {
        nu_sup: pairs.iter().map(|p| sup_norm(&p.0)).fold(0.0, f64::max),
        nu_tilde_sup: pairs.iter().map(|p| sup_norm(&p.1)).fold(0.0, f64::max),
        oscillation: radii
            .iter()
            .map(|&a| (a, oscillation(pts, &nu, a), oscillation(pts, &nu_t, a)))
            .collect(),
        w_n: w_n_path(dataset, path)?,
    })
}

/// Settings of a diagnostics run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub model: SimulationModel,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub grid: TauGrid,
    pub oracle_samples: usize,
    pub cloud_size: usize,
    pub radii: Vec<f64>,
    /// Also fit the unpenalised process and compute the remainder.
    pub bahadur: bool,
}

impl DiagnoseConfig {
    pub fn new(model: SimulationModel, n: usize, replications: usize) -> Result<Self> {
        Ok(Self {
            model,
            n,
            replications,
            seed: 0,
            grid: TauGrid::new(0.15, 0.7, 0.01)?,
            oracle_samples: DEFAULT_ORACLE_SAMPLES,
            cloud_size: CLOUD_SIZE,
            radii: vec![0.01, 0.05, 0.1],
            bahadur: true,
        })
    }
}

/// One replication's summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationDiagnostics {
    pub nu_sup: f64,
    pub nu_tilde_sup: f64,
    /// `(a, ω_a(√n ν_n), ω_a(√n ν̃_n))`.
    pub oscillation: Vec<(f64, f64, f64)>,
    /// `√n sup_s ‖R_n(s)‖∞`, when requested.
    pub remainder: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config: DiagnoseConfig,
    pub replications: Vec<ReplicationDiagnostics>,
    pub median_nu_sup: f64,
    pub median_nu_tilde_sup: f64,
    pub median_remainder: Option<f64>,
    /// Componentwise replication mean of `w_n` on the grid.
    pub w_n_mean: Vec<Vec<f64>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Builds the oracle once, then evaluates every replication in parallel.
pub fn run_diagnostics(config: &DiagnoseConfig) -> Result<DiagnosticsReport> {
    let oracle = OracleMoments::new(config.model, config.oracle_samples, config.seed ^ 0x04ac1e)?;
    run_diagnostics_with(config, &oracle)
}

pub fn run_diagnostics_with(
    config: &DiagnoseConfig,
    oracle: &OracleMoments,
) -> Result<DiagnosticsReport> {
    use rayon::prelude::*;
    if config.replications == 0 {
        return Err(Error::InvalidInput(
            "replications must be at least 1".into(),
        ));
    }
    let path = PathOracle::new(oracle, &config.grid)?;
    let points = b_cloud(
        config.model,
        &config.grid,
        config.cloud_size,
        CLOUD_RADIUS,
        config.seed ^ 0xc10d,
    );
    let cloud = CloudOracle::new(oracle, points)?;
    let data_seed = config
        .seed
        .wrapping_add((config.n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let one = |rep: usize| -> Result<(ReplicationDiagnostics, Vec<Vec<f64>>)> {
        let data = config
            .model
            .generate_replication(config.n, data_seed, rep as u64)?;
        let report = empirical_process_report(&data, &cloud, &path, &config.radii)?;
        let remainder = if config.bahadur {
            let fit = crate::process::estimate_unpenalized(&data, &config.grid)?;
            Some((config.n as f64).sqrt() * bahadur_remainder(&fit, &data, &path)?)
        } else {
            None
        };
        let diag = ReplicationDiagnostics {
            nu_sup: report.nu_sup,
            nu_tilde_sup: report.nu_tilde_sup,
            oscillation: report.oscillation,
            remainder,
        };
        Ok((diag, report.w_n))
    };
    let reps = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            one(rep).map_err(|e| Error::Replication {
                replication: rep,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let r = reps.len() as f64;
    let mut w_n_mean = vec![vec![0.0; oracle.d()]; config.grid.len()];
    for (_, w) in &reps {
        for (acc, row) in w_n_mean.iter_mut().zip(w) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / r;
            }
        }
    }
    let replications: Vec<ReplicationDiagnostics> = reps.into_iter().map(|(d, _)| d).collect();
    let pick = |f: fn(&ReplicationDiagnostics) -> f64| {
        median(&replications.iter().map(f).collect::<Vec<_>>())
    };
    let remainders: Vec<f64> = replications.iter().filter_map(|d| d.remainder).collect();
    Ok(DiagnosticsReport {
        config: config.clone(),
        median_nu_sup: pick(|d| d.nu_sup),
        median_nu_tilde_sup: pick(|d| d.nu_tilde_sup),
        median_remainder: (!remainders.is_empty()).then(|| median(&remainders)),
        w_n_mean,
        replications,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::estimate_unpenalized;

    fn small_oracle(model: SimulationModel) -> OracleMoments {
        OracleMoments::new(model, 200_000, 11).unwrap()
    }

    #[test]
    fn product_integral_empty_and_scalar() {
        let grid = TauGrid::new(0.15, 0.7, 0.01).unwrap();
        let m = vec![DMatrix::from_element(1, 1, -1.0); grid.len()];
        let id = product_integral(&m, &grid, 0.3, 0.3).unwrap();
        assert_eq!(id, DMatrix::identity(1, 1));
        let p = product_integral(&m, &grid, 0.15, 0.7).unwrap()[(0, 0)];
        let exact = 0.3 / 0.85;
        assert!(((p - exact) / exact).abs() <= 2.0 * grid.b_n());
        assert!(product_integral(&m, &grid, 0.5, 0.2).is_err());
    }

    #[test]
    fn product_integral_constant_matrix_and_multiplicativity() {
        let grid = TauGrid::new(0.15, 0.7, 0.01).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.2, -0.5]);
        let m = vec![a.clone(); grid.len()];
        let p = product_integral(&m, &grid, 0.15, 0.7).unwrap();
        let exp = (a.transpose()
            * (crate::process::h(0.7).unwrap() - crate::process::h(0.15).unwrap()))
        .exp();
        assert!((&p - &exp).amax() <= 5.0 * grid.b_n());
        let fine = TauGrid::new(0.15, 0.7, 0.001).unwrap();
        let pf = product_integral(&vec![a.clone(); fine.len()], &fine, 0.15, 0.7).unwrap();
        assert!((&p - &pf).amax() <= 2.0 * grid.b_n());
        let split = product_integral(&m, &grid, 0.15, 0.4).unwrap()
            * product_integral(&m, &grid, 0.4, 0.7).unwrap();
        assert!((&p - &split).amax() < 1e-14);
    }

    #[test]
    fn oracle_mu_matches_analytic_derivative() {
        let oracle = small_oracle(SimulationModel::Model2);
        let b = oracle.model().true_beta(0.4).unwrap().into_values();
        let mp = oracle.mu_prime(&b);
        let step = 1e-2;
        for k in [0, 6] {
            let mut hi = b.clone();
            let mut lo = b.clone();
            hi[k] += step;
            lo[k] -= step;
            let fd = sub(&oracle.mu(&hi), &oracle.mu(&lo));
            for r in 0..oracle.d() {
                assert!((fd[r] / (2.0 * step) - mp[(r, k)]).abs() < 0.03, "{r} {k}");
            }
        }
    }

    #[test]
    fn nu_is_empty_below_support() {
        let oracle = small_oracle(SimulationModel::Model1);
        let data = SimulationModel::Model1.generate(300, 4).unwrap();
        let mut b = vec![0.0; 10];
        b[0] = -100.0;
        let (nu, nu_t) = empirical_nu(&data, &b, &oracle).unwrap();
        assert!(sup_norm(&nu) == 0.0);
        // every point is above the plane: ν̃_n is just a covariate-mean error
        assert!(sup_norm(&nu_t) < 0.1);
        let wrong = SimulationModel::Model2.generate(30, 1).unwrap();
        assert!(matches!(
            empirical_nu(&wrong, &b, &oracle),
            Err(Error::OracleMismatch { .. })
        ));
    }

    #[test]
    fn leading_term_at_tau0_is_direct() {
        let oracle = small_oracle(SimulationModel::Model2);
        let grid = TauGrid::new(0.15, 0.3, 0.05).unwrap();
        let path = PathOracle::new(&oracle, &grid).unwrap();
        let data = SimulationModel::Model2.generate(400, 2).unwrap();
        let w = w_n_path(&data, &path).unwrap();
        let lead = leading_term(&w, &path);
        let direct = path.mu_prime_inv(0) * DVector::from_column_slice(&w[0]);
        for k in 0..7 {
            assert!((lead[0][k] - direct[k]).abs() < 1e-14);
        }
        let fit = estimate_unpenalized(&data, &grid).unwrap();
        assert!(bahadur_remainder(&fit, &data, &path).unwrap().is_finite());
    }

    #[test]
    fn uncensored_dual_formula() {
        let model = SimulationModel::Model1Uncensored;
        let oracle = small_oracle(model);
        let grid = TauGrid::new(0.15, 0.7, 0.01).unwrap();
        let path = PathOracle::new(&oracle, &grid).unwrap();
        let data = model.generate(2000, 9).unwrap();
        let w = w_n_path(&data, &path).unwrap();
        let v = volterra_solve(&w, &path);
        let classical = classical_representation(&data, &path);
        let wsup = w.iter().map(|r| sup_norm(r)).fold(0.0, f64::max);
        for j in 0..grid.len() {
            let gap = sup_norm(&sub(&v[j], &classical[j]));
            // oracle kernel is -I only up to Monte Carlo error in μ̃′
            assert!(gap <= 2.0 * grid.b_n() * wsup + 5e-3, "{j}: {gap}");
        }
    }

    #[test]
    fn driver_is_deterministic() {
        let mut config = DiagnoseConfig::new(SimulationModel::Model2, 200, 3).unwrap();
        config.grid = TauGrid::new(0.15, 0.3, 0.05).unwrap();
        config.oracle_samples = 50_000;
        config.cloud_size = 10;
        let a = run_diagnostics(&config).unwrap();
        assert_eq!(a, run_diagnostics(&config).unwrap());
        assert_eq!(a.replications.len(), 3);
        assert!(a.median_remainder.unwrap() > 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn oscillation_is_monotone() {
        let grid = TauGrid::new(0.15, 0.7, 0.01).unwrap();
        let cloud = b_cloud(SimulationModel::Model2, &grid, 30, CLOUD_RADIUS, 5);
        let values: Vec<Vec<f64>> = cloud
            .iter()
            .map(|b| vec![b.iter().map(|x| x.sin()).sum()])
            .collect();
        let mut last = 0.0;
        for a in [0.0, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let o = oscillation(&cloud, &values, a);
            assert!(o >= last);
            last = o;
        }
        assert_eq!(
            b_cloud(SimulationModel::Model2, &grid, 30, CLOUD_RADIUS, 5),
            cloud
        );
    }
}
