//! Simulation models with closed-form conditional quantile paths.
//!
//! Every noise source draws from its own ChaCha stream, keyed by the run seed,
//! the replication index and the source, so a replication's data never depend
//! on the order in which replications are generated.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::process::{Dataset, TauGrid};
use crate::solver::CoefVector;

const MODEL1_SLOPES: [f64; 9] = [0.5, 1.0, 1.5, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
const MODEL1_SCALE: f64 = 0.75;
const MODEL2_SHIFT: f64 = 1.5;

/// Location shift of the model-1 censoring variable giving 25% censoring:
/// `P(0.75(U − V) > s) = 1/4` for `s = 0.75·√2·Φ⁻¹(3/4)`.
pub fn model1_censoring_shift() -> f64 {
    MODEL1_SCALE * std::f64::consts::SQRT_2 * std_normal().inverse_cdf(0.75)
}

fn std_normal() -> Normal {
    Normal::standard()
}

pub fn phi_inv(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// The 30% quantile of the standard normal, where model 2's last coefficient crosses zero.
pub fn model2_q() -> f64 {
    phi_inv(0.3)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimulationModel {
    Model1,
    Model2,
    /// Model 1 with AR(1) Gaussian-copula dependence across observations.
    DependentModel1 {
        ar: f64,
    },
    /// Model 1 with every observation uncensored.
    Model1Uncensored,
}

#[derive(Clone, Copy)]
enum Source {
    Covariates = 0,
    Event = 1,
    Censoring = 2,
}

fn stream(seed: u64, replication: u64, source: Source) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication * 16 + source as u64);
    rng
}

/// Conditional law of `(T, C)` given `Z`: independent normals, `C` possibly absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalLaw {
    pub event_mean: f64,
    pub event_sd: f64,
    /// `None` when there is no censoring.
    pub censoring: Option<(f64, f64)>,
}

impl SimulationModel {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "1" | "model1" => Ok(Self::Model1),
            "2" | "model2" => Ok(Self::Model2),
            "dep1" => Ok(Self::DependentModel1 { ar: 0.5 }),
            "1u" | "model1u" => Ok(Self::Model1Uncensored),
            _ => name
                .strip_prefix("dep1:")
                .and_then(|ar| ar.parse::<f64>().ok())
                .map(|ar| Self::DependentModel1 { ar })
                .ok_or_else(|| Error::InvalidInput(format!("unknown model {name:?}"))),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Self::Model2 => 7,
            _ => 10,
        }
    }

    /// Coordinates whose true coefficient is identically zero.
    pub fn zero_block(&self) -> Vec<usize> {
        match self {
            Self::Model2 => vec![3, 4, 5],
            _ => vec![5, 6, 7, 8, 9],
        }
    }

    /// Coordinates that are nonzero somewhere on the grid.
    pub fn support(&self) -> Vec<usize> {
        let zero = self.zero_block();
        (0..self.d()).filter(|k| !zero.contains(k)).collect()
    }

    pub fn true_beta(&self, tau: f64) -> Result<CoefVector> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain(format!("tau = {tau} outside (0, 1)")));
        }
        Ok(match self {
            Self::Model2 => CoefVector::new(vec![
                0.0,
                2.0,
                2.0,
                0.0,
                0.0,
                0.0,
                phi_inv(tau) - model2_q(),
            ]),
            _ => {
                let mut b = vec![MODEL1_SCALE * phi_inv(tau)];
                b.extend_from_slice(&MODEL1_SLOPES);
                CoefVector::new(b)
            }
        })
    }

    /// True coefficient rows on every grid point.
    pub fn true_path(&self, grid: &TauGrid) -> Vec<Vec<f64>> {
        grid.points()
            .iter()
            .map(|&t| self.true_beta(t).expect("grid inside (0,1)").into_values())
            .collect()
    }

    /// Distribution of `(T, C)` at covariate row `z` (with leading 1).
    pub fn conditional_law(&self, z: &[f64]) -> ConditionalLaw {
        match self {
            Self::Model2 => {
                let m = 2.0 * z[1] + 2.0 * z[2];
                ConditionalLaw {
                    event_mean: m - z[6] * model2_q(),
                    event_sd: z[6],
                    censoring: Some((m + MODEL2_SHIFT, 1.0)),
                }
            }
            _ => {
                let m: f64 = MODEL1_SLOPES.iter().zip(&z[1..]).map(|(b, z)| b * z).sum();
                let censoring = match self {
                    Self::Model1Uncensored => None,
                    _ => Some((m + model1_censoring_shift(), MODEL1_SCALE)),
                };
                ConditionalLaw {
                    event_mean: m,
                    event_sd: MODEL1_SCALE,
                    censoring,
                }
            }
        }
    }

    /// One replication of size `n`. Replication 0 is what [`Self::generate`] returns.
    pub fn generate_replication(&self, n: usize, seed: u64, replication: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        let d = self.d();
        let mut cov = stream(seed, replication, Source::Covariates);
        let mut ev = stream(seed, replication, Source::Event);
        let mut cen = stream(seed, replication, Source::Censoring);
        let (z, u, v) = match *self {
            Self::DependentModel1 { ar } => {
                if !(ar > -1.0 && ar < 1.0) {
                    return Err(Error::Domain(format!(
                        "ar coefficient must lie in (-1, 1), got {ar}"
                    )));
                }
                let normal = std_normal();
                let lat = ar_paths(&mut cov, n, d - 1, ar);
                let z = DMatrix::from_fn(n, d, |i, k| {
                    if k == 0 {
                        1.0
                    } else {
                        normal.cdf(lat[k - 1][i])
                    }
                });
                let u = ar_paths(&mut ev, n, 1, ar).swap_remove(0);
                let v = ar_paths(&mut cen, n, 1, ar).swap_remove(0);
                (z, u, v)
            }
            _ => {
                let offset = if *self == Self::Model2 { 0.2 } else { 0.0 };
                let mut z = DMatrix::from_element(n, d, 1.0);
                for i in 0..n {
                    for k in 1..d {
                        z[(i, k)] = offset + cov.gen::<f64>();
                    }
                }
                let u: Vec<f64> = (0..n).map(|_| ev.sample(StandardNormal)).collect();
                let v: Vec<f64> = (0..n).map(|_| cen.sample(StandardNormal)).collect();
                (z, u, v)
            }
        };
        let mut x = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        let row = |i: usize| -> Vec<f64> { (0..d).map(|k| z[(i, k)]).collect() };
        for i in 0..n {
            let law = self.conditional_law(&row(i));
            let t = law.event_mean + law.event_sd * u[i];
            let c = law.censoring.map_or(f64::INFINITY, |(m, s)| m + s * v[i]);
            x.push(t.min(c));
            delta.push(t <= c);
        }
        Dataset::new(x, delta, z)
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.generate_replication(n, seed, 0)
    }

    /// Fraction of draws with `C > Zᵀβ(τ_L + 0.05)`; the estimator assumes this is 1.
    pub fn early_censoring_clearance(&self, tau_l: f64, n: usize, seed: u64) -> Result<f64> {
        let data = self.generate_replication(n, seed, u64::MAX / 32)?;
        let beta = self.true_beta(tau_l + 0.05)?;
        let mut rng = stream(seed ^ 0xc1ea, 0, Source::Censoring);
        let mut clear = 0usize;
        for i in 0..n {
            let z: Vec<f64> = (0..data.d()).map(|k| data.z()[(i, k)]).collect();
            let c = match self.conditional_law(&z).censoring {
                None => f64::INFINITY,
                Some((m, s)) => m + s * rng.sample::<f64, _>(StandardNormal),
            };
            if c > data.fitted(i, beta.values()) {
                clear += 1;
            }
        }
        Ok(clear as f64 / n as f64)
    }
}

/// `count` independent stationary AR(1) paths with standard normal marginals.
fn ar_paths(rng: &mut ChaCha8Rng, n: usize, count: usize, ar: f64) -> Vec<Vec<f64>> {
    let innovation = (1.0 - ar * ar).sqrt();
    let mut paths = vec![Vec::with_capacity(n); count];
    let mut state: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..n {
        for (k, path) in paths.iter_mut().enumerate() {
            if i > 0 {
                let e: f64 = rng.sample(StandardNormal);
                state[k] = ar * state[k] + innovation * e;
            }
            path.push(state[k]);
        }
    }
    paths
}

pub fn gen_model1(n: usize, seed: u64) -> Result<Dataset> {
    SimulationModel::Model1.generate(n, seed)
}

pub fn gen_model2(n: usize, seed: u64) -> Result<Dataset> {
    SimulationModel::Model2.generate(n, seed)
}

pub fn gen_dependent_model1(n: usize, seed: u64, ar: f64) -> Result<Dataset> {
    SimulationModel::DependentModel1 { ar }.generate(n, seed)
}

pub fn true_beta_model1(tau: f64) -> Result<CoefVector> {
    SimulationModel::Model1.true_beta(tau)
}

pub fn true_beta_model2(tau: f64) -> Result<CoefVector> {
    SimulationModel::Model2.true_beta(tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_intercept() {
        let d1 = gen_model1(50, 1).unwrap();
        assert_eq!(d1.d(), 10);
        let d2 = gen_model2(50, 1).unwrap();
        assert_eq!(d2.d(), 7);
        assert!((0..50).all(|i| d2.z()[(i, 3)] >= 0.2 && d2.z()[(i, 3)] < 1.2));
    }

    #[test]
    fn reproducible_and_replication_keyed() {
        let m = SimulationModel::Model2;
        assert_eq!(
            m.generate_replication(30, 9, 4).unwrap(),
            m.generate_replication(30, 9, 4).unwrap()
        );
        assert_ne!(
            m.generate_replication(30, 9, 4).unwrap(),
            m.generate_replication(30, 9, 5).unwrap()
        );
        assert_ne!(m.generate(30, 9).unwrap(), m.generate(30, 10).unwrap());
    }

    #[test]
    fn true_paths() {
        let b = true_beta_model1(0.5).unwrap();
        assert!(b[0].abs() < 1e-12);
        assert_eq!(&b.values()[1..5], &[0.5, 1.0, 1.5, 2.0]);
        assert_eq!(
            true_beta_model1(0.2).unwrap().values()[1..],
            true_beta_model1(0.6).unwrap().values()[1..]
        );
        let b2 = true_beta_model2(0.3).unwrap();
        assert!(b2[6].abs() < 1e-12);
        assert_eq!(b2[0], 0.0);
        assert!(true_beta_model2(1.0).is_err());
    }

    #[test]
    fn censoring_fractions() {
        let c1 = gen_model1(100_000, 3).unwrap().censoring_fraction();
        assert!((c1 - 0.25).abs() < 0.03, "model 1 censoring {c1}");
        let c2 = gen_model2(100_000, 3).unwrap().censoring_fraction();
        assert!((c2 - 0.20).abs() < 0.03, "model 2 censoring {c2}");
        assert_eq!(
            SimulationModel::Model1Uncensored
                .generate(1000, 3)
                .unwrap()
                .censoring_fraction(),
            0.0
        );
    }

    #[test]
    fn empirical_quantiles_match_true_path() {
        // Conditional quantile of T at a fixed z, by drawing the event noise directly.
        for model in [SimulationModel::Model1, SimulationModel::Model2] {
            let z: Vec<f64> = (0..model.d())
                .map(|k| if k == 0 { 1.0 } else { 0.6 })
                .collect();
            let law = model.conditional_law(&z);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut t: Vec<f64> = (0..200_000)
                .map(|_| law.event_mean + law.event_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            t.sort_by(f64::total_cmp);
            for tau in [0.2, 0.3, 0.6] {
                let emp = t[(tau * t.len() as f64) as usize];
                let fit: f64 = model
                    .true_beta(tau)
                    .unwrap()
                    .values()
                    .iter()
                    .zip(&z)
                    .map(|(b, z)| b * z)
                    .sum();
                assert!(
                    (emp - fit).abs() < 0.01,
                    "{model:?} tau {tau}: {emp} vs {fit}"
                );
            }
        }
    }

    #[test]
    fn dependent_latent_autocorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let path = ar_paths(&mut rng, 100_000, 1, 0.5).swap_remove(0);
        let mean = path.iter().sum::<f64>() / path.len() as f64;
        let var = path.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        let cov = path
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>();
        assert!((cov / var - 0.5).abs() < 0.02);
        assert!((var / path.len() as f64 - 1.0).abs() < 0.03);
    }

    #[test]
    fn dependent_model_without_dependence_matches_marginals() {
        let a = gen_dependent_model1(50_000, 2, 0.0).unwrap();
        let b = gen_model1(50_000, 2).unwrap();
        assert!((a.censoring_fraction() - b.censoring_fraction()).abs() < 0.015);
        let mean = |d: &Dataset| d.x().iter().sum::<f64>() / d.n() as f64;
        assert!((mean(&a) - mean(&b)).abs() < 0.02);
        assert!(gen_dependent_model1(10, 2, 1.0).is_err());
    }

    #[test]
    fn early_censoring_clearance_is_high_but_not_total() {
        // C > Zᵀβ(0.2) fails when V < -1.5 - 0.32·Z₇, about 5% of draws
        let share = SimulationModel::Model2
            .early_censoring_clearance(0.15, 100_000, 1)
            .unwrap();
        assert!(share > 0.93 && share < 0.97, "{share}");
        let none = SimulationModel::Model1Uncensored
            .early_censoring_clearance(0.15, 1000, 1)
            .unwrap();
        assert_eq!(none, 1.0);
    }

    #[test]
    fn event_and_censoring_noise_are_uncorrelated() {
        let model = SimulationModel::Model1;
        let seed = 8;
        let mut ev = stream(seed, 0, Source::Event);
        let mut cen = stream(seed, 0, Source::Censoring);
        let pairs: Vec<(f64, f64)> = (0..100_000)
            .map(|_| {
                (
                    ev.sample::<f64, _>(StandardNormal),
                    cen.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        let r = pairs.iter().map(|(a, b)| a * b).sum::<f64>() / pairs.len() as f64;
        assert!(r.abs() < 0.015);
        assert!(model.generate(10, seed).is_ok());
    }
}
