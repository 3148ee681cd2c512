//! Penalty scales `p(n, τ_j) ∈ [0, ∞]` and the condition-(P) quantities.
//!
//! A grid step uses `γₖ = 2λ_n/pₖ(n, τ_j)`, so `pₖ = ∞` leaves a coordinate
//! unpenalised and `pₖ = 0` removes it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{QuantileProcess, TauGrid};

const CELL_TOLERANCE: f64 = 1e-9;

/// Disjoint cells `[lo, hi)` tiling `[τ_L, τ_U]`; the last cell is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Partition {
    cells: Vec<[f64; 2]>,
}

impl TryFrom<Vec<[f64; 2]>> for Partition {
    type Error = Error;

    fn try_from(cells: Vec<[f64; 2]>) -> Result<Self> {
        Partition::new(cells)
    }
}

impl From<Partition> for Vec<[f64; 2]> {
    fn from(p: Partition) -> Self {
        p.cells
    }
}

impl Partition {
    pub fn new(cells: Vec<[f64; 2]>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidInput(
                "partition needs at least one cell".into(),
            ));
        }
        for w in cells.windows(2) {
            if (w[0][1] - w[1][0]).abs() > CELL_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "partition cells {:?} and {:?} are not adjacent",
                    w[0], w[1]
                )));
            }
        }
        if cells.iter().any(|c| !(c[0] < c[1])) {
            return Err(Error::InvalidInput(
                "partition cells must have lo < hi".into(),
            ));
        }
        Ok(Self { cells })
    }

    /// One cell covering the whole grid.
    pub fn whole(grid: &TauGrid) -> Self {
        let hi = if grid.tau_u() > grid.tau_l() {
            grid.tau_u()
        } else {
            grid.tau_l() + 1e-6
        };
        Self {
            cells: vec![[grid.tau_l(), hi]],
        }
    }

    /// Checks that the cells tile `[τ_L, τ_U]`.
    pub fn check_covers(&self, grid: &TauGrid) -> Result<()> {
        let lo = self.cells[0][0];
        let hi = self.cells[self.cells.len() - 1][1];
        if (lo - grid.tau_l()).abs() > CELL_TOLERANCE || hi < grid.tau_u() - CELL_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "partition [{lo}, {hi}] does not tile [{}, {}]",
                grid.tau_l(),
                grid.tau_u()
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> &[[f64; 2]] {
        &self.cells
    }

    pub fn cell_of(&self, tau: f64) -> Result<usize> {
        let last = self.cells.len() - 1;
        self.cells
            .iter()
            .position(|&[lo, hi]| tau >= lo - CELL_TOLERANCE && tau < hi - CELL_TOLERANCE)
            .or_else(|| {
                let [lo, hi] = self.cells[last];
                (tau >= lo - CELL_TOLERANCE && tau <= hi + CELL_TOLERANCE).then_some(last)
            })
            .ok_or(Error::PartitionMismatch { tau })
    }
}

/// Piecewise-constant map `τ ↦ χ(τ)` of active coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportMap {
    partition: Partition,
    sets: Vec<Vec<usize>>,
}

impl SupportMap {
    pub fn new(partition: Partition, sets: Vec<Vec<usize>>) -> Result<Self> {
        if sets.len() != partition.cells().len() {
            return Err(Error::InvalidInput(
                "one active set per partition cell required".into(),
            ));
        }
        Ok(Self { partition, sets })
    }

    /// The same active set over the whole grid.
    pub fn constant(grid: &TauGrid, active: Vec<usize>) -> Self {
        Self {
            partition: Partition::whole(grid),
            sets: vec![active],
        }
    }

    pub fn active(&self, tau: f64) -> Result<&[usize]> {
        Ok(&self.sets[self.partition.cell_of(tau)?])
    }
}

/// Weight function `h` for the integrated average penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellWeight {
    #[default]
    Uniform,
    /// Density proportional to `1 + slope·(τ − midpoint)` on each cell.
    Linear { slope: f64 },
}

impl CellWeight {
    fn value(&self, tau: f64, cell: [f64; 2]) -> f64 {
        match *self {
            CellWeight::Uniform => 1.0,
            CellWeight::Linear { slope } => 1.0 + slope * (tau - 0.5 * (cell[0] + cell[1])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyProvider {
    /// `pₖ = ∞`: no penalisation.
    None,
    /// `pₖ = ∞` on `χ(τ_j)`, `0` elsewhere.
    Oracle(SupportMap),
    /// `pₖ = |β̃ₖ(τ_j)|`.
    AdaptiveLasso { pilot: QuantileProcess },
    /// `pₖ = Σ_t |β̃ₖ(t)| h(t) / Σ_t h(t)` over grid points `t` of the cell of `τ_j`.
    AverageInt {
        pilot: QuantileProcess,
        partition: Partition,
        weight: CellWeight,
    },
    /// `pₖ = max_t |β̃ₖ(t)|` over grid points of the cell of `τ_j`.
    AverageMax {
        pilot: QuantileProcess,
        partition: Partition,
    },
    /// The [`PenaltyProvider::AverageMax`] value maximised over each group.
    GroupMax {
        pilot: QuantileProcess,
        partition: Partition,
        groups: Vec<Vec<usize>>,
    },
}

impl PenaltyProvider {
    fn pilot(&self) -> Option<&QuantileProcess> {
        match self {
            PenaltyProvider::None | PenaltyProvider::Oracle(_) => None,
            PenaltyProvider::AdaptiveLasso { pilot }
            | PenaltyProvider::AverageInt { pilot, .. }
            | PenaltyProvider::AverageMax { pilot, .. }
            | PenaltyProvider::GroupMax { pilot, .. } => Some(pilot),
        }
    }

    /// `p(n, τ_j)` for every grid point, as rows.
    pub fn all_weights(&self, grid: &TauGrid, d: usize) -> Result<Vec<Vec<f64>>> {
        if let Some(pilot) = self.pilot() {
            if pilot.grid() != grid {
                return Err(Error::InvalidInput(
                    "pilot must be fitted on the estimation grid".into(),
                ));
            }
            if pilot.d() != d {
                return Err(Error::OracleMismatch {
                    oracle: pilot.d(),
                    data: d,
                });
            }
        }
        let pts = grid.points();
        match self {
            PenaltyProvider::None => Ok(vec![vec![f64::INFINITY; d]; pts.len()]),
            PenaltyProvider::Oracle(map) => pts
                .iter()
                .map(|&tau| {
                    let active = map.active(tau)?;
                    if let Some(&k) = active.iter().find(|&&k| k >= d) {
                        return Err(Error::OracleMismatch {
                            oracle: k + 1,
                            data: d,
                        });
                    }
                    Ok((0..d)
                        .map(|k| {
                            if active.contains(&k) {
                                f64::INFINITY
                            } else {
                                0.0
                            }
                        })
                        .collect())
                })
                .collect(),
            PenaltyProvider::AdaptiveLasso { pilot } => Ok(pilot
                .coefs()
                .iter()
                .map(|row| row.iter().map(|v| v.abs()).collect())
                .collect()),
            PenaltyProvider::AverageInt {
                pilot,
                partition,
                weight,
            } => cell_weights(grid, partition, |cell, members| {
                let bounds = partition.cells()[cell];
                let hs: Vec<f64> = members
                    .iter()
                    .map(|&t| weight.value(pts[t], bounds))
                    .collect();
                if hs.iter().any(|&h| !(h > 0.0)) {
                    return Err(Error::InvalidInput(
                        "cell weight must be strictly positive".into(),
                    ));
                }
                let total: f64 = hs.iter().sum();
                Ok((0..d)
                    .map(|k| {
                        members
                            .iter()
                            .zip(&hs)
                            .map(|(&t, h)| pilot.row(t)[k].abs() * h)
                            .sum::<f64>()
                            / total
                    })
                    .collect())
            }),
            PenaltyProvider::AverageMax { pilot, partition } => {
                cell_weights(grid, partition, |_, members| {
                    Ok(cell_max(pilot, members, d))
                })
            }
            PenaltyProvider::GroupMax {
                pilot,
                partition,
                groups,
            } => cell_weights(grid, partition, |_, members| {
                let own = cell_max(pilot, members, d);
                let mut out = own.clone();
                for group in groups {
                    if let Some(&k) = group.iter().find(|&&k| k >= d) {
                        return Err(Error::InvalidInput(format!("group index {k} out of range")));
                    }
                    let m = group.iter().map(|&k| own[k]).fold(0.0, f64::max);
                    group.iter().for_each(|&k| out[k] = out[k].max(m));
                }
                Ok(out)
            }),
        }
    }

    pub fn penalty_weights(&self, grid: &TauGrid, j: usize) -> Result<Vec<f64>> {
        let d = match (self.pilot(), self) {
            (Some(p), _) => p.d(),
            (None, PenaltyProvider::Oracle(map)) => map
                .sets
                .iter()
                .flatten()
                .copied()
                .max()
                .map_or(1, |k| k + 1),
            _ => 1,
        };
        self.penalty_weights_d(grid, j, d)
    }

    /// As [`Self::penalty_weights`] with an explicit dimension.
    pub fn penalty_weights_d(&self, grid: &TauGrid, j: usize, d: usize) -> Result<Vec<f64>> {
        if j >= grid.len() {
            return Err(Error::Domain(format!("grid index {j} out of range")));
        }
        Ok(self.all_weights(grid, d)?.swap_remove(j))
    }
}

fn cell_max(pilot: &QuantileProcess, members: &[usize], d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            members
                .iter()
                .map(|&t| pilot.row(t)[k].abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

fn cell_weights(
    grid: &TauGrid,
    partition: &Partition,
    per_cell: impl Fn(usize, &[usize]) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let cells: Vec<usize> = grid
        .points()
        .iter()
        .map(|&t| partition.cell_of(t))
        .collect::<Result<_>>()?;
    let mut values: Vec<Option<Vec<f64>>> = vec![None; partition.cells().len()];
    for c in 0..values.len() {
        let members: Vec<usize> = (0..cells.len()).filter(|&t| cells[t] == c).collect();
        if !members.is_empty() {
            values[c] = Some(per_cell(c, &members)?);
        }
    }
    Ok(cells
        .iter()
        .map(|&c| values[c].clone().expect("cell has members"))
        .collect())
}

/// Condition-(P) quantities for a given `λ_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionP {
    /// `inf_j inf_{k ∉ χ(τ_j)} λ_n/pₖ(n, τ_j)`.
    pub lambda0: f64,
    /// `sup_j sup_{k ∈ χ(τ_j)} λ_n/pₖ(n, τ_j)`.
    pub lambda1: f64,
    pub sqrtn_lambda0: f64,
    pub sqrtn_lambda1: f64,
}

/// Uses the effective scales, so an unpenalised intercept counts as `pₖ = ∞`.
/// Conventions: `λ/0 = ∞`, `λ/∞ = 0`, an empty infimum is `∞` and an empty
/// supremum is `0`.
#[allow(clippy::too_many_arguments)]
pub fn condition_p_stats(
    provider: &PenaltyProvider,
    grid: &TauGrid,
    lambda: f64,
    support: &SupportMap,
    n: usize,
    d: usize,
    penalize_intercept: bool,
) -> Result<ConditionP> {
    let scales = provider.all_weights(grid, d)?;
    let ratio = |p: f64| {
        if p == 0.0 {
            f64::INFINITY
        } else if p.is_infinite() {
            0.0
        } else {
            lambda / p
        }
    };
    let mut lambda0 = f64::INFINITY;
    let mut lambda1: f64 = 0.0;
    for (j, &tau) in grid.points().iter().enumerate() {
        let active = support.active(tau)?;
        for k in 0..d {
            let p = if k == 0 && !penalize_intercept {
                f64::INFINITY
            } else {
                scales[j][k]
            };
            let r = ratio(p);
            if active.contains(&k) {
                lambda1 = lambda1.max(r);
            } else {
                lambda0 = lambda0.min(r);
            }
        }
    }
    let root = (n as f64).sqrt();
    Ok(ConditionP {
        lambda0,
        lambda1,
        sqrtn_lambda0: root * lambda0,
        sqrtn_lambda1: root * lambda1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TauGrid {
        TauGrid::new(0.2, 0.5, 0.1).unwrap()
    }

    fn pilot(rows: Vec<Vec<f64>>) -> QuantileProcess {
        QuantileProcess::new(grid(), rows).unwrap()
    }

    fn halves() -> Partition {
        Partition::new(vec![[0.2, 0.4], [0.4, 0.5]]).unwrap()
    }

    #[test]
    fn none_and_oracle() {
        let g = grid();
        assert_eq!(
            PenaltyProvider::None.all_weights(&g, 2).unwrap()[0],
            vec![f64::INFINITY; 2]
        );
        let oracle = PenaltyProvider::Oracle(SupportMap::constant(&g, vec![0, 2]));
        assert_eq!(
            oracle.penalty_weights_d(&g, 1, 3).unwrap(),
            vec![f64::INFINITY, 0.0, f64::INFINITY]
        );
    }

    #[test]
    fn adaptive_uses_magnitudes() {
        let p = PenaltyProvider::AdaptiveLasso {
            pilot: pilot(vec![
                vec![1.0, 0.5],
                vec![1.0, -0.5],
                vec![1.0, 0.2],
                vec![1.0, 0.0],
            ]),
        };
        assert_eq!(p.penalty_weights(&grid(), 0).unwrap()[1], 0.5);
        assert_eq!(p.penalty_weights(&grid(), 1).unwrap()[1], 0.5);
    }

    #[test]
    fn averages_are_constant_per_cell() {
        let rows = vec![
            vec![1.0, 0.3],
            vec![1.0, -0.6],
            vec![1.0, 0.9],
            vec![1.0, 0.0],
        ];
        let avg = PenaltyProvider::AverageInt {
            pilot: pilot(rows.clone()),
            partition: halves(),
            weight: CellWeight::Uniform,
        };
        let w = avg.all_weights(&grid(), 2).unwrap();
        assert!((w[0][1] - 0.45).abs() < 1e-15);
        assert_eq!(w[0], w[1]);
        assert!((w[2][1] - 0.45).abs() < 1e-15);
        assert_eq!(w[2], w[3]);

        let max = PenaltyProvider::AverageMax {
            pilot: pilot(rows),
            partition: halves(),
        };
        let w = max.all_weights(&grid(), 2).unwrap();
        assert_eq!(w[1][1], 0.6);
        assert_eq!(w[3][1], 0.9);
    }

    #[test]
    fn constant_pilot_averages_to_itself() {
        let rows = vec![vec![1.0, -0.7]; 4];
        for weight in [CellWeight::Uniform, CellWeight::Linear { slope: 3.0 }] {
            let avg = PenaltyProvider::AverageInt {
                pilot: pilot(rows.clone()),
                partition: Partition::whole(&grid()),
                weight,
            };
            let w = avg.all_weights(&grid(), 2).unwrap();
            assert!(w.iter().all(|r| (r[1] - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_pilot_gives_zero_scale() {
        let rows = vec![vec![1.0, 0.0]; 4];
        let avg = PenaltyProvider::AverageMax {
            pilot: pilot(rows),
            partition: halves(),
        };
        assert!(avg
            .all_weights(&grid(), 2)
            .unwrap()
            .iter()
            .all(|r| r[1] == 0.0));
    }

    #[test]
    fn group_max_dominates() {
        let rows = vec![vec![1.0, 0.1, 0.8, 0.3]; 4];
        let p = pilot(rows);
        let own = PenaltyProvider::AverageMax {
            pilot: p.clone(),
            partition: halves(),
        };
        let group = PenaltyProvider::GroupMax {
            pilot: p,
            partition: halves(),
            groups: vec![vec![1, 2]],
        };
        let a = own.all_weights(&grid(), 4).unwrap();
        let b = group.all_weights(&grid(), 4).unwrap();
        assert_eq!(b[0], vec![1.0, 0.8, 0.8, 0.3]);
        assert!(a
            .iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(x, y)| y >= x));
    }

    #[test]
    fn partition_membership() {
        let p = halves();
        assert_eq!(p.cell_of(0.2).unwrap(), 0);
        assert_eq!(p.cell_of(0.4).unwrap(), 1);
        assert_eq!(p.cell_of(0.5).unwrap(), 1);
        assert!(matches!(
            p.cell_of(0.55),
            Err(Error::PartitionMismatch { .. })
        ));
        assert!(Partition::new(vec![[0.2, 0.3], [0.35, 0.5]]).is_err());
        let short = Partition::new(vec![[0.2, 0.3]]).unwrap();
        let avg = PenaltyProvider::AverageMax {
            pilot: pilot(vec![vec![1.0]; 4]),
            partition: short,
        };
        assert!(matches!(
            avg.all_weights(&grid(), 1),
            Err(Error::PartitionMismatch { .. })
        ));
    }

    #[test]
    fn condition_p_conventions() {
        let g = grid();
        let support = SupportMap::constant(&g, vec![0, 1]);
        let oracle = PenaltyProvider::Oracle(support.clone());
        let s = condition_p_stats(&oracle, &g, 0.1, &support, 100, 3, false).unwrap();
        assert_eq!((s.sqrtn_lambda0, s.sqrtn_lambda1), (f64::INFINITY, 0.0));
        let s =
            condition_p_stats(&PenaltyProvider::None, &g, 0.1, &support, 100, 3, false).unwrap();
        assert_eq!((s.sqrtn_lambda0, s.sqrtn_lambda1), (0.0, 0.0));

        let ada = PenaltyProvider::AdaptiveLasso {
            pilot: pilot(vec![vec![1.0, 0.5, 0.25]; 4]),
        };
        let s1 = condition_p_stats(&ada, &g, 0.1, &support, 100, 3, false).unwrap();
        let s2 = condition_p_stats(&ada, &g, 0.2, &support, 100, 3, false).unwrap();
        assert!((s1.lambda1 - 0.2).abs() < 1e-15 && (s1.lambda0 - 0.4).abs() < 1e-15);
        assert!((s2.lambda0 - 2.0 * s1.lambda0).abs() < 1e-15);
        assert!((s1.sqrtn_lambda0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn partition_json_is_a_list_of_pairs() {
        let text = serde_json::to_string(&halves()).unwrap();
        assert_eq!(text, "[[0.2,0.4],[0.4,0.5]]");
        assert_eq!(serde_json::from_str::<Partition>(&text).unwrap(), halves());
        assert!(serde_json::from_str::<Partition>("[[0.2,0.3],[0.4,0.5]]").is_err());
    }
}
