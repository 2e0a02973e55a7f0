//! Grid sweeps over sample counts and barrier strengths.
//!
//! Cells are independent training runs. They are spread over threads by
//! the outer [`Execution`] and each runs single-threaded inside, so every
//! cell's output is the same as a standalone run with the same config.

use std::fmt::Write as _;
use std::path::PathBuf;

use super::config::{Algo, ExperimentConfig};
use super::metrics::{format_float, tail_mean, violation_count, write_text};
use super::training::run_training;
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Epochs averaged at the end of a run for the β sweep.
pub const TAIL_EPOCHS: usize = 10;

/// Condensed outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub algo: Algo,
    pub trajectories: usize,
    pub beta: f64,
    pub seed: u64,
    pub epochs: usize,
    pub violations: usize,
    /// Mean discounted cost of the first constraint over the last
    /// [`TAIL_EPOCHS`] epochs.
    pub tail_cost: f64,
    pub tail_return: f64,
    /// Largest KL among accepted updates, 0 if none was accepted.
    pub max_accepted_kl: f64,
    /// Accepted updates whose KL exceeds the trust region by more than 1e-6.
    pub kl_exceptions: usize,
}

impl CellResult {
    pub fn violation_fraction(&self) -> f64 {
        self.violations as f64 / self.epochs.max(1) as f64
    }
}

fn cell_dir(base: &ExperimentConfig, name: String) -> Option<PathBuf> {
    base.out.as_ref().map(|d| d.join(name))
}

/// Runs one cell. Output, if any, goes to a subdirectory of `base.out`.
pub fn run_cell(base: &ExperimentConfig, algo: Algo, trajectories: usize, beta: f64, seed: u64) -> Result<CellResult> {
    let name = format!("{}_n{}_beta{}_seed{}", algo.name(), trajectories, beta, seed);
    let cfg = ExperimentConfig {
        algo,
        trajectories_per_epoch: trajectories,
        beta,
        seed,
        out: cell_dir(base, name),
        ..base.clone()
    };
    let run = run_training(&cfg, Execution::Sequential)?;
    let accepted_kl: Vec<f64> = run.reports.iter().filter(|r| r.accepted).map(|r| r.kl_after).collect();
    Ok(CellResult {
        algo,
        trajectories,
        beta,
        seed,
        epochs: run.rows.len(),
        violations: violation_count(&run.rows),
        tail_cost: tail_mean(&run.rows, TAIL_EPOCHS, |r| r.discounted_cost[0]),
        tail_return: tail_mean(&run.rows, TAIL_EPOCHS, |r| r.undiscounted_return),
        max_accepted_kl: accepted_kl.iter().copied().fold(0.0, f64::max),
        kl_exceptions: accepted_kl.iter().filter(|kl| **kl > cfg.mu + 1e-6).count(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Standard error of the mean; 0 for fewer than two values.
pub fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSweep {
    pub algos: Vec<Algo>,
    pub sample_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl SampleSweep {
    pub fn cells_for(&self, algo: Algo, n: usize) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.algo == algo && c.trajectories == n)
    }

    /// Seed-averaged violation count.
    pub fn mean_violations(&self, algo: Algo, n: usize) -> f64 {
        mean(&self.cells_for(algo, n).map(|c| c.violations as f64).collect::<Vec<_>>())
    }

    pub fn mean_violation_fraction(&self, algo: Algo, n: usize) -> f64 {
        mean(&self.cells_for(algo, n).map(|c| c.violation_fraction()).collect::<Vec<_>>())
    }

    /// One row per algorithm, one column per sample count, holding
    /// seed-averaged violation counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("algo");
        for n in &self.sample_counts {
            write!(out, ",n={n}").unwrap();
        }
        out.push('\n');
        for algo in &self.algos {
            out.push_str(algo.name());
            for n in &self.sample_counts {
                write!(out, ",{}", format_float(self.mean_violations(*algo, *n))).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every `(algo, sample count, seed)` combination of `base`.
pub fn sweep_samples(base: &ExperimentConfig, algos: &[Algo], sample_counts: &[usize], seeds: &[u64], exec: Execution) -> Result<SampleSweep> {
    if algos.is_empty() || sample_counts.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one algorithm, sample count and seed".into()));
    }
    if sample_counts.contains(&0) {
        return Err(Error::Config("sample counts must be >= 1".into()));
    }
    let grid: Vec<(Algo, usize, u64)> = algos
        .iter()
        .flat_map(|a| sample_counts.iter().flat_map(move |n| seeds.iter().map(move |s| (*a, *n, *s))))
        .collect();
    let cells = exec
        .map(&grid, |&(algo, n, seed)| run_cell(base, algo, n, base.beta, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let sweep = SampleSweep {
        algos: algos.to_vec(),
        sample_counts: sample_counts.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    };
    if let Some(dir) = &base.out {
        write_text(&dir.join("sweep_samples.csv"), &sweep.to_csv())?;
    }
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaSweep {
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl BetaSweep {
    fn column(&self, beta: f64, f: impl Fn(&CellResult) -> f64) -> Vec<f64> {
        self.cells.iter().filter(|c| c.beta == beta).map(f).collect()
    }

    pub fn tail_costs(&self, beta: f64) -> Vec<f64> {
        self.column(beta, |c| c.tail_cost)
    }

    pub fn mean_cost(&self, beta: f64) -> f64 {
        mean(&self.tail_costs(beta))
    }

    pub fn cost_standard_error(&self, beta: f64) -> f64 {
        standard_error(&self.tail_costs(beta))
    }

    pub fn mean_return(&self, beta: f64) -> f64 {
        mean(&self.column(beta, |c| c.tail_return))
    }

    /// Whether the mean tail cost never rises from one β to the next by
    /// more than the pair's pooled standard error `sqrt(se₁² + se₂²)`.
    pub fn cost_non_increasing(&self) -> bool {
        let mut sorted = self.betas.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.windows(2).all(|w| {
            let pooled = self.cost_standard_error(w[0]).hypot(self.cost_standard_error(w[1]));
            self.mean_cost(w[1]) <= self.mean_cost(w[0]) + pooled
        })
    }

    /// Columns `seed`, then `cost@β` and `return@β` for each β. One row per
    /// seed followed by `mean` and `stderr` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed");
        for b in &self.betas {
            write!(out, ",cost@{b},return@{b}").unwrap();
        }
        out.push('\n');
        for seed in &self.seeds {
            out.push_str(&seed.to_string());
            for b in &self.betas {
                let c = self.cells.iter().find(|c| c.seed == *seed && c.beta == *b).expect("every cell ran");
                write!(out, ",{},{}", format_float(c.tail_cost), format_float(c.tail_return)).unwrap();
            }
            out.push('\n');
        }
        out.push_str("mean");
        for b in &self.betas {
            write!(out, ",{},{}", format_float(self.mean_cost(*b)), format_float(self.mean_return(*b))).unwrap();
        }
        out.push_str("\nstderr");
        for b in &self.betas {
            let se_ret = standard_error(&self.column(*b, |c| c.tail_return));
            write!(out, ",{},{}", format_float(self.cost_standard_error(*b)), format_float(se_ret)).unwrap();
        }
        out.push('\n');
        out
    }
}

/// Trains LBPO at every `(β, seed)` combination of `base`.
pub fn sweep_beta(base: &ExperimentConfig, betas: &[f64], seeds: &[u64], exec: Execution) -> Result<BetaSweep> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one beta and one seed".into()));
    }
    if betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(Error::Config("betas must be finite and >= 0".into()));
    }
    let grid: Vec<(f64, u64)> = betas.iter().flat_map(|b| seeds.iter().map(move |s| (*b, *s))).collect();
    let cells = exec
        .map(&grid, |&(beta, seed)| run_cell(base, Algo::Lbpo, base.trajectories_per_epoch, beta, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let sweep = BetaSweep {
        betas: betas.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    };
    if let Some(dir) = &base.out {
        write_text(&dir.join("sweep_beta.csv"), &sweep.to_csv())?;
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::DidacticParams;
    use crate::harness::config::EnvConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            env: EnvConfig::Didactic(DidacticParams {
                threshold: 3.5,
                ..Default::default()
            }),
            epochs: 2,
            q_epochs: 5,
            policy_hidden: vec![8],
            q_hidden: vec![8],
            ..Default::default()
        }
    }

    #[test]
    fn standard_error_examples() {
        assert_eq!(standard_error(&[3.0]), 0.0);
        assert!((standard_error(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_cell_sample_sweep_equals_the_run() {
        let base = tiny();
        let sweep = sweep_samples(&base, &[Algo::Lbpo], &[8], &[7], Execution::Parallel).unwrap();
        let cell = run_cell(&base, Algo::Lbpo, 8, base.beta, 7).unwrap();
        assert_eq!(sweep.cells, vec![cell.clone()]);
        assert_eq!(sweep.mean_violations(Algo::Lbpo, 8), cell.violations as f64);
        let csv = sweep.to_csv();
        assert_eq!(csv.lines().next(), Some("algo,n=8"));
    }

    #[test]
    fn beta_sweep_csv_shape() {
        let base = ExperimentConfig { trajectories_per_epoch: 8, ..tiny() };
        let betas = [0.005, 0.02];
        let sweep = sweep_beta(&base, &betas, &[0, 1], Execution::Sequential).unwrap();
        let csv = sweep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 2);
        for line in &lines {
            assert_eq!(line.split(',').count(), 1 + 2 * betas.len());
        }
        assert!(lines[3].starts_with("mean,"));
        assert!(lines[4].starts_with("stderr,"));
    }

    #[test]
    fn empty_grids_rejected() {
        assert!(sweep_samples(&tiny(), &[], &[5], &[0], Execution::Sequential).is_err());
        assert!(sweep_samples(&tiny(), &[Algo::Lbpo], &[0], &[0], Execution::Sequential).is_err());
        assert!(sweep_beta(&tiny(), &[], &[0], Execution::Sequential).is_err());
        assert!(sweep_beta(&tiny(), &[-1.0], &[0], Execution::Sequential).is_err());
    }
}
