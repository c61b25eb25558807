//! Strategy x budget x seed comparison grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active_loop::{run_loop, Budget, LoopConfig, LoopOutcome, ModelAdapter};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::sampler::Strategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.budgets.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("compare needs at least one strategy, budget and seed"));
        }
        Ok(())
    }

    /// All cells in a fixed order: strategy name, budget, seed.
    pub fn cells(&self) -> Vec<(Strategy, usize, u64)> {
        let mut strategies = self.strategies.clone();
        strategies.sort_by_key(|s| s.name());
        strategies.dedup();
        let mut budgets = self.budgets.clone();
        budgets.sort_unstable();
        budgets.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = Vec::new();
        for &st in &strategies {
            for &b in &budgets {
                for &s in &seeds {
                    out.push((st, b, s));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub budget: usize,
    pub seed: u64,
    pub map_50: f64,
    pub map_coco: f64,
    pub rounds: usize,
    pub labeled: usize,
    pub truncated: bool,
}

/// Runs one loop with total budget `budget` and summarizes its final round.
pub fn run_cell<A: ModelAdapter>(
    pool: &Dataset,
    test: &Dataset,
    adapter: &A,
    base: &LoopConfig,
    strategy: Strategy,
    budget: usize,
    seed: u64,
) -> Result<(CellResult, LoopOutcome<A::Model>)> {
    let config = LoopConfig {
        strategy,
        seed,
        budget: Budget {
            total: budget,
            ..base.budget
        },
        ..base.clone()
    };
    let outcome = run_loop(pool, test, adapter, &config)?;
    let metrics = outcome
        .rounds
        .last()
        .map_or(&outcome.initial_metrics, |r| &r.metrics);
    let cell = CellResult {
        strategy,
        budget,
        seed,
        map_50: metrics.map_50,
        map_coco: metrics.map_coco,
        rounds: outcome.rounds.len(),
        labeled: outcome.state.labeled.len() + outcome.state.new_labeled.len(),
        truncated: outcome.truncated,
    };
    Ok((cell, outcome))
}

/// Runs every grid cell. `make_adapter` builds a fresh adapter for a seed so
/// cells share nothing. Results come back in [`GridSpec::cells`] order
/// whatever the degree of parallelism.
pub fn run_grid<A, F>(
    pool: &Dataset,
    test: &Dataset,
    make_adapter: F,
    base: &LoopConfig,
    spec: &GridSpec,
) -> Result<Vec<CellResult>>
where
    A: ModelAdapter,
    F: Fn(u64) -> Result<A> + Sync,
{
    spec.validate()?;
    spec.cells()
        .into_par_iter()
        .map(|(strategy, budget, seed)| {
            let adapter = make_adapter(seed)?;
            run_cell(pool, test, &adapter, base, strategy, budget, seed).map(|(c, _)| c)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub budget: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub strategy: Strategy,
    pub cells: Vec<CellStat>,
}

/// Mean and sample standard deviation of mAP@0.5 per (strategy, budget).
/// Rows sorted by strategy name, columns by budget.
pub fn summarize(results: &[CellResult]) -> Vec<GridRow> {
    let mut groups: BTreeMap<(&'static str, usize), (Strategy, Vec<f64>)> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.strategy.name(), r.budget))
            .or_insert_with(|| (r.strategy, Vec::new()))
            .1
            .push(r.map_50);
    }
    let mut rows: Vec<GridRow> = Vec::new();
    for ((_, budget), (strategy, values)) in groups {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let stat = CellStat { budget, mean, std, n };
        match rows.last_mut() {
            Some(row) if row.strategy == strategy => row.cells.push(stat),
            _ => rows.push(GridRow {
                strategy,
                cells: vec![stat],
            }),
        }
    }
    rows
}

pub fn mean_map(rows: &[GridRow], strategy: Strategy, budget: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.strategy == strategy)?
        .cells
        .iter()
        .find(|c| c.budget == budget)
        .map(|c| c.mean)
}

fn budgets_of(rows: &[GridRow]) -> Vec<usize> {
    let mut b: Vec<usize> = rows
        .iter()
        .flat_map(|r| r.cells.iter().map(|c| c.budget))
        .collect();
    b.sort_unstable();
    b.dedup();
    b
}

/// `strategy,budget,mean,std,n` lines.
pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("strategy,budget,map50_mean,map50_std,n\n");
    for row in rows {
        for c in &row.cells {
            writeln!(out, "{},{},{:.6},{:.6},{}", row.strategy, c.budget, c.mean, c.std, c.n).unwrap();
        }
    }
    out
}

/// Plain-text table: one row per strategy, one `mean±std` column per budget.
pub fn grid_table(rows: &[GridRow]) -> String {
    let budgets = budgets_of(rows);
    let mut out = format!("{:<12}", "strategy");
    for b in &budgets {
        write!(out, " {:>15}", b).unwrap();
    }
    out.push('\n');
    for row in rows {
        write!(out, "{:<12}", row.strategy.name()).unwrap();
        for b in &budgets {
            let cell = row.cells.iter().find(|c| c.budget == *b).map_or_else(
                || "-".to_string(),
                |c| format!("{:.4}±{:.4}", c.mean, c.std),
            );
            write!(out, " {:>15}", cell).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(strategy: Strategy, budget: usize, seed: u64, map_50: f64) -> CellResult {
        CellResult {
            strategy,
            budget,
            seed,
            map_50,
            map_coco: map_50 / 2.0,
            rounds: 1,
            labeled: budget,
            truncated: false,
        }
    }

    #[test]
    fn summary_layout_is_sorted() {
        let results = vec![
            cell(Strategy::Tc, 200, 1, 0.8),
            cell(Strategy::Random, 200, 1, 0.6),
            cell(Strategy::Random, 100, 1, 0.5),
            cell(Strategy::Random, 100, 2, 0.7),
            cell(Strategy::Bba, 100, 1, 0.4),
        ];
        let rows = summarize(&results);
        let names: Vec<_> = rows.iter().map(|r| r.strategy.name()).collect();
        assert_eq!(names, vec!["bba", "random", "tc"]);
        let random = &rows[1];
        assert_eq!(random.cells.iter().map(|c| c.budget).collect::<Vec<_>>(), vec![100, 200]);
        assert!((random.cells[0].mean - 0.6).abs() < 1e-12);
        assert!((random.cells[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_map(&rows, Strategy::Tc, 200), Some(0.8));
        assert_eq!(mean_map(&rows, Strategy::Tc, 100), None);

        let csv = grid_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("strategy,budget"));
        let table = grid_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(1).unwrap().starts_with("bba"));
    }

    #[test]
    fn single_cell_grid() {
        let spec = GridSpec {
            strategies: vec![Strategy::Random],
            budgets: vec![100],
            seeds: vec![1],
        };
        assert_eq!(spec.cells(), vec![(Strategy::Random, 100, 1)]);
        let rows = summarize(&[cell(Strategy::Random, 100, 1, 0.5)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].cells.len(), 1);
        assert!(GridSpec { strategies: vec![], ..spec }.validate().is_err());
    }
}
