//! Parameter sweeps over price and demand time constants and curtailment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scmarket_core::stability::{assemble_linearization, hurwitz_check};
use scmarket_core::MarketScenario;

use crate::error::CliError;

/// `n` evenly spaced points from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n).map(|k| start + (stop - start) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub tau_rho_values: Vec<f64>,
    pub tau_ag_values: Vec<f64>,
    pub kappa_values: Vec<(f64, f64)>,
}

impl Default for SweepGrid {
    /// 25 price time constants in `[0.05, 5]` (zero would divide by zero),
    /// 16 demand time constants in `[0.05, 0.2]`, three curtailment pairs.
    fn default() -> Self {
        Self {
            tau_rho_values: linspace(0.05, 5.0, 25),
            tau_ag_values: linspace(0.05, 0.2, 16),
            kappa_values: vec![(0.0, 0.0), (0.02, 0.02), (0.05, 0.05)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub tau_rho: f64,
    pub tau_ag: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapRow {
    pub cell: Cell,
    pub max_real_eig: f64,
    pub is_hurwitz: bool,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.tau_rho_values) || !positive(&self.tau_ag_values) {
            return Err(CliError::Usage("time constants in a sweep must be positive".into()));
        }
        for &(k1, k2) in &self.kappa_values {
            if !(k1 >= 0.0 && k2 >= 0.0 && k1 + k2 < 1.0) {
                return Err(CliError::Usage(format!("curtailment pair ({k1}, {k2}) needs k >= 0 and k1 + k2 < 1")));
            }
        }
        Ok(())
    }

    /// Cells ordered by `(kappa1, kappa2, tau_rho, tau_ag)`.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self
            .kappa_values
            .iter()
            .flat_map(|&(kappa1, kappa2)| {
                self.tau_rho_values.iter().flat_map(move |&tau_rho| {
                    self.tau_ag_values.iter().map(move |&tau_ag| Cell { tau_rho, tau_ag, kappa1, kappa2 })
                })
            })
            .collect();
        cells.sort_by(|a, b| {
            a.kappa1
                .total_cmp(&b.kappa1)
                .then(a.kappa2.total_cmp(&b.kappa2))
                .then(a.tau_rho.total_cmp(&b.tau_rho))
                .then(a.tau_ag.total_cmp(&b.tau_ag))
        });
        cells
    }
}

/// The scenario with the cell's time constants and curtailment applied to
/// every SC and customer.
pub fn apply_cell(scenario: &MarketScenario, cell: &Cell) -> MarketScenario {
    let mut s = scenario.clone();
    for sc in &mut s.scs {
        sc.tau_rho = cell.tau_rho;
    }
    for c in &mut s.customers {
        c.tau_ag = cell.tau_ag;
        c.kappa1 = cell.kappa1;
        c.kappa2 = cell.kappa2;
    }
    s
}

pub fn evaluate_cell(scenario: &MarketScenario, cell: &Cell) -> Result<MapRow, CliError> {
    let s = apply_cell(scenario, cell);
    let sys = assemble_linearization(&s, None, false).map_err(|e| CliError::Solver(e.to_string()))?;
    let (is_hurwitz, max_real_eig) = hurwitz_check(&sys).map_err(|e| CliError::Solver(e.to_string()))?;
    Ok(MapRow { cell: *cell, max_real_eig, is_hurwitz })
}

/// Evaluates every cell on a pool of `jobs` threads (0: one per core).
/// Rows come back in grid order regardless of scheduling.
pub fn stability_map(scenario: &MarketScenario, grid: &SweepGrid, jobs: usize) -> Result<Vec<MapRow>, CliError> {
    grid.validate()?;
    let cells = grid.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| cells.par_iter().map(|c| evaluate_cell(scenario, c)).collect())
}
