//! Parallel sweep driver.
//!
//! Cells are independent, so any partition over any number of workers gives
//! the same cells as the sequential sweep.

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuildError, ThreadPoolBuilder};
use thiserror::Error;

use flexmap_core::flexopf::{FlexProblem, SolverOptions};
use flexmap_core::net::{FlexUnit, RadialNetwork};
use flexmap_core::sweep::{
    solve_cell, GridSpec, SweepCell, SweepError, SweepMetadata, SweepMode, SweepResult,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error("cannot start worker threads: {0}")]
    Pool(#[from] ThreadPoolBuildError),
}

/// Pool with `workers` threads; `0` lets rayon choose.
pub fn thread_pool(workers: usize) -> Result<ThreadPool, ThreadPoolBuildError> {
    ThreadPoolBuilder::new().num_threads(workers).build()
}

/// Solves the listed cells (row-major indices) on `pool`, in input order.
pub fn solve_cells(
    pool: &ThreadPool,
    prob: &FlexProblem<'_>,
    spec: &GridSpec,
    mode: SweepMode,
    cells: &[usize],
) -> Vec<SweepCell> {
    pool.install(|| {
        cells
            .par_iter()
            .map(|&k| {
                let (i, j) = spec.cell(k);
                solve_cell(prob, spec, mode, i, j)
            })
            .collect()
    })
}

/// Whole sweep on `workers` threads.
pub fn run_sweep_parallel(
    net: &RadialNetwork,
    units: &[FlexUnit],
    spec: GridSpec,
    opts: SolverOptions,
    mode: SweepMode,
    workers: usize,
) -> Result<SweepResult, RunError> {
    spec.validate().map_err(SweepError::from)?;
    let prob = FlexProblem::new(net, units, opts).map_err(SweepError::from)?;
    let pool = thread_pool(workers)?;
    let all: Vec<usize> = (0..spec.len()).collect();
    let cells = solve_cells(&pool, &prob, &spec, mode, &all);
    Ok(SweepResult {
        spec,
        mode,
        cells,
        metadata: SweepMetadata {
            options: opts,
            ..SweepMetadata::default()
        },
    })
}
