//! Evaluation harness: error metrics, multi-run studies and their reports.

mod metrics;
mod report;
mod study;

pub use metrics::{aggregate, convergence_rate, mse, relative_mse, RelativeMse, Summary};
pub use report::{
    loss_history_csv, metrics_by_time_csv, plot_data, summarize, timing, write_report, SchemeTable, StudySummary,
    TimingSummary, METRICS,
};
pub use study::{
    load_runs, report, run_file_name, run_study, train_run, ErrorPair, Evaluation, ExperimentConfig, RunRecord,
    RunTiming, TimeMetrics,
};

use crate::error::Result;
use crate::problems::{Problem, Solution};
use crate::sde::Paths;

/// Mean over paths of the squared one-step residual
/// `Y_{n+1} - Y_n + f Δt - Z_n ΔW_n` with the exact `(Y, Z)` plugged in,
/// one value per step.
pub fn exact_residuals(problem: &dyn Problem, paths: &Paths) -> Result<Vec<f64>> {
    let (b, d, grid) = (paths.batch, paths.dim, paths.grid);
    let exact = |n: usize, i: usize| -> Result<Solution> {
        problem
            .exact_solution(grid.time(n), paths.state(n, i))
            .ok_or_else(|| crate::Error::MissingReference(problem.name().to_string()))
    };
    let mut out = Vec::with_capacity(grid.steps);
    for n in 0..grid.steps {
        let t = grid.time(n);
        let mut acc = 0.0;
        for i in 0..b {
            let (now, next) = (exact(n, i)?, exact(n + 1, i)?);
            let x = paths.state(n, i);
            let f = problem.driver(t, x, now.y, &now.z);
            let zdw: f64 = (0..d).map(|k| now.z[k] * paths.increment(n, i)[k]).sum();
            let r = next.y - now.y + f * grid.dt() - zdw;
            acc += r * r;
        }
        out.push(acc / b as f64);
    }
    Ok(out)
}
