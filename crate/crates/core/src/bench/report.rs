use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::schemes::Scheme;

use super::metrics::{aggregate, convergence_rate, Summary};
use super::study::{ErrorPair, ExperimentConfig, RunRecord, TimeMetrics};

/// The six error measures, in report order.
pub const METRICS: [&str; 6] = ["mse_y", "mse_z", "mse_gamma", "rel_y", "rel_z", "rel_gamma"];

fn metric(m: &TimeMetrics, name: &str) -> Option<f64> {
    let pick = |p: Option<ErrorPair>, rel: bool| p.map(|p| if rel { p.relative } else { p.mse });
    match name {
        "mse_y" => pick(m.y, false),
        "mse_z" => pick(m.z, false),
        "mse_gamma" => pick(m.gamma, false),
        "rel_y" => pick(m.y, true),
        "rel_z" => pick(m.z, true),
        "rel_gamma" => pick(m.gamma, true),
        _ => None,
    }
}

/// Mean and population std over the runs that have the value.
fn summarise(values: impl Iterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Option<Vec<f64>> = values.collect();
    v.and_then(|v| aggregate(&v).ok())
}

/// Error table of one scheme: rows are metrics, columns follow `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeTable {
    pub runs: Vec<usize>,
    pub t0: BTreeMap<String, Vec<Option<Summary>>>,
    pub untrained_t0: BTreeMap<String, Vec<Option<Summary>>>,
    pub initial_loss: Vec<Option<Summary>>,
    pub final_loss: Vec<Option<Summary>>,
    /// Empirical rate of the mean `t₀` error over `N`, when defined.
    pub beta: BTreeMap<String, Option<f64>>,
}

/// Wall-clock figures of one `(scheme, N)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    /// Total seconds per run.
    pub tau: Vec<f64>,
    pub tau_bar: f64,
    /// Mean per-step milliseconds of each run with at least one step.
    pub step_ms: Vec<f64>,
    pub mean_step_ms: Option<f64>,
}

/// Aggregated study results. Everything except `timing` is reproducible
/// from the configuration and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub problem: String,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub time_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval_batch: usize,
    /// How the spread over runs is measured.
    pub std: String,
    pub schemes: BTreeMap<Scheme, SchemeTable>,
    pub timing: BTreeMap<Scheme, Vec<Option<TimingSummary>>>,
}

impl StudySummary {
    /// JSON text of the summary without the timing section.
    pub fn reproducible_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Per-step and total wall-clock time averaged over runs.
pub fn timing(runs: &[&RunRecord]) -> Option<TimingSummary> {
    if runs.is_empty() {
        return None;
    }
    let tau: Vec<f64> = runs.iter().map(|r| r.timing.total_seconds).collect();
    let step_ms: Vec<f64> = runs.iter().filter_map(|r| r.timing.mean_step_ms).collect();
    Some(TimingSummary {
        tau_bar: tau.iter().sum::<f64>() / tau.len() as f64,
        mean_step_ms: (!step_ms.is_empty()).then(|| step_ms.iter().sum::<f64>() / step_ms.len() as f64),
        tau,
        step_ms,
    })
}

fn cell<'a>(records: &'a [RunRecord], scheme: Scheme, n: usize) -> Vec<&'a RunRecord> {
    records.iter().filter(|r| r.scheme == scheme && r.steps == n).collect()
}

pub fn summarize(config: &ExperimentConfig, records: &[RunRecord]) -> StudySummary {
    let mut schemes = BTreeMap::new();
    let mut timings = BTreeMap::new();
    for &scheme in &config.scheme {
        let cells: Vec<Vec<&RunRecord>> = config.time_steps.iter().map(|&n| cell(records, scheme, n)).collect();
        let table_of = |get: &dyn Fn(&RunRecord) -> &TimeMetrics| {
            METRICS
                .iter()
                .map(|&m| {
                    let row = cells
                        .iter()
                        .map(|c| if c.is_empty() { None } else { summarise(c.iter().map(|r| metric(get(r), m))) })
                        .collect::<Vec<_>>();
                    (m.to_string(), row)
                })
                .collect::<BTreeMap<_, _>>()
        };
        let t0 = table_of(&|r| r.t0());
        let beta = METRICS
            .iter()
            .map(|&m| {
                let pts: Vec<(usize, f64)> = config
                    .time_steps
                    .iter()
                    .zip(&t0[m])
                    .filter_map(|(&n, s)| s.map(|s| (n, s.mean)))
                    .collect();
                (m.to_string(), convergence_rate(&pts).ok())
            })
            .collect();
        let losses = |head: bool| {
            cells
                .iter()
                .map(|c| {
                    if c.is_empty() {
                        None
                    } else {
                        summarise(c.iter().map(|r| if head { r.initial_loss } else { r.final_loss }))
                    }
                })
                .collect()
        };
        schemes.insert(
            scheme,
            SchemeTable {
                runs: cells.iter().map(Vec::len).collect(),
                untrained_t0: table_of(&|r| &r.untrained_t0),
                t0,
                initial_loss: losses(true),
                final_loss: losses(false),
                beta,
            },
        );
        timings.insert(scheme, cells.iter().map(|c| timing(c)).collect());
    }
    StudySummary {
        problem: config.problem.clone(),
        d: config.d,
        horizon: config.horizon,
        time_steps: config.time_steps.clone(),
        seeds: config.run_seeds(),
        eval_batch: config.eval_batch,
        std: "population".into(),
        schemes,
        timing: timings,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// Per-time-point mean and std of every metric for each `(scheme, N)`.
pub fn metrics_by_time_csv(config: &ExperimentConfig, records: &[RunRecord]) -> String {
    let mut s = String::from("scheme,N,n,t");
    for m in METRICS {
        let _ = write!(s, ",{m}_mean,{m}_std");
    }
    s.push('\n');
    for &n in &config.time_steps {
        for &scheme in &config.scheme {
            let c = cell(records, scheme, n);
            if c.is_empty() {
                continue;
            }
            for k in 0..=n {
                let _ = write!(s, "{scheme},{n},{k},{:e}", c[0].metrics[k].t);
                for m in METRICS {
                    let sum = summarise(c.iter().map(|r| metric(&r.metrics[k], m)));
                    let _ = write!(s, ",{},{}", fmt_opt(sum.map(|v| v.mean)), fmt_opt(sum.map(|v| v.std)));
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Whitespace-separated band data for the finest `N`: `t_n` followed by
/// `mean upper lower` of the MSE of `process` for each scheme.
pub fn plot_data(config: &ExperimentConfig, records: &[RunRecord], process: &str) -> Option<String> {
    let n = *config.time_steps.iter().max()?;
    let name = format!("mse_{process}");
    let cells: Vec<(Scheme, Vec<&RunRecord>)> = config
        .scheme
        .iter()
        .map(|&s| (s, cell(records, s, n)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    if cells.is_empty() {
        return None;
    }
    let mut s = format!("# MSE of {process} over time, N = {n}, mean and mean ± population std over runs\n# t_n");
    for (scheme, _) in &cells {
        let _ = write!(s, " {scheme}_mean {scheme}_upper {scheme}_lower");
    }
    s.push('\n');
    for k in 0..=n {
        let _ = write!(s, "{:e}", cells[0].1[0].metrics[k].t);
        for (_, c) in &cells {
            match summarise(c.iter().map(|r| metric(&r.metrics[k], &name))) {
                Some(v) => {
                    let _ = write!(s, " {:e} {:e} {:e}", v.mean, v.mean + v.std, v.mean - v.std);
                }
                None => s.push_str(" nan nan nan"),
            }
        }
        s.push('\n');
    }
    Some(s)
}

pub fn loss_history_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("scheme,N,run,step,loss,lr,step_time_ms\n");
    for r in records {
        for h in &r.history {
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{:e},{:.4}",
                r.scheme, r.steps, r.run, h.step, h.loss, h.lr, h.step_time_ms
            );
        }
    }
    s
}

/// Writes `summary.json`, `metrics_by_time.csv`, `plot_<process>.dat` and
/// `loss_history.csv` into `out`.
pub fn write_report(config: &ExperimentConfig, records: &[RunRecord], out: &Path) -> Result<StudySummary> {
    let summary = summarize(config, records);
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out.join("metrics_by_time.csv"), metrics_by_time_csv(config, records))?;
    for process in ["y", "z", "gamma"] {
        if let Some(text) = plot_data(config, records, process) {
            fs::write(out.join(format!("plot_{process}.dat")), text)?;
        }
    }
    fs::write(out.join("loss_history.csv"), loss_history_csv(records))?;
    Ok(summary)
}
