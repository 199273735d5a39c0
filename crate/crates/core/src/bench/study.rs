use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::{Checkpoint, MomentNormalizer, NetworkConfig};
use crate::optim::{AdamConfig, LrSchedule};
use crate::problems::{build_problem, Problem, Solution};
use crate::schemes::{HistoryEntry, Model, Scheme, TrainConfig, Trainer};
use crate::sde::{mix_seed, simulate_paths, Paths, TimeGrid};

use super::metrics::{mse, relative_mse};
use super::report::write_report;

/// Stream of the held-out evaluation paths, shared by every run of a study.
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

fn one_or_many<'de, D, T>(de: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_batch() -> usize {
    128
}

fn default_eval_batch() -> usize {
    1024
}

fn default_runs() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// One experiment: every scheme is trained `runs` times for every `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    /// Problem parameter overrides, see [`build_problem`].
    #[serde(default)]
    pub overrides: Value,
    #[serde(alias = "schemes", deserialize_with = "one_or_many")]
    pub scheme: Vec<Scheme>,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N", deserialize_with = "one_or_many")]
    pub time_steps: Vec<usize>,
    #[serde(rename = "B", default = "default_batch")]
    pub batch: usize,
    /// Optimisation steps per run.
    #[serde(rename = "steps")]
    pub iterations: usize,
    /// Master seed; run `q` trains with `mix_seed(seed, q)` unless `seeds`
    /// lists the run seeds explicitly.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub weights: Option<(f64, f64)>,
    #[serde(default)]
    pub network: NetworkConfig,
    /// Defaults to the standard schedule rescaled to `steps`.
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Evaluate `Γ` of the `Y` network during LDBSDE training.
    #[serde(default = "default_true")]
    pub track_gamma: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scheme.is_empty() || self.time_steps.is_empty() {
            return Err(Error::InvalidConfig("at least one scheme and one N are required".into()));
        }
        if self.run_seeds().is_empty() {
            return Err(Error::InvalidConfig("at least one run is required".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::InvalidConfig("evaluation batch must be positive".into()));
        }
        for &n in &self.time_steps {
            self.train_config(self.scheme[0], n, 0).validate(self.d)?;
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.runs as u64).map(|q| mix_seed(self.seed, q)).collect(),
        }
    }

    pub fn build_problem(&self) -> Result<Box<dyn Problem>> {
        build_problem(&self.problem, self.d, self.horizon, &self.overrides)
    }

    pub fn train_config(&self, scheme: Scheme, steps: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(scheme, steps, self.iterations, seed);
        c.batch = self.batch;
        if let Some(s) = &self.schedule {
            c.schedule = s.clone();
        }
        c.weights = self.weights;
        c.network = self.network.clone();
        c.adam = self.adam;
        c.track_gamma = self.track_gamma && scheme == Scheme::Ldbsde;
        c
    }

    pub fn eval_seed(&self) -> u64 {
        mix_seed(self.seed, EVAL_STREAM)
    }
}

/// Plain and relative MSE of one process at one time point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub mse: f64,
    pub relative: f64,
    /// Samples left out of the relative error for a zero reference.
    pub excluded: usize,
}

/// Errors of `(Y, Z, Γ)` at `t_n`; `None` where no reference exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeMetrics {
    pub n: usize,
    pub t: f64,
    pub y: Option<ErrorPair>,
    pub z: Option<ErrorPair>,
    pub gamma: Option<ErrorPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub setup_seconds: f64,
    pub total_seconds: f64,
    pub mean_step_ms: Option<f64>,
}

/// Everything recorded about one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: Scheme,
    pub steps: usize,
    pub run: usize,
    pub seed: u64,
    pub metrics: Vec<TimeMetrics>,
    /// `t₀` errors of the freshly initialised networks.
    pub untrained_t0: TimeMetrics,
    /// Mean loss over the first and last (up to) 100 steps.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub retries: usize,
    pub history: Vec<HistoryEntry>,
    pub timing: RunTiming,
}

impl RunRecord {
    pub fn t0(&self) -> &TimeMetrics {
        &self.metrics[0]
    }

    pub fn file_name(&self) -> String {
        run_file_name(self.scheme, self.steps, self.run)
    }
}

pub fn run_file_name(scheme: Scheme, steps: usize, run: usize) -> String {
    format!("{}_N{steps}_run{run}.json", scheme.to_string().to_lowercase())
}

/// Held-out paths and the reference `(Y, Z, Γ)` along them, with `Γ` in
/// reporting coordinates.
pub struct Evaluation {
    pub paths: Paths,
    references: Vec<Option<Vec<Solution>>>,
}

impl Evaluation {
    pub fn new(problem: &dyn Problem, grid: TimeGrid, batch: usize, seed: u64) -> Result<Self> {
        let paths = simulate_paths(problem, grid, batch, seed)?;
        let mut references = Vec::with_capacity(grid.steps + 1);
        for n in 0..=grid.steps {
            let t = grid.time(n);
            let mut row = Vec::with_capacity(batch);
            for i in 0..batch {
                let x = paths.state(n, i);
                let sol = match problem.exact_solution(t, x) {
                    Some(s) => Some(s),
                    None if n == 0 => problem.reference_at_start(),
                    None => None,
                };
                match sol {
                    Some(mut s) => {
                        if let Some(g) = s.gamma.as_mut() {
                            problem.report_gamma(x, g);
                        }
                        row.push(s);
                    }
                    None => break,
                }
            }
            references.push((row.len() == batch).then_some(row));
        }
        if references[0].is_none() {
            return Err(Error::MissingReference(format!(
                "{} has no reference at t0; attach one through the `reference` override",
                problem.name()
            )));
        }
        Ok(Self { paths, references })
    }

    pub fn steps(&self) -> usize {
        self.paths.grid.steps
    }

    /// Errors at `t_n` of a trained or untrained model.
    pub fn at(&self, problem: &dyn Problem, model: &Model, norm: &MomentNormalizer, n: usize) -> Result<TimeMetrics> {
        let d = problem.dim();
        let t = self.paths.grid.time(n);
        let mut out = TimeMetrics {
            n,
            t,
            y: None,
            z: None,
            gamma: None,
        };
        let Some(refs) = &self.references[n] else {
            return Ok(out);
        };
        let states = self.paths.slice(n);
        let mut pred = model.predict(problem, norm, n, states)?;
        for (x, g) in states.chunks(d).zip(pred.gamma.chunks_mut(d * d)) {
            problem.report_gamma(x, g);
        }
        let ry: Vec<f64> = refs.iter().map(|s| s.y).collect();
        let rz: Vec<f64> = refs.iter().flat_map(|s| s.z.iter().copied()).collect();
        out.y = Some(pair(&pred.y, &ry, 1)?);
        out.z = Some(pair(&pred.z, &rz, d)?);
        if refs.iter().all(|s| s.gamma.is_some()) {
            let rg: Vec<f64> = refs.iter().flat_map(|s| s.gamma.clone().unwrap_or_default()).collect();
            out.gamma = Some(pair(&pred.gamma, &rg, d * d)?);
        }
        Ok(out)
    }

    pub fn all(&self, problem: &dyn Problem, model: &Model, norm: &MomentNormalizer) -> Result<Vec<TimeMetrics>> {
        (0..=self.steps()).map(|n| self.at(problem, model, norm, n)).collect()
    }
}

fn pair(pred: &[f64], reference: &[f64], k: usize) -> Result<ErrorPair> {
    let rel = relative_mse(pred, reference, k)?;
    Ok(ErrorPair {
        mse: mse(pred, reference, k)?,
        relative: rel.value,
        excluded: rel.excluded,
    })
}

fn window_mean(history: &[HistoryEntry], head: bool) -> Option<f64> {
    let k = history.len().min(100);
    if k == 0 {
        return None;
    }
    let part = if head { &history[..k] } else { &history[history.len() - k..] };
    Some(part.iter().map(|h| h.loss).sum::<f64>() / k as f64)
}

/// Trains one run and evaluates it on `eval`. The final parameters are
/// returned alongside the record.
pub fn train_run(
    config: &ExperimentConfig,
    problem: &dyn Problem,
    eval: &Evaluation,
    scheme: Scheme,
    run: usize,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(RunRecord, Checkpoint)> {
    let steps = eval.steps();
    let mut tc = config.train_config(scheme, steps, seed);
    if let (Some(every), Some(dir)) = (config.checkpoint_every, checkpoint_dir) {
        tc.checkpoint_every = Some(every);
        tc.checkpoint_dir = Some(dir.to_path_buf());
        fs::create_dir_all(dir)?;
    }
    let mut trainer = Trainer::new(tc, problem)?;
    let untrained_t0 = eval.at(problem, trainer.model(), trainer.normalizer(), 0)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    let checkpoint = trainer.checkpoint();
    let outcome = trainer.finish();
    let metrics = eval.all(problem, &outcome.model, &outcome.normalizer)?;
    log::info!(
        "{scheme} N={steps} run {run}: t0 relative errors Y {:?} Z {:?} Γ {:?}",
        metrics[0].y.map(|p| p.relative),
        metrics[0].z.map(|p| p.relative),
        metrics[0].gamma.map(|p| p.relative)
    );
    let record = RunRecord {
        scheme,
        steps,
        run,
        seed,
        metrics,
        untrained_t0,
        initial_loss: window_mean(&outcome.history, true),
        final_loss: window_mean(&outcome.history, false),
        retries: outcome.retries,
        timing: RunTiming {
            setup_seconds: outcome.setup_seconds,
            total_seconds: outcome.total_seconds,
            mean_step_ms: outcome.mean_step_ms(),
        },
        history: outcome.history,
    };
    Ok((record, checkpoint))
}

/// Runs every `(N, scheme, run)` combination, storing each finished run under
/// `out/runs/` before writing the aggregated report. On a training failure the
/// runs completed so far are still reported and the error is returned.
pub fn run_study(config: &ExperimentConfig, out: &Path) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let problem = config.build_problem()?;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;
    let seeds = config.run_seeds();
    let mut records = Vec::new();
    let mut failure = None;
    'outer: for &n in &config.time_steps {
        let grid = TimeGrid::new(config.horizon, n)?;
        let eval = Evaluation::new(problem.as_ref(), grid, config.eval_batch, config.eval_seed())?;
        for &scheme in &config.scheme {
            for (q, &seed) in seeds.iter().enumerate() {
                let ck = out.join("checkpoints").join(run_file_name(scheme, n, q).replace(".json", ""));
                match train_run(config, problem.as_ref(), &eval, scheme, q, seed, Some(&ck)) {
                    Ok((record, _)) => {
                        fs::write(runs_dir.join(record.file_name()), serde_json::to_string(&record)?)?;
                        records.push(record);
                    }
                    Err(e) => {
                        log::error!("{scheme} N={n} run {q} failed: {e}");
                        failure = Some(e);
                        break 'outer;
                    }
                }
            }
        }
    }
    if !records.is_empty() {
        write_report(config, &records, out)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

/// Reads the run records stored under `dir/runs`, in a stable order.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("runs"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    let mut runs = files
        .iter()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
        .collect::<Result<Vec<RunRecord>>>()?;
    runs.sort_by_key(|r| (r.steps, r.scheme, r.run));
    Ok(runs)
}

/// Rebuilds the report of an existing output directory.
pub fn report(dir: &Path) -> Result<Vec<RunRecord>> {
    let config = ExperimentConfig::from_path(&dir.join("config.json"))?;
    let runs = load_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::Empty("report"));
    }
    write_report(&config, &runs, dir)?;
    Ok(runs)
}
