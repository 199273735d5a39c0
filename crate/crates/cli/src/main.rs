use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bsde_core::bench::{self, Evaluation, ExperimentConfig};
use bsde_core::problems::{HjbProblem, HjbReferenceConfig};
use bsde_core::schemes::Scheme;
use bsde_core::sde::TimeGrid;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bsde", version, about = "Train and evaluate deep BSDE solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single run and write its metrics, loss history and parameters.
    Train {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Scheme to train; defaults to the first one in the configuration.
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Number of time steps; defaults to the first N in the configuration.
        #[arg(long)]
        steps: Option<usize>,
        /// Run index, selecting the run seed.
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every scheme, N and run of a configuration and write the report.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo reference (Y₀, Z₀, Γ₀) of the HJB example.
    Reference {
        #[arg(long)]
        d: usize,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        /// Volatility b; defaults to √0.2.
        #[arg(long)]
        vol: Option<f64>,
        /// Initial state, one value for every component.
        #[arg(long, default_value_t = 1.0)]
        x0: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cole–Hopf exponent; defaults to 2/b², which matches the driver.
        #[arg(long)]
        exponent: Option<f64>,
        #[arg(long)]
        no_gamma: bool,
        /// Output file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the report of an existing study directory from its runs.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn output_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn train(config: &Path, scheme: Option<Scheme>, steps: Option<usize>, run: usize, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    let out = output_dir(out, &cfg);
    let scheme = scheme.unwrap_or(cfg.scheme[0]);
    let steps = steps.unwrap_or(cfg.time_steps[0]);
    cfg.scheme = vec![scheme];
    cfg.time_steps = vec![steps];
    let seeds = cfg.run_seeds();
    let Some(&seed) = seeds.get(run) else {
        bail!("run {run} does not exist: the configuration has {} runs", seeds.len());
    };
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    let grid = TimeGrid::new(cfg.horizon, steps)?;
    let eval = Evaluation::new(problem.as_ref(), grid, cfg.eval_batch, cfg.eval_seed())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (record, checkpoint) = bench::train_run(&cfg, problem.as_ref(), &eval, scheme, run, seed, Some(&out.join("checkpoints")))?;
    checkpoint.save(&out.join("model.json"))?;
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    fs::write(out.join("loss_history.csv"), bench::loss_history_csv(std::slice::from_ref(&record)))?;
    let t0 = record.t0();
    println!(
        "{scheme} N={steps} run {run}: t0 relative MSE Y {} Z {} Gamma {}; final loss {}",
        show(t0.y.map(|p| p.relative)),
        show(t0.z.map(|p| p.relative)),
        show(t0.gamma.map(|p| p.relative)),
        show(record.final_loss)
    );
    Ok(())
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3e}"))
}

fn study(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config)?;
    let out = output_dir(out, &cfg);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let runs = bench::run_study(&cfg, &out)?;
    println!("{} runs written to {}", runs.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            scheme,
            steps,
            run,
            out,
        } => train(&config, scheme, steps, run, out),
        Command::Study { config, out } => study(&config, out),
        Command::Reference {
            d,
            horizon,
            vol,
            x0,
            samples,
            runs,
            seed,
            exponent,
            no_gamma,
            out,
        } => {
            let mut problem = HjbProblem::new(d, horizon).with_initial_state(vec![x0; d]);
            if let Some(v) = vol {
                problem = problem.with_volatility(v)?;
            }
            let cfg = HjbReferenceConfig {
                samples,
                runs,
                seed,
                exponent: exponent.unwrap_or_else(|| problem.cole_hopf_exponent()),
                gamma: !no_gamma,
                ..HjbReferenceConfig::default()
            };
            let reference = problem.reference(&cfg)?;
            let text = serde_json::to_string_pretty(&reference)?;
            match out {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Report { dir } => {
            let runs = bench::report(&dir)?;
            println!("report rebuilt from {} runs in {}", runs.len(), dir.display());
            Ok(())
        }
    }
}
