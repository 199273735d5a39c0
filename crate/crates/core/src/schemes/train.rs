use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, MomentNormalizer};
use crate::optim::AdamState;
use crate::problems::Problem;
use crate::sde::{mix_seed, simulate_paths, TimeGrid};

use super::loss::{dldbsde_loss, ldbsde_loss, Approximator, SeparateNetworks, TiedNetwork};
use super::{BatchInputs, Model, TrainConfig};

const MOMENT_STREAM: u64 = 0x6d6f_6d65_6e74;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub step_time_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub normalizer: MomentNormalizer,
    pub history: Vec<HistoryEntry>,
    /// Seconds spent before the first optimisation step.
    pub setup_seconds: f64,
    /// Wall-clock seconds of the whole run, setup included.
    pub total_seconds: f64,
    /// Batches discarded because of a non-finite loss.
    pub retries: usize,
}

impl TrainOutcome {
    pub fn mean_step_ms(&self) -> Option<f64> {
        (!self.history.is_empty())
            .then(|| self.history.iter().map(|h| h.step_time_ms).sum::<f64>() / self.history.len() as f64)
    }
}

/// Stepwise trainer; [`train`] runs it to completion.
pub struct Trainer<'a> {
    config: TrainConfig,
    problem: &'a dyn Problem,
    grid: TimeGrid,
    model: Model,
    normalizer: MomentNormalizer,
    adam: AdamState,
    history: Vec<HistoryEntry>,
    started: Instant,
    setup_seconds: f64,
    retries: usize,
}

fn retryable(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Tensor(TensorError::NonFinite { .. }))
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, problem: &'a dyn Problem) -> Result<Self> {
        let started = Instant::now();
        let d = problem.dim();
        config.validate(d)?;
        let grid = TimeGrid::new(problem.horizon(), config.steps)?;
        let normalizer = MomentNormalizer::for_problem(problem, grid, mix_seed(config.seed, MOMENT_STREAM))?;
        let model = Model::init(config.scheme, d, &config.network, config.seed)?;
        let adam = AdamState::new(
            config.adam,
            model.networks().into_iter().flat_map(|(_, p)| p.tensors()),
        );
        Ok(Self {
            setup_seconds: started.elapsed().as_secs_f64(),
            config,
            problem,
            grid,
            model,
            normalizer,
            adam,
            history: Vec::new(),
            started,
            retries: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn normalizer(&self) -> &MomentNormalizer {
        &self.normalizer
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.history.len() >= self.config.iterations
    }

    /// Loss and parameter gradients on one fresh batch.
    fn evaluate(&self, seed: u64) -> Result<(f64, Vec<Tensor>)> {
        let dldbsde = matches!(self.model, Model::Separate(_));
        let paths = simulate_paths(self.problem, self.grid, self.config.batch, seed)?;
        let batch = BatchInputs::new(self.problem, &self.normalizer, paths, dldbsde)?;
        let mut tape = Tape::new();
        let loss = match &self.model {
            Model::Tied(p) => {
                let layers = p.register(&mut tape, true)?;
                let out = TiedNetwork { layers: &layers }.outputs(&mut tape, &batch, self.config.track_gamma)?;
                ldbsde_loss(&mut tape, &out, &batch, self.problem)?
            }
            Model::Separate(t) => {
                let y = t.y.register(&mut tape, true)?;
                let z = t.z.register(&mut tape, true)?;
                let gamma = t.gamma.register(&mut tape, true)?;
                let nets = SeparateNetworks {
                    y: &y,
                    z: &z,
                    gamma: &gamma,
                };
                let out = nets.outputs(&mut tape, &batch, true)?;
                let w = self.config.loss_weights(self.problem.dim());
                dldbsde_loss(&mut tape, &out, &batch, self.problem, w)?
            }
        };
        let mut grads = tape.backward(loss)?;
        let grads = tape
            .parameters()
            .iter()
            .map(|id| grads.take(*id).expect("every parameter receives a gradient"))
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }

    /// One optimisation step, retrying non-finite losses on fresh batches.
    pub fn step(&mut self) -> Result<HistoryEntry> {
        let step = self.history.len() + 1;
        let lr = self.config.schedule.lr_at(step)?;
        let start = Instant::now();
        let mut attempt = 0;
        let (loss, grads) = loop {
            let seed = mix_seed(mix_seed(self.config.seed, step as u64), attempt as u64);
            let result = self.evaluate(seed).and_then(|(loss, grads)| {
                if grads.iter().all(Tensor::is_finite) {
                    Ok((loss, grads))
                } else {
                    Err(Error::NonFinite("gradient".into()))
                }
            });
            match result {
                Ok(v) => break v,
                Err(e) if retryable(&e) && attempt < self.config.max_retries => {
                    log::warn!("step {step}: {e}; retrying with a fresh batch");
                    attempt += 1;
                    self.retries += 1;
                }
                Err(e) => {
                    return Err(Error::TrainingAborted {
                        step,
                        attempts: attempt + 1,
                        source: Box::new(e),
                    })
                }
            }
        };
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let params = self.model.networks_mut().into_iter().flat_map(|p| p.tensors_mut());
        self.adam.step(params, &grad_refs, lr)?;
        let entry = HistoryEntry {
            step,
            loss,
            lr,
            step_time_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if step % 100 == 0 {
            log::debug!("step {step}: loss {loss:.6e}");
        }
        self.history.push(entry.clone());
        if let (Some(every), Some(dir)) = (self.config.checkpoint_every, &self.config.checkpoint_dir) {
            if step % every == 0 {
                self.checkpoint().save(&dir.join(format!("checkpoint_{step:06}.json")))?;
            }
        }
        Ok(entry)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let networks: BTreeMap<String, _> = self
            .model
            .networks()
            .into_iter()
            .map(|(name, p)| (name.to_string(), p.clone()))
            .collect();
        Checkpoint::new(self.history.len(), networks)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            normalizer: self.normalizer,
            history: self.history,
            setup_seconds: self.setup_seconds,
            total_seconds: self.started.elapsed().as_secs_f64(),
            retries: self.retries,
        }
    }
}

/// Runs `config.iterations` Adam steps, each on a freshly simulated batch.
pub fn train(config: &TrainConfig, problem: &dyn Problem) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), problem)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    Ok(trainer.finish())
}
