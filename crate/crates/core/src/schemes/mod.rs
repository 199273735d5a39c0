//! The two training objectives and the loop that minimises them.
//!
//! `LDBSDE` fits a single network for `Y` and takes `Z` (and, for reporting,
//! `Γ`) from its input derivatives. `DLDBSDE` fits separate networks for
//! `Y`, `Z` and `Γ` and adds the discretised Malliavin derivative of the
//! backward equation to the loss.

mod batch;
mod loss;
mod train;

pub use batch::BatchInputs;
pub use loss::{
    dldbsde_loss, ldbsde_loss, malliavin_driver, Approximator, ExactSolution, Outputs, SeparateNetworks, TiedNetwork,
};
pub use train::{train, HistoryEntry, TrainOutcome, Trainer};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::network::{DiffusionRows, MlpParams, MomentNormalizer, NetInputs, NetworkConfig, NetworkTriple, ScalarNetGraph};
use crate::optim::{AdamConfig, LrSchedule};
use crate::problems::{DriverEval, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "LDBSDE")]
    Ldbsde,
    #[serde(rename = "DLDBSDE")]
    Dldbsde,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Ldbsde => "LDBSDE",
            Scheme::Dldbsde => "DLDBSDE",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LDBSDE" => Ok(Scheme::Ldbsde),
            "DLDBSDE" => Ok(Scheme::Dldbsde),
            other => Err(Error::InvalidConfig(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Time steps `N`.
    pub steps: usize,
    pub batch: usize,
    /// Optimisation steps `𝔎`.
    pub iterations: usize,
    pub schedule: LrSchedule,
    /// `(ω₁, ω₂)`; defaults to `(1/(d+1), d/(d+1))`.
    pub weights: Option<(f64, f64)>,
    pub seed: u64,
    pub network: NetworkConfig,
    pub adam: AdamConfig,
    /// Evaluate `Γ` of the `Y` network on every training batch (LDBSDE only).
    pub track_gamma: bool,
    /// Fresh batches tried after a non-finite loss before giving up.
    pub max_retries: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(scheme: Scheme, steps: usize, iterations: usize, seed: u64) -> Self {
        Self {
            scheme,
            steps,
            batch: 128,
            iterations,
            schedule: if iterations == LrSchedule::default().total {
                LrSchedule::default()
            } else {
                LrSchedule::scaled(iterations)
            },
            weights: None,
            seed,
            network: NetworkConfig::default(),
            adam: AdamConfig::default(),
            track_gamma: false,
            max_retries: 3,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    pub fn loss_weights(&self, d: usize) -> (f64, f64) {
        self.weights.unwrap_or_else(|| default_weights(d))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("N and B must be positive".into()));
        }
        let (w1, w2) = self.loss_weights(d);
        if !(0.0..=1.0).contains(&w1) || !(0.0..=1.0).contains(&w2) || ((w1 + w2) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "loss weights must lie in [0, 1] and sum to 1, got ({w1}, {w2})"
            )));
        }
        self.schedule.validate()?;
        if self.iterations > self.schedule.total {
            return Err(Error::InvalidConfig(format!(
                "{} iterations exceed the schedule length {}",
                self.iterations, self.schedule.total
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidConfig("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

/// `(1/(d+1), d/(d+1))`: weights proportional to the sizes of `Y` and `Z`.
pub fn default_weights(d: usize) -> (f64, f64) {
    let n = (d + 1) as f64;
    (1.0 / n, d as f64 / n)
}

/// `f_D = ∇_x f · D_nX + ∇_y f · D_nY + ∇_z f · D_nZ` for a single sample,
/// where `D_nX` and `D_nZ` are `d×d` (row = component, column = Brownian
/// direction) and `D_nY` has length `d`.
pub fn f_d(driver: &DriverEval, dnx: &[f64], dny: &[f64], dnz: &[f64]) -> Result<Vec<f64>> {
    let d = driver.dx.len();
    if driver.dz.len() != d || dny.len() != d || dnx.len() != d * d || dnz.len() != d * d {
        return Err(Error::Dimension {
            what: "f_D operands",
            expected: d,
            got: dny.len(),
        });
    }
    Ok((0..d)
        .map(|m| {
            let x: f64 = (0..d).map(|j| driver.dx[j] * dnx[j * d + m]).sum();
            let z: f64 = (0..d).map(|k| driver.dz[k] * dnz[k * d + m]).sum();
            x + driver.dy * dny[m] + z
        })
        .collect())
}

/// Trained parameters of either scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Tied(MlpParams),
    Separate(NetworkTriple),
}

/// `(Y, Z, Γ)` predictions for a set of rows: `y` has one entry per row,
/// `z` has `d` and `gamma` `d²` (entry `(j, k) = ∂Z_k/∂x_j`).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Model {
    pub fn init(scheme: Scheme, d: usize, network: &NetworkConfig, seed: u64) -> Result<Self> {
        let triple = NetworkTriple::init(d, network, seed)?;
        Ok(match scheme {
            Scheme::Ldbsde => Model::Tied(triple.y),
            Scheme::Dldbsde => Model::Separate(triple),
        })
    }

    pub fn networks(&self) -> Vec<(&'static str, &MlpParams)> {
        match self {
            Model::Tied(y) => vec![("y", y)],
            Model::Separate(t) => vec![("y", &t.y), ("z", &t.z), ("gamma", &t.gamma)],
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut MlpParams> {
        match self {
            Model::Tied(y) => vec![y],
            Model::Separate(t) => vec![&mut t.y, &mut t.z, &mut t.gamma],
        }
    }

    /// Predictions at time index `n` for `rows × d` states.
    pub fn predict(
        &self,
        problem: &dyn Problem,
        normalizer: &MomentNormalizer,
        n: usize,
        states: &[f64],
    ) -> Result<Prediction> {
        let d = problem.dim();
        let rows = states.len() / d;
        let indices = vec![n; rows];
        let inputs = normalizer.inputs(&indices, states, d)?;
        match self {
            Model::Separate(t) => Ok(Prediction {
                y: t.y.forward(&inputs.input)?.into_data(),
                z: t.z.forward(&inputs.input)?.into_data(),
                gamma: t.gamma.forward(&inputs.input)?.into_data(),
            }),
            Model::Tied(y) => {
                let t = normalizer.grid().time(n);
                let (b, jac) = diffusion_rows(problem, t, states)?;
                tied_predict(y, &inputs, &b, jac.as_ref())
            }
        }
    }
}

fn diffusion_rows(problem: &dyn Problem, t: f64, states: &[f64]) -> Result<(DiffusionRows, Option<Tensor>)> {
    let d = problem.dim();
    let rows = states.len() / d;
    let mut blocks = vec![0.0; rows * d * d];
    for (x, out) in states.chunks(d).zip(blocks.chunks_mut(d * d)) {
        problem.diffusion(t, x, out);
    }
    let jac = if problem.diffusion_is_constant() {
        None
    } else {
        let mut jac = vec![0.0; rows * d * d * d];
        for (x, out) in states.chunks(d).zip(jac.chunks_mut(d * d * d)) {
            problem.diffusion_jacobian(t, x, out)?;
        }
        Some(Tensor::from_matrix(rows, d * d * d, jac)?)
    };
    Ok((DiffusionRows::from_blocks(d, &blocks)?, jac))
}

/// `Y`, `Z = ∇_x φ b` and `Γ = ∂Z/∂x` of a scalar network.
pub fn tied_predict(
    params: &MlpParams,
    inputs: &NetInputs,
    b: &DiffusionRows,
    b_jacobian: Option<&Tensor>,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let layers = params.register(&mut tape, false)?;
    let mut g = ScalarNetGraph::build(&mut tape, &layers, inputs)?;
    let z = g.z(&mut tape, b)?;
    let gamma = g.gamma(&mut tape, b, b_jacobian)?;
    Ok(Prediction {
        y: tape.value(g.output()).data().to_vec(),
        z: tape.value(z).data().to_vec(),
        gamma: tape.value(gamma).data().to_vec(),
    })
}
