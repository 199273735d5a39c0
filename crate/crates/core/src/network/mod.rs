//! Fully connected tanh networks `(t, x) ↦ φ(t, x)`, their input
//! normalisation, and the derived quantities `Z = ∇_x φ b` and
//! `Γ = ∂Z/∂x` built on the tape.

mod normalizer;

pub use normalizer::{MomentNormalizer, NetInputs};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::mlp::{register_dense, tanh_mlp, DenseNodes, TanhMlpTrace};
use crate::autodiff::{Axis, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::sde::mix_seed;

/// Depth and width of every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    /// Defaults to `100 + d` when absent.
    pub width: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 4,
            width: None,
        }
    }
}

impl NetworkConfig {
    pub fn width_for(&self, d: usize) -> usize {
        self.width.unwrap_or(100 + d)
    }
}

/// Weights (`out × in`) and biases (`1 × out`) of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Glorot-uniform weights, zero biases.
pub fn mlp_init(inputs: usize, outputs: usize, hidden_layers: usize, width: usize, seed: u64) -> Result<MlpParams> {
    if hidden_layers == 0 || width == 0 || inputs == 0 || outputs == 0 {
        return Err(Error::InvalidConfig(
            "networks need at least one hidden layer and non-zero sizes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![inputs];
    sizes.extend(std::iter::repeat(width).take(hidden_layers));
    sizes.push(outputs);
    let mut weights = Vec::with_capacity(sizes.len() - 1);
    let mut biases = Vec::with_capacity(sizes.len() - 1);
    for pair in sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        weights.push(Tensor::from_matrix(fan_out, fan_in, data)?);
        biases.push(Tensor::zeros(1, fan_out));
    }
    Ok(MlpParams { weights, biases })
}

impl MlpParams {
    pub fn inputs(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.last().map_or(0, |w| w.rows())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Weight and bias tensors in registration order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<DenseNodes>> {
        Ok(register_dense(tape, &self.weights, &self.biases, trainable)?)
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() < 2 || self.weights.len() != self.biases.len() {
            return Err(Error::Checkpoint("inconsistent layer count".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape().len() != 2 || b.shape() != [1, w.rows()] {
                return Err(Error::Checkpoint(format!("layer {l} has inconsistent shapes")));
            }
            if l > 0 && self.weights[l - 1].rows() != w.cols() {
                return Err(Error::Checkpoint(format!("layer {l} does not chain")));
            }
        }
        Ok(())
    }

    /// Plain forward pass on `rows × inputs` data.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let layers = self.register(&mut tape, false)?;
        let x = tape.leaf(input.clone())?;
        let trace = tanh_mlp(&mut tape, &layers, x)?;
        Ok(tape.value(trace.output).clone())
    }
}

/// Diffusion matrices of a batch, one per row. Diagonal storage is used when
/// every matrix is diagonal.
#[derive(Clone, Debug)]
pub enum DiffusionRows {
    /// `rows × d`
    Diagonal(Tensor),
    /// `rows × d²`, row-major `b`.
    Full(Tensor),
}

impl DiffusionRows {
    /// Builds from row-major `d×d` blocks, detecting diagonal structure.
    pub fn from_blocks(d: usize, blocks: &[f64]) -> Result<Self> {
        let s = d * d;
        let rows = blocks.len() / s;
        let diagonal = blocks
            .chunks(s)
            .all(|b| (0..s).all(|idx| idx / d == idx % d || b[idx] == 0.0));
        if diagonal {
            let mut data = Vec::with_capacity(rows * d);
            for b in blocks.chunks(s) {
                data.extend((0..d).map(|i| b[i * d + i]));
            }
            Ok(Self::Diagonal(Tensor::from_matrix(rows, d, data)?))
        } else {
            Ok(Self::Full(Tensor::from_matrix(rows, s, blocks.to_vec())?))
        }
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let cut = |t: &Tensor| {
            let c = t.cols();
            Tensor::from_matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())
        };
        Ok(match self {
            Self::Diagonal(b) => Self::Diagonal(cut(b)?),
            Self::Full(b) => Self::Full(cut(b)?),
        })
    }

    /// `v · b` per row, for `v: rows × d`.
    pub fn right_multiply(&self, tape: &mut Tape, v: NodeId) -> Result<NodeId> {
        match self {
            Self::Diagonal(b) => {
                let b = tape.leaf(b.clone())?;
                Ok(tape.mul(v, b)?)
            }
            Self::Full(b) => {
                let b = tape.leaf(b.clone())?;
                Ok(tape.row_vec_mat(v, b, false)?)
            }
        }
    }
}

/// Tape view of a scalar network evaluated on a batch, with the derived
/// `Z` and `Γ` nodes.
pub struct ScalarNetGraph {
    trace: TanhMlpTrace,
    inv_scale: Tensor,
    d: usize,
    scaled_gradient: Option<NodeId>,
}

impl ScalarNetGraph {
    pub fn build(tape: &mut Tape, layers: &[DenseNodes], inputs: &NetInputs) -> Result<Self> {
        let x = tape.leaf(inputs.input.clone())?;
        let trace = tanh_mlp(tape, layers, x)?;
        Ok(Self {
            trace,
            inv_scale: inputs.inv_scale.clone(),
            d: inputs.inv_scale.cols(),
            scaled_gradient: None,
        })
    }

    /// `rows × 1`
    pub fn output(&self) -> NodeId {
        self.trace.output
    }

    /// `∇_x φ` in raw state coordinates, `rows × d`.
    pub fn state_gradient(&mut self, tape: &mut Tape) -> Result<NodeId> {
        if let Some(g) = self.scaled_gradient {
            return Ok(g);
        }
        let grad = self.trace.input_gradient(tape)?;
        let gx = tape.slice_cols(grad, 1, self.d)?;
        let s = tape.leaf(self.inv_scale.clone())?;
        let g = tape.mul(gx, s)?;
        self.scaled_gradient = Some(g);
        Ok(g)
    }

    /// `Z = ∇_x φ · b`, `rows × d`.
    pub fn z(&mut self, tape: &mut Tape, b: &DiffusionRows) -> Result<NodeId> {
        let g = self.state_gradient(tape)?;
        b.right_multiply(tape, g)
    }

    /// `Γ = ∂Z/∂x`, `rows × d²` with entry `(j, k) = ∂Z_k/∂x_j`.
    /// `b_jacobian` holds `∂b_ik/∂x_j` at `(i*d + k)*d + j` per row and may be
    /// omitted for constant diffusion.
    pub fn gamma(&mut self, tape: &mut Tape, b: &DiffusionRows, b_jacobian: Option<&Tensor>) -> Result<NodeId> {
        let d = self.d;
        let rows = self.inv_scale.rows();
        let s = tape.leaf(self.inv_scale.clone())?;
        let grad = match b_jacobian {
            Some(_) => Some(self.state_gradient(tape)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(d);
        for j in 0..d {
            let mut u = Tensor::zeros(rows, d + 1);
            for r in 0..rows {
                u.data_mut()[r * (d + 1) + 1 + j] = self.inv_scale.get(r, j);
            }
            let u = tape.leaf(u)?;
            let hv = self.trace.input_hessian_product(tape, u)?;
            let hx = tape.slice_cols(hv, 1, d)?;
            let hx = tape.mul(hx, s)?;
            let mut row = b.right_multiply(tape, hx)?;
            if let (Some(jac), Some(g)) = (b_jacobian, grad) {
                let mut m = Tensor::zeros(rows, d * d);
                for r in 0..rows {
                    let src = jac.row_slice(r);
                    let dst = &mut m.data_mut()[r * d * d..(r + 1) * d * d];
                    for i in 0..d {
                        for k in 0..d {
                            dst[i * d + k] = src[(i * d + k) * d + j];
                        }
                    }
                }
                let m = tape.leaf(m)?;
                let extra = tape.row_vec_mat(g, m, false)?;
                row = tape.add(row, extra)?;
            }
            blocks.push(row);
        }
        if blocks.len() == 1 {
            return Ok(blocks[0]);
        }
        Ok(tape.concat(&blocks, Axis::Cols)?)
    }
}

/// Networks for `Y` (scalar), `Z` (`d` outputs) and `Γ` (`d²` outputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkTriple {
    pub y: MlpParams,
    pub z: MlpParams,
    pub gamma: MlpParams,
}

impl NetworkTriple {
    pub fn init(d: usize, config: &NetworkConfig, seed: u64) -> Result<Self> {
        let w = config.width_for(d);
        let l = config.hidden_layers;
        Ok(Self {
            y: mlp_init(d + 1, 1, l, w, mix_seed(seed, 0))?,
            z: mlp_init(d + 1, d, l, w, mix_seed(seed, 1))?,
            gamma: mlp_init(d + 1, d * d, l, w, mix_seed(seed, 2))?,
        })
    }
}

/// Versioned JSON checkpoint holding named networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub networks: BTreeMap<String, MlpParams>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(step: usize, networks: BTreeMap<String, MlpParams>) -> Self {
        Self {
            version: Self::VERSION,
            step,
            networks,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        for p in c.networks.values() {
            p.validate()?;
        }
        Ok(c)
    }
}
