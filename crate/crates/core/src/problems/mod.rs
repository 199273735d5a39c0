//! Benchmark BSDEs: coefficients, derivatives, input moments and reference
//! solutions.
//!
//! A [`Problem`] describes a decoupled forward-backward system
//! `dX = a dt + b dW`, `-dY = f(t, X, Y, Z) dt - Z dW`, `Y_T = g(X_T)`.
//! Drivers exist twice: as plain scalar functions (used by reference
//! computations and tests) and as tape builders (used by the losses).

mod black_scholes;
mod bounded;
mod hjb;
mod normal;

pub use black_scholes::{BasketParams, BlackScholesBasket};
pub use bounded::BoundedProblem;
pub use hjb::{hjb_reference, HjbProblem, HjbReference, HjbReferenceConfig};
pub use normal::{norm_cdf, norm_pdf};

use nalgebra::DMatrix;
use serde_json::Value;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Driver value and partial derivatives at a single point.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverEval {
    pub value: f64,
    /// `∇_x f`, length `d`.
    pub dx: Vec<f64>,
    pub dy: f64,
    /// `∇_z f`, length `d`.
    pub dz: Vec<f64>,
}

/// Row data shared by the graph builders of a driver: one row per sample.
pub struct DriverContext<'a> {
    pub times: &'a [f64],
    /// Raw states, `rows × d`.
    pub states: &'a Tensor,
}

impl DriverContext<'_> {
    pub fn rows(&self) -> usize {
        self.times.len()
    }
}

/// Partial derivatives of the driver as tape nodes. `None` means the partial
/// vanishes identically.
pub struct DriverNodes {
    /// `rows × d`
    pub dx: Option<NodeId>,
    /// `rows × 1`
    pub dy: Option<NodeId>,
    /// `rows × d`
    pub dz: Option<NodeId>,
}

/// Solution triple at a point. `gamma` is stored row-major with entry
/// `(j, k) = ∂Z_k/∂x_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub y: f64,
    pub z: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
}

pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn initial_state(&self) -> &[f64];

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// `d×d`, row-major.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `∂a_i/∂x_j` at `i*d + j`.
    fn drift_jacobian(&self, _t: f64, _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::MissingDerivative("drift jacobian"))
    }

    /// `∂b_ik/∂x_j` at `(i*d + k)*d + j`.
    fn diffusion_jacobian(&self, _t: f64, _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::MissingDerivative("diffusion jacobian"))
    }

    /// True when `b` does not depend on `x`.
    fn diffusion_is_constant(&self) -> bool {
        false
    }

    /// `b⁻¹(t, x)` by linear solve. Returns `None` when singular.
    fn diffusion_inverse(&self, t: f64, x: &[f64], out: &mut [f64]) -> Option<()> {
        let d = self.dim();
        let mut b = vec![0.0; d * d];
        self.diffusion(t, x, &mut b);
        invert(d, &b, out)
    }

    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;
    fn driver_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverEval;

    /// `f` for every row as a `rows × 1` node; `y` is `rows × 1`, `z` is `rows × d`.
    fn driver_node(&self, tape: &mut Tape, ctx: &DriverContext<'_>, y: NodeId, z: NodeId) -> Result<NodeId>;
    fn driver_partial_nodes(
        &self,
        tape: &mut Tape,
        ctx: &DriverContext<'_>,
        y: NodeId,
        z: NodeId,
    ) -> Result<DriverNodes>;

    fn terminal(&self, x: &[f64]) -> f64;
    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]);

    /// Closed-form mean and standard deviation of `X_t` per component.
    fn moments(&self, _t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Pathwise exact solution, when one is known.
    fn exact_solution(&self, _t: f64, _x: &[f64]) -> Option<Solution> {
        None
    }

    /// Reference solution at `(0, x₀)`. Defaults to the exact solution.
    fn reference_at_start(&self) -> Option<Solution> {
        self.exact_solution(0.0, self.initial_state())
    }

    /// Maps a `Γ` expressed in the simulation coordinates to the coordinates
    /// in which errors are reported.
    fn report_gamma(&self, _x: &[f64], _gamma: &mut [f64]) {}
}

pub(crate) fn invert(d: usize, m: &[f64], out: &mut [f64]) -> Option<()> {
    let inv = DMatrix::from_row_slice(d, d, m).try_inverse()?;
    if !inv.iter().all(|v| v.is_finite()) {
        return None;
    }
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = inv[(i, j)];
        }
    }
    Some(())
}

/// Column of `rows` copies of `value` computed per row.
pub(crate) fn column_from(ctx: &DriverContext<'_>, f: impl Fn(f64, &[f64]) -> f64) -> Tensor {
    let values: Vec<f64> = (0..ctx.rows())
        .map(|i| f(ctx.times[i], ctx.states.row_slice(i)))
        .collect();
    Tensor::column(&values)
}

fn param_f64(overrides: &Value, key: &str) -> Result<Option<f64>> {
    match overrides.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("problem parameter `{key}` must be a number"))),
    }
}

/// Scalar broadcast to `d` entries, or an explicit list of length `d`.
fn param_vec(overrides: &Value, key: &str, d: usize) -> Result<Option<Vec<f64>>> {
    match overrides.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => {
            if items.len() != d {
                return Err(Error::Dimension {
                    what: "problem parameter list",
                    expected: d,
                    got: items.len(),
                });
            }
            items
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| {
                        Error::InvalidConfig(format!("problem parameter `{key}` must hold numbers"))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        }
        Some(v) => v
            .as_f64()
            .map(|s| Some(vec![s; d]))
            .ok_or_else(|| Error::InvalidConfig(format!("problem parameter `{key}` must be a number or list"))),
    }
}

/// Builds a registered problem by name. `overrides` is a JSON object of
/// problem-specific parameters; missing keys take their defaults.
pub fn build_problem(name: &str, d: usize, horizon: f64, overrides: &Value) -> Result<Box<dyn Problem>> {
    if d == 0 {
        return Err(Error::InvalidConfig("dimension must be positive".into()));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    match name {
        "bounded" | "example1" => Ok(Box::new(BoundedProblem::new(d, horizon))),
        "black_scholes" | "example2" => {
            let mut p = BasketParams::defaults(d);
            if let Some(v) = param_vec(overrides, "x0", d)? {
                p.x0 = v;
            }
            if let Some(v) = param_vec(overrides, "a", d)? {
                p.drift = v;
            }
            if let Some(v) = param_vec(overrides, "b", d)? {
                p.vol = v;
            }
            if let Some(v) = param_vec(overrides, "c", d)? {
                p.weights = v;
            }
            if let Some(v) = param_vec(overrides, "delta", d)? {
                p.dividend = v;
            }
            if let Some(v) = param_f64(overrides, "R")? {
                p.rate = v;
            }
            if let Some(v) = param_f64(overrides, "K")? {
                p.strike = v;
            }
            Ok(Box::new(BlackScholesBasket::new(horizon, p)?))
        }
        "hjb" | "example3" => {
            let mut p = HjbProblem::new(d, horizon);
            if let Some(b) = param_f64(overrides, "b")? {
                p = p.with_volatility(b)?;
            }
            if let Some(x0) = param_vec(overrides, "x0", d)? {
                p = p.with_initial_state(x0);
            }
            if let Some(obj) = overrides.get("reference") {
                // either the estimate itself or the path of a saved estimate
                let loaded;
                let obj = match obj {
                    Value::String(path) => {
                        loaded = serde_json::from_str::<Value>(&std::fs::read_to_string(path)?)?;
                        &loaded
                    }
                    other => other,
                };
                let y = obj.get("y").and_then(Value::as_f64);
                let z = obj.get("z").and_then(Value::as_array);
                let gamma = obj.get("gamma").and_then(Value::as_array);
                match (y, z) {
                    (Some(y), Some(z)) => {
                        let z: Vec<f64> = z.iter().filter_map(Value::as_f64).collect();
                        let gamma = gamma.map(|g| g.iter().filter_map(Value::as_f64).collect::<Vec<_>>());
                        p = p.with_reference(Solution { y, z, gamma })?;
                    }
                    _ => {
                        return Err(Error::InvalidConfig(
                            "hjb reference needs numeric `y` and list `z`".into(),
                        ))
                    }
                }
            }
            Ok(Box::new(p))
        }
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}
