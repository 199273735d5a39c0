use crate::autodiff::mlp::DenseNodes;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::network::{DiffusionRows, ScalarNetGraph};
use crate::problems::{DriverContext, Problem};

use super::BatchInputs;

/// Approximations of `(Y, Z, Γ)` on every batch row, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `rows × 1`
    pub y: NodeId,
    /// `rows × d`
    pub z: NodeId,
    /// `rows × d²`
    pub gamma: Option<NodeId>,
}

/// Source of `(Y, Z, Γ)` for the losses.
pub trait Approximator {
    fn outputs(&self, tape: &mut Tape, batch: &BatchInputs, gamma: bool) -> Result<Outputs>;
}

/// `Y` from a scalar network, `Z` and `Γ` from its input derivatives.
pub struct TiedNetwork<'a> {
    pub layers: &'a [DenseNodes],
}

impl Approximator for TiedNetwork<'_> {
    fn outputs(&self, tape: &mut Tape, batch: &BatchInputs, gamma: bool) -> Result<Outputs> {
        let mut g = ScalarNetGraph::build(tape, self.layers, &batch.net)?;
        let z = g.z(tape, &batch.diffusion)?;
        let gamma = if gamma {
            Some(g.gamma(tape, &batch.diffusion, batch.diffusion_jacobian.as_ref())?)
        } else {
            None
        };
        Ok(Outputs { y: g.output(), z, gamma })
    }
}

/// Three independent networks for `Y`, `Z` and `Γ`.
pub struct SeparateNetworks<'a> {
    pub y: &'a [DenseNodes],
    pub z: &'a [DenseNodes],
    pub gamma: &'a [DenseNodes],
}

impl Approximator for SeparateNetworks<'_> {
    fn outputs(&self, tape: &mut Tape, batch: &BatchInputs, gamma: bool) -> Result<Outputs> {
        use crate::autodiff::mlp::tanh_mlp;
        let x = tape.leaf(batch.net.input.clone())?;
        let y = tanh_mlp(tape, self.y, x)?.output;
        let z = tanh_mlp(tape, self.z, x)?.output;
        let gamma = if gamma {
            Some(tanh_mlp(tape, self.gamma, x)?.output)
        } else {
            None
        };
        Ok(Outputs { y, z, gamma })
    }
}

fn squared_sum(tape: &mut Tape, a: NodeId) -> Result<NodeId> {
    let sq = tape.square(a)?;
    Ok(tape.sum(sq)?)
}

fn check_finite(tape: &Tape, loss: NodeId) -> Result<NodeId> {
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Sum over the batch of `Σ_n |Y_{n+1} - Y_n + f Δt - Z_n ΔW_n|² + |Y_N - g(X_N)|²`,
/// not yet divided by `B`.
fn y_residual_sum(tape: &mut Tape, out: &Outputs, batch: &BatchInputs, problem: &dyn Problem) -> Result<NodeId> {
    let (b, n) = (batch.batch, batch.steps);
    let head = n * b;
    let y_n = tape.slice_rows(out.y, 0, head)?;
    let y_next = tape.slice_rows(out.y, b, head)?;
    let z_n = tape.slice_rows(out.z, 0, head)?;
    let states = batch.head_states()?;
    let ctx = DriverContext {
        times: &batch.times[..head],
        states: &states,
    };
    let f = problem.driver_node(tape, &ctx, y_n, z_n)?;
    let f_dt = tape.scale(f, batch.dt)?;
    let dw = tape.leaf(batch.increments.clone())?;
    let zdw = tape.mul(z_n, dw)?;
    let zdw = tape.sum_cols(zdw)?;
    let step = tape.sub(y_next, y_n)?;
    let r = tape.add(step, f_dt)?;
    let r = tape.sub(r, zdw)?;
    let y_end = tape.slice_rows(out.y, head, b)?;
    let g = tape.leaf(batch.terminal.clone())?;
    let t = tape.sub(y_end, g)?;
    let rs = squared_sum(tape, r)?;
    let ts = squared_sum(tape, t)?;
    Ok(tape.add(rs, ts)?)
}

/// Local-loss objective: batch mean of the summed squared Euler residuals of
/// `Y` plus the terminal mismatch.
pub fn ldbsde_loss(tape: &mut Tape, out: &Outputs, batch: &BatchInputs, problem: &dyn Problem) -> Result<NodeId> {
    let s = y_residual_sum(tape, out, batch, problem)?;
    let loss = tape.scale(s, 1.0 / batch.batch as f64)?;
    check_finite(tape, loss)
}

/// `f_D = ∇_x f · D_nX_n + ∇_y f · Z_n + ∇_z f · Γᵀ D_nX_n` for rows `n < N`,
/// `rows × d`. `dx`, `dy`, `dz` are the driver partial nodes (absent when
/// identically zero), `z` and `gamma` the head rows.
pub fn malliavin_driver(
    tape: &mut Tape,
    parts: (Option<NodeId>, Option<NodeId>, Option<NodeId>),
    z: NodeId,
    gamma: NodeId,
    dx_n: &DiffusionRows,
) -> Result<Option<NodeId>> {
    let (dx, dy, dz) = parts;
    let mut acc: Option<NodeId> = None;
    let mut push = |tape: &mut Tape, v: NodeId| -> Result<()> {
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    if let Some(dz) = dz {
        let u = tape.row_vec_mat(dz, gamma, true)?;
        let v = dx_n.right_multiply(tape, u)?;
        push(tape, v)?;
    }
    if let Some(dx) = dx {
        let v = dx_n.right_multiply(tape, dx)?;
        push(tape, v)?;
    }
    if let Some(dy) = dy {
        let v = tape.mul_col(z, dy)?;
        push(tape, v)?;
    }
    Ok(acc)
}

/// Derivative-aware objective `ω₁ Lʸ + ω₂ Lᶻ`, where `Lᶻ` is the batch mean
/// of `Σ_n |D_nY_{n+1} - Z_n + f_D Δt - ΔWᵀ Γᵀ D_nX_n|² + |Z_N - g_x(X_N) b|²`.
pub fn dldbsde_loss(
    tape: &mut Tape,
    out: &Outputs,
    batch: &BatchInputs,
    problem: &dyn Problem,
    weights: (f64, f64),
) -> Result<NodeId> {
    let gamma = out
        .gamma
        .ok_or_else(|| Error::InvalidConfig("derivative-aware loss needs Γ".into()))?;
    let (b, n, d) = (batch.batch, batch.steps, batch.dim);
    let head = n * b;
    let ly = y_residual_sum(tape, out, batch, problem)?;

    let y_n = tape.slice_rows(out.y, 0, head)?;
    let z_n = tape.slice_rows(out.z, 0, head)?;
    let z_next = tape.slice_rows(out.z, b, head)?;
    let gamma_n = tape.slice_rows(gamma, 0, head)?;
    let dx_n = batch.diffusion.slice_rows(0, head)?;
    let states = batch.head_states()?;
    let ctx = DriverContext {
        times: &batch.times[..head],
        states: &states,
    };
    let parts = problem.driver_partial_nodes(tape, &ctx, y_n, z_n)?;

    let dy_next = match &batch.transfer {
        Some(t) => {
            let t = tape.leaf(t.clone())?;
            tape.row_vec_mat(z_next, t, false)?
        }
        None => z_next,
    };
    // (∇_z f Δt - ΔW)ᵀ Γᵀ D_nX_n carries both the z-part of f_D Δt and the noise term
    let dw = tape.leaf(batch.increments.clone())?;
    let v = match parts.dz {
        Some(fz) => {
            let fz_dt = tape.scale(fz, batch.dt)?;
            tape.sub(fz_dt, dw)?
        }
        None => tape.scale(dw, -1.0)?,
    };
    let u = tape.row_vec_mat(v, gamma_n, true)?;
    let mixed = dx_n.right_multiply(tape, u)?;
    let mut r = tape.sub(dy_next, z_n)?;
    r = tape.add(r, mixed)?;
    if let Some(rest) = malliavin_driver(tape, (parts.dx, parts.dy, None), z_n, gamma_n, &dx_n)? {
        let rest = tape.scale(rest, batch.dt)?;
        r = tape.add(r, rest)?;
    }
    let z_end = tape.slice_rows(out.z, head, b)?;
    let target = tape.leaf(batch.terminal_z.clone())?;
    let t = tape.sub(z_end, target)?;
    let rs = squared_sum(tape, r)?;
    let ts = squared_sum(tape, t)?;
    let lz = tape.add(rs, ts)?;
    debug_assert_eq!(tape.value(z_end).cols(), d);

    let ly = tape.scale(ly, weights.0 / b as f64)?;
    let lz = tape.scale(lz, weights.1 / b as f64)?;
    let loss = tape.add(ly, lz)?;
    check_finite(tape, loss)
}

/// Exact `(Y, Z, Γ)` of a problem as constant leaves; useful to measure the
/// discretisation level of the losses.
pub struct ExactSolution<'a> {
    pub problem: &'a dyn Problem,
}

impl Approximator for ExactSolution<'_> {
    fn outputs(&self, tape: &mut Tape, batch: &BatchInputs, gamma: bool) -> Result<Outputs> {
        let (b, d) = (batch.batch, batch.dim);
        let (mut ys, mut zs, mut gs) = (Vec::new(), Vec::new(), Vec::new());
        for n in 0..=batch.steps {
            for i in 0..b {
                let sol = self
                    .problem
                    .exact_solution(batch.times[n * b], batch.paths.state(n, i))
                    .ok_or_else(|| Error::MissingReference(self.problem.name().to_string()))?;
                ys.push(sol.y);
                zs.extend(sol.z);
                if gamma {
                    // Γ at maturity is never used by the losses
                    gs.extend(sol.gamma.unwrap_or_else(|| vec![0.0; d * d]));
                }
            }
        }
        let rows = batch.rows();
        let y = tape.leaf(Tensor::column(&ys))?;
        let z = tape.leaf(Tensor::from_matrix(rows, d, zs)?)?;
        let gamma = if gamma {
            Some(tape.leaf(Tensor::from_matrix(rows, d * d, gs)?)?)
        } else {
            None
        };
        Ok(Outputs { y, z, gamma })
    }
}
