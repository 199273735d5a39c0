//! Euler–Maruyama simulation of the forward process and the discrete
//! Malliavin derivatives used by the derivative-aware loss.

mod rng;

pub use rng::{mix_seed, substream, Gaussian};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::problems::Problem;

/// Uniform partition of `[0, T]` into `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "time grid needs T > 0 and N ≥ 1, got T = {horizon}, N = {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }
}

/// Simulated paths stored time-major: state `(n, i)` starts at
/// `(n * batch + i) * dim`.
#[derive(Clone, Debug)]
pub struct Paths {
    pub grid: TimeGrid,
    pub batch: usize,
    pub dim: usize,
    /// `(N+1) × batch × dim`
    pub states: Vec<f64>,
    /// `N × batch × dim`
    pub increments: Vec<f64>,
}

impl Paths {
    pub fn state(&self, n: usize, i: usize) -> &[f64] {
        let o = (n * self.batch + i) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn increment(&self, n: usize, i: usize) -> &[f64] {
        let o = (n * self.batch + i) * self.dim;
        &self.increments[o..o + self.dim]
    }

    /// States at time index `n`, `batch × dim`.
    pub fn slice(&self, n: usize) -> &[f64] {
        let w = self.batch * self.dim;
        &self.states[n * w..(n + 1) * w]
    }

    /// Writes `t,path,x_1..x_d` rows for the first `max_paths` paths.
    pub fn write_csv(&self, path: &Path, max_paths: usize) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "t,path")?;
        for k in 0..self.dim {
            write!(out, ",x{}", k + 1)?;
        }
        writeln!(out)?;
        for i in 0..self.batch.min(max_paths) {
            for n in 0..=self.grid.steps {
                write!(out, "{},{}", self.grid.time(n), i)?;
                for v in self.state(n, i) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// One Euler–Maruyama step `x ← x + a Δt + b ΔW`.
fn euler_step(problem: &dyn Problem, t: f64, dt: f64, x: &[f64], dw: &[f64], scratch: &mut Scratch, out: &mut [f64]) {
    let d = x.len();
    problem.drift(t, x, &mut scratch.drift);
    problem.diffusion(t, x, &mut scratch.diffusion);
    for i in 0..d {
        let row = &scratch.diffusion[i * d..(i + 1) * d];
        let noise: f64 = row.iter().zip(dw).map(|(b, w)| b * w).sum();
        out[i] = x[i] + scratch.drift[i] * dt + noise;
    }
}

struct Scratch {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            diffusion: vec![0.0; d * d],
        }
    }
}

/// Simulates `batch` paths from `x₀`. Path `i` draws its increments from
/// substream `i` of `seed`, so results do not depend on the batch layout.
pub fn simulate_paths(problem: &dyn Problem, grid: TimeGrid, batch: usize, seed: u64) -> Result<Paths> {
    let d = problem.dim();
    let dt = grid.dt();
    let mut increments = vec![0.0; grid.steps * batch * d];
    let mut buf = vec![0.0; grid.steps * d];
    for i in 0..batch {
        let mut g = Gaussian::from_stream(seed, i as u64);
        g.fill(&mut buf, dt.sqrt());
        for n in 0..grid.steps {
            let o = (n * batch + i) * d;
            increments[o..o + d].copy_from_slice(&buf[n * d..(n + 1) * d]);
        }
    }
    paths_from_increments(problem, grid, batch, increments)
}

/// Runs the Euler scheme on prescribed Brownian increments (`N × batch × d`).
pub fn paths_from_increments(
    problem: &dyn Problem,
    grid: TimeGrid,
    batch: usize,
    increments: Vec<f64>,
) -> Result<Paths> {
    let d = problem.dim();
    if increments.len() != grid.steps * batch * d {
        return Err(Error::Dimension {
            what: "Brownian increments",
            expected: grid.steps * batch * d,
            got: increments.len(),
        });
    }
    let x0 = problem.initial_state();
    if x0.len() != d {
        return Err(Error::Dimension {
            what: "initial state",
            expected: d,
            got: x0.len(),
        });
    }
    let dt = grid.dt();
    let mut states = vec![0.0; (grid.steps + 1) * batch * d];
    for i in 0..batch {
        states[i * d..(i + 1) * d].copy_from_slice(x0);
    }
    let mut scratch = Scratch::new(d);
    let w = batch * d;
    for n in 0..grid.steps {
        let (done, rest) = states.split_at_mut((n + 1) * w);
        let current = &done[n * w..];
        let next = &mut rest[..w];
        for i in 0..batch {
            let x = &current[i * d..(i + 1) * d];
            let dw = &increments[(n * batch + i) * d..(n * batch + i + 1) * d];
            euler_step(problem, grid.time(n), dt, x, dw, &mut scratch, &mut next[i * d..(i + 1) * d]);
        }
        if let Some(pos) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "forward state at time index {}, path {}",
                n + 1,
                pos / d
            )));
        }
    }
    Ok(Paths {
        grid,
        batch,
        dim: d,
        states,
        increments,
    })
}

/// Sums consecutive groups of `factor` increments, giving the increments of
/// the same Brownian paths on a grid with `steps / factor` intervals.
pub fn coarsen_increments(increments: &[f64], steps: usize, batch: usize, dim: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || steps % factor != 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot coarsen {steps} steps by a factor of {factor}"
        )));
    }
    let coarse = steps / factor;
    let w = batch * dim;
    let mut out = vec![0.0; coarse * w];
    for n in 0..steps {
        let dst = &mut out[(n / factor) * w..(n / factor + 1) * w];
        for (o, v) in dst.iter_mut().zip(&increments[n * w..(n + 1) * w]) {
            *o += v;
        }
    }
    Ok(out)
}

/// Per-component mean and standard deviation of `X_{t_n}` from `samples`
/// simulated paths, computed in a single streaming pass.
pub fn empirical_moments(
    problem: &dyn Problem,
    grid: TimeGrid,
    samples: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if samples < 2 {
        return Err(Error::InvalidConfig("empirical moments need at least two samples".into()));
    }
    let d = problem.dim();
    let steps = grid.steps;
    let dt = grid.dt();
    let mut sum = vec![vec![0.0; d]; steps + 1];
    let mut sum_sq = vec![vec![0.0; d]; steps + 1];
    let mut scratch = Scratch::new(d);
    let (mut x, mut next, mut dw) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for i in 0..samples {
        let mut g = Gaussian::from_stream(seed, i as u64);
        x.copy_from_slice(problem.initial_state());
        for n in 0..steps {
            g.fill(&mut dw, dt.sqrt());
            euler_step(problem, grid.time(n), dt, &x, &dw, &mut scratch, &mut next);
            std::mem::swap(&mut x, &mut next);
            for k in 0..d {
                sum[n + 1][k] += x[k];
                sum_sq[n + 1][k] += x[k] * x[k];
            }
        }
    }
    let m = samples as f64;
    let mut means = Vec::with_capacity(steps + 1);
    let mut stds = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        if n == 0 {
            means.push(problem.initial_state().to_vec());
            stds.push(vec![0.0; d]);
            continue;
        }
        let mean: Vec<f64> = sum[n].iter().map(|s| s / m).collect();
        let std = (0..d)
            .map(|k| ((sum_sq[n][k] / m - mean[k] * mean[k]) * m / (m - 1.0)).max(0.0).sqrt())
            .collect();
        means.push(mean);
        stds.push(std);
    }
    Ok((means, stds))
}

/// Discrete Malliavin derivatives along a batch of paths.
///
/// `diffusion[n]` holds `D_n X_n = b(t_n, X_n)` for every path. When present,
/// `transfer[n]` holds `b⁻¹(t_{n+1}, X_{n+1}) · D_n X_{n+1}`, the factor that
/// turns `Z_{n+1}` into `D_n Y_{n+1}`; it is omitted when it equals the
/// identity for all paths (constant diffusion and drift).
#[derive(Clone, Debug)]
pub struct Malliavin {
    pub dim: usize,
    pub batch: usize,
    /// `(N+1) × batch × d²`, row-major `b`.
    pub diffusion: Vec<f64>,
    /// `N × batch × d²`
    pub transfer: Option<Vec<f64>>,
}

impl Malliavin {
    pub fn diffusion_at(&self, n: usize, i: usize) -> &[f64] {
        let s = self.dim * self.dim;
        let o = (n * self.batch + i) * s;
        &self.diffusion[o..o + s]
    }
}

/// `D_n X_{n+1} = D_n X_n + ∇a · D_n X_n Δt + Σ_k ∂_x b_{·k} · D_n X_n ΔW_k`
/// with `D_n X_n = b(t_n, X_n)`.
pub fn malliavin_step(
    problem: &dyn Problem,
    t: f64,
    dt: f64,
    x: &[f64],
    dw: &[f64],
    dx_n: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let d = x.len();
    let mut ja = vec![0.0; d * d];
    problem.drift_jacobian(t, x, &mut ja)?;
    let mut jb = vec![0.0; d * d * d];
    problem.diffusion_jacobian(t, x, &mut jb)?;
    out.copy_from_slice(dx_n);
    // M[i][j] = ∂a_i/∂x_j Δt + Σ_k ∂b_ik/∂x_j ΔW_k; out += M · dx_n
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut v = ja[i * d + j] * dt;
            for k in 0..d {
                v += jb[(i * d + k) * d + j] * dw[k];
            }
            m[i * d + j] = v;
        }
    }
    if m.iter().any(|&v| v != 0.0) {
        crate::autodiff::gemm(d, d, d, &m, false, dx_n, false, out, true);
    }
    Ok(())
}

pub fn malliavin_propagate(problem: &dyn Problem, paths: &Paths) -> Result<Malliavin> {
    let d = paths.dim;
    let s = d * d;
    let (batch, steps) = (paths.batch, paths.grid.steps);
    let dt = paths.grid.dt();
    let mut diffusion = vec![0.0; (steps + 1) * batch * s];
    for n in 0..=steps {
        let t = paths.grid.time(n);
        for i in 0..batch {
            let o = (n * batch + i) * s;
            problem.diffusion(t, paths.state(n, i), &mut diffusion[o..o + s]);
        }
    }
    let mut transfer = vec![0.0; steps * batch * s];
    let mut identity = true;
    let (mut next, mut inv) = (vec![0.0; s], vec![0.0; s]);
    for n in 0..steps {
        let t = paths.grid.time(n);
        let t1 = paths.grid.time(n + 1);
        for i in 0..batch {
            let o = (n * batch + i) * s;
            malliavin_step(
                problem,
                t,
                dt,
                paths.state(n, i),
                paths.increment(n, i),
                &diffusion[o..o + s],
                &mut next,
            )?;
            problem
                .diffusion_inverse(t1, paths.state(n + 1, i), &mut inv)
                .ok_or(Error::SingularDiffusion {
                    time_index: n + 1,
                    path: i,
                })?;
            let out = &mut transfer[o..o + s];
            crate::autodiff::gemm(d, d, d, &inv, false, &next, false, out, false);
            if identity {
                identity = out
                    .iter()
                    .enumerate()
                    .all(|(idx, &v)| v == if idx / d == idx % d { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(Malliavin {
        dim: d,
        batch,
        diffusion,
        transfer: (!identity).then_some(transfer),
    })
}
