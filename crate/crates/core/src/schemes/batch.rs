use crate::autodiff::Tensor;
use crate::error::Result;
use crate::network::{DiffusionRows, MomentNormalizer, NetInputs};
use crate::problems::Problem;
use crate::sde::{malliavin_propagate, Paths};

/// Everything the losses read from one simulated batch. Rows are time-major:
/// row `n * B + i` is path `i` at `t_n`, for `n = 0..=N`.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
    pub dt: f64,
    pub paths: Paths,
    pub net: NetInputs,
    /// Time of every row.
    pub times: Vec<f64>,
    /// `b(t_n, X_n)` for every row.
    pub diffusion: DiffusionRows,
    /// `∂b/∂x` per row, only for state-dependent diffusion.
    pub diffusion_jacobian: Option<Tensor>,
    /// `N·B × d`
    pub increments: Tensor,
    /// `b⁻¹(t_{n+1}, X_{n+1}) D_n X_{n+1}` for rows `n < N`; `None` when it is
    /// the identity for every row.
    pub transfer: Option<Tensor>,
    /// `g(X_N)`, `B × 1`
    pub terminal: Tensor,
    /// `g_x(X_N) b(t_N, X_N)`, `B × d`
    pub terminal_z: Tensor,
}

impl BatchInputs {
    /// `malliavin` is only needed by the derivative-aware loss.
    pub fn new(problem: &dyn Problem, normalizer: &MomentNormalizer, paths: Paths, malliavin: bool) -> Result<Self> {
        let (b, n_steps, d) = (paths.batch, paths.grid.steps, paths.dim);
        let s = d * d;
        let net = normalizer.path_inputs(&paths, 0, n_steps)?;
        let times: Vec<f64> = (0..=n_steps)
            .flat_map(|n| std::iter::repeat(paths.grid.time(n)).take(b))
            .collect();
        let (blocks, transfer) = if malliavin {
            let m = malliavin_propagate(problem, &paths)?;
            let transfer = m.transfer.map(|t| Tensor::from_matrix(n_steps * b, s, t)).transpose()?;
            (m.diffusion, transfer)
        } else {
            let mut blocks = vec![0.0; (n_steps + 1) * b * s];
            for n in 0..=n_steps {
                for i in 0..b {
                    let o = (n * b + i) * s;
                    problem.diffusion(paths.grid.time(n), paths.state(n, i), &mut blocks[o..o + s]);
                }
            }
            (blocks, None)
        };
        let diffusion_jacobian = if problem.diffusion_is_constant() {
            None
        } else {
            let mut jac = vec![0.0; (n_steps + 1) * b * s * d];
            for n in 0..=n_steps {
                for i in 0..b {
                    let o = (n * b + i) * s * d;
                    problem.diffusion_jacobian(paths.grid.time(n), paths.state(n, i), &mut jac[o..o + s * d])?;
                }
            }
            Some(Tensor::from_matrix((n_steps + 1) * b, s * d, jac)?)
        };
        let mut terminal = Vec::with_capacity(b);
        let mut terminal_z = Vec::with_capacity(b * d);
        let mut grad = vec![0.0; d];
        for i in 0..b {
            let x = paths.state(n_steps, i);
            terminal.push(problem.terminal(x));
            problem.terminal_gradient(x, &mut grad);
            let bm = &blocks[(n_steps * b + i) * s..(n_steps * b + i + 1) * s];
            terminal_z.extend((0..d).map(|k| (0..d).map(|j| grad[j] * bm[j * d + k]).sum::<f64>()));
        }
        let increments = Tensor::from_matrix(n_steps * b, d, paths.increments.clone())?;
        Ok(Self {
            batch: b,
            steps: n_steps,
            dim: d,
            dt: paths.grid.dt(),
            diffusion: DiffusionRows::from_blocks(d, &blocks)?,
            diffusion_jacobian,
            net,
            times,
            increments,
            transfer,
            terminal: Tensor::column(&terminal),
            terminal_z: Tensor::from_matrix(b, d, terminal_z)?,
            paths,
        })
    }

    /// Number of rows `(N+1)·B`.
    pub fn rows(&self) -> usize {
        (self.steps + 1) * self.batch
    }

    /// Raw states of rows `n < N`, `N·B × d`.
    pub fn head_states(&self) -> Result<Tensor> {
        let w = self.steps * self.batch * self.dim;
        Ok(Tensor::from_matrix(self.steps * self.batch, self.dim, self.paths.states[..w].to_vec())?)
    }
}
