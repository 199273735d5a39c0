use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::problems::Problem;
use crate::sde::{empirical_moments, Paths, TimeGrid};

/// Samples used for moments when a problem has no closed form.
pub const EMPIRICAL_SAMPLES: usize = 100_000;

/// Network inputs for a batch: `rows × (1 + d)` with the raw time in the
/// first column and standardised states after it, plus the per-row factor
/// `1/σ` that maps input gradients back to state gradients.
#[derive(Clone, Debug)]
pub struct NetInputs {
    pub input: Tensor,
    pub inv_scale: Tensor,
}

/// Per-time-point mean and standard deviation of the forward process.
/// Time index 0 is left unnormalised since `X_0 = x₀` is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentNormalizer {
    grid: TimeGrid,
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
}

impl MomentNormalizer {
    /// Closed-form moments when the problem supplies them, empirical ones
    /// from [`EMPIRICAL_SAMPLES`] simulated paths otherwise.
    pub fn for_problem(problem: &dyn Problem, grid: TimeGrid, seed: u64) -> Result<Self> {
        let closed: Option<Vec<(Vec<f64>, Vec<f64>)>> = (0..=grid.steps).map(|n| problem.moments(grid.time(n))).collect();
        let (means, stds) = match closed {
            Some(m) => m.into_iter().unzip(),
            None => empirical_moments(problem, grid, EMPIRICAL_SAMPLES, seed)?,
        };
        Self::new(grid, means, stds)
    }

    pub fn new(grid: TimeGrid, means: Vec<Vec<f64>>, stds: Vec<Vec<f64>>) -> Result<Self> {
        if means.len() != grid.steps + 1 || stds.len() != grid.steps + 1 {
            return Err(Error::Dimension {
                what: "moment table",
                expected: grid.steps + 1,
                got: means.len().min(stds.len()),
            });
        }
        Ok(Self { grid, means, stds })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Returns `(shift, inv_scale)` for time index `n`.
    fn affine(&self, n: usize, k: usize) -> (f64, f64) {
        let sd = self.stds[n][k];
        if n == 0 || !(sd > 0.0) {
            (0.0, 1.0)
        } else {
            (self.means[n][k], 1.0 / sd)
        }
    }

    /// Inputs for rows `(n_r, x_r)`; `states` is `rows × d`.
    pub fn inputs(&self, indices: &[usize], states: &[f64], d: usize) -> Result<NetInputs> {
        let rows = indices.len();
        if states.len() != rows * d {
            return Err(Error::Dimension {
                what: "state rows",
                expected: rows * d,
                got: states.len(),
            });
        }
        let mut input = Vec::with_capacity(rows * (d + 1));
        let mut scale = Vec::with_capacity(rows * d);
        for (r, &n) in indices.iter().enumerate() {
            if n > self.grid.steps {
                return Err(Error::InvalidConfig(format!("time index {n} beyond grid")));
            }
            input.push(self.grid.time(n));
            for k in 0..d {
                let (m, s) = self.affine(n, k);
                input.push((states[r * d + k] - m) * s);
                scale.push(s);
            }
        }
        Ok(NetInputs {
            input: Tensor::from_matrix(rows, d + 1, input)?,
            inv_scale: Tensor::from_matrix(rows, d, scale)?,
        })
    }

    /// Inputs for time indices `from..=to` of every path, time-major.
    pub fn path_inputs(&self, paths: &Paths, from: usize, to: usize) -> Result<NetInputs> {
        let w = paths.batch * paths.dim;
        let indices: Vec<usize> = (from..=to).flat_map(|n| std::iter::repeat(n).take(paths.batch)).collect();
        self.inputs(&indices, &paths.states[from * w..(to + 1) * w], paths.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::build_problem;
    use crate::sde::simulate_paths;
    use serde_json::json;

    #[test]
    fn closed_form_and_path_inputs() {
        let p = build_problem("bounded", 1, 1.0, &json!({})).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let norm = MomentNormalizer::for_problem(p.as_ref(), grid, 0).unwrap();
        let paths = simulate_paths(p.as_ref(), grid, 3, 1).unwrap();
        let inp = norm.path_inputs(&paths, 0, 4).unwrap();
        assert_eq!(inp.input.shape(), &[15, 2]);
        // row 0 is (t₀, x₀) unscaled
        assert_eq!(inp.input.row_slice(0), &[0.0, 1.0]);
        let x = paths.state(2, 1)[0];
        let (mu, sd) = (1.0 + 0.2 * 0.5, 0.5f64.sqrt());
        let row = inp.input.row_slice(2 * 3 + 1);
        assert!((row[0] - 0.5).abs() < 1e-15);
        assert!((row[1] - (x - mu) / sd).abs() < 1e-14);
        assert!((inp.inv_scale.get(7, 0) - 1.0 / sd).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_rows() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let norm = MomentNormalizer::new(grid, vec![vec![0.0]; 2], vec![vec![1.0]; 2]).unwrap();
        assert!(norm.inputs(&[0, 1], &[0.0], 1).is_err());
        assert!(norm.inputs(&[2], &[0.0], 1).is_err());
    }
}
