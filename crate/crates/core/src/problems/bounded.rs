use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;

use super::{column_from, DriverContext, DriverEval, DriverNodes, Problem, Solution};

/// Problem with a bounded, nonlinear-in-`(y, z)` driver whose solution is
/// `Y = e^{(T-t)/2} cos(Σx)`. Constant drift `0.2/d` and diffusion `I/√d`.
#[derive(Clone, Debug)]
pub struct BoundedProblem {
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: f64,
    vol: f64,
}

impl BoundedProblem {
    pub fn new(d: usize, horizon: f64) -> Self {
        Self {
            d,
            horizon,
            x0: vec![1.0; d],
            drift: 0.2 / d as f64,
            vol: 1.0 / (d as f64).sqrt(),
        }
    }

    pub fn volatility(&self) -> f64 {
        self.vol
    }

    fn growth(&self, t: f64) -> f64 {
        (0.5 * (self.horizon - t)).exp()
    }

    /// Part of the driver that only depends on `(t, x)`.
    fn source(&self, t: f64, x: &[f64]) -> f64 {
        let s: f64 = x.iter().sum();
        let e = self.growth(t);
        let (sin, cos) = s.sin_cos();
        let q = sin * cos * e * e;
        (cos + 0.2 * sin) * e - 0.5 * q * q
    }

    /// `∂source/∂x_k`, identical for every `k`.
    fn source_slope(&self, t: f64, x: &[f64]) -> f64 {
        let s: f64 = x.iter().sum();
        let e = self.growth(t);
        let (sin, cos) = s.sin_cos();
        (-sin + 0.2 * cos) * e - e.powi(4) * sin * cos * (2.0 * s).cos()
    }
}

impl Problem for BoundedProblem {
    fn name(&self) -> &str {
        "bounded"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(self.drift);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.d {
            out[i * self.d + i] = self.vol;
        }
    }

    fn drift_jacobian(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }

    fn diffusion_jacobian(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }

    fn diffusion_is_constant(&self) -> bool {
        true
    }

    fn diffusion_inverse(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Option<()> {
        out.fill(0.0);
        for i in 0..self.d {
            out[i * self.d + i] = 1.0 / self.vol;
        }
        Some(())
    }

    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let sz: f64 = z.iter().sum();
        let p = y * sz;
        self.source(t, x) + p * p / (2.0 * self.d as f64)
    }

    fn driver_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverEval {
        let inv_d = 1.0 / self.d as f64;
        let sz: f64 = z.iter().sum();
        DriverEval {
            value: self.driver(t, x, y, z),
            dx: vec![self.source_slope(t, x); self.d],
            dy: inv_d * y * sz * sz,
            dz: vec![inv_d * y * y * sz; self.d],
        }
    }

    fn driver_node(&self, tape: &mut Tape, ctx: &DriverContext<'_>, y: NodeId, z: NodeId) -> Result<NodeId> {
        let source = tape.leaf(column_from(ctx, |t, x| self.source(t, x)))?;
        let sz = tape.sum_cols(z)?;
        let p = tape.mul(y, sz)?;
        let p2 = tape.square(p)?;
        let q = tape.scale(p2, 0.5 / self.d as f64)?;
        Ok(tape.add(source, q)?)
    }

    fn driver_partial_nodes(
        &self,
        tape: &mut Tape,
        ctx: &DriverContext<'_>,
        y: NodeId,
        z: NodeId,
    ) -> Result<DriverNodes> {
        let rows = ctx.rows();
        let inv_d = 1.0 / self.d as f64;
        let mut dx = Tensor::zeros(rows, self.d);
        for i in 0..rows {
            let v = self.source_slope(ctx.times[i], ctx.states.row_slice(i));
            dx.data_mut()[i * self.d..(i + 1) * self.d].fill(v);
        }
        let dx = tape.leaf(dx)?;
        let sz = tape.sum_cols(z)?;
        let sz2 = tape.square(sz)?;
        let ysz2 = tape.mul(y, sz2)?;
        let dy = tape.scale(ysz2, inv_d)?;
        let y2 = tape.square(y)?;
        let y2sz = tape.mul(y2, sz)?;
        let col = tape.scale(y2sz, inv_d)?;
        let ones = tape.leaf(Tensor::filled(rows, self.d, 1.0))?;
        let dz = tape.mul_col(ones, col)?;
        Ok(DriverNodes {
            dx: Some(dx),
            dy: Some(dy),
            dz: Some(dz),
        })
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        x.iter().sum::<f64>().cos()
    }

    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(-x.iter().sum::<f64>().sin());
    }

    fn moments(&self, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((
            self.x0.iter().map(|x| x + self.drift * t).collect(),
            vec![self.vol * t.sqrt(); self.d],
        ))
    }

    fn exact_solution(&self, t: f64, x: &[f64]) -> Option<Solution> {
        let s: f64 = x.iter().sum();
        let e = self.growth(t);
        let (sin, cos) = s.sin_cos();
        Some(Solution {
            y: e * cos,
            z: vec![-self.vol * e * sin; self.d],
            gamma: Some(vec![-self.vol * e * cos; self.d * self.d]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1, 3] {
            let p = BoundedProblem::new(d, 1.0);
            for _ in 0..20 {
                let t = rng.gen_range(0.0..1.0);
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = rng.gen_range(-1.5..1.5);
                let exact = p.driver_partials(t, &x, y, &z);
                let fd = fd_partials(&p, t, &x, y, &z, 1e-6);
                assert_close(&exact.dx, &fd.dx, 1e-6);
                assert_close(&[exact.dy], &[fd.dy], 1e-6);
                assert_close(&exact.dz, &fd.dz, 1e-6);
                let graph = graph_driver(&p, t, &x, y, &z);
                assert!((graph.value - exact.value).abs() < 1e-14);
                assert_close(&graph.dx, &exact.dx, 1e-14);
                assert_close(&[graph.dy], &[exact.dy], 1e-14);
                assert_close(&graph.dz, &exact.dz, 1e-14);
                check_terminal_gradient(&p, &x);
                check_coefficient_jacobians(&p, t, &x);
            }
        }
    }

    /// The closed form solves `∂_t u + a·∇u + ½ tr(b bᵀ ∇²u) + f(t, x, u, ∇u b) = 0`.
    #[test]
    fn exact_solution_satisfies_the_pde() {
        let d = 3;
        let p = BoundedProblem::new(d, 1.0);
        let u = |t: f64, x: &[f64]| p.exact_solution(t, x).unwrap().y;
        let (t, x) = (0.3, [0.4, -0.2, 0.9]);
        let h = 1e-4;
        let ut = (u(t + h, &x) - u(t - h, &x)) / (2.0 * h);
        let mut grad = [0.0; 3];
        let mut lap = 0.0;
        for k in 0..d {
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            grad[k] = (u(t, &xp) - u(t, &xm)) / (2.0 * h);
            lap += (u(t, &xp) - 2.0 * u(t, &x) + u(t, &xm)) / (h * h);
        }
        let b = p.volatility();
        let z: Vec<f64> = grad.iter().map(|g| g * b).collect();
        let drift: f64 = grad.iter().map(|g| g * 0.2 / d as f64).sum();
        let residual = ut + drift + 0.5 * b * b * lap + p.driver(t, &x, u(t, &x), &z);
        assert!(residual.abs() < 1e-6, "residual {residual}");
        let sol = p.exact_solution(t, &x).unwrap();
        assert_close(&sol.z, &z, 1e-7);
    }
}
