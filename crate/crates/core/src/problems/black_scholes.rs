use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

use super::{norm_cdf, norm_pdf, DriverContext, DriverEval, DriverNodes, Problem, Solution};

/// Market data for a call on a geometric basket of `d` Black–Scholes assets.
#[derive(Clone, Debug, PartialEq)]
pub struct BasketParams {
    pub x0: Vec<f64>,
    /// Real-world drift `a_k`.
    pub drift: Vec<f64>,
    pub vol: Vec<f64>,
    /// Basket exponents `c_k`.
    pub weights: Vec<f64>,
    pub dividend: Vec<f64>,
    pub rate: f64,
    pub strike: f64,
}

impl BasketParams {
    pub fn defaults(d: usize) -> Self {
        Self {
            x0: vec![100.0; d],
            drift: vec![0.05; d],
            vol: vec![0.2; d],
            weights: vec![1.0 / d as f64; d],
            dividend: vec![0.0; d],
            rate: 0.03,
            strike: 100.0,
        }
    }
}

/// Option pricing BSDE solved in log-prices `L = ln X`, where the diffusion
/// is constant. `Z` coincides in both coordinates; `Γ` is reported in the
/// original price coordinates.
#[derive(Clone, Debug)]
pub struct BlackScholesBasket {
    horizon: f64,
    params: BasketParams,
    log_x0: Vec<f64>,
    log_drift: Vec<f64>,
    /// Market price of risk `(a_k - R + δ_k)/b_k`.
    theta: Vec<f64>,
    basket_vol: f64,
    basket_yield: f64,
}

impl BlackScholesBasket {
    pub fn new(horizon: f64, params: BasketParams) -> Result<Self> {
        let d = params.x0.len();
        for (what, v) in [
            ("drift", &params.drift),
            ("vol", &params.vol),
            ("weights", &params.weights),
            ("dividend", &params.dividend),
        ] {
            if v.len() != d {
                return Err(Error::Dimension {
                    what,
                    expected: d,
                    got: v.len(),
                });
            }
        }
        if params.x0.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidConfig("asset prices must be positive".into()));
        }
        if params.vol.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::InvalidConfig("volatilities must be positive".into()));
        }
        let p = &params;
        let log_x0 = p.x0.iter().map(|x| x.ln()).collect();
        let log_drift = (0..d)
            .map(|k| p.drift[k] - p.dividend[k] - 0.5 * p.vol[k] * p.vol[k])
            .collect();
        let theta = (0..d)
            .map(|k| (p.drift[k] - p.rate + p.dividend[k]) / p.vol[k])
            .collect();
        let var: f64 = (0..d).map(|k| (p.vol[k] * p.weights[k]).powi(2)).sum();
        let basket_yield = (0..d)
            .map(|k| p.weights[k] * (p.dividend[k] + 0.5 * p.vol[k] * p.vol[k]))
            .sum::<f64>()
            - 0.5 * var;
        Ok(Self {
            horizon,
            log_x0,
            log_drift,
            theta,
            basket_vol: var.sqrt(),
            basket_yield,
            params,
        })
    }

    pub fn params(&self) -> &BasketParams {
        &self.params
    }

    fn basket(&self, l: &[f64]) -> f64 {
        l.iter().zip(&self.params.weights).map(|(l, c)| c * l).sum::<f64>().exp()
    }

    fn d(&self) -> usize {
        self.params.x0.len()
    }
}

impl Problem for BlackScholesBasket {
    fn name(&self) -> &str {
        "black_scholes"
    }

    fn dim(&self) -> usize {
        self.d()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn initial_state(&self) -> &[f64] {
        &self.log_x0
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.log_drift);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        let d = self.d();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = self.params.vol[i];
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
        let d = self.d();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = 1.0 / self.params.vol[i];
        }
        Some(())
    }

    fn driver(&self, _t: f64, _x: &[f64], y: f64, z: &[f64]) -> f64 {
        -(self.params.rate * y + z.iter().zip(&self.theta).map(|(z, t)| z * t).sum::<f64>())
    }

    fn driver_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverEval {
        DriverEval {
            value: self.driver(t, x, y, z),
            dx: vec![0.0; self.d()],
            dy: -self.params.rate,
            dz: self.theta.iter().map(|t| -t).collect(),
        }
    }

    fn driver_node(&self, tape: &mut Tape, _ctx: &DriverContext<'_>, y: NodeId, z: NodeId) -> Result<NodeId> {
        let theta = tape.leaf(Tensor::column(&self.theta))?;
        let zt = tape.matmul(z, theta)?;
        let ry = tape.scale(y, self.params.rate)?;
        let s = tape.add(ry, zt)?;
        Ok(tape.scale(s, -1.0)?)
    }

    fn driver_partial_nodes(
        &self,
        tape: &mut Tape,
        ctx: &DriverContext<'_>,
        _y: NodeId,
        _z: NodeId,
    ) -> Result<DriverNodes> {
        let rows = ctx.rows();
        let dy = tape.leaf(Tensor::filled(rows, 1, -self.params.rate))?;
        let mut dz = Tensor::zeros(rows, self.d());
        for row in dz.data_mut().chunks_mut(self.d()) {
            for (v, t) in row.iter_mut().zip(&self.theta) {
                *v = -t;
            }
        }
        let dz = tape.leaf(dz)?;
        Ok(DriverNodes {
            dx: None,
            dy: Some(dy),
            dz: Some(dz),
        })
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        (self.basket(x) - self.params.strike).max(0.0)
    }

    /// Left limit (zero) at the kink.
    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        let g = self.basket(x);
        let active = if g > self.params.strike { g } else { 0.0 };
        for (o, c) in out.iter_mut().zip(&self.params.weights) {
            *o = c * active;
        }
    }

    fn moments(&self, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((
            self.log_x0.iter().zip(&self.log_drift).map(|(l, m)| l + m * t).collect(),
            self.params.vol.iter().map(|b| b * t.sqrt()).collect(),
        ))
    }

    fn exact_solution(&self, t: f64, x: &[f64]) -> Option<Solution> {
        let d = self.d();
        let p = &self.params;
        let tau = self.horizon - t;
        let g = self.basket(x);
        if tau <= 0.0 {
            let mut z = vec![0.0; d];
            self.terminal_gradient(x, &mut z);
            for (z, b) in z.iter_mut().zip(&p.vol) {
                *z *= b;
            }
            return Some(Solution {
                y: self.terminal(x),
                z,
                gamma: None,
            });
        }
        let sd = self.basket_vol * tau.sqrt();
        let d1 = ((g / p.strike).ln() + (p.rate - self.basket_yield + 0.5 * self.basket_vol.powi(2)) * tau) / sd;
        let d2 = d1 - sd;
        let disc_g = (-self.basket_yield * tau).exp() * g;
        let y = disc_g * norm_cdf(d1) - (-p.rate * tau).exp() * p.strike * norm_cdf(d2);
        let delta = disc_g * norm_cdf(d1);
        let z = (0..d).map(|k| p.weights[k] * p.vol[k] * delta).collect();
        let curvature = disc_g * (norm_cdf(d1) + norm_pdf(d1) / sd);
        let mut gamma = vec![0.0; d * d];
        for j in 0..d {
            for k in 0..d {
                gamma[j * d + k] = p.weights[j] * p.weights[k] * p.vol[k] * curvature;
            }
        }
        Some(Solution {
            y,
            z,
            gamma: Some(gamma),
        })
    }

    fn report_gamma(&self, x: &[f64], gamma: &mut [f64]) {
        let d = self.d();
        for j in 0..d {
            let price = x[j].exp();
            for v in &mut gamma[j * d..(j + 1) * d] {
                *v /= price;
            }
        }
    }
}
