use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::sde::Gaussian;

use super::{DriverContext, DriverEval, DriverNodes, Problem, Solution};

/// Control problem `dX = b dW`, `f = -Σ (z_k/b)²`, `g = ln(½(1 + |x|²))`.
/// The solution is only semi-explicit; a Monte-Carlo reference at `(0, x₀)`
/// can be attached with [`HjbProblem::with_reference`].
#[derive(Clone, Debug)]
pub struct HjbProblem {
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
    vol: f64,
    reference: Option<Solution>,
}

impl HjbProblem {
    pub fn new(d: usize, horizon: f64) -> Self {
        Self {
            d,
            horizon,
            x0: vec![1.0; d],
            vol: 0.2f64.sqrt(),
            reference: None,
        }
    }

    pub fn with_volatility(mut self, vol: f64) -> Result<Self> {
        if !(vol > 0.0) {
            return Err(Error::InvalidConfig("volatility must be positive".into()));
        }
        self.vol = vol;
        Ok(self)
    }

    pub fn with_initial_state(mut self, x0: Vec<f64>) -> Self {
        self.x0 = x0;
        self
    }

    pub fn with_reference(mut self, reference: Solution) -> Result<Self> {
        if reference.z.len() != self.d {
            return Err(Error::Dimension {
                what: "reference Z",
                expected: self.d,
                got: reference.z.len(),
            });
        }
        if let Some(g) = &reference.gamma {
            if g.len() != self.d * self.d {
                return Err(Error::Dimension {
                    what: "reference Γ",
                    expected: self.d * self.d,
                    got: g.len(),
                });
            }
        }
        self.reference = Some(reference);
        Ok(self)
    }

    pub fn volatility(&self) -> f64 {
        self.vol
    }

    /// Exponent `λ = 2/b²` of the Cole–Hopf transform that linearises this
    /// equation: `Y₀ = -(1/λ) ln E[exp(-λ g(x₀ + b W_T))]`.
    pub fn cole_hopf_exponent(&self) -> f64 {
        2.0 / (self.vol * self.vol)
    }

    /// Monte-Carlo reference at `(0, x₀)` for this problem.
    pub fn reference(&self, config: &HjbReferenceConfig) -> Result<HjbReference> {
        let g = |x: &[f64]| hjb_terminal(x);
        let grad = |x: &[f64], out: &mut [f64]| hjb_terminal_gradient(x, out);
        hjb_reference(&self.x0, self.vol, self.horizon, &g, &grad, config)
    }
}

fn hjb_terminal(x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (0.5 * (1.0 + r2)).ln()
}

fn hjb_terminal_gradient(x: &[f64], out: &mut [f64]) {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    for (o, v) in out.iter_mut().zip(x) {
        *o = 2.0 * v / (1.0 + r2);
    }
}

impl Problem for HjbProblem {
    fn name(&self) -> &str {
        "hjb"
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
        out.fill(0.0);
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

    fn driver(&self, _t: f64, _x: &[f64], _y: f64, z: &[f64]) -> f64 {
        -z.iter().map(|z| z * z).sum::<f64>() / (self.vol * self.vol)
    }

    fn driver_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverEval {
        let s = -2.0 / (self.vol * self.vol);
        DriverEval {
            value: self.driver(t, x, y, z),
            dx: vec![0.0; self.d],
            dy: 0.0,
            dz: z.iter().map(|z| s * z).collect(),
        }
    }

    fn driver_node(&self, tape: &mut Tape, _ctx: &DriverContext<'_>, _y: NodeId, z: NodeId) -> Result<NodeId> {
        let z2 = tape.square(z)?;
        let s = tape.sum_cols(z2)?;
        Ok(tape.scale(s, -1.0 / (self.vol * self.vol))?)
    }

    fn driver_partial_nodes(
        &self,
        tape: &mut Tape,
        _ctx: &DriverContext<'_>,
        _y: NodeId,
        z: NodeId,
    ) -> Result<DriverNodes> {
        let dz = tape.scale(z, -2.0 / (self.vol * self.vol))?;
        Ok(DriverNodes {
            dx: None,
            dy: None,
            dz: Some(dz),
        })
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        hjb_terminal(x)
    }

    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        hjb_terminal_gradient(x, out)
    }

    fn moments(&self, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.x0.clone(), vec![self.vol * t.sqrt(); self.d]))
    }

    fn reference_at_start(&self) -> Option<Solution> {
        self.reference.clone()
    }
}

/// Settings of the Monte-Carlo reference estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HjbReferenceConfig {
    /// Samples per run.
    pub samples: usize,
    pub runs: usize,
    pub seed: u64,
    /// Cole–Hopf exponent `λ`.
    pub exponent: f64,
    /// Estimate `Γ₀` by common-random-number central differences of `Z₀`.
    pub gamma: bool,
    pub fd_step: f64,
}

impl Default for HjbReferenceConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            runs: 4,
            seed: 0,
            exponent: 1.0,
            gamma: true,
            fd_step: 1e-3,
        }
    }
}

/// Run-averaged reference with standard errors of the run mean
/// (absent when only one run was made).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HjbReference {
    pub y: f64,
    pub z: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub y_se: Option<f64>,
    pub z_se: Option<Vec<f64>>,
    pub gamma_se: Option<Vec<f64>>,
    pub samples: usize,
    pub runs: usize,
}

impl HjbReference {
    pub fn solution(&self) -> Solution {
        Solution {
            y: self.y,
            z: self.z.clone(),
            gamma: self.gamma.clone(),
        }
    }
}

/// Streaming estimator of `-(1/λ) ln E[e^{-λ g}]` and its gradient
/// `E[e^{-λ g} ∇g] / E[e^{-λ g}]`, shifted to avoid overflow.
struct ExpAverage {
    shift: f64,
    weight: f64,
    weighted_grad: Vec<f64>,
    count: usize,
}

impl ExpAverage {
    fn new(d: usize) -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            weight: 0.0,
            weighted_grad: vec![0.0; d],
            count: 0,
        }
    }

    fn push(&mut self, log_w: f64, grad: &[f64]) {
        if log_w > self.shift {
            let f = (self.shift - log_w).exp();
            self.weight *= f;
            self.weighted_grad.iter_mut().for_each(|v| *v *= f);
            self.shift = log_w;
        }
        let w = (log_w - self.shift).exp();
        self.weight += w;
        for (a, g) in self.weighted_grad.iter_mut().zip(grad) {
            *a += w * g;
        }
        self.count += 1;
    }

    fn finish(&self, exponent: f64) -> Result<(f64, Vec<f64>)> {
        if !(self.weight > 0.0) || !self.weight.is_finite() || !self.shift.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let y = -(self.shift + (self.weight / self.count as f64).ln()) / exponent;
        let grad = self.weighted_grad.iter().map(|v| v / self.weight).collect();
        Ok((y, grad))
    }
}

fn mean_and_se(values: &[f64]) -> (f64, Option<f64>) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let se = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        (var / r).sqrt()
    });
    (mean, se)
}

/// Monte-Carlo reference `(Y₀, Z₀, Γ₀)` for `Y₀ = -(1/λ) ln E[exp(-λ g(x₀ + b W_T))]`
/// with scalar diffusion `b`. Run `r` draws from substream `r` of `seed`.
pub fn hjb_reference(
    x0: &[f64],
    vol: f64,
    horizon: f64,
    g: &dyn Fn(&[f64]) -> f64,
    grad_g: &dyn Fn(&[f64], &mut [f64]),
    config: &HjbReferenceConfig,
) -> Result<HjbReference> {
    let d = x0.len();
    if config.samples == 0 || config.runs == 0 {
        return Err(Error::InvalidConfig("reference needs samples ≥ 1 and runs ≥ 1".into()));
    }
    if !(config.exponent > 0.0) || !(config.fd_step > 0.0) || !(vol > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidConfig(
            "reference needs positive exponent, step, volatility and horizon".into(),
        ));
    }
    // base point followed by x₀ ± h e_j when Γ is requested
    let mut points = vec![x0.to_vec()];
    if config.gamma {
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut p = x0.to_vec();
                p[j] += sign * config.fd_step;
                points.push(p);
            }
        }
    }
    let scale = vol * horizon.sqrt();
    let (mut ys, mut zs, mut gammas) = (Vec::new(), Vec::new(), Vec::new());
    let (mut w, mut x, mut grad) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for run in 0..config.runs {
        let mut rng = Gaussian::from_stream(config.seed, run as u64);
        let mut acc: Vec<ExpAverage> = points.iter().map(|_| ExpAverage::new(d)).collect();
        for _ in 0..config.samples {
            rng.fill(&mut w, scale);
            for (p, a) in points.iter().zip(acc.iter_mut()) {
                for k in 0..d {
                    x[k] = p[k] + w[k];
                }
                grad_g(&x, &mut grad);
                a.push(-config.exponent * g(&x), &grad);
            }
        }
        let (y, grad_y) = acc[0].finish(config.exponent)?;
        ys.push(y);
        zs.push(grad_y.iter().map(|v| v * vol).collect::<Vec<_>>());
        if config.gamma {
            let mut gamma = vec![0.0; d * d];
            for j in 0..d {
                let (_, up) = acc[1 + 2 * j].finish(config.exponent)?;
                let (_, dn) = acc[2 + 2 * j].finish(config.exponent)?;
                for k in 0..d {
                    gamma[j * d + k] = vol * (up[k] - dn[k]) / (2.0 * config.fd_step);
                }
            }
            gammas.push(gamma);
        }
    }
    let (y, y_se) = mean_and_se(&ys);
    let column = |sets: &[Vec<f64>], len: usize| {
        let stats: Vec<(f64, Option<f64>)> = (0..len)
            .map(|i| mean_and_se(&sets.iter().map(|s| s[i]).collect::<Vec<_>>()))
            .collect();
        let mean = stats.iter().map(|s| s.0).collect::<Vec<_>>();
        let se = stats.iter().map(|s| s.1).collect::<Option<Vec<_>>>();
        (mean, se)
    };
    let (z, z_se) = column(&zs, d);
    let (gamma, gamma_se) = if config.gamma {
        let (m, se) = column(&gammas, d * d);
        (Some(m), se)
    } else {
        (None, None)
    };
    if !y.is_finite() {
        return Err(Error::NonFinite("Monte-Carlo reference".into()));
    }
    Ok(HjbReference {
        y,
        z,
        gamma,
        y_se,
        z_se,
        gamma_se,
        samples: config.samples,
        runs: config.runs,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn driver_and_terminal_derivatives() {
        let p = HjbProblem::new(4, 0.5);
        assert_eq!(p.driver(0.1, &[0.0; 4], 1.0, &[0.0; 4]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let exact = p.driver_partials(0.2, &x, 0.3, &z);
            let fd = fd_partials(&p, 0.2, &x, 0.3, &z, 1e-6);
            assert_close(&exact.dz, &fd.dz, 1e-6);
            let graph = graph_driver(&p, 0.2, &x, 0.3, &z);
            assert!((graph.value - exact.value).abs() < 1e-14);
            assert_close(&graph.dz, &exact.dz, 1e-15);
            check_terminal_gradient(&p, &x);
            check_coefficient_jacobians(&p, 0.2, &x);
        }
    }

    fn small(gamma: bool, seed: u64) -> HjbReferenceConfig {
        HjbReferenceConfig {
            samples: 20_000,
            runs: 4,
            seed,
            exponent: 1.0,
            gamma,
            fd_step: 1e-3,
        }
    }

    #[test]
    fn constant_terminal_gives_zero_gradient() {
        let g = |_: &[f64]| 0.7;
        let grad = |_: &[f64], out: &mut [f64]| out.fill(0.0);
        let r = hjb_reference(&[1.0, 2.0], 0.5, 1.0, &g, &grad, &small(true, 1)).unwrap();
        assert!((r.y - 0.7).abs() < 1e-12);
        assert!(r.z.iter().all(|z| *z == 0.0));
        assert!(r.gamma.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_terminal_matches_gaussian_closed_form() {
        let c = [0.3, -0.5, 0.2];
        let x0 = [1.0, 0.5, -1.0];
        let (b, t) = (0.6, 0.8);
        let g = |x: &[f64]| x.iter().zip(&c).map(|(x, c)| x * c).sum::<f64>();
        let grad = |_: &[f64], out: &mut [f64]| out.copy_from_slice(&c);
        let c2: f64 = c.iter().map(|c| c * c).sum();
        for exponent in [1.0, 2.0 / (b * b)] {
            let cfg = HjbReferenceConfig {
                exponent,
                ..small(false, 5)
            };
            let r = hjb_reference(&x0, b, t, &g, &grad, &cfg).unwrap();
            let exact = g(&x0) - exponent * c2 * b * b * t / 2.0;
            assert!((r.y - exact).abs() < 3.0 * r.y_se.unwrap(), "{} vs {exact}", r.y);
            assert_close(&r.z, &c.map(|c| c * b), 1e-12);
        }
    }

    #[test]
    fn degenerate_weights_are_reported() {
        let g = |_: &[f64]| f64::INFINITY;
        let grad = |_: &[f64], out: &mut [f64]| out.fill(0.0);
        assert!(matches!(
            hjb_reference(&[0.0], 1.0, 1.0, &g, &grad, &small(false, 0)),
            Err(Error::DegenerateWeights)
        ));
    }

    /// The finite-difference Γ agrees with the pathwise second-derivative
    /// estimator evaluated on the same samples.
    #[test]
    fn gamma_matches_second_derivative_estimator() {
        let d = 2;
        let p = HjbProblem::new(d, 0.5).with_initial_state(vec![0.4, -0.3]);
        let lambda = p.cole_hopf_exponent();
        let cfg = HjbReferenceConfig {
            samples: 5000,
            runs: 1,
            seed: 9,
            exponent: lambda,
            gamma: true,
            fd_step: 1e-3,
        };
        let r = p.reference(&cfg).unwrap();
        let fd_gamma = r.gamma.unwrap();

        let b = p.volatility();
        let scale = b * 0.5f64.sqrt();
        let mut rng = Gaussian::from_stream(9, 0);
        let mut samples = Vec::new();
        let mut w = vec![0.0; d];
        for _ in 0..5000 {
            rng.fill(&mut w, scale);
            let x: Vec<f64> = (0..d).map(|k| p.x0[k] + w[k]).collect();
            samples.push(x);
        }
        let logw: Vec<f64> = samples.iter().map(|x| -lambda * hjb_terminal(x)).collect();
        let shift = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut s0, mut s1, mut s2) = (0.0, vec![0.0; d], vec![0.0; d * d]);
        for (x, lw) in samples.iter().zip(&logw) {
            let wt = (lw - shift).exp();
            let r2: f64 = x.iter().map(|v| v * v).sum();
            let gx: Vec<f64> = x.iter().map(|v| 2.0 * v / (1.0 + r2)).collect();
            s0 += wt;
            for j in 0..d {
                s1[j] += wt * gx[j];
                for k in 0..d {
                    let hess = if j == k { 2.0 / (1.0 + r2) } else { 0.0 } - 4.0 * x[j] * x[k] / (1.0 + r2).powi(2);
                    s2[j * d + k] += wt * (hess - lambda * gx[j] * gx[k]);
                }
            }
        }
        for j in 0..d {
            for k in 0..d {
                let hy = s2[j * d + k] / s0 + lambda * s1[j] * s1[k] / (s0 * s0);
                let oracle = b * hy;
                let got = fd_gamma[j * d + k];
                assert!((got - oracle).abs() < 1e-5, "({j},{k}) {got} vs {oracle}");
            }
        }
    }
}
