//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and fails
//! if any criterion fails. The desk-scale training criteria (7, 8) take
//! several minutes on a single core. Setting `ACCEPTANCE_ONLY=1,4,9` runs a
//! subset and reports the rest as skipped.

use std::panic::{catch_unwind, AssertUnwindSafe};

use bsde_core::autodiff::{NodeId, Tape};
use bsde_core::bench::{
    convergence_rate, exact_residuals, report, run_study, summarize, ExperimentConfig, RunRecord, StudySummary,
};
use bsde_core::network::{MlpParams, MomentNormalizer, NetworkConfig, NetworkTriple};
use bsde_core::problems::{
    build_problem, hjb_reference, norm_cdf, BasketParams, BlackScholesBasket, DriverContext, DriverEval, DriverNodes,
    HjbProblem, HjbReferenceConfig, Problem,
};
use bsde_core::schemes::{
    default_weights, dldbsde_loss, ldbsde_loss, Approximator, BatchInputs, Model, Scheme, SeparateNetworks,
    TiedNetwork,
};
use bsde_core::sde::{
    coarsen_increments, malliavin_propagate, malliavin_step, paths_from_increments, simulate_paths, TimeGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

// Tolerances of the individual criteria.
const GRAD_REL_TOL: f64 = 1e-4;
const Z_AD_TOL: f64 = 1e-6;
const REDUCTION_TOL: f64 = 1e-12;
const MALLIAVIN_LINEAR_TOL: f64 = 1e-12;
const RESIDUAL_RATIO: (f64, f64) = (3.4, 4.6);
const BS_ONE_ASSET_TOL: f64 = 1e-10;
const BS_BASKET_TOL: f64 = 1e-12;
const PHI_TOL: f64 = 1e-12;
const HJB_SIGMAS: f64 = 3.0;
const TRAINING_GAIN: f64 = 10.0;
const LOSS_DROP: f64 = 0.1;
const RATE_SYNTHETIC_TOL: f64 = 1e-10;
const PUBLISHED_RATE: (f64, f64) = (1.70, 0.05);

type Verdict = (bool, String);

fn batch_for(p: &dyn Problem, steps: usize, batch: usize, seed: u64) -> BatchInputs {
    let grid = TimeGrid::new(p.horizon(), steps).unwrap();
    let norm = MomentNormalizer::for_problem(p, grid, 0).unwrap();
    let paths = simulate_paths(p, grid, batch, seed).unwrap();
    BatchInputs::new(p, &norm, paths, true).unwrap()
}

fn small_net() -> NetworkConfig {
    NetworkConfig {
        hidden_layers: 2,
        width: Some(8),
    }
}

/// Loss of either scheme for the given parameters; `ids` receives the
/// parameter nodes in registration order.
fn scheme_loss(
    tape: &mut Tape,
    p: &dyn Problem,
    batch: &BatchInputs,
    nets: &[MlpParams],
    trainable: bool,
) -> (NodeId, Vec<NodeId>) {
    let loss = if nets.len() == 1 {
        let layers = nets[0].register(tape, trainable).unwrap();
        let out = TiedNetwork { layers: &layers }.outputs(tape, batch, false).unwrap();
        ldbsde_loss(tape, &out, batch, p).unwrap()
    } else {
        let y = nets[0].register(tape, trainable).unwrap();
        let z = nets[1].register(tape, trainable).unwrap();
        let g = nets[2].register(tape, trainable).unwrap();
        let out = SeparateNetworks { y: &y, z: &z, gamma: &g }.outputs(tape, batch, true).unwrap();
        dldbsde_loss(tape, &out, batch, p, default_weights(p.dim())).unwrap()
    };
    (loss, tape.parameters().to_vec())
}

/// Largest relative deviation between reverse-mode and central-difference
/// gradients over every parameter entry.
fn gradient_error(p: &dyn Problem, batch: &BatchInputs, nets: &[MlpParams]) -> f64 {
    let mut tape = Tape::new();
    let (loss, ids) = scheme_loss(&mut tape, p, batch, nets, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    let mut slot = 0;
    for (k, net) in nets.iter().enumerate() {
        for (t, tensor) in net.tensors().enumerate() {
            let g = grads.get(ids[slot]).unwrap().clone();
            slot += 1;
            for idx in 0..tensor.len() {
                let eval = |delta: f64| {
                    let mut q = nets.to_vec();
                    q[k].tensors_mut().nth(t).unwrap().data_mut()[idx] += delta;
                    let mut tp = Tape::new();
                    let (l, _) = scheme_loss(&mut tp, p, batch, &q, false);
                    tp.value(l).data()[0]
                };
                let h = 1e-6;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
    }
    worst
}

fn criterion_1() -> Verdict {
    let mut worst_grad = 0.0f64;
    let mut worst_z = 0.0f64;
    for (d, seed) in [(1usize, 1u64), (2, 2), (5, 3)] {
        let p = build_problem("bounded", d, 1.0, &json!({})).unwrap();
        let batch = batch_for(p.as_ref(), 3, 4, seed);
        let triple = NetworkTriple::init(d, &small_net(), seed).unwrap();
        worst_grad = worst_grad.max(gradient_error(p.as_ref(), &batch, &[triple.y.clone()]));
        worst_grad = worst_grad.max(gradient_error(
            p.as_ref(),
            &batch,
            &[triple.y.clone(), triple.z.clone(), triple.gamma.clone()],
        ));

        // Z through the tape against differences of the network output
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let norm = MomentNormalizer::for_problem(p.as_ref(), grid, 0).unwrap();
        let model = Model::Tied(triple.y.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol = 1.0 / (d as f64).sqrt();
        for n in 0..=3 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..2.0)).collect();
            let pred = model.predict(p.as_ref(), &norm, n, &x).unwrap();
            for k in 0..d {
                let h = 1e-5;
                let shifted = |s: f64| {
                    let mut xs = x.clone();
                    xs[k] += s;
                    model.predict(p.as_ref(), &norm, n, &xs).unwrap().y[0]
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h) * vol;
                worst_z = worst_z.max((fd - pred.z[k]).abs() / pred.z[k].abs().max(1.0));
            }
        }
    }
    (
        worst_grad <= GRAD_REL_TOL && worst_z <= Z_AD_TOL,
        format!("max relative gradient error {worst_grad:.2e} (tol {GRAD_REL_TOL:e}), Z error {worst_z:.2e} (tol {Z_AD_TOL:e})"),
    )
}

fn criterion_2() -> Verdict {
    let mut params = BasketParams::defaults(2);
    params.vol = vec![0.15, 0.3];
    let bs = BlackScholesBasket::new(0.5, params).unwrap();
    let bounded = build_problem("bounded", 2, 1.0, &json!({})).unwrap();
    let mut worst = 0.0f64;
    for (p, offset) in [(&bs as &dyn Problem, 0u64), (bounded.as_ref(), 100)] {
        for k in 0..20 {
            let seed = offset + k;
            let batch = batch_for(p, 4, 8, seed);
            let y = NetworkTriple::init(2, &small_net(), seed).unwrap().y;
            let mut tape = Tape::new();
            let layers = y.register(&mut tape, true).unwrap();
            let out = TiedNetwork { layers: &layers }.outputs(&mut tape, &batch, true).unwrap();
            let a = ldbsde_loss(&mut tape, &out, &batch, p).unwrap();
            let b = dldbsde_loss(&mut tape, &out, &batch, p, (1.0, 0.0)).unwrap();
            worst = worst.max((tape.value(a).data()[0] - tape.value(b).data()[0]).abs());
        }
    }
    (
        worst <= REDUCTION_TOL,
        format!("max |DLDBSDE(1,0) - LDBSDE| over 40 batches {worst:.2e} (tol {REDUCTION_TOL:e})"),
    )
}

/// `dX = A X dt + B dW` with constant `B`, zero driver.
struct LinearDrift {
    a: [f64; 4],
    b: [f64; 4],
    x0: [f64; 2],
}

impl Problem for LinearDrift {
    fn name(&self) -> &str {
        "linear-drift"
    }
    fn dim(&self) -> usize {
        2
    }
    fn horizon(&self) -> f64 {
        1.0
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.a[0] * x[0] + self.a[1] * x[1];
        out[1] = self.a[2] * x[0] + self.a[3] * x[1];
    }
    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
    }
    fn drift_jacobian(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> bsde_core::Result<()> {
        out.copy_from_slice(&self.a);
        Ok(())
    }
    fn diffusion_jacobian(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> bsde_core::Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn diffusion_is_constant(&self) -> bool {
        true
    }
    fn driver(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64]) -> f64 {
        0.0
    }
    fn driver_partials(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64]) -> DriverEval {
        DriverEval {
            value: 0.0,
            dx: vec![0.0; 2],
            dy: 0.0,
            dz: vec![0.0; 2],
        }
    }
    fn driver_node(&self, tape: &mut Tape, _c: &DriverContext<'_>, y: NodeId, _z: NodeId) -> bsde_core::Result<NodeId> {
        Ok(tape.scale(y, 0.0)?)
    }
    fn driver_partial_nodes(
        &self,
        _t: &mut Tape,
        _c: &DriverContext<'_>,
        _y: NodeId,
        _z: NodeId,
    ) -> bsde_core::Result<DriverNodes> {
        Ok(DriverNodes {
            dx: None,
            dy: None,
            dz: None,
        })
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn terminal_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0]);
    }
}

fn criterion_3() -> Verdict {
    // constant coefficients: D_n X_{n+1} = b exactly, transfer is the identity
    let hjb = HjbProblem::new(3, 0.5);
    let bs = BlackScholesBasket::new(0.5, BasketParams::defaults(3)).unwrap();
    let bounded = build_problem("bounded", 3, 1.0, &json!({})).unwrap();
    let mut constant_dev = 0.0f64;
    let mut identity = true;
    for p in [&hjb as &dyn Problem, &bs, bounded.as_ref()] {
        let grid = TimeGrid::new(p.horizon(), 6).unwrap();
        let paths = simulate_paths(p, grid, 50, 4).unwrap();
        let m = malliavin_propagate(p, &paths).unwrap();
        identity &= m.transfer.is_none();
        let mut out = vec![0.0; 9];
        for n in 0..6 {
            for i in 0..50 {
                let b = m.diffusion_at(n, i);
                malliavin_step(p, grid.time(n), grid.dt(), paths.state(n, i), paths.increment(n, i), b, &mut out)
                    .unwrap();
                let mut b1 = vec![0.0; 9];
                p.diffusion(grid.time(n + 1), paths.state(n + 1, i), &mut b1);
                for (u, v) in out.iter().zip(&b1) {
                    constant_dev = constant_dev.max((u - v).abs() / v.abs().max(1.0));
                }
            }
        }
    }

    // linear drift: D_n X_{n+1} = B + A B Δt
    let lin = LinearDrift {
        a: [0.3, -0.7, 0.5, 0.2],
        b: [0.4, 0.1, -0.2, 0.6],
        x0: [1.0, -0.5],
    };
    let grid = TimeGrid::new(1.0, 5).unwrap();
    let dt = grid.dt();
    let paths = simulate_paths(&lin, grid, 20, 9).unwrap();
    let m = malliavin_propagate(&lin, &paths).unwrap();
    let (a, b) = (lin.a, lin.b);
    let mut oracle = [0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            oracle[i * 2 + j] = b[i * 2 + j] + dt * (a[i * 2] * b[j] + a[i * 2 + 1] * b[2 + j]);
        }
    }
    // transfer = B⁻¹ (B + A B Δt)
    let det = b[0] * b[3] - b[1] * b[2];
    let inv = [b[3] / det, -b[1] / det, -b[2] / det, b[0] / det];
    let mut transfer = [0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            transfer[i * 2 + j] = inv[i * 2] * oracle[j] + inv[i * 2 + 1] * oracle[2 + j];
        }
    }
    let tr = m.transfer.as_ref().expect("linear drift has a non-trivial transfer");
    let mut linear_dev = 0.0f64;
    let mut out = [0.0; 4];
    for n in 0..5 {
        for i in 0..20 {
            malliavin_step(&lin, grid.time(n), dt, paths.state(n, i), paths.increment(n, i), &b, &mut out).unwrap();
            let o = (n * 20 + i) * 4;
            for k in 0..4 {
                linear_dev = linear_dev.max((out[k] - oracle[k]).abs());
                linear_dev = linear_dev.max((tr[o + k] - transfer[k]).abs());
            }
        }
    }
    (
        identity && constant_dev <= f64::EPSILON && linear_dev <= MALLIAVIN_LINEAR_TOL,
        format!(
            "constant coefficients: deviation {constant_dev:.1e}, identity transfer {identity}; linear drift deviation {linear_dev:.1e} (tol {MALLIAVIN_LINEAR_TOL:e})"
        ),
    )
}

/// Ratios of consecutive mean per-step residuals for N = 16, 32, 64 on
/// common Brownian paths.
fn residual_ratios(p: &dyn Problem, batch: usize, seed: u64) -> Vec<f64> {
    let fine = 64;
    let d = p.dim();
    let grid = TimeGrid::new(p.horizon(), fine).unwrap();
    let base = simulate_paths(p, grid, batch, seed).unwrap();
    let mut levels = Vec::new();
    for factor in [4, 2, 1] {
        let n = fine / factor;
        let inc = coarsen_increments(&base.increments, fine, batch, d, factor).unwrap();
        let paths = paths_from_increments(p, TimeGrid::new(p.horizon(), n).unwrap(), batch, inc).unwrap();
        let r = exact_residuals(p, &paths).unwrap();
        levels.push(r.iter().sum::<f64>() / n as f64);
    }
    levels.windows(2).map(|w| w[0] / w[1]).collect()
}

fn criterion_4() -> Verdict {
    let ex1 = build_problem("bounded", 2, 1.0, &json!({})).unwrap();
    let ex2 = BlackScholesBasket::new(0.5, BasketParams::defaults(50)).unwrap();
    let r1 = residual_ratios(ex1.as_ref(), 20_000, 11);
    let r2 = residual_ratios(&ex2, 4_000, 12);
    let ok = r1.iter().chain(&r2).all(|r| (RESIDUAL_RATIO.0..=RESIDUAL_RATIO.1).contains(r));
    (
        ok,
        format!(
            "residual ratio N=16→32→64: example 1 (d=2) {r1:.3?}, example 2 (d=50) {r2:.3?}, band [{}, {}]",
            RESIDUAL_RATIO.0, RESIDUAL_RATIO.1
        ),
    )
}

/// Φ by composite Simpson quadrature of the density, `0.5 ± ∫_0^|x| φ`.
fn phi_quadrature(x: f64) -> f64 {
    let n = 40_000;
    let h = x.abs() / n as f64;
    let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
    }
    let area = s * h / 3.0;
    if x >= 0.0 {
        0.5 + area
    } else {
        0.5 - area
    }
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Φ against quadrature
    let mut phi_err = 0.0f64;
    for k in 0..=80 {
        let x = -8.0 + 0.2 * k as f64;
        phi_err = phi_err.max((norm_cdf(x) - phi_quadrature(x)).abs());
    }

    // one asset: textbook call with continuous dividend yield
    let mut one_err = 0.0f64;
    for _ in 0..20 {
        let (sigma, q, r, k) = (
            rng.gen_range(0.1..0.5),
            rng.gen_range(0.0..0.05),
            rng.gen_range(0.0..0.08),
            rng.gen_range(80.0..120.0),
        );
        let params = BasketParams {
            x0: vec![100.0],
            drift: vec![0.05],
            vol: vec![sigma],
            weights: vec![1.0],
            dividend: vec![q],
            rate: r,
            strike: k,
        };
        let p = BlackScholesBasket::new(1.0, params).unwrap();
        let t = rng.gen_range(0.0..0.9);
        let s: f64 = rng.gen_range(70.0..130.0);
        let tau = 1.0 - t;
        let d1 = ((s / k).ln() + (r - q + 0.5 * sigma * sigma) * tau) / (sigma * tau.sqrt());
        let d2 = d1 - sigma * tau.sqrt();
        let price = s * (-q * tau).exp() * phi_quadrature(d1) - k * (-r * tau).exp() * phi_quadrature(d2);
        let delta_hedge = (-q * tau).exp() * phi_quadrature(d1) * sigma * s;
        let sol = p.exact_solution(t, &[s.ln()]).unwrap();
        one_err = one_err.max((sol.y - price).abs() / price.abs().max(1.0));
        one_err = one_err.max((sol.z[0] - delta_hedge).abs() / delta_hedge.abs().max(1.0));
    }

    // d = 50 against a direct transcription of the basket formula
    let d = 50;
    let mut basket_err = 0.0f64;
    for _ in 0..10 {
        let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let c: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..0.4)).collect();
        let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..0.03)).collect();
        let (r, k, horizon) = (0.03, 100.0, 0.5);
        let params = BasketParams {
            x0: vec![100.0; d],
            drift: vec![0.05; d],
            vol: b.clone(),
            weights: c.clone(),
            dividend: delta.clone(),
            rate: r,
            strike: k,
        };
        let p = BlackScholesBasket::new(horizon, params).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(85.0..115.0)).collect();
        let t = rng.gen_range(0.0..0.4);
        let tau = horizon - t;
        let geo: f64 = x.iter().zip(&c).map(|(xi, ci)| xi.powf(*ci)).product();
        let b_check2: f64 = b.iter().zip(&c).map(|(bk, ck)| (bk * ck).powi(2)).sum();
        let b_check = b_check2.sqrt();
        let d_check: f64 = (0..d).map(|i| c[i] * (delta[i] + b[i] * b[i] / 2.0)).sum::<f64>() - b_check2 / 2.0;
        let d1 = ((geo / k).ln() + (r - d_check + b_check2 / 2.0) * tau) / (b_check * tau.sqrt());
        let d2 = d1 - b_check * tau.sqrt();
        let y = (-d_check * tau).exp() * geo * phi_quadrature(d1) - (-r * tau).exp() * k * phi_quadrature(d2);
        let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let sol = p.exact_solution(t, &lx).unwrap();
        basket_err = basket_err.max((sol.y - y).abs() / y.abs().max(1.0));
        for i in 0..d {
            let z = c[i] * (-d_check * tau).exp() * geo * phi_quadrature(d1) * b[i];
            basket_err = basket_err.max((sol.z[i] - z).abs() / z.abs().max(1e-3));
        }
    }
    (
        phi_err <= PHI_TOL && one_err <= BS_ONE_ASSET_TOL && basket_err <= BS_BASKET_TOL,
        format!(
            "one asset {one_err:.1e} (tol {BS_ONE_ASSET_TOL:e}), basket d=50 {basket_err:.1e} (tol {BS_BASKET_TOL:e}), Φ {phi_err:.1e} (tol {PHI_TOL:e})"
        ),
    )
}

fn criterion_6() -> Verdict {
    let (d, horizon, vol) = (50, 0.5, 0.2f64.sqrt());
    let x0 = vec![1.0; d];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let cfg = HjbReferenceConfig {
        samples: 100_000,
        runs: 10,
        seed: 1,
        exponent: 1.0,
        gamma: false,
        ..HjbReferenceConfig::default()
    };
    let g = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let grad = |_x: &[f64], out: &mut [f64]| out.copy_from_slice(&c);
    let lin = hjb_reference(&x0, vol, horizon, &g, &grad, &cfg).unwrap();
    let c2: f64 = c.iter().map(|v| v * v).sum();
    let closed = c.iter().sum::<f64>() - c2 * vol * vol * horizon / 2.0;
    let lin_se = lin.y_se.unwrap();
    let lin_dev = (lin.y - closed).abs() / lin_se;

    let p = HjbProblem::new(d, horizon);
    let run = |seed| {
        p.reference(&HjbReferenceConfig {
            seed,
            exponent: p.cole_hopf_exponent(),
            ..cfg.clone()
        })
        .unwrap()
    };
    let (a, b) = (run(11), run(12));
    let combined = (a.y_se.unwrap().powi(2) + b.y_se.unwrap().powi(2)).sqrt();
    let seed_dev = (a.y - b.y).abs() / combined;
    (
        lin_dev <= HJB_SIGMAS && seed_dev <= HJB_SIGMAS,
        format!(
            "linear g: |Y₀ - closed form| = {lin_dev:.2} SE; two seeds: Y₀ {:.6} vs {:.6}, {seed_dev:.2} combined SE (limit {HJB_SIGMAS})",
            a.y, b.y
        ),
    )
}

/// Configuration shared by criteria 7 and 8.
fn desk_config() -> ExperimentConfig {
    serde_json::from_value(json!({
        "problem": "bounded",
        "scheme": ["DLDBSDE", "LDBSDE"],
        "d": 1,
        "T": 1.0,
        "N": 8,
        "B": 128,
        "steps": 8000,
        "seed": 2024,
        "runs": 3,
        "track_gamma": true,
        "network": {"hidden_layers": 3, "width": 32}
    }))
    .unwrap()
}

fn mean_of(records: &[&RunRecord], f: impl Fn(&RunRecord) -> Option<f64>) -> f64 {
    records.iter().map(|r| f(r).unwrap_or(f64::NAN)).sum::<f64>() / records.len() as f64
}

fn criterion_7(records: &[RunRecord]) -> Verdict {
    let dl: Vec<&RunRecord> = records.iter().filter(|r| r.scheme == Scheme::Dldbsde).collect();
    let mut parts = Vec::new();
    let mut ok = dl.len() == 3;
    for (name, pick) in [
        ("Y", (|m: &bsde_core::bench::TimeMetrics| m.y) as fn(&_) -> _),
        ("Z", |m| m.z),
        ("Γ", |m| m.gamma),
    ] {
        let trained = mean_of(&dl, |r| pick(r.t0()).map(|p| p.relative));
        let untrained = mean_of(&dl, |r| pick(&r.untrained_t0).map(|p| p.relative));
        ok &= trained * TRAINING_GAIN <= untrained;
        parts.push(format!("{name} {trained:.2e} (untrained {untrained:.2e})"));
    }
    let initial = mean_of(&dl, |r| r.initial_loss);
    let last = mean_of(&dl, |r| r.final_loss);
    ok &= last <= LOSS_DROP * initial;
    (
        ok,
        format!(
            "DLDBSDE t0 relative MSE {}; loss {initial:.2e} -> {last:.2e}",
            parts.join(", ")
        ),
    )
}

fn criterion_8(summary: &StudySummary, records: &[RunRecord]) -> Verdict {
    let pick = |s: Scheme| -> Vec<&RunRecord> { records.iter().filter(|r| r.scheme == s).collect() };
    let (dl, ld) = (pick(Scheme::Dldbsde), pick(Scheme::Ldbsde));
    let gamma = |rs: &[&RunRecord]| mean_of(rs, |r| r.t0().gamma.map(|p| p.relative));
    let (g_dl, g_ld) = (gamma(&dl), gamma(&ld));
    let step = |s: Scheme| summary.timing[&s][0].as_ref().and_then(|t| t.mean_step_ms).unwrap_or(f64::NAN);
    let (t_dl, t_ld) = (step(Scheme::Dldbsde), step(Scheme::Ldbsde));
    (
        g_dl < g_ld && t_dl < t_ld,
        format!(
            "t0 relative Γ MSE DLDBSDE {g_dl:.2e} vs LDBSDE {g_ld:.2e}; ms/step DLDBSDE {t_dl:.2} vs LDBSDE with Γ {t_ld:.2}"
        ),
    )
}

fn criterion_9() -> Verdict {
    let mut synthetic = 0.0f64;
    for beta in [0.5, 1.0, 1.7, 2.0] {
        let pts: Vec<(usize, f64)> = [4usize, 16, 64, 256].iter().map(|&n| (n, 3.0 * (n as f64).powf(-beta))).collect();
        synthetic = synthetic.max((convergence_rate(&pts).unwrap() - beta).abs());
    }
    let published = [(4usize, 6.35), (16, 2.35e-1), (64, 1.04e-2), (256, 7.09e-3)];
    let beta = convergence_rate(&published).unwrap();
    (
        synthetic <= RATE_SYNTHETIC_TOL && (beta - PUBLISHED_RATE.0).abs() <= PUBLISHED_RATE.1,
        format!(
            "synthetic power law error {synthetic:.1e}; published Y errors give β = {beta:.3} (expected {} ± {})",
            PUBLISHED_RATE.0, PUBLISHED_RATE.1
        ),
    )
}

fn criterion_10() -> Verdict {
    let cfg: ExperimentConfig = serde_json::from_value(json!({
        "problem": "bounded",
        "scheme": ["DLDBSDE", "LDBSDE"],
        "d": 2,
        "T": 1.0,
        "N": [2, 4],
        "B": 32,
        "steps": 20,
        "seed": 99,
        "runs": 2,
        "eval_batch": 256,
        "network": {"hidden_layers": 2, "width": 8}
    }))
    .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_study(&cfg, a.path()).unwrap();
    run_study(&cfg, b.path()).unwrap();
    let without_timing = |dir: &std::path::Path| {
        let text = std::fs::read_to_string(dir.join("summary.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        serde_json::to_string_pretty(&v).unwrap()
    };
    let (sa, sb) = (without_timing(a.path()), without_timing(b.path()));
    // regenerated from stored runs as well
    let runs = report(a.path()).unwrap();
    let regenerated = summarize(&cfg, &runs).reproducible_json().unwrap();
    let same = sa == sb && regenerated == sa;
    (
        same,
        format!("{} bytes of summary.json (timing excluded), identical across executions: {same}", sa.len()),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn selected(id: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

#[test]
fn acceptance() {
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |id, name, v: Verdict| {
        println!("{} criterion {id:>2} ({name}): {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        verdicts.push((id, name, v));
    };
    let simple: [(usize, &str, fn() -> Verdict); 6] = [
        (1, "gradient correctness", criterion_1),
        (2, "special-case reduction", criterion_2),
        (3, "Malliavin exactness", criterion_3),
        (4, "residual consistency", criterion_4),
        (5, "closed-form validation", criterion_5),
        (6, "HJB reference", criterion_6),
    ];
    for (id, name, f) in simple {
        if selected(id) {
            record(id, name, guarded(f));
        } else {
            println!("SKIP criterion {id:>2} ({name})");
        }
    }

    if selected(7) || selected(8) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        match catch_unwind(AssertUnwindSafe(|| run_study(&cfg, dir.path()).unwrap())) {
            Ok(records) => {
                let summary = summarize(&cfg, &records);
                record(7, "desk-scale training", guarded(|| criterion_7(&records)));
                record(8, "scheme ordering", guarded(|| criterion_8(&summary, &records)));
            }
            Err(_) => {
                record(7, "desk-scale training", (false, "study failed".into()));
                record(8, "scheme ordering", (false, "study failed".into()));
            }
        }
    } else {
        println!("SKIP criteria  7, 8 (desk-scale training)");
    }
    for (id, name, f) in [(9usize, "convergence rate", criterion_9 as fn() -> Verdict), (10, "determinism", criterion_10)] {
        if selected(id) {
            record(id, name, guarded(f));
        } else {
            println!("SKIP criterion {id:>2} ({name})");
        }
    }

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.2 .0).map(|v| v.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
