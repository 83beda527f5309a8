//! Desk-scale acceptance run. Prints one PASS or FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvfbsde::autodiff::{Activation, FeedForwardNet, GruNet, GruShape, Parameterized};
use mvfbsde::io::{checkpoint_to_json, parse_checkpoint, Checkpoint};
use mvfbsde::models::{
    analytic_solution, mpc_surface, EtaForm, GrowthModel, GrowthParams, ModelConfig, QuantileParams,
    SystemicRiskAnalytic, SystemicRiskParams,
};
use mvfbsde::orchestrator::{run, sample_after_training, RunConfig, RunOutput, Solver};
use mvfbsde::solvers::{SolverState, TrainingPlan};
use mvfbsde::stochastics::{l2_path_distance, sample_noise, TimeGrid};
use mvfbsde::validation::{
    bsde_residual, compare_to_reference, log_log_slope, nested_conditional_oracle, z_discrepancy, Feedback,
};

const M_IDIO: usize = 10_000;
const ORACLE_PATHS: usize = 5;

struct Outcome {
    criterion: u32,
    pass: bool,
}

struct Acceptance {
    only: Option<BTreeSet<u32>>,
    outcomes: Vec<Outcome>,
}

impl Acceptance {
    fn wants(&self, c: u32) -> bool {
        self.only.as_ref().is_none_or(|s| s.contains(&c))
    }

    fn record(&mut self, criterion: u32, name: &str, pass: bool, detail: &str) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {criterion}: {verdict} {name}: {detail}");
        self.outcomes.push(Outcome { criterion, pass });
    }

    fn info(&self, what: &str) {
        println!("    {what}");
    }
}

/// Desk scale with default parameters: M = 2000, N = 51 steps, K = 10, epochs 400/400/200.
fn desk(model: ModelConfig) -> RunConfig {
    RunConfig {
        model,
        steps: 51,
        paths: 2000,
        seed: 0,
        antithetic: true,
        outer_iterations: 10,
        plan: TrainingPlan {
            epochs_y: 400,
            epochs_s: 400,
            epochs_z0: 200,
            ..TrainingPlan::default()
        },
        ..RunConfig::default()
    }
}

fn train(label: &str, cfg: RunConfig) -> RunOutput {
    let start = Instant::now();
    let mut solver = Solver::new(cfg).expect("valid desk configuration");
    let result = solver.run_with(|s| {
        let r = s.report().records.last().expect("after an iteration");
        println!(
            "    [{label}] iteration {:>2}: dist X {:.2e} Y {:.2e} Z {:.2e} Z0 {:.2e} clamps {}",
            r.iteration, r.dist_x, r.dist_y, r.dist_z, r.dist_z0, r.clamp_events
        );
        Ok(())
    });
    if let Err(e) = result {
        println!("    [{label}] run aborted: {e}");
    }
    println!("    [{label}] {:.0} s", start.elapsed().as_secs_f64());
    solver.into_output()
}

fn mean_abs(a: ndarray::ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64
}

fn rk4_eta(p: &SystemicRiskParams, nodes: usize, sub: usize) -> Vec<f64> {
    let f = |e: f64| 2.0 * (p.a + p.q) * e + e * e - (p.epsilon - p.q * p.q);
    let h = -1.0 / ((nodes - 1) * sub) as f64;
    let mut out = vec![0.0; nodes];
    let mut e = p.c;
    out[nodes - 1] = e;
    for j in (0..nodes - 1).rev() {
        for _ in 0..sub {
            let k1 = f(e);
            let k2 = f(e + 0.5 * h * k1);
            let k3 = f(e + 0.5 * h * k2);
            let k4 = f(e + h * k3);
            e += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out[j] = e;
    }
    out
}

fn criterion_1(acc: &mut Acceptance) {
    let p = SystemicRiskParams::default();
    let an = SystemicRiskAnalytic::new(p, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let oracle = rk4_eta(&p, grid.nodes(), 20);
    let worst = grid.times().iter().zip(&oracle).map(|(&t, o)| (an.eta(t) - o).abs()).fold(0.0, f64::max);
    let printed = an.eta_with(1.0, EtaForm::Printed);
    acc.info(&format!("printed closed form gives eta(T) = {printed:.4} against c = {}", p.c));
    let pass = worst <= 1e-6 && (printed - p.c).abs() > 0.1;
    acc.record(
        1,
        "Riccati oracle",
        pass,
        &format!("max |eta - RK4| = {worst:.2e} on 101 nodes; printed form misses eta(T) = c by {:.3}", p.c - printed),
    );
}

fn systemic_checks(acc: &mut Acceptance, out: &RunOutput) {
    let p = SystemicRiskParams::default();
    let grid = out.config.grid().unwrap();
    let reference = analytic_solution(&p, 1.0, &out.xi, &out.noise, &grid).unwrap();
    let rep = compare_to_reference(&out.state, &reference.state, &grid).unwrap();
    for proc in &rep.processes {
        let g = proc.global;
        let r2 = g.r2.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"));
        acc.info(&format!("{:>2}: bias {:+.4} rmse {:.4} R2 {r2}", proc.name, g.bias, g.rmse));
    }
    let get = |n: &str| rep.process(n).unwrap().global;
    let (x, y, s) = (get("X"), get("Y"), get("S"));
    let z0 = mean_abs(out.state.z0.scalar());
    let r2x = x.r2.unwrap_or(f64::NEG_INFINITY);
    let r2y = y.r2.unwrap_or(f64::NEG_INFINITY);
    if acc.wants(2) {
        let pass = out.report.records.len() == out.config.outer_iterations
            && r2x >= 0.95
            && r2y >= 0.95
            && y.bias.abs() <= 0.05
            && z0 <= 0.05
            && s.rmse <= 0.05;
        acc.record(
            2,
            "systemic-risk recovery (antithetic sampling)",
            pass,
            &format!(
                "R2 X {r2x:.4}, R2 Y {r2y:.4}, bias Y {:+.4}, mean |Z0| {z0:.4}, S RMSE {:.4}",
                y.bias, s.rmse
            ),
        );
    }
    if acc.wants(3) {
        let closed = SystemicRiskAnalytic::new(p, 1.0).unwrap();
        let z = z_discrepancy(&out.state.z, &closed, &grid).unwrap();
        acc.record(3, "Z discrepancy report", !z.statement.is_empty(), &z.statement);
    }
    if acc.wants(4) {
        let dy: Vec<f64> = out.report.records.iter().map(|r| r.dist_y).collect();
        let pass = dy.len() >= 2 && dy[dy.len() - 1] < 0.1 * dy[1];
        let last = dy.last().copied().unwrap_or(f64::NAN);
        let second = dy.get(1).copied().unwrap_or(f64::NAN);
        acc.record(
            4,
            "convergence trend",
            pass,
            &format!("dist Y at k = {} is {last:.3e}, {:.1}% of {second:.3e} at k = 2", dy.len(), 100.0 * last / second),
        );
    }
    // Supplementary probes, not scored.
    let model = out.config.model.build(1.0).unwrap();
    let replay = sample_after_training(model.as_ref(), &out.networks, &grid, &out.noise, &out.xi).unwrap();
    let dx = l2_path_distance(&replay.x, &out.state.x).unwrap();
    let last = out.report.records.last().map_or(f64::NAN, |r| r.dist_x);
    acc.info(&format!("replay on training noise: dist X {dx:.3e} against final successive dist X {last:.3e}"));
}

fn oracle_check(acc: &mut Acceptance, out: &RunOutput, label: &str, tol: f64) -> (bool, String) {
    let grid = out.config.grid().unwrap();
    let model = out.config.model.build(1.0).unwrap();
    let dw0 = out.noise.dw0();
    let mut worst: f64 = 0.0;
    // Mirrored pairs share their common path, so take one path per pair.
    let stride = if out.config.antithetic { 2 } else { 1 };
    for i in (0..ORACLE_PATHS).map(|k| k * stride) {
        let common: Vec<f64> = (0..grid.steps()).map(|j| dw0[[i, j, 0]]).collect();
        let seed = out.config.seed.wrapping_add(i as u64);
        let o = nested_conditional_oracle(
            model.as_ref(),
            Feedback::Trained(&out.networks),
            &grid,
            &common,
            M_IDIO,
            model.score(),
            seed,
        )
        .unwrap();
        let dev = out.state.s.path(i).iter().zip(&o.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        acc.info(&format!("[{label}] common path {i}: max |S - oracle| = {dev:.4}"));
        worst = worst.max(dev);
    }
    (worst <= tol, format!("{label} worst {worst:.4} (limit {tol})"))
}

fn growth_checks(acc: &mut Acceptance) {
    let cfg = desk(ModelConfig::Growth(GrowthParams::default()));
    let out = train("growth", cfg);
    let finished = out.report.records.len() == out.config.outer_iterations && out.state.all_finite();
    let late_clamps: usize = out.report.records.iter().filter(|r| r.iteration > 3).map(|r| r.clamp_events).sum();
    let grid = out.config.grid().unwrap();
    let n = grid.steps();
    let m = out.state.paths();
    let terminal = ((0..m).map(|i| (out.state.y.get(i, n) + out.state.x.get(i, n)).powi(2)).sum::<f64>() / m as f64).sqrt();

    let p0 = GrowthParams {
        rho: 0.0,
        ..GrowthParams::default()
    };
    let out0 = train("growth rho=0", desk(ModelConfig::Growth(p0)));
    let finished0 = out0.report.records.len() == out0.config.outer_iterations && out0.state.all_finite();
    let z0 = mean_abs(out0.state.z0.scalar());

    let p = GrowthParams::default();
    let model = GrowthModel::new(p).unwrap();
    let lin = |lo: f64, hi: f64| (0..20).map(|i| lo + (hi - lo) * i as f64 / 19.0).collect::<Vec<_>>();
    let ks = lin(p.k_mean - 2.0 * p.k_sd, p.k_mean + 2.0 * p.k_sd);
    let rs = lin(model.interest_rate(p.k_mean - p.k_sd), model.interest_rate(p.k_mean + p.k_sd));
    let (mut compared, mut agree, mut flagged) = (0, 0, 0);
    let mut worst_rel: f64 = 0.0;
    for t in [0.5, 0.9] {
        let surface = mpc_surface(&out.networks.u, &model, &ks, &rs, t).unwrap();
        assert_eq!(surface.len(), 400);
        let consumption = |k: f64, r: f64| {
            let input = Array2::from_shape_vec((1, 3), vec![t, k, r / p.production]).unwrap();
            1.0 / out.networks.u.forward(input.view()).unwrap()[[0, 0]]
        };
        for (idx, pt) in surface.iter().enumerate() {
            let (a, b) = (idx / rs.len(), idx % rs.len());
            if a == 0 || a == ks.len() - 1 || b == 0 || b == rs.len() - 1 {
                continue;
            }
            let Some(mpc) = pt.mpc else {
                flagged += 1;
                continue;
            };
            let h = 1e-4 * (1.0 + pt.k.abs());
            let fd = (consumption(pt.k + h, pt.r) - consumption(pt.k - h, pt.r)) / (2.0 * h);
            let rel = (mpc - fd).abs() / fd.abs().max(1e-12);
            compared += 1;
            if (mpc - fd).abs() <= 0.01 * fd.abs() {
                agree += 1;
            }
            worst_rel = worst_rel.max(rel);
        }
    }
    acc.info(&format!("clamp events after iteration 3: {late_clamps}; flagged MPC points (|Y| below floor): {flagged}"));
    let pass = finished && finished0 && terminal <= 0.05 && z0 <= 0.05 && compared > 0 && agree == compared;
    acc.record(
        7,
        "growth model",
        pass,
        &format!(
            "runs complete {finished}/{finished0}, terminal RMSE |Y_T + K_T| {terminal:.4}, mean |Z0| at rho = 0 {z0:.4}, \
             MPC formula vs difference within 1% at {agree}/{compared} interior points (worst {:.2e})",
            worst_rel
        ),
    );
}

fn derivative(f: &dyn Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-3 * (1.0 + x.abs());
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0)
}

/// Parameter gradients of an MLP and a GRU over a spread of seeds.
fn autodiff_suite() -> (usize, usize) {
    let (mut checked, mut bad) = (0, 0);
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = if seed % 2 == 0 { Activation::Tanh } else { Activation::Sigmoid };
        let net = FeedForwardNet::new(&[3, 6, 5, 1], act, &mut rng).unwrap();
        let input = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.5..1.5));
        let target = Array2::from_shape_fn((4, 1), |_| rng.random_range(-1.0..1.0));
        let loss_of = |n: &FeedForwardNet| -> f64 {
            let out = n.forward(input.view()).unwrap();
            out.iter().zip(&target).map(|(u, y)| (u - y).powi(2)).sum()
        };
        let (_, grads) = net
            .batch_gradient(input.view(), |r, u, d| {
                let e = u[0] - target[[r, 0]];
                d[0] = 2.0 * e;
                e * e
            })
            .unwrap();
        for (k, g) in grads.iter().enumerate() {
            for ((r, c), &gv) in g.indexed_iter() {
                let f = |v: f64| {
                    let mut n = net.clone();
                    n.parameters_mut()[k][[r, c]] = v;
                    loss_of(&n)
                };
                checked += 1;
                bad += usize::from(!close(gv, derivative(&f, net.parameters()[k][[r, c]])));
            }
        }

        let shape = GruShape {
            input_dim: 2,
            hidden_dim: 3,
            extra_dim: 1,
            output_dim: 1,
        };
        let gru = GruNet::new(shape, &mut rng).unwrap();
        let steps = 4;
        let feats: Vec<Array2<f64>> = (0..steps).map(|_| Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.5..1.5))).collect();
        let extras: Vec<Array2<f64>> = (0..steps).map(|_| Array2::from_shape_fn((3, 1), |_| rng.random_range(-1.5..1.5))).collect();
        let tgt = Array2::from_shape_fn((3, steps), |_| rng.random_range(-1.0..1.0));
        let loss_of = |n: &GruNet| -> f64 {
            let tr = n.run(&feats, Some(&extras)).unwrap();
            (0..steps).map(|j| (0..3).map(|i| (tr.output[j][[i, 0]] - tgt[[i, j]]).powi(2)).sum::<f64>()).sum()
        };
        let (_, grads) = gru
            .sequence_gradient(&feats, Some(&extras), &[0, 1, 2], |r, j, y, d| {
                let e = y[0] - tgt[[r, j]];
                d[0] = 2.0 * e;
                e * e
            })
            .unwrap();
        for (k, g) in grads.iter().enumerate() {
            for ((r, c), &gv) in g.indexed_iter() {
                let f = |v: f64| {
                    let mut n = gru.clone();
                    n.parameters_mut()[k][[r, c]] = v;
                    loss_of(&n)
                };
                checked += 1;
                bad += usize::from(!close(gv, derivative(&f, gru.parameters()[k][[r, c]])));
            }
        }
    }
    (checked, bad)
}

fn gru_causal() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let shape = GruShape {
        input_dim: 2,
        hidden_dim: 4,
        extra_dim: 1,
        output_dim: 1,
    };
    let net = GruNet::new(shape, &mut rng).unwrap();
    let steps = 10;
    let feats: Vec<Array2<f64>> = (0..steps).map(|_| Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0))).collect();
    let extras: Vec<Array2<f64>> = (0..steps).map(|_| Array2::from_shape_fn((5, 1), |_| rng.random_range(-1.0..1.0))).collect();
    let base = net.run(&feats, Some(&extras)).unwrap();
    (0..steps).all(|cut| {
        let mut f2 = feats.clone();
        let mut e2 = extras.clone();
        for j in cut..steps {
            f2[j].mapv_inplace(|v| v + 3.0);
            e2[j].mapv_inplace(|v| v - 3.0);
        }
        let moved = net.run(&f2, Some(&e2)).unwrap();
        (0..cut).all(|j| base.output[j].iter().zip(&moved.output[j]).all(|(a, b)| a.to_bits() == b.to_bits()))
    })
}

fn infrastructure(acc: &mut Acceptance, trained: Option<&RunOutput>) {
    let (checked, bad) = autodiff_suite();
    let causal = gru_causal();

    let nets = match trained {
        Some(o) => o.networks.clone(),
        None => mvfbsde::orchestrator::TrainedNetworks::init(7, 1).unwrap(),
    };
    let cfg = trained.map_or_else(RunConfig::default, |o| o.config.clone());
    let text = checkpoint_to_json(&Checkpoint::new(&cfg, 10, &nets)).unwrap();
    let (_, back) = parse_checkpoint(text.as_bytes(), None).unwrap();
    let probe = Array2::from_shape_fn((64, 3), |(i, j)| ((i * 3 + j) as f64 * 0.173).sin() * 2.0);
    let a = nets.u.forward(probe.view()).unwrap();
    let b = back.u.forward(probe.view()).unwrap();
    let bit_exact = back == nets && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

    let small = RunConfig {
        steps: 12,
        paths: 200,
        seed: 5,
        antithetic: true,
        outer_iterations: 2,
        plan: TrainingPlan {
            epochs_y: 40,
            epochs_s: 40,
            epochs_z0: 20,
            batch: 64,
            ..TrainingPlan::default()
        },
        ..RunConfig::default()
    };
    let r1 = run(small.clone()).unwrap();
    let r2 = run(small).unwrap();
    let identical = serde_json::to_string(&r1.report).unwrap() == serde_json::to_string(&r2.report).unwrap()
        && r1.state == r2.state;

    let p = SystemicRiskParams::default();
    let model = ModelConfig::SystemicRisk(p).build(1.0).unwrap();
    let mut points = Vec::new();
    for steps in [51, 101, 201] {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let noise = sample_noise(&grid, 4000, 1, 17).unwrap();
        let xi = model.initial_law().sample(4000, 17);
        let sol = analytic_solution(&p, 1.0, &xi, &noise, &grid).unwrap();
        let rep = bsde_residual(&sol.state, model.as_ref(), &grid, &noise).unwrap();
        points.push((grid.dt(), rep.relative));
    }
    let slope = log_log_slope(&points).unwrap();
    acc.info(&format!(
        "relative BSDE residual on the analytic state: {} (log-log slope {slope:.3})",
        points.iter().map(|(dt, r)| format!("dt {dt}: {r:.4}")).collect::<Vec<_>>().join(", ")
    ));
    let pass = bad == 0 && causal && bit_exact && identical && slope >= 0.4;
    acc.record(
        8,
        "infrastructure",
        pass,
        &format!(
            "autodiff {}/{checked} gradients within 1e-6, GRU causal {causal}, checkpoint bit-exact {bit_exact}, \
             repeated runs identical {identical}, residual decays at least like sqrt(dt) (slope {slope:.2} >= 0.4)",
            checked - bad
        ),
    );
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut acc = Acceptance { only, outcomes: Vec::new() };
    let start = Instant::now();

    if acc.wants(1) {
        criterion_1(&mut acc);
    }
    let needs_mean = [2, 3, 4, 5, 6].iter().any(|&c| acc.wants(c));
    let mean_run = needs_mean.then(|| train("systemic", desk(ModelConfig::SystemicRisk(SystemicRiskParams::default()))));
    if let Some(out) = &mean_run {
        if [2, 3, 4].iter().any(|&c| acc.wants(c)) {
            systemic_checks(&mut acc, out);
        }
    }
    let needs_quantile = acc.wants(5) || acc.wants(6);
    let quantile_run = needs_quantile.then(|| {
        train(
            "quantile 0.6",
            desk(ModelConfig::QuantileInteraction(QuantileParams {
                alpha: 0.6,
                ..QuantileParams::default()
            })),
        )
    });
    if acc.wants(5) {
        let (m, q) = (mean_run.as_ref().unwrap(), quantile_run.as_ref().unwrap());
        let avg = |s: &SolverState| s.x.scalar().mean().unwrap();
        let (xm, xq) = (avg(&m.state), avg(&q.state));
        let same_noise = m.noise == q.noise && m.xi == q.xi;
        acc.record(
            5,
            "quantile interaction shifts the flow upwards",
            same_noise && xq > xm,
            &format!("time-averaged mean X: alpha = 0.6 {xq:+.4}, mean interaction {xm:+.4}, shared noise {same_noise}"),
        );
    }
    if acc.wants(6) {
        let (pm, dm) = oracle_check(&mut acc, mean_run.as_ref().unwrap(), "mean", 0.05);
        let (pq, dq) = oracle_check(&mut acc, quantile_run.as_ref().unwrap(), "quantile 0.6", 0.08);
        acc.record(6, "nested-oracle agreement on 5 common paths, M_idio = 1e4", pm && pq, &format!("{dm}; {dq}"));
    }
    if acc.wants(7) {
        growth_checks(&mut acc);
    }
    if acc.wants(8) {
        infrastructure(&mut acc, mean_run.as_ref());
    }

    let failed: Vec<u32> = acc.outcomes.iter().filter(|o| !o.pass).map(|o| o.criterion).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s{}",
        acc.outcomes.len() - failed.len(),
        acc.outcomes.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
}
