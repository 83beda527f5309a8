use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvfbsde::models::{analytic_solution, Model, SystemicRiskModel, SystemicRiskParams};
use mvfbsde::orchestrator::{sample_after_training, TrainedNetworks};
use mvfbsde::scores::ScoreSpec;
use mvfbsde::solvers::SolverState;
use mvfbsde::stochastics::{sample_noise, PathBatch, TimeGrid};
use mvfbsde::validation::{
    bsde_residual, bsde_residuals, compare_to_reference, log_log_slope, nested_conditional_oracle, process_report,
    Feedback,
};

fn reference() -> SystemicRiskParams {
    SystemicRiskParams::default()
}

fn random_state(m: usize, nodes: usize, seed: u64) -> SolverState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = |name: &str| PathBatch::from_scalar(name, Array2::from_shape_fn((m, nodes), |_| rng.random_range(-2.0..2.0)));
    SolverState {
        iteration: 0,
        x: f("X"),
        y: f("Y"),
        z: f("Z"),
        z0: f("Z0"),
        s: f("S"),
    }
}

fn map_state(s: &SolverState, f: impl Fn(f64) -> f64) -> SolverState {
    let g = |b: &PathBatch| PathBatch::from_scalar(b.name(), b.scalar().mapv(&f));
    SolverState {
        iteration: s.iteration,
        x: g(&s.x),
        y: g(&s.y),
        z: g(&s.z),
        z0: g(&s.z0),
        s: g(&s.s),
    }
}

#[test]
fn identical_states_have_zero_error() {
    let grid = TimeGrid::new(1.0, 6).unwrap();
    let s = random_state(20, 7, 1);
    let rep = compare_to_reference(&s, &s, &grid).unwrap();
    for p in &rep.processes {
        assert_eq!(p.global.bias, 0.0);
        assert_eq!(p.global.rmse, 0.0);
        assert_eq!(p.global.r2, Some(1.0));
    }
}

#[test]
fn constant_shift_gives_unit_bias_and_rmse() {
    let grid = TimeGrid::new(1.0, 6).unwrap();
    let s = random_state(20, 7, 2);
    let shifted = map_state(&s, |v| v + 1.0);
    let rep = compare_to_reference(&shifted, &s, &grid).unwrap();
    for p in &rep.processes {
        assert!((p.global.bias - 1.0).abs() < 1e-12, "{}", p.name);
        assert!((p.global.rmse - 1.0).abs() < 1e-12, "{}", p.name);
        assert!(p.per_node.iter().all(|n| (n.bias - 1.0).abs() < 1e-12));
        assert!(p.bands.iter().all(|b| (b.q05 - 1.0).abs() < 1e-12 && (b.q95 - 1.0).abs() < 1e-12));
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let grid = TimeGrid::new(1.0, 6).unwrap();
    assert!(compare_to_reference(&random_state(20, 7, 1), &random_state(21, 7, 1), &grid).is_err());
    assert!(compare_to_reference(&random_state(20, 6, 1), &random_state(20, 6, 1), &grid).is_err());
}

/// Two-pass textbook statistics over the pooled array.
fn straight_line(a: &Array2<f64>, r: &Array2<f64>) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let e: Vec<f64> = a.iter().zip(r).map(|(x, y)| x - y).collect();
    let bias = e.iter().sum::<f64>() / n;
    let rmse = (e.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let mean = r.iter().sum::<f64>() / n;
    let sst: f64 = r.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = e.iter().map(|v| v * v).sum();
    (bias, rmse, 1.0 - sse / sst)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_match_straight_line_statistics(seed in 0u64..10_000, m in 2usize..40, steps in 1usize..12) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_fn((m, steps + 1), |_| rng.random_range(-3.0..3.0));
        let a = Array2::from_shape_fn((m, steps + 1), |(i, j)| r[[i, j]] + rng.random_range(-1.0..1.0) * 0.5);
        let rep = process_report("X", &grid, a.view(), r.view()).unwrap();
        let (bias, rmse, r2) = straight_line(&a, &r);
        prop_assert!((rep.global.bias - bias).abs() <= 1e-10);
        prop_assert!((rep.global.rmse - rmse).abs() <= 1e-10);
        prop_assert!((rep.global.r2.unwrap() - r2).abs() <= 1e-10);
        for j in 0..=steps {
            let col_a = a.column(j).to_owned().insert_axis(ndarray::Axis(1));
            let col_r = r.column(j).to_owned().insert_axis(ndarray::Axis(1));
            let (b, e, _) = straight_line(&col_a, &col_r);
            prop_assert!((rep.per_node[j].bias - b).abs() <= 1e-10);
            prop_assert!((rep.per_node[j].rmse - e).abs() <= 1e-10);
        }
        // Variance decomposition and the R² ceiling.
        prop_assert!(rep.global.rmse.powi(2) >= rep.global.bias.powi(2) - 1e-12);
        prop_assert!(rep.global.r2.unwrap() <= 1.0);
        for n in &rep.per_node {
            prop_assert!(n.rmse.powi(2) >= n.bias.powi(2) - 1e-12);
            prop_assert!(n.r2.map_or(true, |v| v <= 1.0));
        }
    }

    #[test]
    fn relabeling_paths_changes_nothing(seed in 0u64..10_000, m in 2usize..30) {
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let a = random_state(m, 6, seed);
        let r = random_state(m, 6, seed + 1);
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let base = compare_to_reference(&a, &r, &grid).unwrap();
        let permuted = compare_to_reference(&a.select_paths(&perm), &r.select_paths(&perm), &grid).unwrap();
        prop_assert_eq!(base, permuted);
    }
}

fn null_params() -> SystemicRiskParams {
    SystemicRiskParams {
        a: 0.0,
        q: 0.0,
        epsilon: 0.0,
        ..reference()
    }
}

#[test]
fn constant_y_solves_the_null_bsde_exactly() {
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let noise = sample_noise(&grid, 16, 1, 3).unwrap();
    let model = SystemicRiskModel::mean(null_params(), 1.0).unwrap();
    let mut state = random_state(16, 21, 9);
    state.y = PathBatch::from_scalar("Y", Array2::from_elem((16, 21), 3.0));
    state.z = PathBatch::from_scalar("Z", Array2::zeros((16, 21)));
    state.z0 = PathBatch::from_scalar("Z0", Array2::zeros((16, 21)));
    let rep = bsde_residual(&state, &model, &grid, &noise).unwrap();
    assert_eq!(rep.rms, 0.0);
    assert!(rep.per_step_rms.iter().all(|&v| v == 0.0));
    assert_eq!(rep.relative, 0.0);
}

#[test]
fn residual_is_linear_in_z_and_z0() {
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let m = 4000;
    let noise = sample_noise(&grid, m, 1, 8).unwrap();
    let model = SystemicRiskModel::mean(reference(), 1.0).unwrap();
    let state = random_state(m, 26, 4);
    let base = bsde_residuals(&state, &model, &grid, &noise).unwrap();

    // Z + 1 moves every residual by -dW, so the per-step RMS of the change is RMS(dW) ~ sqrt(dt).
    let mut bumped = state.clone();
    bumped.z = PathBatch::from_scalar("Z", state.z.scalar().mapv(|v| v + 1.0));
    let moved = bsde_residuals(&bumped, &model, &grid, &noise).unwrap();
    let sd = grid.dt().sqrt();
    for j in 0..grid.steps() {
        let diff: f64 = (0..m).map(|i| (moved[[i, j]] - base[[i, j]]).powi(2)).sum::<f64>() / m as f64;
        let dw: f64 = (0..m).map(|i| noise.dw()[[i, j, 0]].powi(2)).sum::<f64>() / m as f64;
        assert!((diff.sqrt() - dw.sqrt()).abs() < 1e-10);
        assert!((diff.sqrt() - sd).abs() < 4.0 * sd / (2.0 * m as f64).sqrt());
    }
    let rms_base = bsde_residual(&state, &model, &grid, &noise).unwrap().rms;
    let rms_moved = bsde_residual(&bumped, &model, &grid, &noise).unwrap().rms;
    // The residual here is independent of the fresh increments, so the squares add.
    let expected = (rms_base.powi(2) + sd * sd).sqrt();
    assert!((rms_moved - expected).abs() < 0.02 * expected, "{rms_moved} vs {expected}");

    // Superposition on random perturbations.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pa = Array2::from_shape_fn((m, 26), |_| rng.random_range(-1.0..1.0));
    let pb = Array2::from_shape_fn((m, 26), |_| rng.random_range(-1.0..1.0));
    let (ca, cb) = (0.7, -1.3);
    let perturbed = |za: f64, zb: f64| {
        let mut s = state.clone();
        s.z = PathBatch::from_scalar("Z", &state.z.scalar() + &(za * &pa));
        s.z0 = PathBatch::from_scalar("Z0", &state.z0.scalar() + &(zb * &pb));
        bsde_residuals(&s, &model, &grid, &noise).unwrap()
    };
    let ra = perturbed(1.0, 0.0) - &base;
    let rb = perturbed(0.0, 1.0) - &base;
    let both = perturbed(ca, cb) - &base;
    let lin = ca * &ra + cb * &rb;
    let worst = both.iter().zip(&lin).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "superposition off by {worst:e}");
}

/// The closed form is integrated exactly, so each step leaves a local error of
/// order dt^1.5 against increments of order dt^0.5: the relative residual
/// is O(sqrt dt) at worst and is observed to fall like dt.
#[test]
fn analytic_residual_shrinks_at_least_like_root_dt() {
    let p = reference();
    let model = SystemicRiskModel::mean(p, 1.0).unwrap();
    let m = 4000;
    let mut relative = Vec::new();
    let mut per_step = Vec::new();
    for n in [51, 101, 201] {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let noise = sample_noise(&grid, m, 1, 17).unwrap();
        let xi = model.initial_law().sample(m, 17);
        let sol = analytic_solution(&p, 1.0, &xi, &noise, &grid).unwrap();
        let rep = bsde_residual(&sol.state, &model, &grid, &noise).unwrap();
        relative.push((grid.dt(), rep.relative));
        per_step.push((grid.dt(), rep.rms));
    }
    let slope = log_log_slope(&relative).unwrap();
    assert!(slope >= 0.4, "relative residual slope {slope}, points {relative:?}");
    assert!((slope - 1.0).abs() <= 0.1, "relative residual slope {slope}, points {relative:?}");
    let local = log_log_slope(&per_step).unwrap();
    assert!((local - 1.5).abs() <= 0.1, "per-step residual slope {local}, points {per_step:?}");
}

#[test]
fn oracle_of_a_deterministic_system_is_its_single_path() {
    let p = SystemicRiskParams {
        sigma: 0.0,
        xi_var: 0.0,
        xi_mean: 1.5,
        ..reference()
    };
    let model = SystemicRiskModel::mean(p, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let nets = TrainedNetworks::init(3, 1).unwrap();
    let dw0 = vec![0.0; 20];
    let one = sample_noise(&grid, 1, 1, 0).unwrap();
    let zero = mvfbsde::stochastics::NoisePair::from_increments(
        one.dw().mapv(|_| 0.0),
        one.dw0().mapv(|_| 0.0),
        0,
    )
    .unwrap();
    let path = sample_after_training(&model, &nets, &grid, &zero, &Array1::from_elem(1, 1.5))
        .unwrap()
        .x;
    for spec in [ScoreSpec::Mean, ScoreSpec::Quantile { alpha: 0.6 }] {
        let oracle = nested_conditional_oracle(&model, Feedback::Trained(&nets), &grid, &dw0, 1000, spec, 4).unwrap();
        for j in 0..grid.nodes() {
            assert!((oracle.values[j] - path.get(0, j)).abs() < 1e-12, "node {j}");
        }
    }
    // The path is not trivially constant.
    assert!((path.get(0, 20) - 1.5).abs() > 1e-3);
}

fn common_path(grid: &TimeGrid, seed: u64) -> Vec<f64> {
    sample_noise(grid, 1, 1, seed).unwrap().dw0().iter().copied().collect()
}

#[test]
fn analytic_oracle_recovers_the_closed_form_mean() {
    let p = reference();
    let model = SystemicRiskModel::mean(p, 1.0).unwrap();
    let an = model.analytic().unwrap();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let dw0 = common_path(&grid, 100);
    let oracle = nested_conditional_oracle(&model, Feedback::Analytic(&an), &grid, &dw0, 10_000, ScoreSpec::Mean, 6).unwrap();
    let se = oracle.std_error.as_ref().unwrap();
    let mut w0 = 0.0;
    for j in 0..grid.nodes() {
        if j > 0 {
            w0 += dw0[j - 1];
        }
        let exact = p.xi_mean + p.rho * p.sigma * w0;
        assert!((oracle.values[j] - exact).abs() <= 3.0 * se[j], "node {j}: {} vs {exact} (se {})", oracle.values[j], se[j]);
    }
}

#[test]
fn oracle_error_decays_like_inverse_root_m() {
    let p = reference();
    let model = SystemicRiskModel::mean(p, 1.0).unwrap();
    let an = model.analytic().unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let mut points = Vec::new();
    for m in [500usize, 2000, 8000, 32_000] {
        let mut sq = 0.0;
        let mut count = 0.0;
        for rep in 0..12u64 {
            let dw0 = common_path(&grid, 200 + rep);
            let o = nested_conditional_oracle(&model, Feedback::Analytic(&an), &grid, &dw0, m, ScoreSpec::Mean, 1000 * rep + m as u64)
                .unwrap();
            let mut w0 = 0.0;
            for j in 0..grid.nodes() {
                if j > 0 {
                    w0 += dw0[j - 1];
                }
                sq += (o.values[j] - p.rho * p.sigma * w0).powi(2);
                count += 1.0;
            }
        }
        points.push((m as f64, (sq / count).sqrt()));
    }
    let slope = log_log_slope(&points).unwrap();
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}, points {points:?}");
}
