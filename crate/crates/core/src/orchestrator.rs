//! Outer fixed-point loop: forward resimulation, mean-field fit, backward fit
//! and `Z0` fit, with damped ("soft") updates of the processes.

use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Adam, FeedForwardNet, GruNet, GruShape};
use crate::error::{Error, Result};
use crate::models::{floor_y, InitialLaw, Model, ModelConfig, Point};
use crate::solvers::{
    common_noise_features, evaluate_statistic, fit_backward_y, fit_mean_field, fit_z0, picard_forward,
    PicardSummary, SolverState, TrainingPlan,
};
use crate::stochastics::{l2_path_distance, mirror_pairs, sample_noise, substream, NoisePair, PathBatch, Stream, TimeGrid};

/// Layer widths of the decoupling-field network `U(t, x, s)`.
pub const U_SIZES: [usize; 4] = [3, 18, 18, 1];
/// Hidden width of the recurrent networks.
pub const GRU_HIDDEN: usize = 2;

pub fn s_shape() -> GruShape {
    GruShape {
        input_dim: 2,
        hidden_dim: GRU_HIDDEN,
        extra_dim: 0,
        output_dim: 1,
    }
}

pub fn v_shape() -> GruShape {
    GruShape {
        input_dim: 2,
        hidden_dim: GRU_HIDDEN,
        extra_dim: 1,
        output_dim: 1,
    }
}

/// `delta * prev + (1 - delta) * proposal`, elementwise.
pub fn soft_update(prev: &PathBatch, proposal: &PathBatch, delta: f64) -> Result<PathBatch> {
    prev.check_same_shape(proposal, "soft_update")?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("damping must lie in [0, 1], got {delta}")));
    }
    let mut values = proposal.values().clone();
    values.zip_mut_with(prev.values(), |p, &q| *p = delta * q + (1.0 - delta) * *p);
    Ok(PathBatch::from_array(prev.name(), values))
}

/// Everything that defines one solver run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Draw paths in mirrored pairs (see [`mirror_pairs`]).
    #[serde(default)]
    pub antithetic: bool,
    pub outer_iterations: usize,
    pub damping: f64,
    pub tolerance: f64,
    pub warm_start: bool,
    pub plan: TrainingPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::SystemicRisk(Default::default()),
            horizon: 1.0,
            steps: 101,
            paths: 10_000,
            seed: 0,
            antithetic: false,
            outer_iterations: 20,
            damping: 0.5,
            tolerance: 1e-4,
            warm_start: true,
            plan: TrainingPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        TimeGrid::new(self.horizon, self.steps)?;
        if self.steps < 2 {
            return Err(Error::Config("grid.N must be at least 2".into()));
        }
        if self.paths == 0 {
            return Err(Error::Config("sampling.M must be positive".into()));
        }
        if self.outer_iterations == 0 {
            return Err(Error::Config("loop.K must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config(format!("loop.delta must lie in [0, 1), got {}", self.damping)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("loop.tolerance must be non-negative, got {}", self.tolerance)));
        }
        self.plan.validate()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    /// The noise a run with this configuration trains on.
    pub fn training_noise(&self) -> Result<NoisePair> {
        let noise = sample_noise(&self.grid()?, self.paths, 1, self.seed)?;
        if self.antithetic {
            mirror_pairs(&noise)
        } else {
            Ok(noise)
        }
    }

    /// The initial states a run with this configuration starts from.
    pub fn initial_states(&self, law: &InitialLaw) -> Array1<f64> {
        if self.antithetic {
            law.sample_mirrored(self.paths, self.seed)
        } else {
            law.sample(self.paths, self.seed)
        }
    }
}

/// The three trained networks.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedNetworks {
    /// Decoupling field `Y = U(t, X, S)`.
    pub u: FeedForwardNet,
    /// Recurrent statistic `S(t, W0)`.
    pub s: GruNet,
    /// Recurrent `Z0(t, W0, X)`.
    pub v: GruNet,
}

impl TrainedNetworks {
    /// Fresh networks from the weight stream; `generation` separates
    /// re-initialisations.
    pub fn init(seed: u64, generation: u64) -> Result<Self> {
        let mut rng_u = substream(seed, Stream::Weights, generation << 8);
        let mut rng_s = substream(seed, Stream::Weights, (generation << 8) | 1);
        let mut rng_v = substream(seed, Stream::Weights, (generation << 8) | 2);
        Ok(TrainedNetworks {
            u: FeedForwardNet::new(&U_SIZES, Activation::Tanh, &mut rng_u)?,
            s: GruNet::new(s_shape(), &mut rng_s)?,
            v: GruNet::new(v_shape(), &mut rng_v)?,
        })
    }
}

struct Optimizers {
    u: Adam,
    s: Adam,
    v: Adam,
}

impl Optimizers {
    fn new(plan: &TrainingPlan, nets: &TrainedNetworks) -> Self {
        Optimizers {
            u: Adam::new(plan.adam, &nets.u),
            s: Adam::new(plan.adam, &nets.s),
            v: Adam::new(plan.adam, &nets.v),
        }
    }
}

/// Diagnostics of one completed outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dist_x: f64,
    pub dist_y: f64,
    pub dist_z: f64,
    pub dist_z0: f64,
    pub picard: PicardSummary,
    pub loss_s: Vec<f64>,
    pub loss_y: Vec<f64>,
    pub loss_z0: Vec<f64>,
    pub clamp_events: usize,
    /// Stages in execution order.
    pub stages: Vec<String>,
}

impl IterationRecord {
    pub fn max_distance(&self) -> f64 {
        self.dist_x.max(self.dist_y).max(self.dist_z).max(self.dist_z0)
    }
}

/// Per-iteration records of a run. Wall times are kept apart from the
/// deterministic fields so that serialized reports are reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub records: Vec<IterationRecord>,
    pub stopped_early: bool,
    #[serde(skip)]
    pub wall_seconds: Vec<f64>,
}

/// Stage names, in the order one outer iteration runs them.
pub const STAGES: [&str; 7] = ["picard", "soft_x", "fit_s", "fit_y", "soft_yz", "fit_z0", "soft_z0"];

/// Stateful outer loop; exposes the partial report if a stage fails.
pub struct Solver {
    config: RunConfig,
    model: Box<dyn Model>,
    grid: TimeGrid,
    noise: NoisePair,
    xi: Array1<f64>,
    state: SolverState,
    networks: TrainedNetworks,
    optimizers: Optimizers,
    report: ConvergenceReport,
}

impl Solver {
    /// Samples noise and initial conditions from the run seed and builds the
    /// initial state (model guess where available, zeros otherwise).
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let noise = config.training_noise()?;
        Self::with_noise(config, noise)
    }

    /// As [`Solver::new`] but on caller-supplied noise.
    pub fn with_noise(config: RunConfig, noise: NoisePair) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        if noise.paths() != config.paths || noise.steps() != grid.steps() {
            return Err(Error::dimension(
                "run noise",
                format!("{} paths x {} steps", config.paths, grid.steps()),
                format!("{} paths x {} steps", noise.paths(), noise.steps()),
            ));
        }
        let model = config.model.build(config.horizon)?;
        let xi = config.initial_states(&model.initial_law());
        let mut state = SolverState::initial(&xi, grid.nodes());
        let guess = model.initial_guess(&grid, &xi);
        if let Some(y) = guess.y {
            state.y = PathBatch::from_scalar("Y", y);
        }
        if let Some(s) = guess.s {
            state.s = PathBatch::from_scalar("S", s);
        }
        state.check_consistent()?;
        let networks = TrainedNetworks::init(config.seed, 0)?;
        let optimizers = Optimizers::new(&config.plan, &networks);
        Ok(Solver {
            config,
            model,
            grid,
            noise,
            xi,
            state,
            networks,
            optimizers,
            report: ConvergenceReport::default(),
        })
    }

    /// Replaces the starting state, e.g. with a known solution.
    pub fn seed_state(&mut self, mut state: SolverState) -> Result<()> {
        state.check_consistent()?;
        if state.paths() != self.config.paths || state.nodes() != self.grid.nodes() {
            return Err(Error::dimension(
                "seeded state",
                format!("{} paths x {} nodes", self.config.paths, self.grid.nodes()),
                format!("{} paths x {} nodes", state.paths(), state.nodes()),
            ));
        }
        state.iteration = self.state.iteration;
        self.state = state;
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise(&self) -> &NoisePair {
        &self.noise
    }

    pub fn xi(&self) -> &Array1<f64> {
        &self.xi
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn networks(&self) -> &TrainedNetworks {
        &self.networks
    }

    pub fn report(&self) -> &ConvergenceReport {
        &self.report
    }

    pub fn finished(&self) -> bool {
        self.report.stopped_early || self.report.records.len() >= self.config.outer_iterations
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let start = Instant::now();
        let k = self.state.iteration;
        let cfg = &self.config;
        let (plan, delta, seed) = (&cfg.plan, cfg.damping, cfg.seed);
        let model = self.model.as_ref();
        let grid = &self.grid;
        let prev = &self.state;
        if !cfg.warm_start {
            self.networks = TrainedNetworks::init(seed, k as u64 + 1)?;
            self.optimizers = Optimizers::new(plan, &self.networks);
        }
        let mut stages = Vec::with_capacity(STAGES.len());

        let picard = picard_forward(model, grid, prev, &self.noise, plan.picard_tol, plan.picard_max)?;
        stages.push(STAGES[0]);
        let x = soft_update(&prev.x, &picard.x, delta)?;
        stages.push(STAGES[1]);

        let score = model.score().build()?;
        let sfit = fit_mean_field(
            score.as_ref(),
            grid,
            &x,
            &self.noise,
            plan,
            &mut self.networks.s,
            &mut self.optimizers.s,
            seed,
            k,
        )?;
        stages.push(STAGES[2]);
        let s = sfit.s;

        let yfit = fit_backward_y(
            model,
            grid,
            &x,
            &s,
            prev,
            plan,
            &mut self.networks.u,
            &mut self.optimizers.u,
            seed,
        )?;
        stages.push(STAGES[3]);
        let y = soft_update(&prev.y, &yfit.y, delta)?;
        let z = soft_update(&prev.z, &yfit.z, delta)?;
        stages.push(STAGES[4]);

        let zfit = fit_z0(
            model,
            grid,
            &x,
            &s,
            &y,
            &z,
            &prev.z0,
            &self.noise,
            plan,
            &mut self.networks.v,
            &mut self.optimizers.v,
            seed,
            k,
        )?;
        stages.push(STAGES[5]);
        let z0 = soft_update(&prev.z0, &zfit.z0, delta)?;
        stages.push(STAGES[6]);

        let record = IterationRecord {
            iteration: k + 1,
            dist_x: l2_path_distance(&x, &prev.x)?,
            dist_y: l2_path_distance(&y, &prev.y)?,
            dist_z: l2_path_distance(&z, &prev.z)?,
            dist_z0: l2_path_distance(&z0, &prev.z0)?,
            clamp_events: picard.clamp_events + yfit.outcome.clamp_events + zfit.outcome.clamp_events,
            picard: picard.summary(),
            loss_s: sfit.outcome.losses,
            loss_y: yfit.outcome.losses,
            loss_z0: zfit.outcome.losses,
            stages: stages.into_iter().map(String::from).collect(),
        };
        self.state = SolverState {
            iteration: k + 1,
            x,
            y,
            z,
            z0,
            s,
        };
        if record.max_distance() < self.config.tolerance {
            self.report.stopped_early = true;
        }
        self.report.records.push(record);
        self.report.wall_seconds.push(start.elapsed().as_secs_f64());
        Ok(self.report.records.last().expect("just pushed"))
    }

    /// Runs until `K` iterations or early stop, calling `observer` after each
    /// completed iteration.
    pub fn run_with<F>(&mut self, mut observer: F) -> Result<()>
    where
        F: FnMut(&Solver) -> Result<()>,
    {
        while !self.finished() {
            self.step()?;
            observer(self)?;
        }
        Ok(())
    }

    pub fn into_output(self) -> RunOutput {
        RunOutput {
            config: self.config,
            state: self.state,
            networks: self.networks,
            report: self.report,
            noise: self.noise,
            xi: self.xi,
        }
    }
}

/// Final artefacts of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub state: SolverState,
    pub networks: TrainedNetworks,
    pub report: ConvergenceReport,
    pub noise: NoisePair,
    pub xi: Array1<f64>,
}

/// Runs the outer loop to completion.
pub fn run(config: RunConfig) -> Result<RunOutput> {
    let mut solver = Solver::new(config)?;
    solver.run_with(|_| Ok(()))?;
    Ok(solver.into_output())
}

/// Closed-loop simulation with the trained networks on `noise`:
/// `Y = U(t, X, S)`, `Z = sigma dU/dx`, `Z0 = v(t, W0, X)`, `S = S(t, W0)`.
pub fn sample_after_training(
    model: &dyn Model,
    networks: &TrainedNetworks,
    grid: &TimeGrid,
    noise: &NoisePair,
    xi: &Array1<f64>,
) -> Result<SolverState> {
    let m = xi.len();
    if noise.paths() != m || noise.steps() != grid.steps() {
        return Err(Error::dimension(
            "sampling noise",
            format!("{m} paths x {} steps", grid.steps()),
            format!("{} paths x {} steps", noise.paths(), noise.steps()),
        ));
    }
    if networks.v.shape().extra_dim != 1 || networks.u.input_dim() != 3 {
        return Err(Error::Checkpoint("network shapes do not match the solver layout".into()));
    }
    let nodes = grid.nodes();
    let s = evaluate_statistic(&networks.s, grid, noise)?;
    let zero_extras: Vec<Array2<f64>> = (0..nodes).map(|_| Array2::zeros((m, 1))).collect();
    let v_base = networks.v.run(&common_noise_features(grid, noise), Some(&zero_extras))?;
    let head_x = networks.v.head_extra[[0, 0]];

    let mut x = Array2::zeros((m, nodes));
    let mut y = Array2::zeros((m, nodes));
    let mut z = Array2::zeros((m, nodes));
    let mut z0 = Array2::zeros((m, nodes));
    x.column_mut(0).assign(xi);
    let dt = grid.dt();
    let sv = s.scalar();
    for j in 0..nodes {
        let t = grid.time(j);
        let input = Array2::from_shape_fn((m, 3), |(i, c)| match c {
            0 => t,
            1 => x[[i, j]],
            _ => sv[[i, j]],
        });
        let (val, grad) = networks.u.value_and_input_grad(input.view())?;
        for i in 0..m {
            y[[i, j]] = val[[i, 0]];
            z[[i, j]] = model.sigma(t, x[[i, j]]) * grad[[i, 1]];
            z0[[i, j]] = v_base.output[j][[i, 0]] + head_x * x[[i, j]];
        }
        if j == grid.steps() {
            break;
        }
        for i in 0..m {
            let p = Point {
                t,
                x: x[[i, j]],
                y: floor_y(model, y[[i, j]]).0,
                z: z[[i, j]],
                z0: z0[[i, j]],
                s: sv[[i, j]],
            };
            let next = x[[i, j]]
                + model.drift(&p) * dt
                + model.sigma(t, p.x) * noise.dw()[[i, j, 0]]
                + model.sigma0(t, p.x) * noise.dw0()[[i, j, 0]];
            if !next.is_finite() {
                return Err(Error::Simulation {
                    path: i,
                    step: j + 1,
                    reason: "closed-loop state became non-finite".into(),
                });
            }
            x[[i, j + 1]] = next;
        }
    }
    Ok(SolverState {
        iteration: 0,
        x: PathBatch::from_scalar("X", x),
        y: PathBatch::from_scalar("Y", y),
        z: PathBatch::from_scalar("Z", z),
        z0: PathBatch::from_scalar("Z0", z0),
        s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(v: f64) -> PathBatch {
        PathBatch::from_scalar("A", Array2::from_elem((2, 3), v))
    }

    #[test]
    fn soft_update_examples() {
        let r = soft_update(&batch(4.0), &batch(2.0), 0.5).unwrap();
        assert!(r.values().iter().all(|&v| v == 3.0));
        let r = soft_update(&batch(4.0), &batch(2.0), 0.0).unwrap();
        assert!(r.values().iter().all(|&v| v == 2.0));
        let r = soft_update(&batch(4.0), &batch(2.0), 1.0).unwrap();
        assert!(r.values().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn soft_update_rejects_bad_inputs() {
        let other = PathBatch::from_scalar("B", Array2::zeros((2, 4)));
        assert!(soft_update(&batch(1.0), &other, 0.5).is_err());
        assert!(soft_update(&batch(1.0), &batch(1.0), 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.damping = 1.0;
        assert!(c.validate().is_err());
        c = RunConfig { outer_iterations: 0, ..RunConfig::default() };
        assert!(c.validate().is_err());
        c = RunConfig { steps: 1, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
