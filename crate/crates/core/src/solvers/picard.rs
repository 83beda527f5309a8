use serde::{Deserialize, Serialize};

use super::SolverState;
use crate::error::{Error, Result};
use crate::models::{floor_y, Model, Point};
use crate::stochastics::{euler_maruyama, l2_path_distance, NoisePair, PathBatch, ScalarSde, TimeGrid};

/// Result of the inner forward iteration.
#[derive(Clone, Debug)]
pub struct PicardOutcome {
    pub x: PathBatch,
    /// `e_n` after each inner sweep.
    pub errors: Vec<f64>,
    pub converged: bool,
    pub clamp_events: usize,
}

/// Inner-iteration diagnostics without the paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PicardSummary {
    pub errors: Vec<f64>,
    pub converged: bool,
    pub clamp_events: usize,
}

impl PicardOutcome {
    pub fn summary(&self) -> PicardSummary {
        PicardSummary {
            errors: self.errors.clone(),
            converged: self.converged,
            clamp_events: self.clamp_events,
        }
    }
}

/// Resimulates `X` with `(Y, Z, Z0, S)` frozen at `state`, evaluating the
/// coefficients at the previous inner iterate, until successive iterates are
/// within `tol` or `max_inner` sweeps have run.
///
/// The first sweep starts from `state.x`. Divergence is reported when the
/// error grows on three consecutive sweeps.
pub fn picard_forward(
    model: &dyn Model,
    grid: &TimeGrid,
    state: &SolverState,
    noise: &NoisePair,
    tol: f64,
    max_inner: usize,
) -> Result<PicardOutcome> {
    state.check_consistent()?;
    if state.nodes() != grid.nodes() {
        return Err(Error::dimension("Picard state nodes", grid.nodes(), state.nodes()));
    }
    if !(tol > 0.0) || max_inner == 0 {
        return Err(Error::Usage("Picard tolerance and iteration cap must be positive".into()));
    }
    let x0 = state.x.values().index_axis(ndarray::Axis(1), 0).to_owned();
    let mut prev = state.x.clone();
    let mut errors = Vec::new();
    let clamps = count_clamps(model, state, grid.steps());
    let mut rising = 0;
    for _ in 0..max_inner {
        let next = sweep(model, grid, state, &prev, x0.view(), noise)?;
        let e = l2_path_distance(&next, &prev)?;
        if let Some(&last) = errors.last() {
            rising = if e > last { rising + 1 } else { 0 };
        }
        errors.push(e);
        prev = next;
        if e < tol {
            return Ok(PicardOutcome {
                x: prev,
                errors,
                converged: true,
                clamp_events: clamps,
            });
        }
        if rising >= 3 {
            return Err(Error::Divergence { errors });
        }
    }
    Ok(PicardOutcome {
        x: prev,
        errors,
        converged: false,
        clamp_events: clamps,
    })
}

fn sweep(
    model: &dyn Model,
    grid: &TimeGrid,
    state: &SolverState,
    prev: &PathBatch,
    x0: ndarray::ArrayView2<'_, f64>,
    noise: &NoisePair,
) -> Result<PathBatch> {
    let at = |j: usize, i: usize| Point {
        t: grid.time(j),
        x: prev.get(i, j),
        y: floor_y(model, state.y.get(i, j)).0,
        z: state.z.get(i, j),
        z0: state.z0.get(i, j),
        s: state.s.get(i, j),
    };
    let sde = ScalarSde {
        drift: |j: usize, i: usize, _x: f64| model.drift(&at(j, i)),
        diffusion: |j: usize, i: usize, _x: f64| model.sigma(grid.time(j), prev.get(i, j)),
        common_diffusion: |j: usize, i: usize, _x: f64| model.sigma0(grid.time(j), prev.get(i, j)),
    };
    euler_maruyama(grid, x0, &sde, noise, "X")
}

fn count_clamps(model: &dyn Model, state: &SolverState, steps: usize) -> usize {
    if model.y_floor().is_none() {
        return 0;
    }
    let y = state.y.scalar();
    let mut n = 0;
    for i in 0..state.paths() {
        for j in 0..steps {
            n += floor_y(model, y[[i, j]]).1 as usize;
        }
    }
    n
}
