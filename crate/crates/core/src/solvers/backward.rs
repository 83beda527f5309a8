use ndarray::{Array1, Array2};

use super::{
    chunked_gradient, decoupling_rows, descend, minibatch_index, FitOutcome, Minibatches, SolverState, TrainingPlan,
};
use crate::autodiff::{Adam, FeedForwardNet};
use crate::error::{Error, Result};
use crate::models::{floor_y, Model, Point};
use crate::stochastics::{PathBatch, TimeGrid};

const STAGE: &str = "backward fit";

/// Output of [`fit_backward_y`].
#[derive(Clone, Debug)]
pub struct BackwardFit {
    pub y: PathBatch,
    pub z: PathBatch,
    pub outcome: FitOutcome,
}

/// Regression targets `G(X_T, S_T) + sum_{u = t_j}^{t_{N-1}} f_u dt`, with the
/// driver evaluated at `(X, S)` from the current iteration and `(Y, Z, Z0)`
/// from `prev`. Returns the `paths x nodes` targets and the clamp count.
pub fn backward_targets(
    model: &dyn Model,
    grid: &TimeGrid,
    x: &PathBatch,
    s: &PathBatch,
    prev: &SolverState,
) -> Result<(Array2<f64>, usize)> {
    x.check_same_shape(s, "backward targets")?;
    x.check_same_shape(&prev.y, "backward targets")?;
    let (m, nodes) = (x.paths(), x.nodes());
    if nodes != grid.nodes() {
        return Err(Error::dimension("backward targets nodes", grid.nodes(), nodes));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let mut target = Array2::zeros((m, nodes));
    let mut clamps = 0;
    for i in 0..m {
        let mut acc = model.terminal(x.get(i, n), s.get(i, n));
        target[[i, n]] = acc;
        for j in (0..n).rev() {
            let (y, clamped) = floor_y(model, prev.y.get(i, j));
            clamps += clamped as usize;
            let p = Point {
                t: grid.time(j),
                x: x.get(i, j),
                y,
                z: prev.z.get(i, j),
                z0: prev.z0.get(i, j),
                s: s.get(i, j),
            };
            acc += model.driver(&p) * dt;
            target[[i, j]] = acc;
        }
        if let Some(j) = target.row(i).iter().position(|v| !v.is_finite()) {
            return Err(Error::Training {
                stage: STAGE.into(),
                reason: format!("non-finite regression target at path {i}, node {j}"),
            });
        }
    }
    Ok((target, clamps))
}

/// `Y = U(t, X, S)` and `Z = sigma(t, X) dU/dx` on every path and node.
pub fn compute_z(
    net: &FeedForwardNet,
    model: &dyn Model,
    grid: &TimeGrid,
    x: &PathBatch,
    s: &PathBatch,
) -> Result<(PathBatch, PathBatch)> {
    x.check_same_shape(s, "compute_z")?;
    let (m, nodes) = (x.paths(), x.nodes());
    let rows = decoupling_rows(grid, x, s);
    let (value, grad) = net.value_and_input_grad(rows.view())?;
    let y = Array2::from_shape_fn((m, nodes), |(i, j)| value[[i * nodes + j, 0]]);
    let z = Array2::from_shape_fn((m, nodes), |(i, j)| {
        model.sigma(grid.time(j), x.get(i, j)) * grad[[i * nodes + j, 1]]
    });
    Ok((PathBatch::from_scalar("Y", y), PathBatch::from_scalar("Z", z)))
}

/// Trains `U` on the `p_t`-weighted squared error against the fixed targets,
/// then evaluates `Y` and `Z` on all paths.
#[allow(clippy::too_many_arguments)]
pub fn fit_backward_y(
    model: &dyn Model,
    grid: &TimeGrid,
    x: &PathBatch,
    s: &PathBatch,
    prev: &SolverState,
    plan: &TrainingPlan,
    net: &mut FeedForwardNet,
    adam: &mut Adam,
    seed: u64,
) -> Result<BackwardFit> {
    plan.validate()?;
    let (target, clamp_events) = backward_targets(model, grid, x, s, prev)?;
    let nodes = grid.nodes();
    let weights = plan.node_weights(grid);
    let norm = plan.batch as f64 * weights.iter().sum::<f64>();
    let inputs = decoupling_rows(grid, x, s);
    let flat_target = Array1::from_iter(target.iter().copied());
    let chunk_paths = (plan.chunk_rows / nodes).max(1);

    let mut batches = Minibatches::new(seed, minibatch_index(prev.iteration, 1), x.paths(), plan.batch);
    let mut losses = Vec::with_capacity(plan.epochs_y);
    for _ in 0..plan.epochs_y {
        let idx = batches.next_batch();
        let (loss, grads) = chunked_gradient(&idx, chunk_paths, |paths| {
            let rows: Vec<usize> = paths
                .iter()
                .flat_map(|&i| (0..nodes).map(move |j| i * nodes + j))
                .collect();
            let mut input = Array2::zeros((rows.len(), inputs.ncols()));
            for (mut dst, &r) in input.rows_mut().into_iter().zip(&rows) {
                dst.assign(&inputs.row(r));
            }
            net.batch_gradient(input.view(), |r, u, d| {
                let w = weights[rows[r] % nodes] / norm;
                let e = u[0] - flat_target[rows[r]];
                d[0] = 2.0 * w * e;
                w * e * e
            })
        })?;
        descend(net, adam, STAGE, loss, &grads)?;
        losses.push(loss);
    }

    let (y, z) = compute_z(net, model, grid, x, s)?;
    if !(y.all_finite() && z.all_finite()) {
        return Err(Error::Training {
            stage: STAGE.into(),
            reason: "network produced non-finite Y or Z".into(),
        });
    }
    Ok(BackwardFit {
        y,
        z,
        outcome: FitOutcome { losses, clamp_events },
    })
}
