use ndarray::{Array2, Axis};

use super::{
    chunked_gradient, common_noise_features, descend, minibatch_index, FitOutcome, Minibatches,
    TrainingPlan,
};
use crate::autodiff::{stack_steps, Adam, GruNet};
use crate::error::{Error, Result};
use crate::models::{floor_y, Model, Point};
use crate::stochastics::{NoisePair, PathBatch, TimeGrid};

const STAGE: &str = "Z0 fit";

/// Output of [`fit_z0`].
#[derive(Clone, Debug)]
pub struct Z0Fit {
    pub z0: PathBatch,
    pub outcome: FitOutcome,
}

/// `(dY_j / dt + f_j) dW0_j` for `j < N`, with the driver at the current
/// `(X, Y, Z, S)` and the previous `Z0`. Returns `paths x N` targets and the
/// clamp count.
#[allow(clippy::too_many_arguments)]
pub fn z0_targets(
    model: &dyn Model,
    grid: &TimeGrid,
    x: &PathBatch,
    s: &PathBatch,
    y: &PathBatch,
    z: &PathBatch,
    z0_prev: &PathBatch,
    noise: &NoisePair,
) -> Result<(Array2<f64>, usize)> {
    for b in [s, y, z, z0_prev] {
        x.check_same_shape(b, "Z0 targets")?;
    }
    if x.nodes() != grid.nodes() || noise.paths() != x.paths() {
        return Err(Error::dimension("Z0 targets", grid.nodes(), x.nodes()));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let dw0 = noise.dw0();
    let mut clamps = 0;
    let mut target = Array2::zeros((x.paths(), n));
    for i in 0..x.paths() {
        for j in 0..n {
            let (yf, clamped) = floor_y(model, y.get(i, j));
            clamps += clamped as usize;
            let p = Point {
                t: grid.time(j),
                x: x.get(i, j),
                y: yf,
                z: z.get(i, j),
                z0: z0_prev.get(i, j),
                s: s.get(i, j),
            };
            let dy = y.get(i, j + 1) - y.get(i, j);
            let v = (dy / dt + model.driver(&p)) * dw0[[i, j, 0]];
            if !v.is_finite() {
                return Err(Error::Training {
                    stage: STAGE.into(),
                    reason: format!("non-finite regression target at path {i}, step {j}"),
                });
            }
            target[[i, j]] = v;
        }
    }
    Ok((target, clamps))
}

/// Trains `v(t, (W0_u)_{u <= t}, X_t)` by least squares on the `Z0` targets
/// over the first `N` nodes; the value at `T` is the network's extrapolation.
#[allow(clippy::too_many_arguments)]
pub fn fit_z0(
    model: &dyn Model,
    grid: &TimeGrid,
    x: &PathBatch,
    s: &PathBatch,
    y: &PathBatch,
    z: &PathBatch,
    z0_prev: &PathBatch,
    noise: &NoisePair,
    plan: &TrainingPlan,
    net: &mut GruNet,
    adam: &mut Adam,
    seed: u64,
    iteration: usize,
) -> Result<Z0Fit> {
    plan.validate()?;
    let (target, clamp_events) = z0_targets(model, grid, x, s, y, z, z0_prev, noise)?;
    let n = grid.steps();
    let mut features = common_noise_features(grid, noise);
    features.truncate(n);
    let extras = state_extras(x);
    let norm = (plan.batch * n) as f64;

    let mut batches = Minibatches::new(seed, minibatch_index(iteration, 2), x.paths(), plan.batch);
    let mut losses = Vec::with_capacity(plan.epochs_z0);
    for _ in 0..plan.epochs_z0 {
        let idx = batches.next_batch();
        let (loss, grads) = chunked_gradient(&idx, plan.sequence_chunk, |paths| {
            net.sequence_gradient(&features, Some(&extras[..n]), paths, |r, j, v, d| {
                let e = v[0] - target[[r, j]];
                d[0] = 2.0 * e / norm;
                e * e / norm
            })
        })?;
        descend(net, adam, STAGE, loss, &grads)?;
        losses.push(loss);
    }

    let z0 = evaluate_z0(net, grid, noise, x)?;
    if !z0.all_finite() {
        return Err(Error::Training {
            stage: STAGE.into(),
            reason: "network produced non-finite Z0".into(),
        });
    }
    Ok(Z0Fit {
        z0,
        outcome: FitOutcome { losses, clamp_events },
    })
}

/// `Z0` on every path and node, including the extrapolated terminal value.
pub fn evaluate_z0(net: &GruNet, grid: &TimeGrid, noise: &NoisePair, x: &PathBatch) -> Result<PathBatch> {
    let trace = net.run(&common_noise_features(grid, noise), Some(&state_extras(x)))?;
    Ok(PathBatch::from_scalar("Z0", stack_steps(&trace.output)))
}

fn state_extras(x: &PathBatch) -> Vec<Array2<f64>> {
    let xv = x.scalar();
    (0..x.nodes())
        .map(|j| xv.column(j).to_owned().insert_axis(Axis(1)))
        .collect()
}
