use super::{
    chunked_gradient, common_noise_features, descend, minibatch_index, FitOutcome, Minibatches,
    TrainingPlan,
};
use crate::autodiff::{stack_steps, Adam, GruNet};
use crate::error::{Error, Result};
use crate::scores::ScoreFunction;
use crate::stochastics::{NoisePair, PathBatch, TimeGrid};

const STAGE: &str = "mean-field fit";

/// Output of [`fit_mean_field`].
#[derive(Clone, Debug)]
pub struct MeanFieldFit {
    pub s: PathBatch,
    pub outcome: FitOutcome,
}

/// Trains the recurrent statistic `S(t, (W0_u)_{u <= t})` by minimising the
/// mean score against `X` over paths and nodes, then evaluates it on every
/// path. `S` on a path depends on that path's common noise only.
#[allow(clippy::too_many_arguments)]
pub fn fit_mean_field(
    score: &dyn ScoreFunction,
    grid: &TimeGrid,
    x: &PathBatch,
    noise: &NoisePair,
    plan: &TrainingPlan,
    net: &mut GruNet,
    adam: &mut Adam,
    seed: u64,
    iteration: usize,
) -> Result<MeanFieldFit> {
    plan.validate()?;
    let nodes = grid.nodes();
    if x.nodes() != nodes || x.paths() != noise.paths() {
        return Err(Error::dimension(
            "mean-field fit inputs",
            format!("{} paths x {nodes} nodes", noise.paths()),
            format!("{} paths x {} nodes", x.paths(), x.nodes()),
        ));
    }
    let features = common_noise_features(grid, noise);
    let xv = x.scalar().to_owned();
    let norm = (plan.batch * nodes) as f64;

    let mut batches = Minibatches::new(seed, minibatch_index(iteration, 0), x.paths(), plan.batch);
    let mut losses = Vec::with_capacity(plan.epochs_s);
    for _ in 0..plan.epochs_s {
        let idx = batches.next_batch();
        let (loss, grads) = chunked_gradient(&idx, plan.sequence_chunk, |paths| {
            net.sequence_gradient(&features, None, paths, |r, j, s, d| {
                let real = xv[[r, j]];
                d[0] = score.grad_statistic(s[0], real) / norm;
                score.score(s[0], real) / norm
            })
        })?;
        descend(net, adam, STAGE, loss, &grads)?;
        losses.push(loss);
    }

    let s = evaluate_statistic(net, grid, noise)?;
    if !s.all_finite() {
        return Err(Error::Training {
            stage: STAGE.into(),
            reason: "network produced non-finite S".into(),
        });
    }
    Ok(MeanFieldFit {
        s,
        outcome: FitOutcome {
            losses,
            clamp_events: 0,
        },
    })
}

/// `S` on every path of `noise`.
pub fn evaluate_statistic(net: &GruNet, grid: &TimeGrid, noise: &NoisePair) -> Result<PathBatch> {
    let trace = net.run(&common_noise_features(grid, noise), None)?;
    Ok(PathBatch::from_scalar("S", stack_steps(&trace.output)))
}
