//! The four inner procedures of one outer iteration: forward Picard
//! resimulation, the mean-field fit, the backward fit with `Z` extraction and
//! the `Z0` fit.

mod backward;
mod common;
mod mean_field;
mod picard;

pub use backward::{backward_targets, compute_z, fit_backward_y, BackwardFit};
pub use common::{evaluate_z0, fit_z0, z0_targets, Z0Fit};
pub use mean_field::{evaluate_statistic, fit_mean_field, MeanFieldFit};
pub use picard::{picard_forward, PicardOutcome, PicardSummary};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Parameterized};
use crate::error::{Error, Result};
use crate::stochastics::{substream, NoisePair, PathBatch, Stream, TimeGrid};

/// `(X, Y, Z, Z0, S)` on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub iteration: usize,
    pub x: PathBatch,
    pub y: PathBatch,
    pub z: PathBatch,
    pub z0: PathBatch,
    pub s: PathBatch,
}

impl SolverState {
    /// `X` constant at `xi`, everything else zero.
    pub fn initial(xi: &ndarray::Array1<f64>, nodes: usize) -> Self {
        let m = xi.len();
        let x = Array2::from_shape_fn((m, nodes), |(i, _)| xi[i]);
        let zeros = || Array2::zeros((m, nodes));
        SolverState {
            iteration: 0,
            x: PathBatch::from_scalar("X", x),
            y: PathBatch::from_scalar("Y", zeros()),
            z: PathBatch::from_scalar("Z", zeros()),
            z0: PathBatch::from_scalar("Z0", zeros()),
            s: PathBatch::from_scalar("S", zeros()),
        }
    }

    pub fn paths(&self) -> usize {
        self.x.paths()
    }

    pub fn nodes(&self) -> usize {
        self.x.nodes()
    }

    pub fn check_consistent(&self) -> Result<()> {
        for b in [&self.y, &self.z, &self.z0, &self.s] {
            self.x.check_same_shape(b, "solver state")?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        [&self.x, &self.y, &self.z, &self.z0, &self.s]
            .iter()
            .all(|b| b.all_finite())
    }

    pub fn select_paths(&self, idx: &[usize]) -> SolverState {
        SolverState {
            iteration: self.iteration,
            x: self.x.select_paths(idx),
            y: self.y.select_paths(idx),
            z: self.z.select_paths(idx),
            z0: self.z0.select_paths(idx),
            s: self.s.select_paths(idx),
        }
    }
}

/// Epoch counts, batch size and loss weights for the inner fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub epochs_y: usize,
    pub epochs_z0: usize,
    pub epochs_s: usize,
    /// Paths per minibatch, drawn with replacement.
    pub batch: usize,
    /// Weight of the terminal node in the `Y` loss; `None` means `N / 2`.
    pub terminal_weight: Option<f64>,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub adam: AdamConfig,
    /// Rows per gradient chunk in the `U` fit. Chunks are fixed by the batch
    /// layout, not by the worker count, so results do not depend on
    /// parallelism.
    pub chunk_rows: usize,
    /// Paths per gradient chunk in the recurrent fits.
    pub sequence_chunk: usize,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        TrainingPlan {
            epochs_y: 1000,
            epochs_z0: 500,
            epochs_s: 1000,
            batch: 2048,
            terminal_weight: None,
            picard_tol: 1e-12,
            picard_max: 200,
            adam: AdamConfig::default(),
            chunk_rows: 4096,
            sequence_chunk: 1024,
        }
    }
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_y == 0 || self.epochs_z0 == 0 || self.epochs_s == 0 {
            return Err(Error::Config("training epoch counts must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("training.I must be positive".into()));
        }
        if let Some(w) = self.terminal_weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("training.p_T_weight must be positive, got {w}")));
            }
        }
        if !(self.picard_tol > 0.0) || self.picard_max == 0 {
            return Err(Error::Config("Picard tolerance and iteration cap must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.adam.decay > 0.0 && self.adam.decay <= 1.0) || self.adam.decay_every == 0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if self.chunk_rows == 0 || self.sequence_chunk == 0 {
            return Err(Error::Config("gradient chunk sizes must be positive".into()));
        }
        Ok(())
    }

    /// `p_t`: 1 on interior nodes, the terminal weight at `T`.
    pub fn node_weights(&self, grid: &TimeGrid) -> Vec<f64> {
        let mut w = vec![1.0; grid.nodes()];
        w[grid.steps()] = self
            .terminal_weight
            .unwrap_or(grid.steps() as f64 / 2.0);
        w
    }
}

/// Loss history and `|Y|` floor activations of one fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub losses: Vec<f64>,
    pub clamp_events: usize,
}

/// Input row of the decoupling field `U(t, x, s)`.
pub fn decoupling_input(t: f64, x: f64, s: f64) -> [f64; 3] {
    [t, x, s]
}

/// All `(path, node)` inputs of `U`, row `i * nodes + j`.
pub(crate) fn decoupling_rows(grid: &TimeGrid, x: &PathBatch, s: &PathBatch) -> Array2<f64> {
    let (m, nodes) = (x.paths(), x.nodes());
    let mut rows = Array2::zeros((m * nodes, 3));
    for i in 0..m {
        for j in 0..nodes {
            let r = decoupling_input(grid.time(j), x.get(i, j), s.get(i, j));
            let mut row = rows.row_mut(i * nodes + j);
            row[0] = r[0];
            row[1] = r[1];
            row[2] = r[2];
        }
    }
    rows
}

/// Per-step GRU features `(t_j, dW0_{j-1} / sqrt(dt))`, zero increment at
/// `j = 0`. One `paths x 2` matrix per node.
pub fn common_noise_features(grid: &TimeGrid, noise: &NoisePair) -> Vec<Array2<f64>> {
    let m = noise.paths();
    let scale = 1.0 / grid.dt().sqrt();
    let dw0 = noise.dw0();
    (0..grid.nodes())
        .map(|j| {
            Array2::from_shape_fn((m, 2), |(i, c)| match (c, j) {
                (0, _) => grid.time(j),
                (_, 0) => 0.0,
                _ => dw0[[i, j - 1, 0]] * scale,
            })
        })
        .collect()
}

/// Minibatch generator for one fit: `(seed, stream index)` pins the sequence.
pub(crate) struct Minibatches {
    rng: ChaCha8Rng,
    paths: usize,
    batch: usize,
}

impl Minibatches {
    pub(crate) fn new(seed: u64, index: u64, paths: usize, batch: usize) -> Self {
        Minibatches {
            rng: substream(seed, Stream::Minibatch, index),
            paths,
            batch,
        }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch).map(|_| self.rng.random_range(0..self.paths)).collect()
    }
}

/// Stream index for the minibatches of `stage` at outer iteration `k`.
pub(crate) fn minibatch_index(iteration: usize, stage: u64) -> u64 {
    ((iteration as u64) << 8) | stage
}

/// Evaluates `f` on fixed-size chunks of `rows` in parallel and sums losses
/// and gradients in chunk order.
pub(crate) fn chunked_gradient<F>(rows: &[usize], chunk: usize, f: F) -> Result<(f64, Vec<Array2<f64>>)>
where
    F: Fn(&[usize]) -> Result<(f64, Vec<Array2<f64>>)> + Sync,
{
    let parts: Vec<Result<(f64, Vec<Array2<f64>>)>> = rows.par_chunks(chunk.max(1)).map(&f).collect();
    let mut total: Option<(f64, Vec<Array2<f64>>)> = None;
    for part in parts {
        let (loss, grads) = part?;
        match total.as_mut() {
            None => total = Some((loss, grads)),
            Some((l, g)) => {
                *l += loss;
                for (acc, gi) in g.iter_mut().zip(&grads) {
                    *acc += gi;
                }
            }
        }
    }
    total.ok_or_else(|| Error::Usage("empty minibatch".into()))
}

/// One optimizer step from a minibatch loss, with a finiteness guard.
pub(crate) fn descend<P: Parameterized>(
    net: &mut P,
    adam: &mut Adam,
    stage: &str,
    loss: f64,
    grads: &[Array2<f64>],
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            stage: stage.into(),
            reason: format!("non-finite loss {loss} at optimizer step {}", adam.steps_taken()),
        });
    }
    adam.update(net, grads).map_err(|e| match e {
        Error::Training { reason, .. } => Error::Training {
            stage: stage.into(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::sample_noise;

    #[test]
    fn node_weights_default_to_half_n_at_terminal() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let w = TrainingPlan::default().node_weights(&grid);
        assert_eq!(w.len(), 51);
        assert_eq!(w[50], 25.0);
        assert!(w[..50].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn features_start_with_zero_increment() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = sample_noise(&grid, 3, 1, 9).unwrap();
        let f = common_noise_features(&grid, &noise);
        assert_eq!(f.len(), 5);
        for i in 0..3 {
            assert_eq!(f[0][[i, 1]], 0.0);
            assert_eq!(f[4][[i, 0]], 1.0);
            let expect = noise.dw0()[[i, 2, 0]] / grid.dt().sqrt();
            assert_eq!(f[3][[i, 1]], expect);
        }
    }

    #[test]
    fn chunked_gradient_is_chunk_order_sum() {
        let rows: Vec<usize> = (0..10).collect();
        let (loss, g) = chunked_gradient(&rows, 3, |c| {
            let s: f64 = c.iter().map(|&r| r as f64).sum();
            Ok((s, vec![Array2::from_elem((1, 1), 2.0 * s)]))
        })
        .unwrap();
        assert_eq!(loss, 45.0);
        assert_eq!(g[0][[0, 0]], 90.0);
    }

    #[test]
    fn minibatches_are_reproducible() {
        let a = Minibatches::new(3, 7, 100, 20).next_batch();
        let b = Minibatches::new(3, 7, 100, 20).next_batch();
        let c = Minibatches::new(3, 8, 100, 20).next_batch();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&i| i < 100));
    }
}
