//! Time grids, Brownian increments, path storage and Euler-Maruyama.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Independent random-number streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Noise = 1,
    InitialLaw = 2,
    Minibatch = 3,
    Weights = 4,
    Oracle = 5,
}

/// Counter-style substream: the same `(seed, stream, index)` always yields the
/// same generator, independent of how work is scheduled.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

/// Uniform grid `t_j = j T / N`, `j = 0..=N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("grid.T must be positive, got {horizon}")));
        }
        if steps < 1 {
            return Err(Error::Config("grid.N must be at least 1".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes `N + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|j| self.time(j)).collect()
    }
}

/// `M` paths of a `dim`-dimensional process on a grid, indexed
/// `(path, node, coordinate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    name: String,
    values: Array3<f64>,
}

impl PathBatch {
    pub fn zeros(name: impl Into<String>, paths: usize, nodes: usize, dim: usize) -> Self {
        PathBatch {
            name: name.into(),
            values: Array3::zeros((paths, nodes, dim)),
        }
    }

    pub fn from_array(name: impl Into<String>, values: Array3<f64>) -> Self {
        PathBatch {
            name: name.into(),
            values,
        }
    }

    /// Scalar process from a `paths x nodes` matrix.
    pub fn from_scalar(name: impl Into<String>, values: Array2<f64>) -> Self {
        PathBatch {
            name: name.into(),
            values: values.insert_axis(Axis(2)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn paths(&self) -> usize {
        self.values.dim().0
    }

    pub fn nodes(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    /// First coordinate as a `paths x nodes` view.
    pub fn scalar(&self) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(2), 0)
    }

    pub fn get(&self, path: usize, node: usize) -> f64 {
        self.values[[path, node, 0]]
    }

    /// First coordinate of one path across all nodes.
    pub fn path(&self, path: usize) -> ArrayView1<'_, f64> {
        self.values.slice(s![path, .., 0])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Keeps only the listed paths, in order.
    pub fn select_paths(&self, idx: &[usize]) -> PathBatch {
        PathBatch {
            name: self.name.clone(),
            values: self.values.select(Axis(0), idx),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &PathBatch, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                context.to_string(),
                format!("{:?} ({})", self.shape(), self.name),
                format!("{:?} ({})", other.shape(), other.name),
            ));
        }
        Ok(())
    }
}

/// Idiosyncratic (`W`) and common (`W0`) Brownian paths sharing a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    pub w: PathBatch,
    pub w0: PathBatch,
    pub seed: u64,
    dw: Array3<f64>,
    dw0: Array3<f64>,
}

impl NoisePair {
    /// Builds a pair from explicit increments (`paths x steps x d`).
    pub fn from_increments(dw: Array3<f64>, dw0: Array3<f64>, seed: u64) -> Result<Self> {
        if dw.dim() != dw0.dim() {
            return Err(Error::dimension(
                "noise increments",
                format!("{:?}", dw.dim()),
                format!("{:?}", dw0.dim()),
            ));
        }
        let w = PathBatch::from_array("W", cumulate(&dw));
        let w0 = PathBatch::from_array("W0", cumulate(&dw0));
        Ok(NoisePair { w, w0, seed, dw, dw0 })
    }

    pub fn paths(&self) -> usize {
        self.w.paths()
    }

    pub fn steps(&self) -> usize {
        self.dw.dim().1
    }

    pub fn dim(&self) -> usize {
        self.dw.dim().2
    }

    /// `W_{t_{j+1}} - W_{t_j}`, shape `paths x steps x d`.
    pub fn dw(&self) -> &Array3<f64> {
        &self.dw
    }

    pub fn dw0(&self) -> &Array3<f64> {
        &self.dw0
    }

    pub fn select_paths(&self, idx: &[usize]) -> NoisePair {
        NoisePair {
            w: self.w.select_paths(idx),
            w0: self.w0.select_paths(idx),
            seed: self.seed,
            dw: self.dw.select(Axis(0), idx),
            dw0: self.dw0.select(Axis(0), idx),
        }
    }
}

fn cumulate(incr: &Array3<f64>) -> Array3<f64> {
    let (m, n, d) = incr.dim();
    let mut out = Array3::zeros((m, n + 1, d));
    for i in 0..m {
        for k in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += incr[[i, j, k]];
                out[[i, j + 1, k]] = acc;
            }
        }
    }
    out
}

/// Draws `M` independent pairs of `d`-dimensional Brownian paths. Each path
/// has its own substream, so output does not depend on the worker count.
pub fn sample_noise(grid: &TimeGrid, paths: usize, d: usize, seed: u64) -> Result<NoisePair> {
    if paths == 0 || d == 0 {
        return Err(Error::Config("need at least one path and one noise dimension".into()));
    }
    let n = grid.steps();
    let sd = grid.dt().sqrt();
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Stream::Noise, i as u64);
            let mut draw = || -> Vec<f64> {
                (0..n * d)
                    .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
            };
            let a = draw();
            let b = draw();
            (a, b)
        })
        .collect();
    let mut dw = Array3::zeros((paths, n, d));
    let mut dw0 = Array3::zeros((paths, n, d));
    for (i, (a, b)) in per_path.into_iter().enumerate() {
        dw.slice_mut(s![i, .., ..])
            .assign(&ArrayView2::from_shape((n, d), &a).expect("sized above"));
        dw0.slice_mut(s![i, .., ..])
            .assign(&ArrayView2::from_shape((n, d), &b).expect("sized above"));
    }
    NoisePair::from_increments(dw, dw0, seed)
}

/// Antithetic pairing: every odd path copies the common increments of the
/// path before it and negates its idiosyncratic increments. A trailing
/// unpaired path is left as drawn.
pub fn mirror_pairs(noise: &NoisePair) -> Result<NoisePair> {
    let mut dw = noise.dw.clone();
    let mut dw0 = noise.dw0.clone();
    for i in (1..noise.paths()).step_by(2) {
        let prev = dw.slice(s![i - 1, .., ..]).mapv(|v| -v);
        dw.slice_mut(s![i, .., ..]).assign(&prev);
        let common = dw0.slice(s![i - 1, .., ..]).to_owned();
        dw0.slice_mut(s![i, .., ..]).assign(&common);
    }
    NoisePair::from_increments(dw, dw0, noise.seed)
}

/// Coefficients of `dX = a dt + b dW + b0 dW0`, evaluated per path and step.
///
/// `diffusion` and `common_diffusion` write a `state_dim x d` matrix in
/// row-major order.
pub trait SdeCoefficients: Sync {
    fn state_dim(&self) -> usize;
    fn drift(&self, step: usize, path: usize, x: &[f64], out: &mut [f64]);
    fn diffusion(&self, step: usize, path: usize, x: &[f64], out: &mut [f64]);
    fn common_diffusion(&self, step: usize, path: usize, x: &[f64], out: &mut [f64]);
}

/// Scalar SDE from closures `(step, path, x) -> value`.
pub struct ScalarSde<A, B, C> {
    pub drift: A,
    pub diffusion: B,
    pub common_diffusion: C,
}

impl<A, B, C> SdeCoefficients for ScalarSde<A, B, C>
where
    A: Fn(usize, usize, f64) -> f64 + Sync,
    B: Fn(usize, usize, f64) -> f64 + Sync,
    C: Fn(usize, usize, f64) -> f64 + Sync,
{
    fn state_dim(&self) -> usize {
        1
    }

    fn drift(&self, step: usize, path: usize, x: &[f64], out: &mut [f64]) {
        out[0] = (self.drift)(step, path, x[0]);
    }

    fn diffusion(&self, step: usize, path: usize, x: &[f64], out: &mut [f64]) {
        out[0] = (self.diffusion)(step, path, x[0]);
    }

    fn common_diffusion(&self, step: usize, path: usize, x: &[f64], out: &mut [f64]) {
        out[0] = (self.common_diffusion)(step, path, x[0]);
    }
}

/// `X_{j+1} = X_j + a dt + b dW_j + b0 dW0_j`, path by path.
pub fn euler_maruyama<C: SdeCoefficients>(
    grid: &TimeGrid,
    x0: ArrayView2<'_, f64>,
    coeffs: &C,
    noise: &NoisePair,
    name: &str,
) -> Result<PathBatch> {
    let dim = coeffs.state_dim();
    let (m, x0_dim) = x0.dim();
    if x0_dim != dim {
        return Err(Error::dimension("initial state", dim, x0_dim));
    }
    if noise.paths() != m || noise.steps() != grid.steps() {
        return Err(Error::dimension(
            "noise",
            format!("{m} paths x {} steps", grid.steps()),
            format!("{} paths x {} steps", noise.paths(), noise.steps()),
        ));
    }
    let n = grid.steps();
    let d = noise.dim();
    let dt = grid.dt();
    let rows: Vec<Result<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![0.0; (n + 1) * dim];
            for (slot, &v) in out[..dim].iter_mut().zip(x0.row(i)) {
                *slot = v;
            }
            if let Some(k) = out[..dim].iter().position(|v| !v.is_finite()) {
                return Err(Error::Simulation {
                    path: i,
                    step: 0,
                    reason: format!("non-finite initial state in coordinate {k}"),
                });
            }
            let mut a = vec![0.0; dim];
            let mut b = vec![0.0; dim * d];
            let mut b0 = vec![0.0; dim * d];
            for j in 0..n {
                let (head, tail) = out.split_at_mut((j + 1) * dim);
                let x = &head[j * dim..];
                coeffs.drift(j, i, x, &mut a);
                coeffs.diffusion(j, i, x, &mut b);
                coeffs.common_diffusion(j, i, x, &mut b0);
                let next = &mut tail[..dim];
                for r in 0..dim {
                    let mut v = x[r] + a[r] * dt;
                    for c in 0..d {
                        v += b[r * d + c] * noise.dw[[i, j, c]] + b0[r * d + c] * noise.dw0[[i, j, c]];
                    }
                    if !v.is_finite() {
                        return Err(Error::Simulation {
                            path: i,
                            step: j + 1,
                            reason: format!("state became non-finite in coordinate {r}"),
                        });
                    }
                    next[r] = v;
                }
            }
            Ok(out)
        })
        .collect();
    let mut values = Array3::zeros((m, n + 1, dim));
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        values
            .slice_mut(s![i, .., ..])
            .assign(&ArrayView2::from_shape((n + 1, dim), &row).expect("sized above"));
    }
    Ok(PathBatch::from_array(name, values))
}

/// `(1 / MN) sum_{j=1..N} sum_i |A_ij - B_ij|^2`.
pub fn l2_path_distance(a: &PathBatch, b: &PathBatch) -> Result<f64> {
    a.check_same_shape(b, "l2_path_distance")?;
    let (m, nodes, _) = a.shape();
    if nodes < 2 {
        return Err(Error::Usage("path distance needs at least two grid nodes".into()));
    }
    let diff = &a.values.slice(s![.., 1.., ..]) - &b.values.slice(s![.., 1.., ..]);
    let sum: f64 = diff.iter().map(|v| v * v).sum();
    Ok(sum / (m * (nodes - 1)) as f64)
}
