//! Error metrics against a reference solution, a brute-force nested Monte
//! Carlo oracle for the conditional statistic, and discrete BSDE residuals.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{floor_y, Model, Point, SystemicRiskAnalytic};
use crate::orchestrator::{sample_after_training, TrainedNetworks};
use crate::scores::ScoreSpec;
use crate::solvers::SolverState;
use crate::stochastics::{substream, NoisePair, PathBatch, Stream, TimeGrid};

/// Bias, RMSE and R² of an approximation against a reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bias: f64,
    pub rmse: f64,
    /// `1 - SSE / SST`; `None` when the reference has no variance.
    pub r2: Option<f64>,
}

/// Error quantiles over paths at one node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBand {
    pub t: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessReport {
    pub name: String,
    /// Pooled over paths and nodes.
    pub global: Metrics,
    pub per_node: Vec<Metrics>,
    pub bands: Vec<ErrorBand>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub processes: Vec<ProcessReport>,
}

impl ErrorReport {
    pub fn process(&self, name: &str) -> Option<&ProcessReport> {
        self.processes.iter().find(|p| p.name == name)
    }
}

/// Sum that does not depend on the order of its terms.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct Sums {
    n: f64,
    err: f64,
    sq_err: f64,
    reference: f64,
    sq_reference: f64,
    max_abs: f64,
}

impl Sums {
    fn metrics(&self) -> Metrics {
        let mean = self.reference / self.n;
        // SST by the shifted formula; clamp round-off below zero.
        let sst = (self.sq_reference - self.n * mean * mean).max(0.0);
        let scale = 1e-12 * (1.0 + self.max_abs);
        let r2 = (sst / self.n > scale * scale).then(|| 1.0 - self.sq_err / sst);
        Metrics {
            bias: self.err / self.n,
            rmse: (self.sq_err / self.n).sqrt(),
            r2,
        }
    }
}

fn column_sums(approx: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>, j: usize) -> Sums {
    let a = approx.column(j);
    let r = reference.column(j);
    let err: Vec<f64> = a.iter().zip(&r).map(|(x, y)| x - y).collect();
    Sums {
        n: a.len() as f64,
        sq_err: ordered_sum(err.iter().map(|e| e * e).collect()),
        err: ordered_sum(err),
        reference: ordered_sum(r.to_vec()),
        sq_reference: ordered_sum(r.iter().map(|v| v * v).collect()),
        max_abs: r.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Metrics for one `paths x nodes` process. Invariant under any relabeling
/// of paths, bit for bit.
pub fn process_report(
    name: &str,
    grid: &TimeGrid,
    approx: ArrayView2<'_, f64>,
    reference: ArrayView2<'_, f64>,
) -> Result<ProcessReport> {
    if approx.dim() != reference.dim() {
        return Err(Error::dimension(
            format!("compare {name}"),
            format!("{:?}", reference.dim()),
            format!("{:?}", approx.dim()),
        ));
    }
    let (m, nodes) = approx.dim();
    if m == 0 || nodes != grid.nodes() {
        return Err(Error::dimension(format!("compare {name} nodes"), grid.nodes(), nodes));
    }
    let cols: Vec<Sums> = (0..nodes).map(|j| column_sums(approx, reference, j)).collect();
    let pooled = Sums {
        n: (m * nodes) as f64,
        err: cols.iter().map(|c| c.err).sum(),
        sq_err: cols.iter().map(|c| c.sq_err).sum(),
        reference: cols.iter().map(|c| c.reference).sum(),
        sq_reference: cols.iter().map(|c| c.sq_reference).sum(),
        max_abs: cols.iter().fold(0.0, |a, c| a.max(c.max_abs)),
    };
    let bands = (0..nodes)
        .map(|j| {
            let mut e: Vec<f64> = approx
                .column(j)
                .iter()
                .zip(reference.column(j))
                .map(|(x, y)| x - y)
                .collect();
            e.sort_by(f64::total_cmp);
            ErrorBand {
                t: grid.time(j),
                q05: sorted_quantile(&e, 0.05),
                q25: sorted_quantile(&e, 0.25),
                q50: sorted_quantile(&e, 0.5),
                q75: sorted_quantile(&e, 0.75),
                q95: sorted_quantile(&e, 0.95),
            }
        })
        .collect();
    Ok(ProcessReport {
        name: name.to_string(),
        global: pooled.metrics(),
        per_node: cols.iter().map(Sums::metrics).collect(),
        bands,
    })
}

/// Metrics for `X, Y, Z, Z0, S` of two states on the same noise and grid.
pub fn compare_to_reference(approx: &SolverState, reference: &SolverState, grid: &TimeGrid) -> Result<ErrorReport> {
    approx.check_consistent()?;
    reference.check_consistent()?;
    let pairs = [
        ("X", &approx.x, &reference.x),
        ("Y", &approx.y, &reference.y),
        ("Z", &approx.z, &reference.z),
        ("Z0", &approx.z0, &reference.z0),
        ("S", &approx.s, &reference.s),
    ];
    let processes = pairs
        .into_iter()
        .map(|(name, a, r)| process_report(name, grid, a.scalar(), r.scalar()))
        .collect::<Result<_>>()?;
    Ok(ErrorReport { processes })
}

/// Which `Z` closed form a trained `Z` tracks more closely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZDiscrepancy {
    /// RMSE against `sigma sqrt(1 - rho^2) eta(t)`.
    pub rmse_idiosyncratic: f64,
    /// RMSE against `sigma eta(t)`.
    pub rmse_aggregate: f64,
    pub closer: String,
    pub statement: String,
}

pub fn z_discrepancy(trained_z: &PathBatch, analytic: &SystemicRiskAnalytic, grid: &TimeGrid) -> Result<ZDiscrepancy> {
    if trained_z.nodes() != grid.nodes() {
        return Err(Error::dimension("Z discrepancy nodes", grid.nodes(), trained_z.nodes()));
    }
    let p = analytic.params;
    let eta: Vec<f64> = grid.times().iter().map(|&t| analytic.eta(t)).collect();
    let rmse = |scale: f64| {
        let z = trained_z.scalar();
        let sq: f64 = z.indexed_iter().map(|((_, j), v)| (v - scale * eta[j]).powi(2)).sum();
        (sq / z.len() as f64).sqrt()
    };
    let idio = rmse(p.idiosyncratic_vol());
    let agg = rmse(p.sigma);
    let closer = if idio <= agg { "idiosyncratic" } else { "aggregate" };
    let statement = format!(
        "trained Z is closer to {} (RMSE {:.4} vs sigma*sqrt(1-rho^2)*eta, {:.4} vs sigma*eta)",
        if idio <= agg { "sigma*sqrt(1-rho^2)*eta(t)" } else { "sigma*eta(t)" },
        idio,
        agg
    );
    Ok(ZDiscrepancy {
        rmse_idiosyncratic: idio,
        rmse_aggregate: agg,
        closer: closer.into(),
        statement,
    })
}

/// Feedback maps used to move the ensemble in the nested oracle.
#[derive(Clone, Copy)]
pub enum Feedback<'a> {
    /// Closed-form systemic-risk maps: `S = E[xi] + rho sigma W0`,
    /// `Y = -eta(t) (S - X)`.
    Analytic(&'a SystemicRiskAnalytic),
    Trained(&'a TrainedNetworks),
}

/// Empirical conditional statistic along one common path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePath {
    pub values: Vec<f64>,
    /// Monte Carlo standard error, for mean-type statistics only.
    pub std_error: Option<Vec<f64>>,
}

/// Simulates `m_idio` particles that share the common increments `dw0`
/// (length `N`) and returns the empirical statistic of `X` at every node.
pub fn nested_conditional_oracle(
    model: &dyn Model,
    feedback: Feedback<'_>,
    grid: &TimeGrid,
    dw0: &[f64],
    m_idio: usize,
    statistic: ScoreSpec,
    seed: u64,
) -> Result<OraclePath> {
    if dw0.len() != grid.steps() {
        return Err(Error::dimension("oracle common path", grid.steps(), dw0.len()));
    }
    if m_idio < 2 {
        return Err(Error::Usage("the nested oracle needs at least two particles".into()));
    }
    let n = grid.steps();
    let xi = Array1::from_shape_fn(m_idio, |i| {
        let mut rng = substream(seed, Stream::Oracle, 2 * i as u64);
        model.initial_law().sample_one(&mut rng)
    });
    let sd = grid.dt().sqrt();
    let mut dw = Array3::zeros((m_idio, n, 1));
    for i in 0..m_idio {
        let mut rng = substream(seed, Stream::Oracle, 2 * i as u64 + 1);
        for j in 0..n {
            dw[[i, j, 0]] = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let dw0 = Array3::from_shape_fn((m_idio, n, 1), |(_, j, _)| dw0[j]);
    let noise = NoisePair::from_increments(dw, dw0, seed)?;

    let x = match feedback {
        Feedback::Trained(nets) => sample_after_training(model, nets, grid, &noise, &xi)?.x,
        Feedback::Analytic(an) => analytic_feedback_paths(model, an, grid, &noise, &xi)?,
    };
    let xv = x.scalar();
    let mut values = Vec::with_capacity(grid.nodes());
    let mut errors = Vec::with_capacity(grid.nodes());
    for j in 0..grid.nodes() {
        let col = xv.column(j);
        match statistic {
            ScoreSpec::Quantile { alpha } => {
                let mut v = col.to_vec();
                v.sort_by(f64::total_cmp);
                // Lower inverse-CDF quantile, a minimiser of the pinball score.
                let k = ((alpha * m_idio as f64).ceil() as usize).clamp(1, m_idio) - 1;
                values.push(v[k]);
            }
            ScoreSpec::Mean | ScoreSpec::Moment { .. } => {
                let phi: Vec<f64> = match statistic {
                    ScoreSpec::Moment { power } => col.iter().map(|v| v.powi(power)).collect(),
                    _ => col.to_vec(),
                };
                let mf = m_idio as f64;
                let mean = phi.iter().sum::<f64>() / mf;
                let var = phi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (mf - 1.0);
                values.push(mean);
                errors.push((var / mf).sqrt());
            }
        }
    }
    let std_error = (!errors.is_empty()).then_some(errors);
    Ok(OraclePath { values, std_error })
}

/// Euler scheme for `X` with the closed-form systemic-risk feedback.
fn analytic_feedback_paths(
    model: &dyn Model,
    an: &SystemicRiskAnalytic,
    grid: &TimeGrid,
    noise: &NoisePair,
    xi: &Array1<f64>,
) -> Result<PathBatch> {
    let p = an.params;
    let (m, n, dt) = (xi.len(), grid.steps(), grid.dt());
    let eta: Vec<f64> = grid.times().iter().map(|&t| an.eta(t)).collect();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut x = vec![xi[i]; n + 1];
            for j in 0..n {
                let t = grid.time(j);
                let s = p.xi_mean + p.rho * p.sigma * noise.w0.get(i, j);
                let pt = Point {
                    t,
                    x: x[j],
                    y: -eta[j] * (s - x[j]),
                    z: p.idiosyncratic_vol() * eta[j],
                    z0: 0.0,
                    s,
                };
                x[j + 1] = x[j]
                    + model.drift(&pt) * dt
                    + model.sigma(t, x[j]) * noise.dw()[[i, j, 0]]
                    + model.sigma0(t, x[j]) * noise.dw0()[[i, j, 0]];
            }
            x
        })
        .collect();
    let x = Array2::from_shape_fn((m, n + 1), |(i, j)| rows[i][j]);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Simulation {
            path: 0,
            step: 0,
            reason: "oracle ensemble became non-finite".into(),
        });
    }
    Ok(PathBatch::from_scalar("X", x))
}

/// Discrete backward-equation residuals of a state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// RMS over paths of `r_j`, one entry per step.
    pub per_step_rms: Vec<f64>,
    pub rms: f64,
    /// `RMS(r) / RMS(dY)`.
    pub relative: f64,
}

/// `r_j = dY_j + f_j dt - Z_j dW_j - Z0_j dW0_j` for every path and step.
pub fn bsde_residuals(state: &SolverState, model: &dyn Model, grid: &TimeGrid, noise: &NoisePair) -> Result<Array2<f64>> {
    state.check_consistent()?;
    let (m, nodes) = (state.paths(), state.nodes());
    if nodes != grid.nodes() || noise.paths() != m || noise.steps() != grid.steps() {
        return Err(Error::dimension(
            "bsde residual",
            format!("{} paths x {} nodes", noise.paths(), grid.nodes()),
            format!("{m} paths x {nodes} nodes"),
        ));
    }
    let dt = grid.dt();
    Ok(Array2::from_shape_fn((m, grid.steps()), |(i, j)| {
        let p = Point {
            t: grid.time(j),
            x: state.x.get(i, j),
            y: floor_y(model, state.y.get(i, j)).0,
            z: state.z.get(i, j),
            z0: state.z0.get(i, j),
            s: state.s.get(i, j),
        };
        state.y.get(i, j + 1) - state.y.get(i, j) + model.driver(&p) * dt
            - p.z * noise.dw()[[i, j, 0]]
            - p.z0 * noise.dw0()[[i, j, 0]]
    }))
}

pub fn bsde_residual(state: &SolverState, model: &dyn Model, grid: &TimeGrid, noise: &NoisePair) -> Result<ResidualReport> {
    let r = bsde_residuals(state, model, grid, noise)?;
    let (m, n) = r.dim();
    let per_step_rms = (0..n)
        .map(|j| (r.column(j).iter().map(|v| v * v).sum::<f64>() / m as f64).sqrt())
        .collect();
    let rms = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
    let y = state.y.scalar();
    let dy_sq: f64 = (0..m)
        .flat_map(|i| (0..n).map(move |j| (y[[i, j + 1]] - y[[i, j]]).powi(2)))
        .sum();
    let dy_rms = (dy_sq / r.len() as f64).sqrt();
    let relative = if dy_rms > 0.0 { rms / dy_rms } else { f64::INFINITY };
    Ok(ResidualReport {
        per_step_rms,
        rms,
        relative: if rms == 0.0 { 0.0 } else { relative },
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Usage("log-log slope needs two or more positive points".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Usage("log-log slope needs distinct abscissae".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(sorted_quantile(&v, 0.5), 3.0);
        assert_eq!(sorted_quantile(&v, 0.25), 2.0);
        assert!((sorted_quantile(&v, 0.05) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_reference_has_no_r2() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let r = array![[2.0, 2.0], [2.0, 2.0]];
        let a = array![[2.1, 1.9], [2.0, 2.2]];
        let rep = process_report("Z", &grid, a.view(), r.view()).unwrap();
        assert!(rep.global.r2.is_none());
        assert!(rep.per_node.iter().all(|m| m.r2.is_none()));
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<_> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(-0.5))).collect();
        assert!((log_log_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
    }
}
