//! Inter-bank systemic-risk model and its closed-form solution.
//!
//! ```text
//! dX = [(a + q)(S - X) - Y] dt + sigma dB,        B = rho W0 + sqrt(1 - rho^2) W
//! dY = [(a + q) Y + (eps - q^2)(S - X)] dt + Z dW + Z0 dW0,   Y_T = c (X_T - S_T)
//! ```
//!
//! With `S` the conditional mean the solution is `Y = -eta(t)(S - X)` where
//! `eta` solves `eta' = 2(a + q) eta + eta^2 - (eps - q^2)`, `eta(T) = c`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{require, InitialLaw, Model, Point};
use crate::error::{Error, Result};
use crate::scores::{PinballScore, ScoreSpec};
use crate::solvers::SolverState;
use crate::stochastics::{NoisePair, PathBatch, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemicRiskParams {
    pub a: f64,
    pub q: f64,
    pub c: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub xi_mean: f64,
    pub xi_var: f64,
}

impl Default for SystemicRiskParams {
    fn default() -> Self {
        SystemicRiskParams {
            a: 1.0,
            q: 1.0,
            c: 1.0,
            sigma: 1.0,
            epsilon: 10.0,
            rho: 0.3,
            xi_mean: 0.0,
            xi_var: 4.0,
        }
    }
}

impl SystemicRiskParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.q, self.c, self.sigma, self.epsilon, self.rho, self.xi_mean, self.xi_var];
        require(all.iter().all(|v| v.is_finite()), || "systemic-risk parameters must be finite".into())?;
        require((-1.0..=1.0).contains(&self.rho), || format!("rho must lie in [-1, 1], got {}", self.rho))?;
        require(self.sigma >= 0.0, || format!("sigma must be non-negative, got {}", self.sigma))?;
        require(self.xi_var >= 0.0, || format!("xi_var must be non-negative, got {}", self.xi_var))?;
        delta_pm(self).map(|_| ())
    }

    fn mean_reversion(&self) -> f64 {
        self.a + self.q
    }

    fn running_penalty(&self) -> f64 {
        self.epsilon - self.q * self.q
    }

    pub fn idiosyncratic_vol(&self) -> f64 {
        self.sigma * (1.0 - self.rho * self.rho).sqrt()
    }

    pub fn common_vol(&self) -> f64 {
        self.sigma * self.rho
    }
}

/// Roots `delta^{+-} = -(a + q) +- sqrt((a + q)^2 + (eps - q^2))`.
pub fn delta_pm(p: &SystemicRiskParams) -> Result<(f64, f64)> {
    let k = p.mean_reversion();
    let disc = k * k + p.running_penalty();
    if disc.is_nan() || disc < 0.0 {
        return Err(Error::Parameter(format!(
            "(a + q)^2 + (eps - q^2) = {disc} is negative; the Riccati roots are not real"
        )));
    }
    let r = disc.sqrt();
    Ok((-k + r, -k - r))
}

/// Which closed form to evaluate for `eta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaForm {
    /// `... (e^{(d+ - d-)(T - t)} - 1) ...`; satisfies `eta(T) = c`.
    Corrected,
    /// Same expression with `- 2` in the first numerator bracket. Kept only
    /// to demonstrate that it misses the terminal condition.
    Printed,
}

/// Riccati solution and integrating factor of the reduced state dynamics.
#[derive(Clone, Copy, Debug)]
pub struct SystemicRiskAnalytic {
    pub params: SystemicRiskParams,
    pub horizon: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
}

impl SystemicRiskAnalytic {
    pub fn new(params: SystemicRiskParams, horizon: f64) -> Result<Self> {
        let (delta_plus, delta_minus) = delta_pm(&params)?;
        Ok(SystemicRiskAnalytic {
            params,
            horizon,
            delta_plus,
            delta_minus,
        })
    }

    pub fn eta(&self, t: f64) -> f64 {
        self.eta_with(t, EtaForm::Corrected)
    }

    pub fn eta_with(&self, t: f64, form: EtaForm) -> f64 {
        let (dp, dm) = (self.delta_plus, self.delta_minus);
        let c = self.params.c;
        let pen = self.params.running_penalty();
        let e = ((dp - dm) * (self.horizon - t)).exp();
        let shift = match form {
            EtaForm::Corrected => 1.0,
            EtaForm::Printed => 2.0,
        };
        let num = -pen * (e - shift) - c * (dp * e - dm);
        let den = (dm * e - dp) - c * (e - 1.0);
        num / den
    }

    /// `theta(t) = a + q + eta(t)`.
    pub fn theta(&self, t: f64) -> f64 {
        self.params.mean_reversion() + self.eta(t)
    }

    /// `Theta(t_j) = int_0^{t_j} theta`, trapezoidal on the grid.
    pub fn big_theta(&self, grid: &TimeGrid) -> Vec<f64> {
        let dt = grid.dt();
        let mut out = Vec::with_capacity(grid.nodes());
        let mut acc = 0.0;
        out.push(0.0);
        for j in 0..grid.steps() {
            acc += 0.5 * dt * (self.theta(grid.time(j)) + self.theta(grid.time(j + 1)));
            out.push(acc);
        }
        out
    }
}

/// Closed-form state plus the alternative `Z = sigma eta(t)` candidate.
#[derive(Clone, Debug)]
pub struct AnalyticSolution {
    /// `Z` here is `sigma sqrt(1 - rho^2) eta(t)`, the loading on `W`.
    pub state: SolverState,
    /// `Z = sigma eta(t)`, the loading on the aggregate `B`.
    pub z_aggregate: PathBatch,
}

/// Evaluates the closed form on the grid. `S` uses the exact `E[xi]`;
/// stochastic integrals use left-point increments and the `dt`-integral is
/// integrated exactly with `S` frozen over each step.
pub fn analytic_solution(
    params: &SystemicRiskParams,
    horizon: f64,
    xi: &Array1<f64>,
    noise: &NoisePair,
    grid: &TimeGrid,
) -> Result<AnalyticSolution> {
    params.validate()?;
    let m = xi.len();
    if noise.paths() != m || noise.steps() != grid.steps() {
        return Err(Error::dimension(
            "analytic_solution noise",
            format!("{m} paths x {} steps", grid.steps()),
            format!("{} paths x {} steps", noise.paths(), noise.steps()),
        ));
    }
    let an = SystemicRiskAnalytic::new(*params, horizon)?;
    let nodes = grid.nodes();
    let big = an.big_theta(grid);
    let eta: Vec<f64> = grid.times().iter().map(|&t| an.eta(t)).collect();
    let (rho, sig) = (params.rho, params.sigma);
    let rho_bar = (1.0 - rho * rho).sqrt();

    let mut s = Array2::zeros((m, nodes));
    let mut x = Array2::zeros((m, nodes));
    let mut y = Array2::zeros((m, nodes));
    let dw = noise.dw();
    let dw0 = noise.dw0();
    for i in 0..m {
        x[[i, 0]] = xi[i];
        for j in 0..nodes {
            s[[i, j]] = params.xi_mean + rho * sig * noise.w0.get(i, j);
        }
        for j in 0..grid.steps() {
            let decay = (-(big[j + 1] - big[j])).exp();
            let db = rho * dw0[[i, j, 0]] + rho_bar * dw[[i, j, 0]];
            x[[i, j + 1]] = decay * (x[[i, j]] + sig * db) + (1.0 - decay) * s[[i, j]];
        }
        for j in 0..nodes {
            y[[i, j]] = -eta[j] * (s[[i, j]] - x[[i, j]]);
        }
    }
    let z = Array2::from_shape_fn((m, nodes), |(_, j)| sig * rho_bar * eta[j]);
    let z_aggregate = Array2::from_shape_fn((m, nodes), |(_, j)| sig * eta[j]);
    let state = SolverState {
        iteration: 0,
        x: PathBatch::from_scalar("X", x),
        y: PathBatch::from_scalar("Y", y),
        z: PathBatch::from_scalar("Z", z),
        z0: PathBatch::from_scalar("Z0", Array2::zeros((m, nodes))),
        s: PathBatch::from_scalar("S", s),
    };
    Ok(AnalyticSolution {
        state,
        z_aggregate: PathBatch::from_scalar("Z_aggregate", z_aggregate),
    })
}

/// Systemic-risk coefficients with either a mean or a quantile interaction.
#[derive(Clone, Debug)]
pub struct SystemicRiskModel {
    pub params: SystemicRiskParams,
    pub horizon: f64,
    score: ScoreSpec,
}

impl SystemicRiskModel {
    pub fn mean(params: SystemicRiskParams, horizon: f64) -> Result<Self> {
        params.validate()?;
        Ok(SystemicRiskModel {
            params,
            horizon,
            score: ScoreSpec::Mean,
        })
    }

    /// Same dynamics, `S` is the conditional `alpha`-quantile.
    pub fn quantile(params: SystemicRiskParams, alpha: f64, horizon: f64) -> Result<Self> {
        params.validate()?;
        PinballScore::new(alpha)?;
        Ok(SystemicRiskModel {
            params,
            horizon,
            score: ScoreSpec::Quantile { alpha },
        })
    }

    pub fn analytic(&self) -> Result<SystemicRiskAnalytic> {
        SystemicRiskAnalytic::new(self.params, self.horizon)
    }
}

impl Model for SystemicRiskModel {
    fn name(&self) -> &'static str {
        match self.score {
            ScoreSpec::Quantile { .. } => "quantile_interaction",
            _ => "systemic_risk",
        }
    }

    fn drift(&self, p: &Point) -> f64 {
        self.params.mean_reversion() * (p.s - p.x) - p.y
    }

    fn sigma(&self, _t: f64, _x: f64) -> f64 {
        self.params.idiosyncratic_vol()
    }

    fn sigma0(&self, _t: f64, _x: f64) -> f64 {
        self.params.common_vol()
    }

    /// `dY = -f dt + ...`, so `f` carries the opposite sign of the `dt` term.
    fn driver(&self, p: &Point) -> f64 {
        -(self.params.mean_reversion() * p.y + self.params.running_penalty() * (p.s - p.x))
    }

    fn terminal(&self, x: f64, s: f64) -> f64 {
        self.params.c * (x - s)
    }

    fn score(&self) -> ScoreSpec {
        self.score
    }

    fn initial_law(&self) -> InitialLaw {
        InitialLaw::Normal {
            mean: self.params.xi_mean,
            sd: self.params.xi_var.sqrt(),
        }
    }
}
