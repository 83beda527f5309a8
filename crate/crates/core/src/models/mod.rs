//! Benchmark MV-FBSDE specifications.
//!
//! A model supplies scalar coefficient functions of
//!
//! ```text
//! dX = mu(t, X, Y, Z, Z0, S) dt + sigma(t, X) dW + sigma0(t, X) dW0,   X_0 = xi
//! dY = -f(t, X, Y, Z, Z0, S) dt + Z dW + Z0 dW0,                      Y_T = G(X_T, S_T)
//! ```
//!
//! together with the score that elicits `S` from the conditional law of `X`.

mod growth;
mod systemic;

pub use growth::{mpc_surface, GrowthModel, GrowthParams, MpcPoint};
pub use systemic::{
    analytic_solution, delta_pm, AnalyticSolution, EtaForm, SystemicRiskAnalytic, SystemicRiskModel,
    SystemicRiskParams,
};

use ndarray::{Array1, Array2};
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::ScoreSpec;
use crate::stochastics::{substream, Stream, TimeGrid};

/// Arguments of the drift and driver at one `(path, node)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub z0: f64,
    pub s: f64,
}

/// Law of the initial condition `xi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Normal { mean: f64, sd: f64 },
    PointMass { value: f64 },
}

impl InitialLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::Normal { mean, .. } => mean,
            InitialLaw::PointMass { value } => value,
        }
    }

    pub fn sample_one(&self, rng: &mut dyn RngCore) -> f64 {
        match *self {
            InitialLaw::Normal { mean, sd } if sd > 0.0 => Normal::new(mean, sd)
                .expect("sd validated positive")
                .sample(rng),
            InitialLaw::Normal { mean, .. } => mean,
            InitialLaw::PointMass { value } => value,
        }
    }

    /// One draw per path from that path's own substream.
    pub fn sample(&self, paths: usize, seed: u64) -> Array1<f64> {
        Array1::from_shape_fn(paths, |i| {
            let mut rng = substream(seed, Stream::InitialLaw, i as u64);
            self.sample_one(&mut rng)
        })
    }

    /// As [`InitialLaw::sample`], but every odd path is the reflection
    /// `2 E[xi] - xi` of the path before it. Both laws are symmetric, so each
    /// draw keeps its marginal law.
    pub fn sample_mirrored(&self, paths: usize, seed: u64) -> Array1<f64> {
        let mut xi = self.sample(paths, seed);
        let mean = self.mean();
        for i in (1..paths).step_by(2) {
            xi[i] = 2.0 * mean - xi[i - 1];
        }
        xi
    }
}

/// Optional model-supplied starting point for the outer iteration.
#[derive(Clone, Debug, Default)]
pub struct InitialGuess {
    /// `paths x nodes`
    pub y: Option<Array2<f64>>,
    pub s: Option<Array2<f64>>,
}

pub trait Model: Send + Sync {
    fn name(&self) -> &'static str;
    fn drift(&self, p: &Point) -> f64;
    /// Loading on the idiosyncratic noise `W`.
    fn sigma(&self, t: f64, x: f64) -> f64;
    /// Loading on the common noise `W0`.
    fn sigma0(&self, t: f64, x: f64) -> f64;
    fn driver(&self, p: &Point) -> f64;
    fn terminal(&self, x: f64, s: f64) -> f64;
    fn score(&self) -> ScoreSpec;
    fn initial_law(&self) -> InitialLaw;

    /// When set, `|Y|` is floored at this value wherever `Y` enters the drift
    /// or the driver.
    fn y_floor(&self) -> Option<f64> {
        None
    }

    fn initial_guess(&self, _grid: &TimeGrid, _xi: &Array1<f64>) -> InitialGuess {
        InitialGuess::default()
    }
}

/// Applies the model's `|Y|` floor. Returns the possibly clamped value and
/// whether clamping happened.
pub fn floor_y(model: &dyn Model, y: f64) -> (f64, bool) {
    match model.y_floor() {
        Some(th) if y.abs() < th => (if y >= 0.0 { th } else { -th }, true),
        _ => (y, false),
    }
}

/// Model selection with parameters, as it appears in run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelConfig {
    SystemicRisk(SystemicRiskParams),
    QuantileInteraction(QuantileParams),
    Growth(GrowthParams),
}

/// Systemic-risk coefficients with a quantile interaction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantileParams {
    pub a: f64,
    pub q: f64,
    pub c: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub xi_mean: f64,
    pub xi_var: f64,
    pub alpha: f64,
}

impl Default for QuantileParams {
    fn default() -> Self {
        let base = SystemicRiskParams::default();
        QuantileParams {
            a: base.a,
            q: base.q,
            c: base.c,
            sigma: base.sigma,
            epsilon: base.epsilon,
            rho: base.rho,
            xi_mean: base.xi_mean,
            xi_var: base.xi_var,
            alpha: 0.6,
        }
    }
}

impl QuantileParams {
    pub fn systemic(&self) -> SystemicRiskParams {
        SystemicRiskParams {
            a: self.a,
            q: self.q,
            c: self.c,
            sigma: self.sigma,
            epsilon: self.epsilon,
            rho: self.rho,
            xi_mean: self.xi_mean,
            xi_var: self.xi_var,
        }
    }
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::SystemicRisk(_) => "systemic_risk",
            ModelConfig::QuantileInteraction(_) => "quantile_interaction",
            ModelConfig::Growth(_) => "growth",
        }
    }

    pub fn build(&self, horizon: f64) -> Result<Box<dyn Model>> {
        Ok(match self {
            ModelConfig::SystemicRisk(p) => Box::new(SystemicRiskModel::mean(*p, horizon)?),
            ModelConfig::QuantileInteraction(p) => {
                Box::new(SystemicRiskModel::quantile(p.systemic(), p.alpha, horizon)?)
            }
            ModelConfig::Growth(p) => Box::new(GrowthModel::new(*p)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.build(1.0).map(|_| ())
    }
}

pub(crate) fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Parameter(msg()))
    }
}
