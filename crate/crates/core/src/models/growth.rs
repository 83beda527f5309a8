//! Mean-field consumption-savings economy with an endogenous interest rate.
//!
//! ```text
//! dK = ((r - delta) K - 1/Y) dt + sigma (rho dW0 + sqrt(1 - rho^2) dW)
//! dY = -(r - delta) Y dt + Z dW + Z0 dW0,      Y_T = -K_T,     r = C S
//! ```
//!
//! with `S = E[K | F0]` and optimal consumption `c* = 1/Y`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{require, InitialGuess, InitialLaw, Model, Point};
use crate::autodiff::FeedForwardNet;
use crate::error::{Error, Result};
use crate::scores::ScoreSpec;
use crate::solvers::decoupling_input;
use crate::stochastics::TimeGrid;

/// Floor on `|Y|` inside the `1/Y` consumption term.
pub const Y_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthParams {
    /// Curvature `C` of the aggregate production `F(K) = C K^2 / 2`.
    pub production: f64,
    /// Depreciation rate.
    pub depreciation: f64,
    pub sigma: f64,
    pub rho: f64,
    pub k_mean: f64,
    pub k_sd: f64,
}

impl Default for GrowthParams {
    fn default() -> Self {
        GrowthParams {
            production: 1.5,
            depreciation: 0.1,
            sigma: 0.1,
            rho: 0.3,
            k_mean: 0.5,
            k_sd: 0.5,
        }
    }
}

impl GrowthParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.production, self.depreciation, self.sigma, self.rho, self.k_mean, self.k_sd];
        require(all.iter().all(|v| v.is_finite()), || "growth parameters must be finite".into())?;
        require(self.production > 0.0, || format!("production curvature must be positive, got {}", self.production))?;
        require(self.sigma > 0.0, || format!("sigma must be positive, got {}", self.sigma))?;
        require((-1.0..=1.0).contains(&self.rho), || format!("rho must lie in [-1, 1], got {}", self.rho))?;
        require(self.k_sd >= 0.0, || format!("k_sd must be non-negative, got {}", self.k_sd))
    }
}

#[derive(Clone, Debug)]
pub struct GrowthModel {
    pub params: GrowthParams,
}

impl GrowthModel {
    pub fn new(params: GrowthParams) -> Result<Self> {
        params.validate()?;
        Ok(GrowthModel { params })
    }

    /// `r = C S`.
    pub fn interest_rate(&self, s: f64) -> f64 {
        self.params.production * s
    }

    pub fn optimal_consumption(y: f64) -> f64 {
        1.0 / y
    }

    /// Decoupling field of the noiseless problem with the rate frozen at
    /// `r = C E[K_0]`: `Y = -e^A k_T`, where
    /// `k_T = (x e^A + sqrt(x^2 e^{2A} + 4 tau)) / 2`, `A = (r - delta) tau`.
    pub fn frozen_rate_field(&self, tau: f64, x: f64) -> f64 {
        let r = self.interest_rate(self.params.k_mean);
        let growth = ((r - self.params.depreciation) * tau).exp();
        let xe = x * growth;
        let k_t = 0.5 * (xe + (xe * xe + 4.0 * tau).sqrt());
        -growth * k_t
    }
}

impl Model for GrowthModel {
    fn name(&self) -> &'static str {
        "growth"
    }

    fn drift(&self, p: &Point) -> f64 {
        (self.interest_rate(p.s) - self.params.depreciation) * p.x - 1.0 / p.y
    }

    fn sigma(&self, _t: f64, _x: f64) -> f64 {
        self.params.sigma * (1.0 - self.params.rho * self.params.rho).sqrt()
    }

    fn sigma0(&self, _t: f64, _x: f64) -> f64 {
        self.params.sigma * self.params.rho
    }

    fn driver(&self, p: &Point) -> f64 {
        (self.interest_rate(p.s) - self.params.depreciation) * p.y
    }

    fn terminal(&self, x: f64, _s: f64) -> f64 {
        -x
    }

    fn score(&self) -> ScoreSpec {
        ScoreSpec::Mean
    }

    fn initial_law(&self) -> InitialLaw {
        InitialLaw::Normal {
            mean: self.params.k_mean,
            sd: self.params.k_sd,
        }
    }

    fn y_floor(&self) -> Option<f64> {
        Some(Y_FLOOR)
    }

    /// `S` starts at `E[K_0]` and `Y` at the frozen-rate field evaluated on
    /// the constant initial paths.
    fn initial_guess(&self, grid: &TimeGrid, xi: &Array1<f64>) -> InitialGuess {
        let nodes = grid.nodes();
        let y = Array2::from_shape_fn((xi.len(), nodes), |(i, j)| {
            self.frozen_rate_field(grid.horizon() - grid.time(j), xi[i])
        });
        let s = Array2::from_elem((xi.len(), nodes), self.params.k_mean);
        InitialGuess {
            y: Some(y),
            s: Some(s),
        }
    }
}

/// One point of the marginal-propensity-to-consume surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcPoint {
    pub k: f64,
    pub r: f64,
    pub t: f64,
    pub y: f64,
    pub z: f64,
    /// `None` where `|Y|` is below the consumption floor.
    pub mpc: Option<f64>,
}

/// `dc*/dK = -Z / (sigma_W Y^2)` on a `(K, r)` grid, with `Y = U(t, K, r/C)`
/// and `Z = sigma_W dU/dK`. `sigma_W` is the model's loading on `W`, so the
/// value is exactly `d(1/U)/dK`.
pub fn mpc_surface(
    u: &FeedForwardNet,
    model: &GrowthModel,
    ks: &[f64],
    rs: &[f64],
    t: f64,
) -> Result<Vec<MpcPoint>> {
    if ks.is_empty() || rs.is_empty() {
        return Err(Error::Usage("MPC grid needs at least one K and one r value".into()));
    }
    let mut input = Array2::zeros((ks.len() * rs.len(), 3));
    for (a, &k) in ks.iter().enumerate() {
        for (b, &r) in rs.iter().enumerate() {
            let row = decoupling_input(t, k, r / model.params.production);
            input.row_mut(a * rs.len() + b).assign(&Array1::from_vec(row.to_vec()));
        }
    }
    let (value, grad) = u.value_and_input_grad(input.view())?;
    let mut out = Vec::with_capacity(input.nrows());
    for (a, &k) in ks.iter().enumerate() {
        for (b, &r) in rs.iter().enumerate() {
            let idx = a * rs.len() + b;
            let sig = model.sigma(t, k);
            let y = value[[idx, 0]];
            let z = sig * grad[[idx, 1]];
            let mpc = (y.abs() >= Y_FLOOR).then(|| -z / (sig * y * y));
            out.push(MpcPoint { k, r, t, y, z, mpc });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> GrowthModel {
        GrowthModel::new(GrowthParams::default()).unwrap()
    }

    #[test]
    fn terminal_and_consumption() {
        assert_eq!(model().terminal(2.0, 0.3), -2.0);
        assert_eq!(GrowthModel::optimal_consumption(4.0), 0.25);
    }

    #[test]
    fn driver_vanishes_at_zero_net_rate() {
        let m = model();
        let s = m.params.depreciation / m.params.production;
        for y in [-3.0, -0.1, 0.5, 7.0] {
            let p = Point { s, y, x: 1.2, ..Point::default() };
            assert_eq!(m.driver(&p), 0.0);
        }
    }

    #[test]
    fn frozen_rate_field_hits_terminal_condition() {
        let m = model();
        for x in [0.2, 0.5, 1.7] {
            assert!((m.frozen_rate_field(0.0, x) + x).abs() < 1e-15);
        }
        for x in [-1.0, 0.0, 0.5] {
            assert!(m.frozen_rate_field(0.5, x) < 0.0);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(GrowthModel::new(GrowthParams { production: 0.0, ..GrowthParams::default() }).is_err());
        assert!(GrowthModel::new(GrowthParams { sigma: 0.0, ..GrowthParams::default() }).is_err());
    }
}
