//! Elicitable score functions `S(s, x)`: the statistic is whatever constant
//! (or adapted process) minimises the expected score.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A consistent score for some statistic of a scalar distribution.
pub trait ScoreFunction: Send + Sync {
    /// Score of reporting `statistic` when `x` is realised.
    fn score(&self, statistic: f64, x: f64) -> f64;

    /// Derivative in `statistic`; a one-sided subgradient at kinks.
    fn grad_statistic(&self, statistic: f64, x: f64) -> f64;

    fn spec(&self) -> ScoreSpec;
}

/// Moment transform `phi` for quadratic scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moment {
    Identity,
    Power(i32),
}

impl Moment {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Moment::Identity => x,
            Moment::Power(k) => x.powi(k),
        }
    }
}

/// `(phi(x) - s)^2`, eliciting `E[phi(X)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticScore {
    pub phi: Moment,
}

impl QuadraticScore {
    pub fn mean() -> Self {
        QuadraticScore { phi: Moment::Identity }
    }
}

impl ScoreFunction for QuadraticScore {
    fn score(&self, statistic: f64, x: f64) -> f64 {
        let r = self.phi.apply(x) - statistic;
        r * r
    }

    fn grad_statistic(&self, statistic: f64, x: f64) -> f64 {
        2.0 * (statistic - self.phi.apply(x))
    }

    fn spec(&self) -> ScoreSpec {
        match self.phi {
            Moment::Identity => ScoreSpec::Mean,
            Moment::Power(k) => ScoreSpec::Moment { power: k },
        }
    }
}

/// Pinball score `(1{s >= x} - alpha)(s - x)`, eliciting the alpha-quantile.
///
/// The mirrored expression `(1{x >= s} - alpha)(x - s)` charges `1 - alpha`
/// per unit of under-prediction and so elicits the `(1 - alpha)`-quantile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinballScore {
    alpha: f64,
}

impl PinballScore {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("quantile level alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(PinballScore { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl ScoreFunction for PinballScore {
    fn score(&self, statistic: f64, x: f64) -> f64 {
        let ind = if statistic >= x { 1.0 } else { 0.0 };
        (ind - self.alpha) * (statistic - x)
    }

    /// `1{s >= x} - alpha`; the right derivative at the kink.
    fn grad_statistic(&self, statistic: f64, x: f64) -> f64 {
        let ind = if statistic >= x { 1.0 } else { 0.0 };
        ind - self.alpha
    }

    fn spec(&self) -> ScoreSpec {
        ScoreSpec::Quantile { alpha: self.alpha }
    }
}

/// Serializable score descriptor, as named in run configurations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreSpec {
    Mean,
    Moment { power: i32 },
    Quantile { alpha: f64 },
}

impl ScoreSpec {
    pub fn build(self) -> Result<Box<dyn ScoreFunction>> {
        Ok(match self {
            ScoreSpec::Mean => Box::new(QuadraticScore::mean()),
            ScoreSpec::Moment { power } => Box::new(QuadraticScore {
                phi: Moment::Power(power),
            }),
            ScoreSpec::Quantile { alpha } => Box::new(PinballScore::new(alpha)?),
        })
    }
}

/// Per-node weighted mean of pointwise scores:
/// `sum_j w_j sum_i S(s_ij, x_ij) / (M sum_j w_j)`.
pub fn score_batch_loss(
    score: &dyn ScoreFunction,
    statistic: ArrayView2<'_, f64>,
    realization: ArrayView2<'_, f64>,
    weights: &[f64],
) -> Result<f64> {
    if statistic.dim() != realization.dim() {
        return Err(Error::dimension(
            "score_batch_loss",
            format!("{:?}", statistic.dim()),
            format!("{:?}", realization.dim()),
        ));
    }
    let (m, nodes) = statistic.dim();
    if weights.len() != nodes {
        return Err(Error::dimension("score weights", nodes, weights.len()));
    }
    let total_weight: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        let col: f64 = statistic
            .column(j)
            .iter()
            .zip(realization.column(j))
            .map(|(&s, &x)| score.score(s, x))
            .sum();
        acc += w * col;
    }
    Ok(acc / (m as f64 * total_weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn quadratic_values() {
        let q = QuadraticScore::mean();
        assert_eq!(q.score(2.5, 2.5), 0.0);
        assert_eq!(q.score(1.0, 3.0), 4.0);
    }

    #[test]
    fn pinball_values() {
        assert_eq!(PinballScore::new(0.5).unwrap().score(1.0, 2.0), 0.5);
        // Over-prediction by one unit costs 1 - alpha.
        assert!((PinballScore::new(0.6).unwrap().score(1.0, 0.0) - 0.4).abs() < 1e-15);
        assert!((PinballScore::new(0.6).unwrap().score(0.0, 1.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn pinball_rejects_bad_alpha() {
        for a in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(PinballScore::new(a), Err(Error::Config(_))));
        }
    }

    #[test]
    fn pinball_subgradient_at_kink_is_one_sided() {
        let p = PinballScore::new(0.3).unwrap();
        assert!((p.grad_statistic(1.0, 1.0) - (1.0 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_of_exact_fit_and_constant() {
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i + 2 * j) as f64);
        let q = QuadraticScore::mean();
        assert_eq!(score_batch_loss(&q, x.view(), x.view(), &[1.0; 4]).unwrap(), 0.0);
        let s = x.mapv(|v| v - 1.5);
        let loss = score_batch_loss(&q, s.view(), x.view(), &[1.0; 4]).unwrap();
        assert!((loss - 2.25).abs() < 1e-14);
    }

    #[test]
    fn batch_loss_shape_errors() {
        let a = Array2::<f64>::zeros((3, 4));
        let b = Array2::<f64>::zeros((3, 5));
        let q = QuadraticScore::mean();
        assert!(score_batch_loss(&q, a.view(), b.view(), &[1.0; 4]).is_err());
        assert!(score_batch_loss(&q, a.view(), a.view(), &[1.0; 3]).is_err());
    }

    #[test]
    fn spec_round_trips_through_build() {
        for spec in [ScoreSpec::Mean, ScoreSpec::Moment { power: 2 }, ScoreSpec::Quantile { alpha: 0.6 }] {
            assert_eq!(spec.build().unwrap().spec(), spec);
        }
    }
}
