//! Pool invariants (trade functions), their gradients and trade acceptance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lambert::{lambert_w0, lambert_w0_derivative};

/// Family of a trade function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TradeFunctionKind {
    /// `prod z_k^(1/n)`.
    GeometricMean,
    /// `(prod z_k^w_k)^(1 / sum w)`.
    WeightedGeometricMean { weights: Vec<f64> },
    /// `sum w_k z_k`; the plain sum when every weight is one.
    WeightedSum { weights: Vec<f64> },
    /// `exp(W0((2/n) sum (z_k+1)^2 ln(z_k+1)) / 2) - 1`.
    WeightedQuasiArithmetic,
}

/// A trade function together with the number of local assets it acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeFunctionSpec {
    kind: TradeFunctionKind,
    dimension: usize,
}

impl TradeFunctionSpec {
    pub fn new(kind: TradeFunctionKind, dimension: usize) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::InvalidTradeFunction(format!(
                "dimension must be at least 2, got {dimension}"
            )));
        }
        match &kind {
            TradeFunctionKind::WeightedGeometricMean { weights }
            | TradeFunctionKind::WeightedSum { weights } => {
                if weights.len() != dimension {
                    return Err(Error::InvalidTradeFunction(format!(
                        "{} weights for dimension {dimension}",
                        weights.len()
                    )));
                }
                if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
                    return Err(Error::InvalidTradeFunction(format!(
                        "weights must be strictly positive, found {w}"
                    )));
                }
            }
            TradeFunctionKind::GeometricMean | TradeFunctionKind::WeightedQuasiArithmetic => {}
        }
        Ok(Self { kind, dimension })
    }

    pub fn geometric_mean(dimension: usize) -> Result<Self> {
        Self::new(TradeFunctionKind::GeometricMean, dimension)
    }

    pub fn weighted_geometric_mean(weights: Vec<f64>) -> Result<Self> {
        let dimension = weights.len();
        Self::new(
            TradeFunctionKind::WeightedGeometricMean { weights },
            dimension,
        )
    }

    pub fn weighted_sum(weights: Vec<f64>) -> Result<Self> {
        let dimension = weights.len();
        Self::new(TradeFunctionKind::WeightedSum { weights }, dimension)
    }

    pub fn sum(dimension: usize) -> Result<Self> {
        Self::weighted_sum(vec![1.0; dimension])
    }

    pub fn weighted_quasi_arithmetic(dimension: usize) -> Result<Self> {
        Self::new(TradeFunctionKind::WeightedQuasiArithmetic, dimension)
    }

    pub fn kind(&self) -> &TradeFunctionKind {
        &self.kind
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: z.len(),
            });
        }
        Ok(())
    }

    /// Value of the invariant at a nonnegative reserve state.
    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        self.check_len(z)?;
        if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::NegativeEntry { index, value });
        }
        Ok(match &self.kind {
            TradeFunctionKind::GeometricMean => {
                if z.contains(&0.0) {
                    0.0
                } else {
                    let n = self.dimension as f64;
                    (z.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
                }
            }
            TradeFunctionKind::WeightedGeometricMean { weights } => {
                if z.contains(&0.0) {
                    0.0
                } else {
                    let total: f64 = weights.iter().sum();
                    (weights.iter().zip(z).map(|(w, v)| w * v.ln()).sum::<f64>() / total).exp()
                }
            }
            TradeFunctionKind::WeightedSum { weights } => {
                weights.iter().zip(z).map(|(w, v)| w * v).sum()
            }
            TradeFunctionKind::WeightedQuasiArithmetic => {
                let w = lambert_w0(self.qm_argument(z))?;
                (0.5 * w).exp_m1()
            }
        })
    }

    fn qm_argument(&self, z: &[f64]) -> f64 {
        let n = self.dimension as f64;
        2.0 / n
            * z.iter()
                .map(|&v| {
                    let a = v + 1.0;
                    a * a * v.ln_1p()
                })
                .sum::<f64>()
    }

    /// Gradient of the invariant at a strictly positive reserve state.
    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dimension];
        self.gradient_into(z, &mut out)?;
        Ok(out)
    }

    /// Writes the gradient into `out`; returns the function value, which
    /// every family computes along the way.
    pub fn gradient_into(&self, z: &[f64], out: &mut [f64]) -> Result<f64> {
        self.check_len(z)?;
        if out.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: out.len(),
            });
        }
        if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NonPositiveEntry { index, value });
        }
        let value = match &self.kind {
            TradeFunctionKind::GeometricMean => {
                let n = self.dimension as f64;
                let phi = (z.iter().map(|v| v.ln()).sum::<f64>() / n).exp();
                for (o, v) in out.iter_mut().zip(z) {
                    *o = phi / (n * v);
                }
                phi
            }
            TradeFunctionKind::WeightedGeometricMean { weights } => {
                let total: f64 = weights.iter().sum();
                let phi =
                    (weights.iter().zip(z).map(|(w, v)| w * v.ln()).sum::<f64>() / total).exp();
                for ((o, w), v) in out.iter_mut().zip(weights).zip(z) {
                    *o = w / total * phi / v;
                }
                phi
            }
            TradeFunctionKind::WeightedSum { weights } => {
                out.copy_from_slice(weights);
                weights.iter().zip(z).map(|(w, v)| w * v).sum()
            }
            TradeFunctionKind::WeightedQuasiArithmetic => {
                let n = self.dimension as f64;
                let w = lambert_w0(self.qm_argument(z))?;
                let half = (0.5 * w).exp();
                let outer = 0.5 * half * lambert_w0_derivative(w) * 2.0 / n;
                for (o, &v) in out.iter_mut().zip(z) {
                    let a = v + 1.0;
                    *o = outer * a * (2.0 * v.ln_1p() + 1.0);
                }
                half - 1.0
            }
        };
        Ok(value)
    }

    /// `phi(R + gamma y - x) - phi(R)`; zero means the pool accepts the trade.
    pub fn invariant_residual(
        &self,
        reserves: &[f64],
        gamma: f64,
        x: &[f64],
        y: &[f64],
    ) -> Result<f64> {
        let post = post_trade_reserves(reserves, gamma, x, y)?;
        Ok(self.evaluate(&post)? - self.evaluate(reserves)?)
    }

    /// Price vector after the trade, `grad phi(R + gamma y - x)`.
    pub fn updated_price(
        &self,
        reserves: &[f64],
        gamma: f64,
        x: &[f64],
        y: &[f64],
    ) -> Result<Vec<f64>> {
        let post = post_trade_reserves(reserves, gamma, x, y)?;
        self.gradient(&post)
    }
}

/// `R + gamma y - x`, rejecting negative entries.
pub fn post_trade_reserves(reserves: &[f64], gamma: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    for v in [x, y] {
        if v.len() != reserves.len() {
            return Err(Error::DimensionMismatch {
                expected: reserves.len(),
                found: v.len(),
            });
        }
    }
    let post: Vec<f64> = reserves
        .iter()
        .zip(x)
        .zip(y)
        .map(|((r, xi), yi)| r + gamma * yi - xi)
        .collect();
    if let Some((index, &value)) = post.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeEntry { index, value });
    }
    Ok(post)
}

/// Reserve quantities of one pool, in local token units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReserveVector(Vec<f64>);

impl ReserveVector {
    /// Reserves of a live pool must be strictly positive.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::NonPositiveEntry { index, value });
        }
        Ok(Self(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for ReserveVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}
