//! Built-in instances: a single six-asset pool priced by `(t, s)` and a
//! five-pool, three-token network priced by `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Market, RoutingInstance, Utility};
use crate::trade_function::{ReserveVector, TradeFunctionSpec};

pub const EXAMPLE1_RESERVES: [f64; 6] = [1.0, 3.0, 2.0, 5.0, 7.0, 6.0];
pub const EXAMPLE1_GAMMA: f64 = 0.9;
pub const EXAMPLE2_GAMMA: f64 = 0.99;
pub const EXAMPLE2_GAS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolFunction {
    GeometricMean,
    QuasiArithmetic,
}

impl PoolFunction {
    fn spec(self, n: usize) -> Result<TradeFunctionSpec> {
        match self {
            Self::GeometricMean => TradeFunctionSpec::geometric_mean(n),
            Self::QuasiArithmetic => TradeFunctionSpec::weighted_quasi_arithmetic(n),
        }
    }
}

/// Pool prices normalised by the last asset.
pub fn example1_scaled_prices(phi: PoolFunction) -> Result<Vec<f64>> {
    let p = phi.spec(6)?.gradient(&EXAMPLE1_RESERVES)?;
    let last = p[5];
    Ok(p.iter().map(|v| v / last).collect())
}

/// One pool over six tokens with `pi = (t p_1, s p_2, p_3, ..., p_6)`.
pub fn example1(phi: PoolFunction, t: f64, s: f64, gas: f64) -> Result<RoutingInstance> {
    let mut pi = example1_scaled_prices(phi)?;
    pi[0] *= t;
    pi[1] *= s;
    let market = Market::with_default_bounds(
        0,
        (0..6).collect(),
        ReserveVector::new(EXAMPLE1_RESERVES.to_vec())?,
        EXAMPLE1_GAMMA,
        gas,
        phi.spec(6)?,
    )?;
    RoutingInstance::new(6, vec![market], Utility::linear(pi)?)
}

/// Pool layout of the network example: tokens, reserves and trade function.
fn example2_pools() -> Result<Vec<(Vec<usize>, Vec<f64>, TradeFunctionSpec)>> {
    Ok(vec![
        (
            vec![0, 1, 2],
            vec![3.0, 0.2, 1.0],
            TradeFunctionSpec::weighted_geometric_mean(vec![3.0, 2.0, 1.0])?,
        ),
        (
            vec![0, 1],
            vec![10.0, 1.0],
            TradeFunctionSpec::geometric_mean(2)?,
        ),
        (
            vec![1, 2],
            vec![1.0, 10.0],
            TradeFunctionSpec::geometric_mean(2)?,
        ),
        (
            vec![0, 2],
            vec![20.0, 50.0],
            TradeFunctionSpec::geometric_mean(2)?,
        ),
        (vec![0, 2], vec![10.0, 10.0], TradeFunctionSpec::sum(2)?),
    ])
}

/// Spot prices of every pool in the network example.
pub fn example2_prices() -> Result<Vec<Vec<f64>>> {
    example2_pools()?
        .into_iter()
        .map(|(_, r, f)| f.gradient(&r))
        .collect()
}

/// The five-pool network with `pi = (t P^1_1, P^1_2, P^1_3)` and per-pool
/// gas fees.
pub fn example2(t: f64, gas: &[f64]) -> Result<RoutingInstance> {
    let pools = example2_pools()?;
    if gas.len() != pools.len() {
        return Err(Error::DimensionMismatch {
            expected: pools.len(),
            found: gas.len(),
        });
    }
    let p1 = pools[0].2.gradient(&pools[0].1)?;
    let markets = pools
        .into_iter()
        .zip(gas)
        .enumerate()
        .map(|(id, ((tokens, r, f), &q))| {
            Market::with_default_bounds(id, tokens, ReserveVector::new(r)?, EXAMPLE2_GAMMA, q, f)
        })
        .collect::<Result<Vec<_>>>()?;
    RoutingInstance::new(3, markets, Utility::linear(vec![t * p1[0], p1[1], p1[2]])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example1_gm_prices() {
        let p = example1_scaled_prices(PoolFunction::GeometricMean).unwrap();
        let expected = [6.0, 2.0, 3.0, 1.2, 6.0 / 7.0, 1.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn example2_layout() {
        let inst = example2(1.0, &[EXAMPLE2_GAS; 5]).unwrap();
        assert_eq!(inst.m(), 5);
        assert_eq!(inst.n, 3);
        assert!(example2(1.0, &[0.01; 4]).is_err());
        // b = 2R / gamma
        assert!((inst.markets[3].bounds[0] - 40.0 / 0.99).abs() < 1e-12);
    }
}
