//! Markets, the token universe, utilities, trade plans and the objective and
//! feasibility evaluation shared by every problem variant.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trade_function::{post_trade_reserves, ReserveVector, TradeFunctionSpec};

/// Default absolute tolerance on invariant residuals.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-8;

/// One constant function market maker.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub id: usize,
    /// Global token index of every local asset (the connectivity matrix as a
    /// column selection).
    pub tokens: Vec<usize>,
    pub reserves: ReserveVector,
    pub gamma: f64,
    pub gas: f64,
    pub bounds: Vec<f64>,
    pub trade_function: TradeFunctionSpec,
}

impl Market {
    pub fn new(
        id: usize,
        tokens: Vec<usize>,
        reserves: ReserveVector,
        gamma: f64,
        gas: f64,
        bounds: Vec<f64>,
        trade_function: TradeFunctionSpec,
    ) -> Result<Self> {
        let market = Self {
            id,
            tokens,
            reserves,
            gamma,
            gas,
            bounds,
            trade_function,
        };
        market.validate(None)?;
        Ok(market)
    }

    /// Market with the tender bounds set to `2 R / gamma`.
    pub fn with_default_bounds(
        id: usize,
        tokens: Vec<usize>,
        reserves: ReserveVector,
        gamma: f64,
        gas: f64,
        trade_function: TradeFunctionSpec,
    ) -> Result<Self> {
        let bounds = default_bounds_for(&reserves, gamma);
        Self::new(id, tokens, reserves, gamma, gas, bounds, trade_function)
    }

    pub fn local_dim(&self) -> usize {
        self.tokens.len()
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidMarket {
            market: self.id,
            reason: reason.into(),
        }
    }

    pub fn validate(&self, universe: Option<usize>) -> Result<()> {
        let ni = self.tokens.len();
        if ni < 2 {
            return Err(self.invalid("a market needs at least two assets"));
        }
        if self.trade_function.dimension() != ni {
            return Err(self.invalid(format!(
                "trade function dimension {} does not match {ni} assets",
                self.trade_function.dimension()
            )));
        }
        if self.reserves.len() != ni || self.bounds.len() != ni {
            return Err(self.invalid("reserves and bounds must have one entry per asset"));
        }
        for (k, &t) in self.tokens.iter().enumerate() {
            if self.tokens[..k].contains(&t) {
                return Err(self.invalid(format!("token {t} listed twice")));
            }
            if let Some(n) = universe {
                if t >= n {
                    return Err(self.invalid(format!("token {t} outside universe of {n}")));
                }
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(self.invalid(format!("fee factor {} not in (0, 1)", self.gamma)));
        }
        if !(self.gas >= 0.0 && self.gas.is_finite()) {
            return Err(self.invalid(format!("gas fee {} must be nonnegative", self.gas)));
        }
        if let Some(b) = self.bounds.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(self.invalid(format!("tender bound {b} must be strictly positive")));
        }
        Ok(())
    }

    /// Price vector at the current reserves.
    pub fn spot_prices(&self) -> Result<Vec<f64>> {
        self.trade_function.gradient(&self.reserves)
    }

    /// `(A^i)^T v`: the market's local view of a global vector.
    pub fn gather(&self, global: &[f64]) -> Vec<f64> {
        self.tokens.iter().map(|&t| global[t]).collect()
    }

    /// Adds `A^i v` to a global vector.
    pub fn scatter_add(&self, local: &[f64], global: &mut [f64]) {
        for (&t, v) in self.tokens.iter().zip(local) {
            global[t] += v;
        }
    }
}

pub(crate) fn default_bounds_for(reserves: &[f64], gamma: f64) -> Vec<f64> {
    reserves.iter().map(|r| 2.0 * r / gamma).collect()
}

/// A differentiable utility over global baskets with a componentwise
/// nonnegative gradient.
pub trait UtilityFunction: Send + Sync {
    fn dimension(&self) -> usize;
    fn value(&self, basket: &[f64]) -> f64;
    fn gradient(&self, basket: &[f64], out: &mut [f64]);
}

#[derive(Clone)]
pub enum Utility {
    /// `u(z) = pi^T z`, the trader's private prices.
    Linear {
        pi: Vec<f64>,
    },
    Custom(Arc<dyn UtilityFunction>),
}

impl fmt::Debug for Utility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Utility::Linear { pi } => f.debug_struct("Linear").field("pi", pi).finish(),
            Utility::Custom(u) => write!(f, "Custom(dim = {})", u.dimension()),
        }
    }
}

impl Utility {
    pub fn linear(pi: Vec<f64>) -> Result<Self> {
        if let Some(p) = pi.iter().find(|p| !(**p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidInstance(format!(
                "linear utility coefficients must be nonnegative, found {p}"
            )));
        }
        Ok(Utility::Linear { pi })
    }

    pub fn dimension(&self) -> usize {
        match self {
            Utility::Linear { pi } => pi.len(),
            Utility::Custom(u) => u.dimension(),
        }
    }

    pub fn value(&self, basket: &[f64]) -> f64 {
        match self {
            Utility::Linear { pi } => pi.iter().zip(basket).map(|(p, z)| p * z).sum(),
            Utility::Custom(u) => u.value(basket),
        }
    }

    pub fn gradient_into(&self, basket: &[f64], out: &mut [f64]) {
        match self {
            Utility::Linear { pi } => out.copy_from_slice(pi),
            Utility::Custom(u) => u.gradient(basket, out),
        }
    }

    pub fn gradient(&self, basket: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension()];
        self.gradient_into(basket, &mut out);
        out
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Utility::Linear { .. })
    }
}

/// Token universe, markets and the trader's utility.
#[derive(Debug, Clone)]
pub struct RoutingInstance {
    pub n: usize,
    pub markets: Vec<Market>,
    pub utility: Utility,
}

impl RoutingInstance {
    pub fn new(n: usize, markets: Vec<Market>, utility: Utility) -> Result<Self> {
        let inst = Self {
            n,
            markets,
            utility,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidInstance(format!(
                "token universe needs at least two tokens, got {}",
                self.n
            )));
        }
        if self.markets.is_empty() {
            return Err(Error::InvalidInstance(
                "at least one market is required".into(),
            ));
        }
        if self.utility.dimension() != self.n {
            return Err(Error::InvalidInstance(format!(
                "utility has dimension {} but the universe has {} tokens",
                self.utility.dimension(),
                self.n
            )));
        }
        for m in &self.markets {
            m.validate(Some(self.n))?;
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.markets.len()
    }

    pub fn gas_fees(&self) -> Vec<f64> {
        self.markets.iter().map(|m| m.gas).collect()
    }

    /// Same instance with every tender bound replaced by `2 R / gamma`.
    pub fn default_bounds(&self) -> Self {
        let mut out = self.clone();
        for m in &mut out.markets {
            m.bounds = default_bounds_for(&m.reserves, m.gamma);
        }
        out
    }

    fn check_plan(&self, plan: &TradePlan) -> Result<()> {
        let m = self.m();
        for len in [plan.x.len(), plan.y.len(), plan.eta.len()] {
            if len != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: len,
                });
            }
        }
        for (i, mk) in self.markets.iter().enumerate() {
            for len in [plan.x[i].len(), plan.y[i].len()] {
                if len != mk.local_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: mk.local_dim(),
                        found: len,
                    });
                }
            }
        }
        Ok(())
    }

    /// Global net basket `sum A^i (x^i - y^i)`.
    pub fn net_output(&self, plan: &TradePlan) -> Result<Vec<f64>> {
        self.check_plan(plan)?;
        let mut psi = vec![0.0; self.n];
        for (i, mk) in self.markets.iter().enumerate() {
            for ((&t, x), y) in mk.tokens.iter().zip(&plan.x[i]).zip(&plan.y[i]) {
                psi[t] += x - y;
            }
        }
        Ok(psi)
    }

    /// Utility of the plan's net basket, with no fees.
    pub fn plan_utility(&self, plan: &TradePlan) -> Result<f64> {
        Ok(self.utility.value(&self.net_output(plan)?))
    }

    /// `u(Psi) - <q, eta>`.
    pub fn objective_relaxed(&self, plan: &TradePlan) -> Result<f64> {
        let u = self.plan_utility(plan)?;
        let fees: f64 = self
            .markets
            .iter()
            .zip(&plan.eta)
            .map(|(m, e)| m.gas * e)
            .sum();
        Ok(u - fees)
    }

    /// `u(Psi)` minus the fee of every activated market; `eta` must be binary.
    pub fn objective_integer(&self, plan: &TradePlan) -> Result<f64> {
        let u = self.plan_utility(plan)?;
        let mut fees = 0.0;
        for (i, (m, &e)) in self.markets.iter().zip(&plan.eta).enumerate() {
            if e == 1.0 {
                fees += m.gas;
            } else if e != 0.0 {
                return Err(Error::NonBinaryActivation(i));
            }
        }
        Ok(u - fees)
    }

    /// Checks bounds, activation coupling and trade acceptance per market.
    pub fn feasibility_report(&self, plan: &TradePlan, tol: f64) -> Result<FeasibilityReport> {
        self.check_plan(plan)?;
        let mut markets = Vec::with_capacity(self.m());
        for (i, mk) in self.markets.iter().enumerate() {
            let (x, y, eta) = (&plan.x[i], &plan.y[i], plan.eta[i]);
            let mut violations = Vec::new();
            if !(0.0..=1.0).contains(&eta) {
                violations.push(Violation::Activation { value: eta });
            }
            for j in 0..mk.local_dim() {
                if x[j] < -tol || x[j] > mk.reserves[j] + tol {
                    violations.push(Violation::ReceiveBox {
                        asset: j,
                        value: x[j],
                    });
                }
                if y[j] < -tol {
                    violations.push(Violation::TenderNegative {
                        asset: j,
                        value: y[j],
                    });
                }
                let cap = eta * mk.bounds[j];
                if y[j] > cap + tol {
                    violations.push(Violation::Coupling {
                        asset: j,
                        value: y[j],
                        cap,
                    });
                }
            }
            let invariant_residual = mk
                .trade_function
                .invariant_residual(&mk.reserves, mk.gamma, x, y)
                .unwrap_or(f64::INFINITY);
            if !(invariant_residual.abs() <= tol) {
                violations.push(Violation::Invariant {
                    residual: invariant_residual,
                });
            }
            markets.push(MarketFeasibility {
                invariant_residual,
                violations,
            });
        }
        let feasible = markets.iter().all(|m| m.violations.is_empty());
        Ok(FeasibilityReport { feasible, markets })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ReceiveBox { asset: usize, value: f64 },
    TenderNegative { asset: usize, value: f64 },
    Coupling { asset: usize, value: f64, cap: f64 },
    Activation { value: f64 },
    Invariant { residual: f64 },
}

#[derive(Debug, Clone)]
pub struct MarketFeasibility {
    pub invariant_residual: f64,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub markets: Vec<MarketFeasibility>,
}

/// Candidate trades: received baskets `x`, tendered baskets `y` and market
/// activations `eta`, all in local coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradePlan {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
}

impl TradePlan {
    pub fn zero(instance: &RoutingInstance) -> Self {
        Self {
            x: instance
                .markets
                .iter()
                .map(|m| vec![0.0; m.local_dim()])
                .collect(),
            y: instance
                .markets
                .iter()
                .map(|m| vec![0.0; m.local_dim()])
                .collect(),
            eta: vec![0.0; instance.m()],
        }
    }

    pub fn is_market_idle(&self, i: usize) -> bool {
        self.x[i].iter().all(|&v| v == 0.0) && self.y[i].iter().all(|&v| v == 0.0)
    }

    pub fn is_zero(&self) -> bool {
        (0..self.eta.len()).all(|i| self.is_market_idle(i))
    }

    /// Largest absolute traded amount across every market.
    pub fn max_trade(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.y)
            .flatten()
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

/// Post-trade reserves of market `i` under `plan`.
pub fn market_post_trade(mk: &Market, plan: &TradePlan, i: usize) -> Result<Vec<f64>> {
    post_trade_reserves(&mk.reserves, mk.gamma, &plan.x[i], &plan.y[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_market(id: usize, tokens: Vec<usize>) -> Market {
        Market::with_default_bounds(
            id,
            tokens,
            ReserveVector::new(vec![10.0, 10.0]).unwrap(),
            0.99,
            0.01,
            TradeFunctionSpec::sum(2).unwrap(),
        )
        .unwrap()
    }

    fn one_market(n: usize) -> RoutingInstance {
        RoutingInstance::new(
            n,
            vec![sum_market(0, vec![0, 1])],
            Utility::linear(vec![1.0; n]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn net_output_scatter() {
        let inst = one_market(3);
        assert_eq!(
            inst.net_output(&TradePlan::zero(&inst)).unwrap(),
            vec![0.0; 3]
        );
        let plan = TradePlan {
            x: vec![vec![1.0, 0.0]],
            y: vec![vec![0.0, 2.0]],
            eta: vec![0.5],
        };
        assert_eq!(inst.net_output(&plan).unwrap(), vec![1.0, -2.0, 0.0]);

        let two = RoutingInstance::new(
            2,
            vec![sum_market(0, vec![0, 1]), sum_market(1, vec![1, 0])],
            Utility::linear(vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let plan = TradePlan {
            x: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            y: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            eta: vec![1.0, 1.0],
        };
        assert_eq!(two.net_output(&plan).unwrap()[0], 0.0);
    }

    #[test]
    fn net_output_dimension_checks() {
        let inst = one_market(3);
        let plan = TradePlan {
            x: vec![vec![1.0]],
            y: vec![vec![0.0, 0.0]],
            eta: vec![0.0],
        };
        assert!(matches!(
            inst.net_output(&plan),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn objectives() {
        let inst = one_market(3);
        let zero = TradePlan::zero(&inst);
        assert_eq!(inst.objective_relaxed(&zero).unwrap(), 0.0);
        assert_eq!(inst.objective_integer(&zero).unwrap(), 0.0);
        let plan = TradePlan {
            x: vec![vec![1.0, 0.0]],
            y: vec![vec![0.0, 2.0]],
            eta: vec![0.5],
        };
        assert!((inst.objective_relaxed(&plan).unwrap() + 1.005).abs() < 1e-15);
        assert!(matches!(
            inst.objective_integer(&plan),
            Err(Error::NonBinaryActivation(0))
        ));
    }

    #[test]
    fn integer_objective_counts_active_fees() {
        let markets = (0..5).map(|i| sum_market(i, vec![0, 1])).collect();
        let inst =
            RoutingInstance::new(2, markets, Utility::linear(vec![1.0, 1.0]).unwrap()).unwrap();
        let mut plan = TradePlan::zero(&inst);
        plan.eta = vec![1.0, 0.0, 1.0, 0.0, 0.0];
        assert!((inst.objective_integer(&plan).unwrap() + 0.02).abs() < 1e-15);
        plan.eta = vec![1.0; 5];
        assert!((inst.objective_integer(&plan).unwrap() + 0.05).abs() < 1e-15);
    }

    #[test]
    fn feasibility_verdicts() {
        let inst = one_market(2);
        let zero = TradePlan::zero(&inst);
        let rep = inst
            .feasibility_report(&zero, DEFAULT_FEASIBILITY_TOL)
            .unwrap();
        assert!(rep.feasible);
        assert_eq!(rep.markets[0].invariant_residual, 0.0);

        let b = inst.markets[0].bounds.clone();
        let plan = TradePlan {
            x: vec![vec![0.0, 0.0]],
            y: vec![b.clone()],
            eta: vec![0.5],
        };
        let rep = inst
            .feasibility_report(&plan, DEFAULT_FEASIBILITY_TOL)
            .unwrap();
        assert!(rep.markets[0]
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Coupling { .. })));

        let plan = TradePlan {
            x: vec![vec![11.0, 0.0]],
            y: vec![vec![0.0, 0.0]],
            eta: vec![0.0],
        };
        let rep = inst
            .feasibility_report(&plan, DEFAULT_FEASIBILITY_TOL)
            .unwrap();
        assert!(!rep.feasible);
        assert!(rep.markets[0]
            .violations
            .iter()
            .any(|v| matches!(v, Violation::ReceiveBox { asset: 0, .. })));
    }

    #[test]
    fn default_bounds_rule() {
        let m = Market::new(
            0,
            (0..6).collect(),
            ReserveVector::new(vec![1.0, 3.0, 2.0, 5.0, 7.0, 6.0]).unwrap(),
            0.9,
            0.0,
            vec![1.0; 6],
            TradeFunctionSpec::geometric_mean(6).unwrap(),
        )
        .unwrap();
        let inst = RoutingInstance::new(6, vec![m], Utility::linear(vec![1.0; 6]).unwrap())
            .unwrap()
            .default_bounds();
        let expected = [
            2.222_222_222_222_222,
            6.666_666_666_666_667,
            4.444_444_444_444_444,
            11.111_111_111_111_11,
            15.555_555_555_555_56,
            13.333_333_333_333_33,
        ];
        for (b, e) in inst.markets[0].bounds.iter().zip(expected) {
            assert!((b - e).abs() <= 1e-14 * e);
        }
        let inst = one_market(2).default_bounds();
        assert!((inst.markets[0].bounds[0] - 20.202_020_202_020_2).abs() < 1e-12);
    }

    #[test]
    fn market_validation() {
        let r = ReserveVector::new(vec![1.0, 1.0]).unwrap();
        let f = TradeFunctionSpec::sum(2).unwrap();
        assert!(Market::new(0, vec![0, 0], r.clone(), 0.9, 0.0, vec![1.0; 2], f.clone()).is_err());
        assert!(Market::new(0, vec![0, 1], r.clone(), 1.0, 0.0, vec![1.0; 2], f.clone()).is_err());
        assert!(Market::new(0, vec![0, 1], r.clone(), 0.9, -1.0, vec![1.0; 2], f.clone()).is_err());
        assert!(Market::new(
            0,
            vec![0, 1],
            r.clone(),
            0.9,
            0.0,
            vec![0.0, 1.0],
            f.clone()
        )
        .is_err());
        let m = Market::new(0, vec![0, 5], r, 0.9, 0.0, vec![1.0; 2], f).unwrap();
        assert!(RoutingInstance::new(3, vec![m], Utility::linear(vec![1.0; 3]).unwrap()).is_err());
    }
}
