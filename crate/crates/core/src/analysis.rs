//! No-trade certificates, gas thresholds and the relaxation gap bound.
//!
//! A market is left untouched at the optimum exactly when its spot prices lie
//! in the set of price vectors `P` for which some `alpha >= 0` and `mu >= 0`
//! satisfy `alpha P >= g >= gamma alpha P - mu` and `mu . b <= q`, where `g` is
//! the utility gradient at the empty basket seen through the market's tokens.
//! Every budget term `(gamma alpha P_j - g_j)_+ b_j` grows with `alpha`, so
//! the search collapses to the smallest admissible `alpha`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{Market, RoutingInstance, Utility};
use crate::solver::{round_activation, solve_fixed_activation, SolveOptions, SolveResult};

/// Witness (or refutation) of no-trade membership for one market.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoTradeCertificate {
    pub market: usize,
    pub member: bool,
    pub alpha_witness: f64,
    pub mu_witness: Vec<f64>,
    /// `q - mu . b` at the witness.
    pub slack: f64,
    /// Budget excess over `q`; zero for members, infinite when some price
    /// vanishes on an asset the trader values.
    pub violation: f64,
}

/// Utility gradient at the empty basket, in the market's local coordinates.
fn local_gradient_at_zero(market: &Market, utility: &Utility) -> Vec<f64> {
    let grad = utility.gradient(&vec![0.0; utility.dimension()]);
    market.gather(&grad)
}

/// Smallest `alpha` with `alpha P >= g`, or `None` when no multiple of `P`
/// dominates `g`.
fn minimal_alpha(p: &[f64], g: &[f64]) -> Option<f64> {
    let mut alpha = 0.0_f64;
    for (&pj, &gj) in p.iter().zip(g) {
        if pj > 0.0 {
            alpha = alpha.max(gj / pj);
        } else if gj > 0.0 {
            return None;
        }
    }
    Some(alpha)
}

fn budget_terms(alpha: f64, gamma: f64, p: &[f64], g: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(g)
        .map(|(&pj, &gj)| (gamma * alpha * pj - gj).max(0.0))
        .collect()
}

fn budget(mu: &[f64], b: &[f64]) -> f64 {
    mu.iter().zip(b).map(|(m, b)| m * b).sum()
}

/// Decides whether the market stays idle under `utility`.
pub fn no_trade_membership(market: &Market, utility: &Utility) -> Result<NoTradeCertificate> {
    let p = market.spot_prices()?;
    let g = local_gradient_at_zero(market, utility);
    Ok(certificate_from(market, &p, &g))
}

fn certificate_from(market: &Market, p: &[f64], g: &[f64]) -> NoTradeCertificate {
    let Some(alpha) = minimal_alpha(p, g) else {
        return NoTradeCertificate {
            market: market.id,
            member: false,
            alpha_witness: f64::INFINITY,
            mu_witness: vec![0.0; p.len()],
            slack: f64::NEG_INFINITY,
            violation: f64::INFINITY,
        };
    };
    let mu = budget_terms(alpha, market.gamma, p, g);
    let slack = market.gas - budget(&mu, &market.bounds);
    NoTradeCertificate {
        market: market.id,
        member: slack >= 0.0,
        alpha_witness: alpha,
        mu_witness: mu,
        slack,
        violation: (-slack).max(0.0),
    }
}

/// Certificates for every market of the instance, in market order.
pub fn instance_certificates(instance: &RoutingInstance) -> Result<Vec<NoTradeCertificate>> {
    instance
        .markets
        .iter()
        .map(|mk| no_trade_membership(mk, &instance.utility))
        .collect()
}

/// Smallest gas fee that makes the market a no-trade member.
pub fn min_gas_for_no_trade(market: &Market, utility: &Utility) -> Result<f64> {
    let p = market.spot_prices()?;
    let g = local_gradient_at_zero(market, utility);
    Ok(match minimal_alpha(&p, &g) {
        Some(alpha) => budget(&budget_terms(alpha, market.gamma, &p, &g), &market.bounds),
        None => f64::INFINITY,
    })
}

/// Necessary componentwise form of membership: some `nu >= 0` with
/// `nu P >= g` and `g >= gamma nu P - q / b` asset by asset.
pub fn cone_diagnostic(market: &Market, utility: &Utility) -> Result<bool> {
    let p = market.spot_prices()?;
    let g = local_gradient_at_zero(market, utility);
    let Some(lo) = minimal_alpha(&p, &g) else {
        return Ok(false);
    };
    let mut hi = f64::INFINITY;
    for ((&pj, &gj), &bj) in p.iter().zip(&g).zip(&market.bounds) {
        let cap = if bj > 0.0 {
            market.gas / bj
        } else {
            f64::INFINITY
        };
        if pj > 0.0 {
            hi = hi.min((gj + cap) / (market.gamma * pj));
        } else if gj + cap < 0.0 {
            return Ok(false);
        }
    }
    Ok(lo <= hi)
}

/// The relaxation gap bound and its ingredients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonBound {
    pub value: f64,
    pub q_max: f64,
    pub q_min: f64,
    /// Number of nonzero activations.
    pub l0: usize,
    /// Sum of activations.
    pub l1: f64,
}

/// `q_max (|eta|_0 - |eta|_1) + (q_max - q_min) |eta|_1`.
pub fn epsilon_bound(q: &[f64], eta: &[f64]) -> Result<EpsilonBound> {
    if q.len() != eta.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            found: eta.len(),
        });
    }
    if let Some(i) = eta.iter().position(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::InvalidPlan(format!(
            "activation {} of market {i} is outside [0, 1]",
            eta[i]
        )));
    }
    if q.is_empty() {
        return Ok(EpsilonBound {
            value: 0.0,
            q_max: 0.0,
            q_min: 0.0,
            l0: 0,
            l1: 0.0,
        });
    }
    let q_max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q_min = q.iter().copied().fold(f64::INFINITY, f64::min);
    let l0 = eta.iter().filter(|&&e| e > 0.0).count();
    let l1: f64 = eta.iter().sum();
    let value = q_max * (l0 as f64 - l1) + (q_max - q_min) * l1;
    Ok(EpsilonBound {
        value: value.max(0.0),
        q_max,
        q_min,
        l0,
        l1,
    })
}

/// Comparison of the relaxed, rounded and exact binary solutions.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonReport {
    pub bound: EpsilonBound,
    pub active: Vec<bool>,
    /// Relaxed objective `u - q . eta`.
    pub relaxed_objective: f64,
    pub exact_objective: f64,
    /// Binary objective of the fixed-activation solve on the rounded pattern.
    pub rounded_objective: f64,
    pub rounded: SolveResult,
    /// `relaxed - exact`; nonnegative when the sandwich holds.
    pub upper_margin: f64,
    /// `exact - rounded`; nonnegative when the sandwich holds.
    pub lower_margin: f64,
    /// `epsilon - |rounded - exact|`.
    pub bound_margin: f64,
}

impl EpsilonReport {
    /// Sandwich and gap bound, each up to `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        self.upper_margin >= -tol && self.lower_margin >= -tol && self.bound_margin >= -tol
    }
}

/// Rounds the relaxed activation, re-solves with that pattern frozen and
/// checks `relaxed >= exact >= rounded` and `|rounded - exact| <= epsilon`.
pub fn verify_epsilon(
    instance: &RoutingInstance,
    relaxed: &SolveResult,
    exact: &SolveResult,
    options: &SolveOptions,
) -> Result<EpsilonReport> {
    let m = instance.m();
    for found in [relaxed.plan.eta.len(), exact.plan.eta.len()] {
        if found != m {
            return Err(Error::DimensionMismatch { expected: m, found });
        }
    }
    let eta = &relaxed.plan.eta;
    let bound = epsilon_bound(&instance.gas_fees(), eta)?;
    let (active, rounded) = solve_rounded(instance, eta, options)?;
    let rounded_objective = rounded.objective;

    let relaxed_objective = relaxed.objective;
    let exact_objective = exact.objective;
    Ok(EpsilonReport {
        upper_margin: relaxed_objective - exact_objective,
        lower_margin: exact_objective - rounded_objective,
        bound_margin: bound.value - (rounded_objective - exact_objective).abs(),
        bound,
        active,
        relaxed_objective,
        exact_objective,
        rounded_objective,
        rounded,
    })
}

/// Activates the markets with `eta > epsilon` and solves with that pattern
/// frozen. The returned plan carries binary activations and its objective
/// includes the fees of the activated markets.
pub fn solve_rounded(
    instance: &RoutingInstance,
    eta: &[f64],
    options: &SolveOptions,
) -> Result<(Vec<bool>, SolveResult)> {
    let active = round_activation(eta, options.activation_epsilon);
    let mut rounded = solve_fixed_activation(instance, &active, options)?;
    rounded.plan.eta = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    rounded.objective = instance.objective_integer(&rounded.plan)?;
    Ok((active, rounded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{example2, example2_prices, EXAMPLE2_GAS};
    use crate::trade_function::{ReserveVector, TradeFunctionSpec};
    use proptest::prelude::*;

    fn market(r: Vec<f64>, gamma: f64, gas: f64, f: TradeFunctionSpec) -> Market {
        let n = r.len();
        Market::with_default_bounds(
            0,
            (0..n).collect(),
            ReserveVector::new(r).unwrap(),
            gamma,
            gas,
            f,
        )
        .unwrap()
    }

    /// Membership by scanning a dense `alpha` grid for the first feasible
    /// point, then bisecting the feasibility boundary below it.
    fn grid_min_budget(mk: &Market, pi: &[f64]) -> f64 {
        let p = mk.spot_prices().unwrap();
        let g = mk.gather(pi);
        let feasible = |a: f64| p.iter().zip(&g).all(|(pj, gj)| a * pj >= *gj);
        let scale = g
            .iter()
            .zip(&p)
            .filter(|(_, pj)| **pj > 0.0)
            .map(|(gj, pj)| gj.abs() / pj)
            .fold(0.0, f64::max);
        let top = 10.0 * scale + 1.0;
        let steps = 10_000;
        let mut prev = 0.0;
        let mut first = None;
        for k in 0..=steps {
            let a = top * k as f64 / steps as f64;
            if feasible(a) {
                first = Some(a);
                break;
            }
            prev = a;
        }
        let Some(mut hi) = first else {
            return f64::INFINITY;
        };
        if hi > 0.0 {
            let mut lo = prev;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if feasible(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
        }
        // budget is nondecreasing, but scan a few grid points above anyway
        (0..5)
            .map(|k| hi + top * k as f64 / steps as f64)
            .map(|a| budget(&budget_terms(a, mk.gamma, &p, &g), &mk.bounds))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn network_certificates_at_unit_price() {
        let inst = example2(1.0, &[EXAMPLE2_GAS; 5]).unwrap();
        let certs = instance_certificates(&inst).unwrap();
        let members: Vec<bool> = certs.iter().map(|c| c.member).collect();
        assert_eq!(members, vec![true, true, true, false, true]);
        assert!((certs[3].alpha_witness - 0.53385).abs() < 1e-4);
        assert!(certs[3].violation > 0.0);
        // the sum pool clears even without gas
        assert!(certs[4].mu_witness.iter().all(|&m| m == 0.0));
        let mut free = inst.markets[4].clone();
        free.gas = 0.0;
        assert!(no_trade_membership(&free, &inst.utility).unwrap().member);
    }

    #[test]
    fn market_four_threshold() {
        let inst = example2(1.0, &[EXAMPLE2_GAS; 5]).unwrap();
        let mk = &inst.markets[3];
        let q = min_gas_for_no_trade(mk, &inst.utility).unwrap();
        let p = &example2_prices().unwrap()[3];
        let p1 = &example2_prices().unwrap()[0];
        let alpha = (p1[0] / p[0]).max(p1[2] / p[1]);
        let hand = (0.99 * alpha * p[0] - p1[0]) * 40.0 / 0.99;
        assert!((q - hand).abs() < 1e-12, "{q} vs {hand}");
        assert!((q - 10.06).abs() < 0.01, "{q}");
        let oracle = grid_min_budget(mk, &inst.utility.gradient(&[0.0; 3]));
        assert!((q - oracle).abs() <= 1e-6 * q);

        let mut at = mk.clone();
        at.gas = q * (1.0 + 1e-6);
        assert!(no_trade_membership(&at, &inst.utility).unwrap().member);
        at.gas = q * (1.0 - 1e-6);
        assert!(!no_trade_membership(&at, &inst.utility).unwrap().member);
        assert!(!cone_diagnostic(mk, &inst.utility).unwrap());
    }

    #[test]
    fn member_at_zero_gas_needs_no_fee() {
        let mk = market(
            vec![2.0, 3.0],
            0.9,
            0.0,
            TradeFunctionSpec::geometric_mean(2).unwrap(),
        );
        let p = mk.spot_prices().unwrap();
        let u = Utility::linear(p).unwrap();
        assert_eq!(min_gas_for_no_trade(&mk, &u).unwrap(), 0.0);
        let zero = Utility::linear(vec![0.0, 0.0]).unwrap();
        assert_eq!(min_gas_for_no_trade(&mk, &zero).unwrap(), 0.0);
        let c = no_trade_membership(&mk, &zero).unwrap();
        assert!(c.member && c.alpha_witness == 0.0);
    }

    #[test]
    fn large_gas_always_certifies() {
        let mk = market(
            vec![1.0, 4.0],
            0.95,
            1e6,
            TradeFunctionSpec::geometric_mean(2).unwrap(),
        );
        let u = Utility::linear(vec![5.0, 0.1]).unwrap();
        assert!(no_trade_membership(&mk, &u).unwrap().member);
    }

    #[test]
    fn cone_at_zero_gas_is_price_cone() {
        let mk = market(vec![1.0, 1.0], 0.9, 0.0, TradeFunctionSpec::sum(2).unwrap());
        for (pi, inside) in [
            ([1.0, 1.0], true),
            ([1.0, 0.91], true),
            ([1.0, 0.89], false),
        ] {
            let u = Utility::linear(pi.to_vec()).unwrap();
            assert_eq!(cone_diagnostic(&mk, &u).unwrap(), inside, "{pi:?}");
            assert_eq!(
                no_trade_membership(&mk, &u).unwrap().member,
                inside,
                "{pi:?}"
            );
        }
    }

    #[test]
    fn epsilon_formula() {
        assert_eq!(epsilon_bound(&[0.3, 0.1], &[0.0, 0.0]).unwrap().value, 0.0);
        assert_eq!(
            epsilon_bound(&[0.1; 3], &[1.0, 0.0, 1.0]).unwrap().value,
            0.0
        );
        let e = epsilon_bound(&[0.01; 5], &[0.5, 0.25, 0.5, 0.25, 0.0]).unwrap();
        assert_eq!((e.l0, e.l1), (4, 1.5));
        assert!((e.value - 0.025).abs() < 1e-15);
        let mixed = epsilon_bound(&[0.2, 0.1], &[0.5, 1.0]).unwrap();
        assert!((mixed.value - (0.2 * 0.5 + 0.1 * 1.5)).abs() < 1e-15);
        assert!(epsilon_bound(&[0.1], &[1.5]).is_err());
        assert!(epsilon_bound(&[0.1], &[]).is_err());
    }

    fn random_market() -> impl Strategy<Value = (Market, Vec<f64>)> {
        (2usize..=3)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(0.1f64..20.0, n),
                    prop::collection::vec(0.0f64..3.0, n),
                    0.5f64..1.0,
                    0.0f64..2.0,
                    0usize..3,
                )
            })
            .prop_map(|(r, pi, gamma, fee_scale, family)| {
                let n = r.len();
                let f = match family {
                    0 => TradeFunctionSpec::geometric_mean(n),
                    1 => TradeFunctionSpec::sum(n),
                    _ => TradeFunctionSpec::weighted_quasi_arithmetic(n),
                }
                .unwrap();
                let mut mk = market(r, gamma, 0.0, f);
                let u = Utility::linear(pi.clone()).unwrap();
                mk.gas = fee_scale * min_gas_for_no_trade(&mk, &u).unwrap();
                (mk, pi)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn membership_matches_grid((mk, pi) in random_market()) {
            let u = Utility::linear(pi.clone()).unwrap();
            let cert = no_trade_membership(&mk, &u).unwrap();
            let oracle = grid_min_budget(&mk, &pi) <= mk.gas;
            prop_assert_eq!(cert.member, oracle);
        }

        #[test]
        fn membership_is_monotone_in_gas((mk, pi) in random_market(), bump in 0.0f64..5.0) {
            let u = Utility::linear(pi).unwrap();
            let mut richer = mk.clone();
            richer.gas += bump;
            if no_trade_membership(&mk, &u).unwrap().member {
                prop_assert!(no_trade_membership(&richer, &u).unwrap().member);
            }
        }

        #[test]
        fn members_pass_cone((mk, pi) in random_market()) {
            let u = Utility::linear(pi).unwrap();
            if no_trade_membership(&mk, &u).unwrap().member {
                prop_assert!(cone_diagnostic(&mk, &u).unwrap());
            }
        }

        #[test]
        fn epsilon_is_nonnegative(
            q in prop::collection::vec(0.0f64..2.0, 1..6),
            seed in prop::collection::vec(0.0f64..=1.0, 6),
        ) {
            let eta = &seed[..q.len()];
            prop_assert!(epsilon_bound(&q, eta).unwrap().value >= 0.0);
        }
    }
}
