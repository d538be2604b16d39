//! The five-pool network: certificates, solver and sweeps side by side.

use cfmm_router::analysis::{min_gas_for_no_trade, no_trade_membership};
use cfmm_router::optimality::verify_kkt;
use cfmm_router::scenarios::{example2, EXAMPLE2_GAS};
use cfmm_router::solver::{round_activation, solve_fixed_activation, solve_relaxed};
use cfmm_router::sweep::{no_trade_map, Axis, FeeSetting, Scenario, SweepSpec};
use cfmm_router::{SolveOptions, SolveStatus, TradePlan};

// The sum pool prices both tokens at 1, so whenever token 0 is cheap it
// sells all of token 2 at a profit far above its 0.01 fee and stays active.
#[test]
fn sum_pool_trades_when_the_first_token_is_cheap() {
    let opts = SolveOptions::default();
    for t in [0.2, 0.5, 0.9] {
        let inst = example2(t, &[EXAMPLE2_GAS; 5]).unwrap();
        let cert = no_trade_membership(&inst.markets[4], &inst.utility).unwrap();
        assert!(!cert.member && cert.violation > 0.2, "{cert:?}");
        let alone =
            solve_fixed_activation(&inst, &[false, false, false, false, true], &opts).unwrap();
        assert!(alone.objective > 0.1, "t {t}: {}", alone.objective);
        let r = solve_relaxed(&inst, &opts).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!(
            round_activation(&r.plan.eta, opts.activation_epsilon)[4],
            "{:?}",
            r.plan.eta
        );
    }
}

#[test]
fn zero_plan_verifies_exactly_when_every_pool_is_certified() {
    let base = example2(1.0, &[EXAMPLE2_GAS; 5]).unwrap();
    let q4 = min_gas_for_no_trade(&base.markets[3], &base.utility).unwrap();
    for (q, expect) in [(q4 * 0.99, false), (q4 * 1.01, true)] {
        let inst = example2(
            1.0,
            &[EXAMPLE2_GAS, EXAMPLE2_GAS, EXAMPLE2_GAS, q, EXAMPLE2_GAS],
        )
        .unwrap();
        let members: Vec<bool> = inst
            .markets
            .iter()
            .map(|m| no_trade_membership(m, &inst.utility).unwrap().member)
            .collect();
        assert_eq!(members.iter().all(|&m| m), expect, "{members:?}");
        let zero = verify_kkt(&inst, &TradePlan::zero(&inst), 1e-9).unwrap();
        assert_eq!(zero.pass, expect, "{zero}");
        let r = solve_relaxed(&inst, &SolveOptions::default()).unwrap();
        assert_eq!(r.objective.abs() <= 1e-6, expect, "{}", r.objective);
    }
}

#[test]
fn network_map_agrees_with_the_solver() {
    let spec = SweepSpec::new(Scenario::Example2 {
        t: Axis::new(0.2, 9.0, 40),
        gas: vec![
            FeeSetting::Uniform(EXAMPLE2_GAS),
            FeeSetting::PerMarket(vec![
                EXAMPLE2_GAS,
                EXAMPLE2_GAS,
                EXAMPLE2_GAS,
                9.4,
                EXAMPLE2_GAS,
            ]),
            FeeSetting::Uniform(20.0),
        ],
    });
    let rows = no_trade_map(&spec, &SolveOptions::default(), 1e-5).unwrap();
    assert_eq!(rows.len(), 120);
    let agree = rows
        .iter()
        .filter(|r| r.no_trade == r.solver_no_trade)
        .count();
    assert!(
        agree as f64 >= 0.99 * rows.len() as f64,
        "{agree} of {}",
        rows.len()
    );
    // a large enough fee everywhere certifies some prices around t = 1
    assert!(rows.iter().any(|r| r.gas == "20" && r.no_trade));
    // at 0.01 the sum pool alone rules out no-trade on the whole grid
    assert!(rows.iter().filter(|r| r.gas == "0.01").all(|r| !r.no_trade));
}
