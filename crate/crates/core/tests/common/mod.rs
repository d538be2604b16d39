//! Shared instance generators for the integration tests.
#![allow(dead_code)]

use cfmm_router::{Market, ReserveVector, RoutingInstance, TradeFunctionSpec, Utility};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random network with `m <= 5` pools over `n <= 4` tokens. Trader prices
/// are a pool's spot prices perturbed per token, so some pools trade and
/// some do not. `with_qm` admits the quasi-arithmetic pool, which is not
/// quasiconcave and can give the relaxed problem several local optima.
pub fn random_instance(seed: u64, with_qm: bool) -> RoutingInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4);
    let m = rng.random_range(1..=5);
    let mut markets = Vec::with_capacity(m);
    for id in 0..m {
        let k = rng.random_range(2..=n);
        let mut tokens = sample(&mut rng, n, k).into_vec();
        tokens.sort_unstable();
        let reserves: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..20.0)).collect();
        let families = if with_qm { 4 } else { 3 };
        let f = match rng.random_range(0..families) {
            0 => TradeFunctionSpec::geometric_mean(k),
            1 => TradeFunctionSpec::weighted_geometric_mean(
                (0..k).map(|_| rng.random_range(0.5..3.0)).collect(),
            ),
            2 => TradeFunctionSpec::weighted_sum(
                (0..k).map(|_| rng.random_range(0.5..2.0)).collect(),
            ),
            _ => TradeFunctionSpec::weighted_quasi_arithmetic(k),
        }
        .unwrap();
        let gamma = rng.random_range(0.9..1.0);
        let gas = rng.random_range(0.0..0.5);
        markets.push(
            Market::with_default_bounds(
                id,
                tokens,
                ReserveVector::new(reserves).unwrap(),
                gamma,
                gas,
                f,
            )
            .unwrap(),
        );
    }
    let mut pi = vec![1.0; n];
    let anchor = &markets[0];
    let p = anchor.spot_prices().unwrap();
    for (&t, &pj) in anchor.tokens.iter().zip(&p) {
        pi[t] = pj;
    }
    for v in &mut pi {
        *v *= rng.random_range(0.6..1.6);
    }
    RoutingInstance::new(n, markets, Utility::linear(pi).unwrap()).unwrap()
}
