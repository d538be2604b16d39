//! Relaxed, fixed-activation and exact (enumerated) routing solvers.
//!
//! Every variant runs the same local method: an augmented Lagrangian on the
//! invariant constraints `H_i = phi_i(R + gamma y - x) - phi_i(R) = 0`, whose
//! subproblems are solved by spectral projected gradient with a nonmonotone
//! Armijo search over the box and coupling constraints. Start 0 is the zero
//! plan; the remaining starts are seeded random points.

mod problem;
mod projection;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{RoutingInstance, TradePlan};

use nalgebra::{DVector, SymmetricEigen};

use problem::{Activation, Multipliers, Problem};
use projection::project_tender_activation;

/// Largest market count accepted by [`solve_exact_enumeration`].
pub const MAX_ENUMERATION_MARKETS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol_stationarity: f64,
    pub tol_constraint: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    /// Total number of starts, the zero plan included.
    pub restarts: usize,
    pub seed: u64,
    pub interior_floor: f64,
    pub activation_epsilon: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol_stationarity: 1e-7,
            tol_constraint: 1e-8,
            max_outer: 60,
            max_inner: 500,
            penalty_init: 10.0,
            penalty_growth: 4.0,
            restarts: 8,
            seed: 0,
            interior_floor: 1e-9,
            activation_epsilon: 1e-6,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_stationarity", self.tol_stationarity),
            ("tol_constraint", self.tol_constraint),
            ("penalty_init", self.penalty_init),
            ("interior_floor", self.interior_floor),
            ("activation_epsilon", self.activation_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidOptions(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::InvalidOptions(format!(
                "penalty_growth must exceed 1, got {}",
                self.penalty_growth
            )));
        }
        if self.restarts == 0 || self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidOptions(
                "restarts, max_outer and max_inner must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub plan: TradePlan,
    /// Relaxed objective, gas-free utility or integer objective, per variant.
    pub objective: f64,
    pub status: SolveStatus,
    /// Augmented-Lagrangian estimates of the invariant multipliers.
    pub lambda: Vec<f64>,
    /// Inner iterations summed over every start (and pattern).
    pub inner_iterations: usize,
}

/// Solves the relaxed problem with `eta` in `[0, 1]`.
pub fn solve_relaxed(instance: &RoutingInstance, options: &SolveOptions) -> Result<SolveResult> {
    options.validate()?;
    Ok(multi_start(instance, Activation::Relaxed, options))
}

/// Solves the gas-free problem with the activation pattern frozen: active
/// markets may tender up to `b`, inactive markets cannot trade.
pub fn solve_fixed_activation(
    instance: &RoutingInstance,
    active: &[bool],
    options: &SolveOptions,
) -> Result<SolveResult> {
    options.validate()?;
    if active.len() != instance.m() {
        return Err(Error::DimensionMismatch {
            expected: instance.m(),
            found: active.len(),
        });
    }
    Ok(multi_start(instance, Activation::Fixed(active), options))
}

/// Exact solution of the binary problem by enumerating all `2^m` patterns.
/// Ties go to fewer active markets, then to the lexicographically smaller
/// pattern.
pub fn solve_exact_enumeration(
    instance: &RoutingInstance,
    options: &SolveOptions,
) -> Result<SolveResult> {
    options.validate()?;
    let m = instance.m();
    if m > MAX_ENUMERATION_MARKETS {
        return Err(Error::TooManyMarkets {
            m,
            max: MAX_ENUMERATION_MARKETS,
        });
    }
    let patterns = enumeration_order(m);
    let solved: Vec<(Vec<bool>, SolveResult)> = patterns
        .into_par_iter()
        .map(|p| {
            let r = multi_start(instance, Activation::Fixed(&p), options);
            (p, r)
        })
        .collect();

    let total_inner = solved.iter().map(|(_, r)| r.inner_iterations).sum();
    let mut best: Option<(f64, SolveResult)> = None;
    for (pattern, mut r) in solved {
        let fees: f64 = instance
            .markets
            .iter()
            .zip(&pattern)
            .filter(|(_, a)| **a)
            .map(|(mk, _)| mk.gas)
            .sum();
        let h = r.objective - fees;
        if best.as_ref().is_none_or(|(b, _)| h > b + 1e-9) {
            r.objective = h;
            best = Some((h, r));
        }
    }
    let (_, mut r) = best.expect("at least the empty pattern");
    r.inner_iterations = total_inner;
    Ok(r)
}

/// Patterns sorted by popcount, then lexicographically (market 0 first).
fn enumeration_order(m: usize) -> Vec<Vec<bool>> {
    let mut pats: Vec<Vec<bool>> = (0..1u32 << m)
        .map(|bits| (0..m).map(|i| bits >> (m - 1 - i) & 1 == 1).collect())
        .collect();
    pats.sort_by_key(|p| p.iter().filter(|a| **a).count());
    pats
}

/// `eta_i > epsilon` maps to active.
pub fn round_activation(eta: &[f64], epsilon: f64) -> Vec<bool> {
    eta.iter().map(|&e| e > epsilon).collect()
}

fn multi_start(inst: &RoutingInstance, mode: Activation<'_>, opts: &SolveOptions) -> SolveResult {
    let runs: Vec<SolveResult> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut prob = Problem::new(inst, mode, opts.interior_floor);
            let start = if r == 0 {
                zero_start(&prob)
            } else {
                let seed = opts.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                random_start(&mut prob, &mut ChaCha8Rng::seed_from_u64(seed))
            };
            let out = run(&mut prob, start, opts);
            log::debug!(
                "start {r}: {:?} objective {:.10} after {} inner iterations",
                out.status,
                out.objective,
                out.inner_iterations
            );
            out
        })
        .collect();

    let total = runs.iter().map(|r| r.inner_iterations).sum();
    let converged = runs.iter().any(|r| r.status == SolveStatus::Converged);
    let mut best: Option<SolveResult> = None;
    for r in runs {
        if converged && r.status != SolveStatus::Converged {
            continue;
        }
        if best.as_ref().is_none_or(|b| r.objective > b.objective) {
            best = Some(r);
        }
    }
    let mut best = best.expect("restarts >= 1");
    best.inner_iterations = total;
    best
}

fn zero_start(prob: &Problem<'_>) -> Vec<f64> {
    let mut v = vec![0.0; prob.len];
    prob.clamp(&mut v);
    v
}

/// Uniform draw in the boxes, coupling repaired by projection, then one
/// Newton step per market on `H_i` along `y^i`.
fn random_start(prob: &mut Problem<'_>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let inst = prob.inst;
    let mut v: Vec<f64> = prob
        .lo
        .iter()
        .zip(&prob.hi)
        .map(|(l, h)| l + rng.random::<f64>() * (h - l))
        .collect();
    let repair = |prob: &Problem<'_>, v: &mut [f64]| {
        prob.clamp(v);
        if prob.relaxed() {
            for (i, m) in inst.markets.iter().enumerate() {
                let (_, yo, eo) = prob.slices(i);
                let (head, tail) = v.split_at_mut(eo);
                project_tender_activation(
                    &mut head[yo..yo + m.local_dim()],
                    &mut tail[0],
                    &m.bounds,
                );
            }
        }
    };
    repair(prob, &mut v);

    for (i, m) in inst.markets.iter().enumerate() {
        if !prob.is_active(i) {
            continue;
        }
        let (xo, yo, _) = prob.slices(i);
        let ni = m.local_dim();
        let z: Vec<f64> = (0..ni)
            .map(|k| m.reserves[k] + m.gamma * v[yo + k] - v[xo + k])
            .collect();
        let Ok(grad) = m.trade_function.gradient(&z) else {
            continue;
        };
        let h = m.trade_function.evaluate(&z).unwrap_or(0.0) - prob.phi_at_reserves(i);
        let slope: f64 = (0..ni).map(|k| m.gamma * grad[k] * v[yo + k]).sum();
        if slope > 0.0 {
            let s = (1.0 - h / slope).max(0.0);
            for k in 0..ni {
                v[yo + k] *= s;
            }
        }
    }
    repair(prob, &mut v);
    v
}

/// Infinity norm of `P(v - g) - v`.
fn projected_gradient(prob: &Problem<'_>, v: &[f64], g: &[f64]) -> f64 {
    v.iter()
        .zip(g)
        .zip(prob.lo.iter().zip(&prob.hi))
        .fold(0.0_f64, |a, ((x, d), (l, h))| {
            a.max(((x - d).clamp(*l, *h) - x).abs())
        })
}

struct Inner {
    iterations: usize,
    pg: f64,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const DAMPING_MIN: f64 = 1e-12;
const DAMPING_MAX: f64 = 1e3;

/// Projected Newton on the augmented Lagrangian over the variable box:
/// a modified Newton step on the free variables, bound-seeking moves on the
/// nearly active ones, and an Armijo search along the projection arc. Falls
/// back to a scaled projected-gradient step when the Newton step fails.
fn inner_solve(
    prob: &mut Problem<'_>,
    v: &mut Vec<f64>,
    mult: &Multipliers,
    rho: f64,
    tol: f64,
    max_iter: usize,
) -> Inner {
    let len = v.len();
    let mut g = vec![0.0; len];
    let mut f = prob.eval(v, mult, rho, &mut g);
    let mut trial = vec![0.0; len];
    let mut g_trial = vec![0.0; len];
    let mut d = vec![0.0; len];
    let mut pg = projected_gradient(prob, v, &g);
    let mut damping: f64 = 1e-6;
    let mut it = 0;
    while it < max_iter && pg > tol {
        it += 1;
        let eps = pg.min(1e-3);
        let mut free = Vec::with_capacity(len);
        for k in 0..len {
            let (l, h) = (prob.lo[k], prob.hi[k]);
            if h - l <= 0.0 {
                d[k] = 0.0;
            } else if v[k] <= l + eps && g[k] > 0.0 {
                d[k] = l - v[k];
            } else if v[k] >= h - eps && g[k] < 0.0 {
                d[k] = h - v[k];
            } else {
                free.push(k);
            }
        }
        let mut curvature = 1.0;
        if !free.is_empty() {
            let full = prob.hessian(v, mult, rho);
            let hm = full.select_rows(&free).select_columns(&free);
            let eig = SymmetricEigen::new(hm);
            let top = eig.eigenvalues.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
            curvature = top.max(1e-12);
            let shift = damping * curvature;
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&k| g[k]));
            let coef = eig.eigenvectors.transpose() * &gf;
            let mut dir = DVector::zeros(free.len());
            for (c, l) in eig.eigenvalues.iter().enumerate() {
                dir -= eig.eigenvectors.column(c) * (coef[c] / (l.abs() + shift));
            }
            for (r, &k) in free.iter().enumerate() {
                d[k] = dir[r];
            }
        }

        let newton = arc_search(prob, v, &g, f, &d, mult, rho, &mut trial, &mut g_trial);
        damping = match newton {
            Some((_, 1.0)) => (damping * 0.25).max(DAMPING_MIN),
            Some((_, a)) if a >= 0.25 => damping,
            _ => (damping * 4.0).min(DAMPING_MAX),
        };
        let accepted = newton.map(|(f, _)| f).or_else(|| {
            for k in 0..len {
                d[k] = -g[k] / curvature;
            }
            arc_search(prob, v, &g, f, &d, mult, rho, &mut trial, &mut g_trial).map(|(f, _)| f)
        });
        let Some(f_new) = accepted else {
            break;
        };
        std::mem::swap(v, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        f = f_new;
        pg = projected_gradient(prob, v, &g);
    }
    Inner { iterations: it, pg }
}

/// Armijo backtracking on `P(v + a d)`; on success `trial`/`g_trial` hold
/// the accepted point and its gradient, returned with the step length.
#[allow(clippy::too_many_arguments)]
fn arc_search(
    prob: &mut Problem<'_>,
    v: &[f64],
    g: &[f64],
    f: f64,
    d: &[f64],
    mult: &Multipliers,
    rho: f64,
    trial: &mut [f64],
    g_trial: &mut [f64],
) -> Option<(f64, f64)> {
    let mut a = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        for k in 0..v.len() {
            trial[k] = (v[k] + a * d[k]).clamp(prob.lo[k], prob.hi[k]);
        }
        let decrease: f64 = (0..v.len()).map(|k| g[k] * (trial[k] - v[k])).sum();
        if !(decrease < 0.0) {
            return None;
        }
        let ft = prob.eval(trial, mult, rho, g_trial);
        if ft <= f + ARMIJO_C * decrease {
            return Some((ft, a));
        }
        a *= 0.5;
    }
    None
}

fn run(prob: &mut Problem<'_>, mut v: Vec<f64>, opts: &SolveOptions) -> SolveResult {
    let m = prob.inst.m();
    let mut mult = prob.multiplier_guess(&v);
    let mut rho = opts.penalty_init;
    let mut h = vec![0.0; m];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIterations;

    for _ in 0..opts.max_outer {
        let inner = inner_solve(
            prob,
            &mut v,
            &mult,
            rho,
            opts.tol_stationarity,
            opts.max_inner,
        );
        iterations += inner.iterations;
        prob.violation(&v, &mult, rho, &mut h);
        prob.update(&v, &mut mult, rho, &h);
        let viol = prob.violation(&v, &mult, rho, &mut h);
        log::trace!(
            "outer: inner {} pg {:.3e} viol {:.3e} rho {:.1e}",
            inner.iterations,
            inner.pg,
            viol,
            rho
        );
        if inner.pg <= opts.tol_stationarity && viol <= opts.tol_constraint {
            status = SolveStatus::Converged;
            break;
        }
        if viol > 0.25 * prev {
            rho = (rho * opts.penalty_growth).min(1e12);
        }
        prev = viol;
    }

    restore(prob, &mut v);
    let plan = finish(prob, &v);
    let objective = match prob.mode {
        Activation::Relaxed => prob.inst.objective_relaxed(&plan),
        Activation::Fixed(_) => prob.inst.plan_utility(&plan),
    }
    .expect("plan dimensions match");
    SolveResult {
        plan,
        objective,
        status,
        lambda: mult.lambda,
        inner_iterations: iterations,
    }
}

/// Newton polish of each invariant along the largest received amount.
fn restore(prob: &mut Problem<'_>, v: &mut [f64]) {
    let inst = prob.inst;
    for (i, m) in inst.markets.iter().enumerate() {
        if !prob.is_active(i) {
            continue;
        }
        let (xo, yo, _) = prob.slices(i);
        let ni = m.local_dim();
        let Some(j) = (0..ni)
            .filter(|&k| v[xo + k] > 0.0)
            .max_by(|&a, &b| v[xo + a].total_cmp(&v[xo + b]))
        else {
            continue;
        };
        let target = prob.phi_at_reserves(i);
        let mut z: Vec<f64> = (0..ni)
            .map(|k| m.reserves[k] + m.gamma * v[yo + k] - v[xo + k])
            .collect();
        let mut xj = v[xo + j];
        let mut grad = vec![0.0; ni];
        let Ok(phi) = m.trade_function.evaluate(&z) else {
            continue;
        };
        let mut best = (phi - target).abs();
        for _ in 0..8 {
            let Ok(phi) = m.trade_function.gradient_into(&z, &mut grad) else {
                break;
            };
            let h = phi - target;
            if h == 0.0 || grad[j] <= 0.0 {
                break;
            }
            let nx = (xj + h / grad[j]).clamp(0.0, prob.hi[xo + j]);
            z[j] += xj - nx;
            let Ok(phi) = m.trade_function.evaluate(&z) else {
                break;
            };
            let r = (phi - target).abs();
            if r >= best {
                break;
            }
            best = r;
            xj = nx;
            v[xo + j] = nx;
        }
    }
}

/// Drops negligible trades and sets each relaxed activation to the smallest
/// value its tenders need (or keeps a larger one when the market is free).
fn finish(prob: &Problem<'_>, v: &[f64]) -> TradePlan {
    let inst = prob.inst;
    let mut plan = prob.to_plan(v);
    if !prob.relaxed() {
        return plan;
    }
    for (i, m) in inst.markets.iter().enumerate() {
        let scale = 1.0 + m.reserves.iter().cloned().fold(0.0, f64::max);
        let tiny = plan.x[i]
            .iter()
            .chain(&plan.y[i])
            .all(|a| a.abs() <= 1e-12 * scale);
        if tiny {
            plan.x[i].iter_mut().for_each(|a| *a = 0.0);
            plan.y[i].iter_mut().for_each(|a| *a = 0.0);
        }
        let need = plan.y[i]
            .iter()
            .zip(&m.bounds)
            .map(|(y, b)| y / b)
            .fold(0.0_f64, f64::max)
            .min(1.0);
        for (y, b) in plan.y[i].iter_mut().zip(&m.bounds) {
            *y = y.min(need * b);
        }
        plan.eta[i] = if m.gas > 0.0 {
            need
        } else {
            plan.eta[i].max(need)
        };
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Market, Utility};
    use crate::trade_function::{ReserveVector, TradeFunctionSpec};

    fn sum_instance(pi: Vec<f64>, gas: f64) -> RoutingInstance {
        let m = Market::with_default_bounds(
            0,
            vec![0, 1],
            ReserveVector::new(vec![10.0, 10.0]).unwrap(),
            0.99,
            gas,
            TradeFunctionSpec::sum(2).unwrap(),
        )
        .unwrap();
        RoutingInstance::new(2, vec![m], Utility::linear(pi).unwrap()).unwrap()
    }

    #[test]
    fn sum_market_exhausts_receive_reserve() {
        // Tendering token 1 at marginal gain 2 * 0.99 - 1 > 0 is profitable
        // until x_0 = 0.99 y_1 hits the reserve R_0 = 10 (b_1 = 20.2 is not
        // binding), so the optimum is 2 * 10 - 10 / 0.99 less the floor.
        let inst = sum_instance(vec![2.0, 1.0], 0.0);
        let r = solve_relaxed(&inst, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        let best = 20.0 - 10.0 / 0.99;
        assert!((r.objective - best).abs() < 1e-6, "{}", r.objective);
        assert!((r.plan.x[0][0] - 10.0).abs() < 1e-6);
        assert!((r.plan.y[0][1] - 10.0 / 0.99).abs() < 1e-6);

        let f = solve_fixed_activation(&inst, &[true], &SolveOptions::default()).unwrap();
        assert!((f.objective - r.objective).abs() < 1e-6);
        assert!((f.plan.y[0][1] - r.plan.y[0][1]).abs() < 1e-6);
    }

    #[test]
    fn inactive_pattern_gives_zero_plan() {
        let inst = sum_instance(vec![2.0, 1.0], 0.0);
        let r = solve_fixed_activation(&inst, &[false], &SolveOptions::default()).unwrap();
        assert!(r.plan.is_zero());
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn huge_fees_make_enumeration_idle() {
        let inst = sum_instance(vec![2.0, 1.0], 1e6);
        let r = solve_exact_enumeration(&inst, &SolveOptions::default()).unwrap();
        assert!(r.plan.is_zero());
        assert_eq!(r.plan.eta, vec![0.0]);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn matched_prices_stay_at_zero() {
        let inst = sum_instance(vec![1.0, 1.0], 0.01);
        let r = solve_relaxed(&inst, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!(r.plan.is_zero());
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.plan.eta, vec![0.0]);
    }

    #[test]
    fn rounding_threshold() {
        assert_eq!(round_activation(&[0.0, 0.0, 0.0], 1e-6), vec![false; 3]);
        assert_eq!(
            round_activation(&[1e-9, 0.3, 1.0], 1e-6),
            vec![false, true, true]
        );
    }

    #[test]
    fn enumeration_order_prefers_sparse_then_lexicographic() {
        let order = enumeration_order(3);
        assert_eq!(order[0], vec![false; 3]);
        assert_eq!(order[1], vec![false, false, true]);
        assert_eq!(order[3], vec![true, false, false]);
        assert_eq!(order[7], vec![true; 3]);
    }

    #[test]
    fn option_validation() {
        let mut o = SolveOptions::default();
        assert!(o.validate().is_ok());
        o.penalty_growth = 1.0;
        assert!(o.validate().is_err());
        let o = SolveOptions {
            tol_constraint: 0.0,
            ..SolveOptions::default()
        };
        assert!(o.validate().is_err());
        let inst = sum_instance(vec![1.0, 1.0], 0.0);
        assert!(solve_fixed_activation(&inst, &[true, false], &SolveOptions::default()).is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let inst = sum_instance(vec![2.0, 1.5], 0.1);
        let o = SolveOptions {
            seed: 42,
            ..SolveOptions::default()
        };
        let a = solve_relaxed(&inst, &o).unwrap();
        let b = solve_relaxed(&inst, &o).unwrap();
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.inner_iterations, b.inner_iterations);
    }
}
