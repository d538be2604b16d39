//! Support and qualification checks, multiplier recovery and verification of
//! the first-order case system at a candidate plan.
//!
//! With `g = (A^i)^T grad u(Psi)` and `P = grad phi_i` at the post-trade
//! reserves, stationarity reads asset by asset:
//!
//! | case              | condition                            |
//! |-------------------|--------------------------------------|
//! | both zero         | `alpha P >= g >= gamma alpha P - mu` |
//! | tender only       | `g = gamma alpha P - mu`             |
//! | interior receive  | `g = alpha P`                        |
//! | saturated receive | `g >= alpha P`                       |
//!
//! Active markets also need `mu . (y - eta b) = 0` and `q = mu . b`, relaxed
//! to `q <= mu . b` once `eta` reaches one; an inactive market needs
//! `x = y = 0` and `q >= mu . b`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{market_post_trade, RoutingInstance, TradePlan};

/// Relative thresholds separating zero, interior and saturated entries.
const CLASSIFY_REL: f64 = 1e-7;

/// True when no asset is both received and tendered in the same market.
pub fn check_support(plan: &TradePlan, tol: f64) -> bool {
    plan.x
        .iter()
        .zip(&plan.y)
        .all(|(x, y)| x.iter().zip(y).all(|(a, b)| a * b <= tol))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CqViolation {
    pub market: usize,
    pub asset: usize,
    /// `b_j - y_j`, which must lie in `(0, 2 R_j / gamma]`.
    pub gap: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CqReport {
    pub holds: bool,
    pub violations: Vec<CqViolation>,
}

/// Sufficient qualification condition: every tendered asset keeps
/// `0 < b_j - y_j <= 2 R_j / gamma`.
pub fn check_cq(instance: &RoutingInstance, plan: &TradePlan) -> CqReport {
    let mut violations = Vec::new();
    for (i, mk) in instance.markets.iter().enumerate() {
        for (j, &y) in plan.y[i].iter().enumerate() {
            if y <= 0.0 {
                continue;
            }
            let gap = mk.bounds[j] - y;
            let upper = 2.0 * mk.reserves[j] / mk.gamma;
            // a gap inside rounding distance of zero is treated as closed
            if !(gap > CLASSIFY_REL * mk.bounds[j] && gap <= upper) {
                violations.push(CqViolation {
                    market: i,
                    asset: j,
                    gap,
                    upper,
                });
            }
        }
    }
    CqReport {
        holds: violations.is_empty(),
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarketCase {
    Inactive,
    ActivePerAsset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AssetCase {
    BothZero,
    TenderOnly,
    ReceiveInterior,
    ReceiveSaturated,
    /// Received and tendered at once; no row of the case system applies.
    Unclassified,
}

impl fmt::Display for AssetCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BothZero => "both-zero",
            Self::TenderOnly => "tender",
            Self::ReceiveInterior => "receive",
            Self::ReceiveSaturated => "receive-all",
            Self::Unclassified => "unclassified",
        })
    }
}

fn classify(x: f64, y: f64, r: f64, b: f64) -> AssetCase {
    let tendered = y > CLASSIFY_REL * b;
    let received = x > CLASSIFY_REL * r;
    match (received, tendered) {
        (false, false) => AssetCase::BothZero,
        (false, true) => AssetCase::TenderOnly,
        (true, false) if x < (1.0 - CLASSIFY_REL) * r => AssetCase::ReceiveInterior,
        (true, false) => AssetCase::ReceiveSaturated,
        (true, true) => AssetCase::Unclassified,
    }
}

/// Local gradient data of one market at a plan.
struct MarketData {
    g: Vec<f64>,
    p: Vec<f64>,
    cases: Vec<AssetCase>,
}

fn market_data(instance: &RoutingInstance, plan: &TradePlan) -> Result<Vec<MarketData>> {
    let psi = instance.net_output(plan)?;
    let grad = instance.utility.gradient(&psi);
    instance
        .markets
        .iter()
        .enumerate()
        .map(|(i, mk)| {
            let post = market_post_trade(mk, plan, i)?;
            let cases = (0..mk.local_dim())
                .map(|j| classify(plan.x[i][j], plan.y[i][j], mk.reserves[j], mk.bounds[j]))
                .collect();
            Ok(MarketData {
                g: mk.gather(&grad),
                p: mk.trade_function.gradient(&post)?,
                cases,
            })
        })
        .collect()
}

/// Multipliers recovered for one market.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketMultipliers {
    pub alpha: f64,
    pub mu: Vec<f64>,
    /// Euclidean residual of the fitted linear system.
    pub residual: f64,
}

/// Nonnegative least squares, `min |A z - b|` over `z >= 0` (Lawson and
/// Hanson active-set method).
pub(crate) fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = a.ncols();
    let mut z = DVector::zeros(k);
    let mut passive = vec![false; k];
    let scale = a.amax().max(b.amax()).max(1.0);
    let tol = 1e-14 * scale * scale * (k.max(1) as f64);

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let cols: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
        let sub = a.select_columns(&cols);
        let sol = sub
            .svd(true, true)
            .solve(b, 1e-13)
            .unwrap_or_else(|_| DVector::zeros(cols.len()));
        let mut full = DVector::zeros(k);
        for (c, &j) in cols.iter().enumerate() {
            full[j] = sol[c];
        }
        full
    };

    for _ in 0..3 * k + 3 {
        let w = a.transpose() * (b - a * &z);
        let Some(t) = (0..k)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]))
        else {
            break;
        };
        passive[t] = true;
        loop {
            let cand = solve_passive(&passive);
            if (0..k).all(|j| !passive[j] || cand[j] > 0.0) {
                z = cand;
                break;
            }
            let mut step = 1.0_f64;
            for j in 0..k {
                if passive[j] && cand[j] <= 0.0 {
                    step = step.min(z[j] / (z[j] - cand[j]));
                }
            }
            z += (cand - &z) * step;
            for j in 0..k {
                if passive[j] && z[j] <= 1e-15 * scale {
                    passive[j] = false;
                    z[j] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    z
}

/// Smallest `alpha` with `alpha P >= g`, and `mu = (gamma alpha P - g)_+`.
fn inactive_multipliers(gamma: f64, d: &MarketData) -> (f64, Vec<f64>) {
    let mut alpha = 0.0_f64;
    for (&pj, &gj) in d.p.iter().zip(&d.g) {
        if pj > 0.0 {
            alpha = alpha.max(gj / pj);
        } else if gj > 0.0 {
            alpha = f64::INFINITY;
        }
    }
    let mu =
        d.p.iter()
            .zip(&d.g)
            .map(|(&pj, &gj)| (gamma * alpha * pj - gj).max(0.0))
            .collect();
    (alpha, mu)
}

/// Fits `(alpha, mu)` for an active market; `mu` may only be nonzero on
/// assets tendered up to the activation cap.
fn active_multipliers(
    gamma: f64,
    gas: f64,
    bounds: &[f64],
    saturated: &[bool],
    full: bool,
    d: &MarketData,
) -> MarketMultipliers {
    let n = d.p.len();
    let interior: Vec<usize> = (0..n)
        .filter(|&j| d.cases[j] == AssetCase::ReceiveInterior)
        .collect();
    // interior receive rows pin alpha down directly
    let fixed_alpha = (!interior.is_empty()).then(|| {
        let num: f64 = interior.iter().map(|&j| d.g[j] * d.p[j]).sum();
        let den: f64 = interior.iter().map(|&j| d.p[j] * d.p[j]).sum();
        (num / den).max(0.0)
    });

    let mu_cols: Vec<usize> = (0..n).filter(|&j| saturated[j]).collect();
    let alpha_col = usize::from(fixed_alpha.is_none());
    let mu_col = |j: usize| alpha_col + mu_cols.iter().position(|&c| c == j).unwrap();

    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut n_slack = 0;
    let mut push = |alpha_coef: f64, mut terms: Vec<(usize, f64)>, slack: Option<f64>, rhs: f64| {
        let mut rhs = rhs;
        match fixed_alpha {
            Some(a) => rhs -= alpha_coef * a,
            None => terms.push((0, alpha_coef)),
        }
        let slack = slack.inspect(|_| n_slack += 1);
        rows.push((terms, rhs));
        (rows.len() - 1, slack.map(|s| (n_slack - 1, s)))
    };

    let mut slack_entries = Vec::new();
    for j in 0..n {
        let mu_term = |coef: f64| {
            if saturated[j] {
                vec![(mu_col(j), coef)]
            } else {
                Vec::new()
            }
        };
        match d.cases[j] {
            AssetCase::BothZero => {
                let (r, s) = push(d.p[j], Vec::new(), Some(-1.0), d.g[j]);
                slack_entries.push((r, s.unwrap()));
                let (r, s) = push(gamma * d.p[j], mu_term(-1.0), Some(1.0), d.g[j]);
                slack_entries.push((r, s.unwrap()));
            }
            AssetCase::TenderOnly => {
                push(gamma * d.p[j], mu_term(-1.0), None, d.g[j]);
            }
            AssetCase::ReceiveInterior => {
                push(d.p[j], Vec::new(), None, d.g[j]);
            }
            AssetCase::ReceiveSaturated => {
                let (r, s) = push(d.p[j], Vec::new(), Some(1.0), d.g[j]);
                slack_entries.push((r, s.unwrap()));
            }
            AssetCase::Unclassified => {}
        }
    }
    let fee_terms = mu_cols.iter().map(|&j| (mu_col(j), bounds[j])).collect();
    // at eta = 1 the activation sits on its upper bound and only q <= mu . b
    // is required
    let (fee_row, s) = push(0.0, fee_terms, full.then_some(-1.0), gas);
    if let Some(s) = s {
        slack_entries.push((fee_row, s));
    }

    let base = alpha_col + mu_cols.len();
    let mut a = DMatrix::zeros(rows.len(), base + n_slack);
    let mut b = DVector::zeros(rows.len());
    for (r, (terms, rhs)) in rows.iter().enumerate() {
        for &(c, v) in terms {
            a[(r, c)] += v;
        }
        b[r] = *rhs;
    }
    for (r, (s, v)) in slack_entries {
        a[(r, base + s)] = v;
    }
    let mut z = nnls(&a, &b);
    // the fee identity is exact below full activation, so mu is scaled onto
    // it and the solver noise stays in the stationarity rows
    let paid: f64 = mu_cols.iter().map(|&j| z[mu_col(j)] * bounds[j]).sum();
    if !full && paid > 0.0 && gas > 0.0 {
        for &j in &mu_cols {
            z[mu_col(j)] *= gas / paid;
        }
    }
    let residual = (&a * &z - &b).norm();
    let alpha = fixed_alpha.unwrap_or_else(|| z[0]);
    let mut mu = vec![0.0; n];
    for &j in &mu_cols {
        mu[j] = z[mu_col(j)];
    }
    MarketMultipliers {
        alpha,
        mu,
        residual,
    }
}

fn saturation_mask(plan: &TradePlan, instance: &RoutingInstance, i: usize, tol: f64) -> Vec<bool> {
    let eta = plan.eta[i];
    plan.y[i]
        .iter()
        .zip(&instance.markets[i].bounds)
        .map(|(&y, &b)| (y - eta * b).abs() <= tol * b.max(1.0))
        .collect()
}

/// Recovers `alpha` and `mu` for every market of a support-respecting plan.
pub fn recover_multipliers(
    instance: &RoutingInstance,
    plan: &TradePlan,
    tol: f64,
) -> Result<Vec<MarketMultipliers>> {
    instance.net_output(plan)?;
    for (i, (x, y)) in plan.x.iter().zip(&plan.y).enumerate() {
        if let Some(j) = x.iter().zip(y).position(|(a, b)| a * b > tol) {
            return Err(Error::SupportViolation {
                market: i,
                asset: j,
            });
        }
    }
    let data = market_data(instance, plan)?;
    Ok(recover_from(instance, plan, &data, tol))
}

fn recover_from(
    instance: &RoutingInstance,
    plan: &TradePlan,
    data: &[MarketData],
    tol: f64,
) -> Vec<MarketMultipliers> {
    instance
        .markets
        .iter()
        .zip(data)
        .enumerate()
        .map(|(i, (mk, d))| {
            if plan.eta[i] > 0.0 {
                let sat = saturation_mask(plan, instance, i, tol);
                let full = plan.eta[i] >= 1.0 - tol;
                active_multipliers(mk.gamma, mk.gas, &mk.bounds, &sat, full, d)
            } else {
                let (alpha, mu) = inactive_multipliers(mk.gamma, d);
                MarketMultipliers {
                    alpha,
                    mu,
                    residual: 0.0,
                }
            }
        })
        .collect()
}

/// Verification outcome for one market.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketKkt {
    pub case: MarketCase,
    pub assets: Vec<AssetCase>,
    pub alpha: f64,
    pub mu: Vec<f64>,
    /// Largest violation among the per-asset rows (and any trade left in an
    /// inactive market).
    pub stationarity_residual: f64,
    /// `mu . (y - eta b)`.
    pub complementarity_residual: f64,
    /// `q - mu . b`; zero for active markets, nonnegative for inactive ones
    /// and nonpositive at full activation.
    pub fee_residual: f64,
    pub invariant_residual: f64,
    /// Largest excess of `mu_j` over `q / b_j`.
    pub mu_bound_excess: f64,
    /// Every `mu_j > tol` sits on an asset tendered up to `eta b_j`.
    pub saturation_ok: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub tol: f64,
    pub support: bool,
    pub markets: Vec<MarketKkt>,
    pub pass: bool,
}

fn row_violation(case: AssetCase, gamma: f64, alpha: f64, mu: f64, p: f64, g: f64) -> f64 {
    match case {
        AssetCase::BothZero => (g - alpha * p).max(0.0) + (gamma * alpha * p - mu - g).max(0.0),
        AssetCase::TenderOnly => (g - (gamma * alpha * p - mu)).abs(),
        AssetCase::ReceiveInterior => (g - alpha * p).abs(),
        AssetCase::ReceiveSaturated => (alpha * p - g).max(0.0),
        AssetCase::Unclassified => 0.0,
    }
}

/// Classifies every market and asset and checks the matching case system.
pub fn verify_kkt(instance: &RoutingInstance, plan: &TradePlan, tol: f64) -> Result<KktReport> {
    instance.net_output(plan)?;
    let support = check_support(plan, tol);
    let data = market_data(instance, plan)?;
    let mults = recover_from(instance, plan, &data, tol);

    let mut markets = Vec::with_capacity(instance.m());
    for (i, ((mk, d), mm)) in instance.markets.iter().zip(&data).zip(mults).enumerate() {
        let eta = plan.eta[i];
        let active = eta > 0.0;
        let (x, y) = (&plan.x[i], &plan.y[i]);
        let mut stationarity = (0..mk.local_dim())
            .map(|j| row_violation(d.cases[j], mk.gamma, mm.alpha, mm.mu[j], d.p[j], d.g[j]))
            .fold(0.0_f64, f64::max);
        if !active {
            let left = x.iter().chain(y).fold(0.0_f64, |a, v| a.max(v.abs()));
            stationarity = stationarity.max(left);
        }
        let complementarity: f64 = mm
            .mu
            .iter()
            .zip(y)
            .zip(&mk.bounds)
            .map(|((m, y), b)| m * (y - eta * b))
            .sum();
        let fee = mk.gas
            - mm.mu
                .iter()
                .zip(&mk.bounds)
                .map(|(m, b)| m * b)
                .sum::<f64>();
        let invariant = mk
            .trade_function
            .invariant_residual(&mk.reserves, mk.gamma, x, y)?
            .abs();
        let mu_bound_excess = mm
            .mu
            .iter()
            .zip(&mk.bounds)
            .map(|(m, b)| if *b > 0.0 { m - mk.gas / b } else { 0.0 })
            .fold(0.0_f64, f64::max);
        let saturation_ok = mm
            .mu
            .iter()
            .zip(y)
            .zip(&mk.bounds)
            .all(|((m, y), b)| *m <= tol || (y - eta * b).abs() <= tol * b.max(1.0));
        let fee_ok = match (active, eta >= 1.0 - tol) {
            (false, _) => fee >= -tol,
            (true, false) => fee.abs() <= tol,
            (true, true) => fee <= tol,
        };
        let pass = mm.alpha.is_finite()
            && mm.alpha >= 0.0
            && mm.mu.iter().all(|&m| m >= 0.0)
            && !d.cases.contains(&AssetCase::Unclassified)
            && stationarity <= tol
            && complementarity.abs() <= tol
            && fee_ok
            && invariant <= tol
            && saturation_ok;
        markets.push(MarketKkt {
            case: if active {
                MarketCase::ActivePerAsset
            } else {
                MarketCase::Inactive
            },
            assets: d.cases.clone(),
            alpha: mm.alpha,
            mu: mm.mu,
            stationarity_residual: stationarity,
            complementarity_residual: complementarity,
            fee_residual: fee,
            invariant_residual: invariant,
            mu_bound_excess,
            saturation_ok,
            pass,
        });
    }
    let pass = support && markets.iter().all(|m| m.pass);
    Ok(KktReport {
        tol,
        support,
        markets,
        pass,
    })
}

impl fmt::Display for KktReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "kkt verdict: {} (tol {:e}, support {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.tol,
            if self.support { "ok" } else { "violated" }
        )?;
        writeln!(
            f,
            "{:>6}  {:<8}  {:>12}  {:>10}  {:>10}  {:>10}  {:>10}  {:<4}  assets",
            "market", "case", "alpha", "station", "compl", "fee", "invariant", "ok"
        )?;
        for (i, m) in self.markets.iter().enumerate() {
            let case = match m.case {
                MarketCase::Inactive => "inactive",
                MarketCase::ActivePerAsset => "active",
            };
            let assets: Vec<String> = m.assets.iter().map(|a| a.to_string()).collect();
            writeln!(
                f,
                "{:>6}  {:<8}  {:>12.6e}  {:>10.2e}  {:>10.2e}  {:>10.2e}  {:>10.2e}  {:<4}  {}",
                i,
                case,
                m.alpha,
                m.stationarity_residual,
                m.complementarity_residual,
                m.fee_residual,
                m.invariant_residual,
                if m.pass { "yes" } else { "no" },
                assets.join(",")
            )?;
        }
        Ok(())
    }
}
