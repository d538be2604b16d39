//! Parameter sweeps over the built-in scenarios and their CSV rows.

use std::io::Write;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{epsilon_bound, instance_certificates, solve_rounded, verify_epsilon};
use crate::document::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::market::RoutingInstance;
use crate::optimality::{check_cq, verify_kkt};
use crate::scenarios::{example1, example2, PoolFunction};
use crate::solver::{solve_exact_enumeration, solve_relaxed, SolveOptions, SolveStatus};

/// A grid point is solver no-trade when the relaxed optimum is within this
/// of zero.
pub const NO_TRADE_TOL: f64 = 1e-6;

/// Equispaced values from `start` to `end` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(start: f64, end: f64, points: usize) -> Self {
        Self { start, end, points }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.points < 2 {
            return Err(Error::InvalidSweep(format!(
                "axis {name} needs at least 2 points"
            )));
        }
        if !(self.start.is_finite() && self.end.is_finite() && self.start < self.end) {
            return Err(Error::InvalidSweep(format!(
                "axis {name} range [{}, {}] is empty",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let step = (self.end - self.start) / (self.points - 1) as f64;
        (0..self.points)
            .map(|k| {
                if k + 1 == self.points {
                    self.end
                } else {
                    self.start + step * k as f64
                }
            })
            .collect()
    }

    pub fn step(&self) -> f64 {
        (self.end - self.start) / (self.points - 1) as f64
    }
}

/// The same fee on every market, or one fee per market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeeSetting {
    Uniform(f64),
    PerMarket(Vec<f64>),
}

impl FeeSetting {
    fn expand(&self, m: usize) -> Vec<f64> {
        match self {
            Self::Uniform(q) => vec![*q; m],
            Self::PerMarket(q) => q.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Uniform(q) => format!("{q}"),
            Self::PerMarket(q) => q
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Self::Uniform(q) => vec![*q],
            Self::PerMarket(q) => q.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// One six-asset pool, trader prices scaled by `t` and `s`.
    Example1 {
        phi: PoolFunction,
        t: Axis,
        s: Axis,
        gas: Vec<f64>,
    },
    /// The five-pool network, first trader price scaled by `t`.
    Example2 { t: Axis, gas: Vec<FeeSetting> },
}

const EXAMPLE2_MARKETS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub scenario: Scenario,
}

/// One point of a sweep: a fee setting and the price scalings.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub fee: FeeSetting,
    pub t: f64,
    pub s: Option<f64>,
}

impl SweepSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidSweep(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let fees: Vec<FeeSetting> = match &self.scenario {
            Scenario::Example1 { t, s, gas, .. } => {
                t.validate("t")?;
                s.validate("s")?;
                gas.iter().map(|&q| FeeSetting::Uniform(q)).collect()
            }
            Scenario::Example2 { t, gas } => {
                t.validate("t")?;
                for f in gas {
                    if let FeeSetting::PerMarket(q) = f {
                        if q.len() != EXAMPLE2_MARKETS {
                            return Err(Error::InvalidSweep(format!(
                                "{} per-market fees for {EXAMPLE2_MARKETS} markets",
                                q.len()
                            )));
                        }
                    }
                }
                gas.clone()
            }
        };
        if fees.is_empty() {
            return Err(Error::InvalidSweep("no gas fee settings".into()));
        }
        if let Some(q) = fees
            .iter()
            .flat_map(|f| f.values())
            .find(|q| !(q.is_finite() && *q >= 0.0))
        {
            return Err(Error::InvalidSweep(format!(
                "gas fee {q} is not a nonnegative number"
            )));
        }
        Ok(())
    }

    /// Grid points ordered by fee setting, then `t`, then `s`.
    pub fn points(&self) -> Vec<GridPoint> {
        match &self.scenario {
            Scenario::Example1 { t, s, gas, .. } => {
                let (tv, sv) = (t.values(), s.values());
                gas.iter()
                    .flat_map(|&q| {
                        let sv = &sv;
                        tv.iter().flat_map(move |&t| {
                            sv.iter().map(move |&s| GridPoint {
                                fee: FeeSetting::Uniform(q),
                                t,
                                s: Some(s),
                            })
                        })
                    })
                    .collect()
            }
            Scenario::Example2 { t, gas } => gas
                .iter()
                .flat_map(|f| {
                    t.values().into_iter().map(move |t| GridPoint {
                        fee: f.clone(),
                        t,
                        s: None,
                    })
                })
                .collect(),
        }
    }

    pub fn instance(&self, point: &GridPoint) -> Result<RoutingInstance> {
        match &self.scenario {
            Scenario::Example1 { phi, .. } => {
                let q = point.fee.expand(1)[0];
                example1(*phi, point.t, point.s.unwrap_or(1.0), q)
            }
            Scenario::Example2 { .. } => example2(point.t, &point.fee.expand(EXAMPLE2_MARKETS)),
        }
    }
}

/// One row of a no-trade map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapRow {
    pub gas: String,
    pub t: f64,
    pub s: Option<f64>,
    /// Every market holds a no-trade certificate.
    pub no_trade: bool,
    /// The relaxed optimum is zero up to `NO_TRADE_TOL`.
    pub solver_no_trade: bool,
    pub members: Vec<bool>,
    pub eta: Vec<f64>,
    pub objective: f64,
    pub rounded_objective: f64,
    pub epsilon: f64,
    pub cq: bool,
    pub kkt: bool,
    pub status: SolveStatus,
}

/// One row of a relaxation comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub gas: String,
    pub t: f64,
    pub s: Option<f64>,
    pub relaxed_objective: f64,
    pub rounded_objective: f64,
    pub exact_objective: f64,
    pub epsilon: f64,
    pub upper_margin: f64,
    pub lower_margin: f64,
    pub bound_margin: f64,
    pub holds: bool,
    pub status: SolveStatus,
}

fn map_point(
    spec: &SweepSpec,
    point: &GridPoint,
    options: &SolveOptions,
    kkt_tol: f64,
) -> Result<MapRow> {
    let inst = spec.instance(point)?;
    let certs = instance_certificates(&inst)?;
    let relaxed = solve_relaxed(&inst, options)?;
    let (_, rounded) = solve_rounded(&inst, &relaxed.plan.eta, options)?;
    let epsilon = epsilon_bound(&inst.gas_fees(), &relaxed.plan.eta)?.value;
    let kkt = verify_kkt(&inst, &relaxed.plan, kkt_tol)?;
    let no_trade = certs.iter().all(|c| c.member);
    let solver_no_trade = relaxed.objective.abs() <= NO_TRADE_TOL;
    if no_trade != solver_no_trade {
        let worst = certs.iter().map(|c| c.violation).fold(0.0, f64::max);
        warn!(
            "gas {} t {} s {:?}: certificate says {no_trade}, solver objective {:.3e} \
             (status {:?}, largest budget excess {worst:.3e})",
            point.fee.label(),
            point.t,
            point.s,
            relaxed.objective,
            relaxed.status
        );
    }
    Ok(MapRow {
        gas: point.fee.label(),
        t: point.t,
        s: point.s,
        no_trade,
        solver_no_trade,
        members: certs.iter().map(|c| c.member).collect(),
        eta: relaxed.plan.eta.clone(),
        objective: relaxed.objective,
        rounded_objective: rounded.objective,
        epsilon,
        cq: check_cq(&inst, &relaxed.plan).holds,
        kkt: kkt.pass,
        status: relaxed.status,
    })
}

/// Certificates and a relaxed solve at every grid point, in grid order.
pub fn no_trade_map(spec: &SweepSpec, options: &SolveOptions, kkt_tol: f64) -> Result<Vec<MapRow>> {
    spec.validate()?;
    spec.points()
        .par_iter()
        .map(|p| map_point(spec, p, options, kkt_tol))
        .collect()
}

fn compare_point(
    spec: &SweepSpec,
    point: &GridPoint,
    options: &SolveOptions,
) -> Result<CompareRow> {
    let inst = spec.instance(point)?;
    let relaxed = solve_relaxed(&inst, options)?;
    let exact = solve_exact_enumeration(&inst, options)?;
    let rep = verify_epsilon(&inst, &relaxed, &exact, options)?;
    let status = [relaxed.status, exact.status, rep.rounded.status]
        .into_iter()
        .find(|s| *s != SolveStatus::Converged)
        .unwrap_or(SolveStatus::Converged);
    Ok(CompareRow {
        gas: point.fee.label(),
        t: point.t,
        s: point.s,
        relaxed_objective: rep.relaxed_objective,
        rounded_objective: rep.rounded_objective,
        exact_objective: rep.exact_objective,
        epsilon: rep.bound.value,
        upper_margin: rep.upper_margin,
        lower_margin: rep.lower_margin,
        bound_margin: rep.bound_margin,
        holds: rep.holds(NO_TRADE_TOL),
        status,
    })
}

/// Relaxed, rounded and exact objectives at every grid point, in grid order.
pub fn compare(spec: &SweepSpec, options: &SolveOptions) -> Result<Vec<CompareRow>> {
    spec.validate()?;
    spec.points()
        .par_iter()
        .map(|p| compare_point(spec, p, options))
        .collect()
}

/// Contiguous runs of `t` values whose flag is set, as `(first, last)`.
pub fn flagged_intervals(ts: &[f64], flags: &[bool]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for (&t, &f) in ts.iter().zip(flags) {
        open = match (open, f) {
            (None, true) => Some((t, t)),
            (Some((a, _)), true) => Some((a, t)),
            (Some(run), false) => {
                out.push(run);
                None
            }
            (None, false) => None,
        };
    }
    out.extend(open);
    out
}

/// Seventeen significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIterations => "max_iterations",
        SolveStatus::Infeasible => "infeasible",
    }
}

pub const MAP_COLUMNS: &[&str] = &[
    "gas",
    "t",
    "s",
    "no_trade",
    "solver_no_trade",
    "objective",
    "rounded_objective",
    "epsilon",
    "cq",
    "kkt",
    "status",
];

pub const COMPARE_COLUMNS: &[&str] = &[
    "gas",
    "t",
    "s",
    "relaxed_objective",
    "rounded_objective",
    "exact_objective",
    "epsilon",
    "upper_margin",
    "lower_margin",
    "bound_margin",
    "holds",
    "status",
];

/// Writes map rows; `member_i` and `eta_i` columns follow the fixed ones.
pub fn write_map_csv<W: Write>(rows: &[MapRow], out: W) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.eta.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = MAP_COLUMNS.iter().map(|c| c.to_string()).collect();
    header.extend((0..m).map(|i| format!("member_{i}")));
    header.extend((0..m).map(|i| format!("eta_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.gas.clone(),
            fmt_float(r.t),
            fmt_opt(r.s),
            r.no_trade.to_string(),
            r.solver_no_trade.to_string(),
            fmt_float(r.objective),
            fmt_float(r.rounded_objective),
            fmt_float(r.epsilon),
            r.cq.to_string(),
            if r.kkt { "pass" } else { "fail" }.to_string(),
            status_name(r.status).to_string(),
        ];
        rec.extend(r.members.iter().map(|b| b.to_string()));
        rec.extend(r.eta.iter().map(|&e| fmt_float(e)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.gas.clone(),
            fmt_float(r.t),
            fmt_opt(r.s),
            fmt_float(r.relaxed_objective),
            fmt_float(r.rounded_objective),
            fmt_float(r.exact_objective),
            fmt_float(r.epsilon),
            fmt_float(r.upper_margin),
            fmt_float(r.lower_margin),
            fmt_float(r.bound_margin),
            r.holds.to_string(),
            status_name(r.status).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example2_spec(points: usize, gas: Vec<FeeSetting>) -> SweepSpec {
        SweepSpec::new(Scenario::Example2 {
            t: Axis::new(0.2, 9.0, points),
            gas,
        })
    }

    #[test]
    fn axis_values_hit_both_ends() {
        let v = Axis::new(0.2, 9.0, 200).values();
        assert_eq!(v.len(), 200);
        assert_eq!((v[0], v[199]), (0.2, 9.0));
        assert!((v[1] - v[0] - 8.8 / 199.0).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        let ok = example2_spec(3, vec![FeeSetting::Uniform(0.01)]);
        assert!(ok.validate().is_ok());
        assert!(example2_spec(1, vec![FeeSetting::Uniform(0.01)])
            .validate()
            .is_err());
        assert!(example2_spec(3, vec![]).validate().is_err());
        assert!(example2_spec(3, vec![FeeSetting::PerMarket(vec![0.1; 4])])
            .validate()
            .is_err());
        assert!(example2_spec(3, vec![FeeSetting::Uniform(-1.0)])
            .validate()
            .is_err());
        let reversed = SweepSpec::new(Scenario::Example2 {
            t: Axis::new(2.0, 1.0, 5),
            gas: vec![FeeSetting::Uniform(0.0)],
        });
        assert!(reversed.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = SweepSpec::new(Scenario::Example1 {
            phi: PoolFunction::QuasiArithmetic,
            t: Axis::new(0.0, 2.0, 80),
            s: Axis::new(0.0, 2.0, 80),
            gas: vec![0.05, 0.2],
        });
        let text = spec.to_json().unwrap();
        assert!(text.contains("\"kind\": \"example1\""));
        assert_eq!(SweepSpec::from_json(&text).unwrap(), spec);
        let mixed = example2_spec(
            5,
            vec![
                FeeSetting::Uniform(0.01),
                FeeSetting::PerMarket(vec![0.01, 0.01, 0.01, 9.4, 0.01]),
            ],
        );
        assert_eq!(
            SweepSpec::from_json(&mixed.to_json().unwrap()).unwrap(),
            mixed
        );
        assert!(
            SweepSpec::from_json(r#"{"schema_version": 1, "scenario": {"kind": "other"}}"#)
                .is_err()
        );
    }

    #[test]
    fn grid_order_is_fee_then_t_then_s() {
        let spec = SweepSpec::new(Scenario::Example1 {
            phi: PoolFunction::GeometricMean,
            t: Axis::new(0.0, 1.0, 2),
            s: Axis::new(0.0, 1.0, 3),
            gas: vec![0.1, 0.2],
        });
        let pts = spec.points();
        assert_eq!(pts.len(), 12);
        assert_eq!((pts[0].t, pts[0].s), (0.0, Some(0.0)));
        assert_eq!((pts[1].t, pts[1].s), (0.0, Some(0.5)));
        assert_eq!((pts[3].t, pts[3].s), (1.0, Some(0.0)));
        assert_eq!(pts[6].fee, FeeSetting::Uniform(0.2));
    }

    #[test]
    fn intervals() {
        let ts = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(
            flagged_intervals(&ts, &[false, true, true, false, true]),
            vec![(2.0, 3.0), (5.0, 5.0)]
        );
        assert!(flagged_intervals(&ts, &[false; 5]).is_empty());
    }

    #[test]
    fn map_rows_are_deterministic() {
        let spec = SweepSpec::new(Scenario::Example1 {
            phi: PoolFunction::GeometricMean,
            t: Axis::new(0.5, 1.5, 3),
            s: Axis::new(0.5, 1.5, 3),
            gas: vec![0.05],
        });
        let opts = SolveOptions::default();
        let render = || {
            let rows = no_trade_map(&spec, &opts, 1e-5).unwrap();
            let mut buf = Vec::new();
            write_map_csv(&rows, &mut buf).unwrap();
            (rows, buf)
        };
        let (rows, a) = render();
        let (_, b) = render();
        assert_eq!(a, b);
        let centre = &rows[4];
        assert_eq!((centre.t, centre.s), (1.0, Some(1.0)));
        assert!(centre.no_trade && centre.solver_no_trade);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("gas,t,s,no_trade,solver_no_trade,"));
        assert!(text.lines().next().unwrap().ends_with("member_0,eta_0"));
    }
}
