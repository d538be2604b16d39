//! Optimal routing across constant function market makers with fixed gas
//! fees.

pub mod analysis;
pub mod cli;
pub mod document;
pub mod error;
pub mod lambert;
pub mod market;
pub mod optimality;
pub mod scenarios;
pub mod solver;
pub mod sweep;
pub mod trade_function;

pub use error::{Error, Result};
pub use market::{Market, RoutingInstance, TradePlan, Utility};
pub use solver::{SolveOptions, SolveResult, SolveStatus};
pub use trade_function::{ReserveVector, TradeFunctionKind, TradeFunctionSpec};
