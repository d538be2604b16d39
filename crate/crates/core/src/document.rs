//! JSON documents for routing instances and trade plans.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "n": 3,
//!   "markets": [
//!     { "tokens": [0, 1], "reserves": [10.0, 1.0], "gamma": 0.99, "gas": 0.01,
//!       "phi": { "kind": "geometric_mean" } }
//!   ],
//!   "utility": { "pi": [1.0, 1.0, 1.0] }
//! }
//! ```
//!
//! Token indices are zero-based. A market without `bounds` gets `2 R / gamma`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Market, RoutingInstance, TradePlan, Utility};
use crate::trade_function::{ReserveVector, TradeFunctionKind, TradeFunctionSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDocument {
    pub schema_version: u32,
    pub n: usize,
    pub markets: Vec<MarketDocument>,
    pub utility: UtilityDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketDocument {
    pub tokens: Vec<usize>,
    pub reserves: Vec<f64>,
    pub gamma: f64,
    pub gas: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<f64>>,
    pub phi: TradeFunctionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityDocument {
    pub pi: Vec<f64>,
}

impl InstanceDocument {
    pub fn from_instance(instance: &RoutingInstance) -> Result<Self> {
        let pi = match &instance.utility {
            Utility::Linear { pi } => pi.clone(),
            Utility::Custom(_) => {
                return Err(Error::InvalidInstance(
                    "only linear utilities can be serialized".into(),
                ))
            }
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            n: instance.n,
            markets: instance
                .markets
                .iter()
                .map(|m| MarketDocument {
                    tokens: m.tokens.clone(),
                    reserves: m.reserves.to_vec(),
                    gamma: m.gamma,
                    gas: m.gas,
                    bounds: Some(m.bounds.clone()),
                    phi: m.trade_function.kind().clone(),
                })
                .collect(),
            utility: UtilityDocument { pi },
        })
    }

    pub fn to_instance(&self) -> Result<RoutingInstance> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInstance(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let markets = self
            .markets
            .iter()
            .enumerate()
            .map(|(id, md)| {
                let spec = TradeFunctionSpec::new(md.phi.clone(), md.tokens.len())?;
                let reserves = ReserveVector::new(md.reserves.clone())?;
                match &md.bounds {
                    Some(b) => Market::new(
                        id,
                        md.tokens.clone(),
                        reserves,
                        md.gamma,
                        md.gas,
                        b.clone(),
                        spec,
                    ),
                    None => Market::with_default_bounds(
                        id,
                        md.tokens.clone(),
                        reserves,
                        md.gamma,
                        md.gas,
                        spec,
                    ),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        RoutingInstance::new(self.n, markets, Utility::linear(self.utility.pi.clone())?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn parse_instance(text: &str) -> Result<RoutingInstance> {
    InstanceDocument::from_json(text)?.to_instance()
}

pub fn render_instance(instance: &RoutingInstance) -> Result<String> {
    InstanceDocument::from_instance(instance)?.to_json()
}

pub fn read_instance(path: &Path) -> Result<RoutingInstance> {
    parse_instance(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
}

impl From<&TradePlan> for PlanDocument {
    fn from(p: &TradePlan) -> Self {
        Self {
            x: p.x.clone(),
            y: p.y.clone(),
            eta: p.eta.clone(),
        }
    }
}

impl From<PlanDocument> for TradePlan {
    fn from(p: PlanDocument) -> Self {
        Self {
            x: p.x,
            y: p.y,
            eta: p.eta,
        }
    }
}

pub fn read_plan(path: &Path) -> Result<TradePlan> {
    let doc: PlanDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(doc.into())
}
