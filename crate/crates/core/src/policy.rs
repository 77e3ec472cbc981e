//! Online materialization decisions under a storage budget.
//!
//! When a node finishes computing, its recompute-chain value is
//!
//! ```text
//! r = (c_node + sum of c over all ancestors) - 2 * l_node
//! ```
//!
//! i.e. what a future load would save over recomputing the node and
//! everything above it, minus one write and one read of the output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::CostRecord;
use crate::workflow::Dag;

/// Disk bandwidth assumed for load-time estimates when nothing was measured.
pub const DEFAULT_DISK_BANDWIDTH: f64 = 100.0 * 1000.0 * 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("no compute cost known for `{0}`")]
    UnknownCost(String),
    #[error("no load estimate for `{0}`")]
    UnknownLoadCost(String),
    #[error("`{0}` is not a node of the workflow")]
    UnknownNode(String),
}

/// Which sign of `r` triggers materialization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyDirection {
    /// Materialize when `r > 0`: reuse saves more than it costs.
    #[default]
    SavingsPositive,
    /// Materialize when `r < 0`.
    SavingsNegative,
}

impl PolicyDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyDirection::SavingsPositive => "savings-positive",
            PolicyDirection::SavingsNegative => "savings-negative",
        }
    }
}

impl FromStr for PolicyDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "savings-positive" => Ok(PolicyDirection::SavingsPositive),
            "savings-negative" => Ok(PolicyDirection::SavingsNegative),
            other => Err(format!(
                "unknown policy direction `{other}` (expected savings-positive or savings-negative)"
            )),
        }
    }
}

/// Run-level materialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyConfig {
    Engine(PolicyDirection),
    MaterializeAll,
    MaterializeNone,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::Engine(PolicyDirection::default())
    }
}

impl PolicyConfig {
    pub fn label(self) -> &'static str {
        match self {
            PolicyConfig::Engine(PolicyDirection::SavingsPositive) => "engine",
            PolicyConfig::Engine(PolicyDirection::SavingsNegative) => "engine-negative",
            PolicyConfig::MaterializeAll => "materialize-all",
            PolicyConfig::MaterializeNone => "materialize-none",
        }
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PolicyConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "engine" => Ok(PolicyConfig::Engine(PolicyDirection::SavingsPositive)),
            "engine-negative" => Ok(PolicyConfig::Engine(PolicyDirection::SavingsNegative)),
            "materialize-all" | "all" => Ok(PolicyConfig::MaterializeAll),
            "materialize-none" | "none" => Ok(PolicyConfig::MaterializeNone),
            other => Err(format!(
                "unknown policy `{other}` (expected engine, engine-negative, materialize-all, materialize-none)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageBudget {
    pub capacity_bytes: u64,
    pub used_bytes: u64,
}

impl StorageBudget {
    pub fn new(capacity_bytes: u64, used_bytes: u64) -> Self {
        StorageBudget {
            capacity_bytes,
            used_bytes: used_bytes.min(capacity_bytes),
        }
    }

    pub fn unlimited() -> Self {
        StorageBudget::new(u64::MAX, 0)
    }

    pub fn remaining(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }

    pub fn fits(&self, bytes: u64) -> bool {
        bytes <= self.remaining()
    }

    /// Account for a write the caller actually performed.
    pub fn charge(&mut self, decision: &MaterializationDecision) {
        debug_assert!(self.fits(decision.bytes_charged));
        self.used_bytes += decision.bytes_charged;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializationDecision {
    pub node: String,
    pub r_value: f64,
    pub materialize: bool,
    pub bytes_charged: u64,
}

/// Read access to per-node costs. Implemented for plain maps; tests wrap it
/// to observe which nodes a decision consults.
pub trait CostLookup {
    fn cost(&self, node: &str) -> Option<CostRecord>;
}

impl CostLookup for BTreeMap<String, CostRecord> {
    fn cost(&self, node: &str) -> Option<CostRecord> {
        self.get(node).copied()
    }
}

pub fn estimate_load_seconds(output_bytes: u64, disk_bandwidth: f64) -> f64 {
    output_bytes as f64 / disk_bandwidth
}

pub fn r_value(node: &str, costs: &impl CostLookup, dag: &Dag) -> Result<f64, PolicyError> {
    let i = dag
        .index_of(node)
        .ok_or_else(|| PolicyError::UnknownNode(node.to_string()))?;
    let own = costs
        .cost(node)
        .ok_or_else(|| PolicyError::UnknownCost(node.to_string()))?;
    let load = own
        .load_seconds
        .ok_or_else(|| PolicyError::UnknownLoadCost(node.to_string()))?;
    let mut chain = own.compute_seconds;
    for j in dag.ancestors(i) {
        let name = dag.name(j);
        chain += costs
            .cost(name)
            .ok_or_else(|| PolicyError::UnknownCost(name.to_string()))?
            .compute_seconds;
    }
    Ok(chain - 2.0 * load)
}

/// Decide whether to persist `node`'s freshly computed output. Only the
/// node's own record and its ancestors' compute costs are consulted.
pub fn decide(
    node: &str,
    costs: &impl CostLookup,
    dag: &Dag,
    budget: &StorageBudget,
    direction: PolicyDirection,
) -> Result<MaterializationDecision, PolicyError> {
    let r = r_value(node, costs, dag)?;
    let worthwhile = match direction {
        PolicyDirection::SavingsPositive => r > 0.0,
        PolicyDirection::SavingsNegative => r < 0.0,
    };
    let bytes = costs.cost(node).map_or(0, |c| c.output_bytes);
    Ok(finish(node, r, worthwhile && budget.fits(bytes), bytes))
}

/// Apply a run-level policy. Baselines still report `r` when it can be
/// computed.
pub fn decide_with(
    policy: PolicyConfig,
    node: &str,
    costs: &impl CostLookup,
    dag: &Dag,
    budget: &StorageBudget,
) -> Result<MaterializationDecision, PolicyError> {
    match policy {
        PolicyConfig::Engine(direction) => decide(node, costs, dag, budget, direction),
        PolicyConfig::MaterializeAll | PolicyConfig::MaterializeNone => {
            let r = r_value(node, costs, dag)?;
            let bytes = costs.cost(node).map_or(0, |c| c.output_bytes);
            let want = policy == PolicyConfig::MaterializeAll;
            Ok(finish(node, r, want && budget.fits(bytes), bytes))
        }
    }
}

fn finish(node: &str, r: f64, materialize: bool, bytes: u64) -> MaterializationDecision {
    MaterializationDecision {
        node: node.to_string(),
        r_value: r,
        materialize,
        bytes_charged: if materialize { bytes } else { 0 },
    }
}
