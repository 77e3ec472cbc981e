//! Minimum-cost reuse planning.
//!
//! Every node is assigned one of Compute, Load or Prune. A Compute node may
//! not have a Pruned parent, a node without a cached copy cannot be Loaded,
//! mandatory nodes are Computed and outputs are never Pruned. The objective
//! is the plain sum of compute and load times.
//!
//! [`assign_states_optimal`] solves the problem as a minimum s-t cut;
//! [`assign_states_bruteforce`] enumerates assignments and serves as the
//! reference for small graphs.
//!
//! Both planners break cost ties the same way: fewest Compute nodes first,
//! then the assignment that is lexicographically smallest when nodes are
//! taken in name order and states ranked Prune < Load < Compute.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maxflow::{Capacity, FlowNetwork};
use crate::workflow::Dag;

/// Largest graph the exhaustive planner accepts.
pub const BRUTEFORCE_MAX_NODES: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("node `{0}` is loaded but has no cached copy")]
    InfiniteCost(String),
    #[error("no cost record for node `{0}`")]
    MissingCost(String),
    #[error("no state for node `{0}`")]
    MissingState(String),
    #[error("`{0}` is not a node of the workflow")]
    UnknownNode(String),
    #[error("exhaustive planning is limited to {limit} nodes, got {nodes}")]
    TooLarge { nodes: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Prune,
    Load,
    Compute,
}

impl NodeState {
    pub const ALL: [NodeState; 3] = [NodeState::Prune, NodeState::Load, NodeState::Compute];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Prune => "prune",
            NodeState::Load => "load",
            NodeState::Compute => "compute",
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-node cost inputs. `load_seconds == None` means there is no cached
/// copy, i.e. an infinite load cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub compute_seconds: f64,
    #[serde(default)]
    pub load_seconds: Option<f64>,
    #[serde(default)]
    pub output_bytes: u64,
}

impl CostRecord {
    pub fn uncached(compute_seconds: f64, output_bytes: u64) -> Self {
        CostRecord {
            compute_seconds,
            load_seconds: None,
            output_bytes,
        }
    }

    pub fn cached(compute_seconds: f64, load_seconds: f64, output_bytes: u64) -> Self {
        CostRecord {
            compute_seconds,
            load_seconds: Some(load_seconds),
            output_bytes,
        }
    }

    pub fn is_cached(&self) -> bool {
        self.load_seconds.is_some()
    }

    /// Load time with the "no copy" case mapped to +inf.
    pub fn load_or_inf(&self) -> f64 {
        self.load_seconds.unwrap_or(f64::INFINITY)
    }
}

/// Seconds to whole microseconds. All cost arithmetic in the planners is
/// done on these integers so that different solvers agree exactly.
pub fn to_micros(seconds: f64) -> u64 {
    if seconds.is_finite() && seconds > 0.0 {
        (seconds * 1e6).round() as u64
    } else {
        0
    }
}

pub fn micros_to_seconds(micros: u64) -> f64 {
    micros as f64 / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub states: BTreeMap<String, NodeState>,
    pub total_cost_seconds: f64,
}

/// A broken plan invariant, reported by [`ExecutionPlan::violations`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingState(String),
    PrunedParent { node: String, parent: String },
    LoadWithoutCopy(String),
    MandatoryNotComputed(String),
    OutputPruned(String),
    CostMismatch,
}

impl ExecutionPlan {
    pub fn state(&self, name: &str) -> Option<NodeState> {
        self.states.get(name).copied()
    }

    pub fn nodes_in(&self, state: NodeState) -> BTreeSet<String> {
        self.states
            .iter()
            .filter(|(_, s)| **s == state)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn total_cost_micros(&self) -> u64 {
        to_micros(self.total_cost_seconds)
    }

    /// Every invariant a legal plan must satisfy, checked directly.
    pub fn violations(
        &self,
        dag: &Dag,
        costs: &BTreeMap<String, CostRecord>,
        mandatory: &BTreeSet<String>,
        sinks: &BTreeSet<String>,
    ) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, name) in dag.names().iter().enumerate() {
            let Some(state) = self.state(name) else {
                out.push(Violation::MissingState(name.clone()));
                continue;
            };
            if state == NodeState::Compute {
                for &p in dag.parents(i) {
                    if self.state(dag.name(p)) == Some(NodeState::Prune) {
                        out.push(Violation::PrunedParent {
                            node: name.clone(),
                            parent: dag.name(p).to_string(),
                        });
                    }
                }
            }
            if state == NodeState::Load && !costs.get(name).is_some_and(CostRecord::is_cached) {
                out.push(Violation::LoadWithoutCopy(name.clone()));
            }
            if mandatory.contains(name) && state != NodeState::Compute {
                out.push(Violation::MandatoryNotComputed(name.clone()));
            }
            if sinks.contains(name) && state == NodeState::Prune {
                out.push(Violation::OutputPruned(name.clone()));
            }
        }
        match plan_cost(&self.states, costs) {
            Ok(c) if to_micros(c) == self.total_cost_micros() => {}
            Ok(_) => out.push(Violation::CostMismatch),
            Err(_) => {}
        }
        out
    }
}

/// Objective value of an assignment: compute time of Compute nodes plus load
/// time of Load nodes.
pub fn plan_cost(
    states: &BTreeMap<String, NodeState>,
    costs: &BTreeMap<String, CostRecord>,
) -> Result<f64, PlanError> {
    let mut micros: u64 = 0;
    for (name, state) in states {
        let cost = || {
            costs
                .get(name)
                .ok_or_else(|| PlanError::MissingCost(name.clone()))
        };
        micros += match state {
            NodeState::Prune => 0,
            NodeState::Compute => to_micros(cost()?.compute_seconds),
            NodeState::Load => to_micros(
                cost()?
                    .load_seconds
                    .ok_or_else(|| PlanError::InfiniteCost(name.clone()))?,
            ),
        };
    }
    Ok(micros_to_seconds(micros))
}

/// Index-based view of a planning instance.
struct Problem {
    compute: Vec<u64>,
    load: Vec<Option<u64>>,
    mandatory: Vec<bool>,
    sink: Vec<bool>,
    /// Node indices sorted by name.
    by_name: Vec<usize>,
}

impl Problem {
    fn new(
        dag: &Dag,
        costs: &BTreeMap<String, CostRecord>,
        mandatory: &BTreeSet<String>,
        sinks: &BTreeSet<String>,
    ) -> Result<Self, PlanError> {
        for name in mandatory.iter().chain(sinks) {
            if dag.index_of(name).is_none() {
                return Err(PlanError::UnknownNode(name.clone()));
            }
        }
        let mut compute = Vec::with_capacity(dag.len());
        let mut load = Vec::with_capacity(dag.len());
        for name in dag.names() {
            let c = costs
                .get(name)
                .ok_or_else(|| PlanError::MissingCost(name.clone()))?;
            compute.push(to_micros(c.compute_seconds));
            load.push(c.load_seconds.map(to_micros));
        }
        let mut by_name: Vec<usize> = (0..dag.len()).collect();
        by_name.sort_by(|a, b| dag.name(*a).cmp(dag.name(*b)));
        Ok(Problem {
            compute,
            load,
            mandatory: dag.names().iter().map(|n| mandatory.contains(n)).collect(),
            sink: dag.names().iter().map(|n| sinks.contains(n)).collect(),
            by_name,
        })
    }

    fn into_plan(self, dag: &Dag, states: &[NodeState]) -> ExecutionPlan {
        let micros: u64 = states
            .iter()
            .enumerate()
            .map(|(i, s)| match s {
                NodeState::Prune => 0,
                NodeState::Load => self.load[i].expect("load of cached node"),
                NodeState::Compute => self.compute[i],
            })
            .sum();
        ExecutionPlan {
            states: dag
                .names()
                .iter()
                .cloned()
                .zip(states.iter().copied())
                .collect(),
            total_cost_seconds: micros_to_seconds(micros),
        }
    }
}

/// Minimum-cost legal assignment via a minimum s-t cut.
///
/// Network: per node `i` a vertex `v_i` (source side = Compute) and an
/// aggregator `a_i` (source side = output needed).
///
/// * `v_i -> T`, capacity `c_i`: paid when `i` is Computed.
/// * `a_i -> v_i`, capacity `l_i` (or infinity without a cached copy): paid
///   when `i` is needed but not Computed, i.e. Loaded.
/// * `v_j -> a_i`, infinite, for every child `j` of `i`: a Computed child
///   needs its parent.
/// * `S -> a_i`, infinite, for outputs; `S -> v_i`, infinite, for
///   mandatory nodes.
///
/// Costs are scaled by `n + 1` and each Compute edge carries one extra unit,
/// so the cut also minimises the number of Compute nodes among cost ties.
/// The remaining name-order tie-break is resolved by fixing nodes one at a
/// time to the smallest state that keeps the optimum reachable.
pub fn assign_states_optimal(
    dag: &Dag,
    costs: &BTreeMap<String, CostRecord>,
    mandatory: &BTreeSet<String>,
    sinks: &BTreeSet<String>,
) -> Result<ExecutionPlan, PlanError> {
    let problem = Problem::new(dag, costs, mandatory, sinks)?;
    let cut = CutModel::new(dag, &problem);
    let mut fixed: Vec<Option<NodeState>> = vec![None; dag.len()];
    let optimum = cut
        .min_cut(&fixed)
        .expect("computing every node is always feasible");
    for &i in &problem.by_name {
        for (k, state) in NodeState::ALL.iter().enumerate() {
            fixed[i] = Some(*state);
            if k == NodeState::ALL.len() - 1 || cut.min_cut(&fixed) == Some(optimum) {
                break;
            }
        }
    }
    let states: Vec<NodeState> = fixed.into_iter().map(|s| s.unwrap()).collect();
    let plan = problem.into_plan(dag, &states);
    debug_assert_eq!(
        plan.total_cost_micros() as u128 * (dag.len() as u128 + 1)
            + states.iter().filter(|s| **s == NodeState::Compute).count() as u128,
        optimum
    );
    Ok(plan)
}

struct CutModel<'a> {
    dag: &'a Dag,
    problem: &'a Problem,
    scale: Capacity,
    inf: Capacity,
}

const SOURCE: usize = 0;
const SINK: usize = 1;

fn v(i: usize) -> usize {
    2 + 2 * i
}

fn a(i: usize) -> usize {
    3 + 2 * i
}

impl<'a> CutModel<'a> {
    fn new(dag: &'a Dag, problem: &'a Problem) -> Self {
        let scale = dag.len() as Capacity + 1;
        let finite: Capacity = (0..dag.len())
            .map(|i| {
                problem.compute[i] as Capacity * scale
                    + 1
                    + problem.load[i].map_or(0, |l| l as Capacity * scale)
            })
            .sum();
        CutModel {
            dag,
            problem,
            scale,
            inf: finite + 1,
        }
    }

    /// Minimum cut value under the given per-node restrictions, or `None`
    /// when the restrictions admit no legal assignment.
    #[allow(clippy::needless_range_loop)]
    fn min_cut(&self, fixed: &[Option<NodeState>]) -> Option<Capacity> {
        let n = self.dag.len();
        let p = self.problem;
        let inf = self.inf;
        let mut g = FlowNetwork::new(2 + 2 * n);
        for i in 0..n {
            g.add_edge(v(i), SINK, p.compute[i] as Capacity * self.scale + 1);
            let load_cap = p.load[i].map_or(inf, |l| l as Capacity * self.scale);
            g.add_edge(a(i), v(i), load_cap);
            for &child in self.dag.children(i) {
                g.add_edge(v(child), a(i), inf);
            }
            if p.sink[i] {
                g.add_edge(SOURCE, a(i), inf);
            }
            if p.mandatory[i] {
                g.add_edge(SOURCE, v(i), inf);
            }
            match fixed[i] {
                None => {}
                Some(NodeState::Compute) => g.add_edge(SOURCE, v(i), inf),
                Some(NodeState::Load) => {
                    g.add_edge(v(i), SINK, inf);
                    g.add_edge(SOURCE, a(i), inf);
                }
                Some(NodeState::Prune) => {
                    g.add_edge(v(i), SINK, inf);
                    g.add_edge(a(i), SINK, inf);
                }
            }
        }
        let value = g.max_flow(SOURCE, SINK);
        (value < inf).then_some(value)
    }
}

/// Exhaustive reference planner.
///
/// Walks every assignment in lexicographic order (nodes by name, states
/// Prune < Load < Compute), discarding illegal ones as soon as a violated
/// constraint is fully assigned, and keeps the first assignment with the
/// smallest (cost, Compute count).
pub fn assign_states_bruteforce(
    dag: &Dag,
    costs: &BTreeMap<String, CostRecord>,
    mandatory: &BTreeSet<String>,
    sinks: &BTreeSet<String>,
) -> Result<ExecutionPlan, PlanError> {
    if dag.len() > BRUTEFORCE_MAX_NODES {
        return Err(PlanError::TooLarge {
            nodes: dag.len(),
            limit: BRUTEFORCE_MAX_NODES,
        });
    }
    let problem = Problem::new(dag, costs, mandatory, sinks)?;
    let n = dag.len();
    let order = problem.by_name.clone();
    let mut position = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        position[i] = pos;
    }
    // Edges checked once both endpoints are assigned, keyed by the later one.
    let mut checks: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for child in 0..n {
        for &parent in dag.parents(child) {
            checks[position[child].max(position[parent])].push((parent, child));
        }
    }
    let domains: Vec<Vec<NodeState>> = (0..n)
        .map(|i| {
            NodeState::ALL
                .iter()
                .copied()
                .filter(|s| match s {
                    NodeState::Prune => !problem.mandatory[i] && !problem.sink[i],
                    NodeState::Load => !problem.mandatory[i] && problem.load[i].is_some(),
                    NodeState::Compute => true,
                })
                .collect()
        })
        .collect();

    struct Search<'s> {
        order: &'s [usize],
        domains: &'s [Vec<NodeState>],
        checks: &'s [Vec<(usize, usize)>],
        problem: &'s Problem,
        states: Vec<NodeState>,
        best: Option<((u64, usize), Vec<NodeState>)>,
    }

    impl Search<'_> {
        fn run(&mut self, pos: usize, cost: u64, computes: usize) {
            if pos == self.order.len() {
                let key = (cost, computes);
                if self.best.as_ref().is_none_or(|(b, _)| key < *b) {
                    self.best = Some((key, self.states.clone()));
                }
                return;
            }
            let i = self.order[pos];
            for &state in &self.domains[i] {
                self.states[i] = state;
                let legal = self.checks[pos].iter().all(|&(parent, child)| {
                    !(self.states[child] == NodeState::Compute
                        && self.states[parent] == NodeState::Prune)
                });
                if !legal {
                    continue;
                }
                let (add, c) = match state {
                    NodeState::Prune => (0, 0),
                    NodeState::Load => (self.problem.load[i].unwrap(), 0),
                    NodeState::Compute => (self.problem.compute[i], 1),
                };
                self.run(pos + 1, cost + add, computes + c);
            }
        }
    }

    let mut search = Search {
        order: &order,
        domains: &domains,
        checks: &checks,
        problem: &problem,
        states: vec![NodeState::Prune; n],
        best: None,
    };
    search.run(0, 0, 0);
    let (_, states) = search.best.expect("computing every node is always legal");
    Ok(problem.into_plan(dag, &states))
}
