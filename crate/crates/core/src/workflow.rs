//! Workflow DAG model: the declarative spec document, validation, ordering
//! and dead-operator pruning.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest spec document version this crate understands.
pub const WORKFLOW_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("malformed workflow document: {0}")]
    Syntax(String),
    #[error("unsupported workflow version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("duplicate operator name `{0}`")]
    DuplicateName(String),
    #[error("operator `{node}` lists unknown parent `{parent}`")]
    UnknownParent { node: String, parent: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("workflow declares no outputs")]
    NoOutputs,
    #[error("output `{0}` is not a declared operator")]
    UnknownOutput(String),
    #[error("root operator `{0}` has no parents and declares no sources")]
    RootWithoutSource(String),
    #[error("workflow has no source operator")]
    NoSource,
    #[error("operator `{node}`: {reason}")]
    InvalidAction { node: String, reason: String },
}

/// What running an operator means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// An external process. `argv` may contain placeholders expanded by the
    /// executor (`{output}`, `{parents}`, `{parent:NAME}`, `{sources}`,
    /// `{workspace}`). `inputs` are extra workspace files the command reads
    /// (scripts, configs); their bytes are part of the operator definition.
    Command {
        argv: Vec<String>,
        #[serde(default)]
        inputs: Vec<String>,
        output: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        estimated_seconds: Option<f64>,
    },
    /// A synthetic operator with declared cost and output size.
    Simulated {
        compute_seconds: f64,
        output_bytes: u64,
    },
}

impl Action {
    pub fn is_simulated(&self) -> bool {
        matches!(self, Action::Simulated { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorNode {
    pub name: String,
    #[serde(default)]
    pub kind: String,
    pub action: Action,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default)]
    pub sources: Vec<String>,
    /// Opaque user-supplied fingerprint of the operator's environment
    /// (library versions and the like). Mixed into the node signature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_fingerprint: Option<String>,
}

impl OperatorNode {
    pub fn is_source(&self) -> bool {
        self.parents.is_empty() && !self.sources.is_empty()
    }
}

/// A validated workflow. Construct through [`parse_workflow`] or
/// [`WorkflowSpec::new`]; both enforce the structural invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    pub version: u32,
    pub nodes: Vec<OperatorNode>,
    pub outputs: Vec<String>,
}

/// Parse and validate a workflow document.
pub fn parse_workflow(text: &str) -> Result<WorkflowSpec, WorkflowError> {
    let spec: WorkflowSpec =
        serde_json::from_str(text).map_err(|e| WorkflowError::Syntax(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

impl WorkflowSpec {
    pub fn new(nodes: Vec<OperatorNode>, outputs: Vec<String>) -> Result<Self, WorkflowError> {
        let spec = WorkflowSpec {
            version: WORKFLOW_FORMAT_VERSION,
            nodes,
            outputs,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical JSON form; `parse_workflow(spec.to_json())` returns `spec`.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("workflow serializes");
        text.push('\n');
        text
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        if self.version == 0 || self.version > WORKFLOW_FORMAT_VERSION {
            return Err(WorkflowError::UnsupportedVersion {
                found: self.version,
                supported: WORKFLOW_FORMAT_VERSION,
            });
        }
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if !seen.insert(node.name.as_str()) {
                return Err(WorkflowError::DuplicateName(node.name.clone()));
            }
            validate_action(node)?;
        }
        for node in &self.nodes {
            if let Some(parent) = node.parents.iter().find(|p| !seen.contains(p.as_str())) {
                return Err(WorkflowError::UnknownParent {
                    node: node.name.clone(),
                    parent: parent.clone(),
                });
            }
            if node.parents.is_empty() && node.sources.is_empty() {
                return Err(WorkflowError::RootWithoutSource(node.name.clone()));
            }
        }
        if self.outputs.is_empty() {
            return Err(WorkflowError::NoOutputs);
        }
        if let Some(out) = self.outputs.iter().find(|o| !seen.contains(o.as_str())) {
            return Err(WorkflowError::UnknownOutput(out.clone()));
        }
        if !self.nodes.iter().any(OperatorNode::is_source) {
            return Err(WorkflowError::NoSource);
        }
        let edges = self.edges();
        Dag::new(self.nodes.iter().map(|n| n.name.clone()).collect(), &edges)?;
        Ok(())
    }

    pub fn node(&self, name: &str) -> Option<&OperatorNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// `(parent, child)` pairs, in declaration order.
    pub fn edges(&self) -> Vec<(String, String)> {
        self.nodes
            .iter()
            .flat_map(|n| n.parents.iter().map(move |p| (p.clone(), n.name.clone())))
            .collect()
    }

    pub fn dag(&self) -> Dag {
        Dag::new(
            self.nodes.iter().map(|n| n.name.clone()).collect(),
            &self.edges(),
        )
        .expect("validated workflow is acyclic")
    }

    pub fn output_set(&self) -> BTreeSet<String> {
        self.outputs.iter().cloned().collect()
    }

    /// Node names such that every node follows all of its parents; ties are
    /// broken by name.
    pub fn topological_order(&self) -> Vec<String> {
        topological_order(self)
    }

    pub fn prune_dead_operators(&self) -> (WorkflowSpec, BTreeSet<String>) {
        prune_dead_operators(self)
    }
}

fn validate_action(node: &OperatorNode) -> Result<(), WorkflowError> {
    let bad = |reason: &str| WorkflowError::InvalidAction {
        node: node.name.clone(),
        reason: reason.to_string(),
    };
    match &node.action {
        Action::Simulated {
            compute_seconds, ..
        } => {
            if !compute_seconds.is_finite() || *compute_seconds < 0.0 {
                return Err(bad("compute_seconds must be a finite non-negative number"));
            }
        }
        Action::Command {
            argv,
            output,
            estimated_seconds,
            ..
        } => {
            if argv.is_empty() {
                return Err(bad("argv is empty"));
            }
            if output.is_empty() {
                return Err(bad("output path is empty"));
            }
            if let Some(est) = estimated_seconds {
                if !est.is_finite() || *est < 0.0 {
                    return Err(bad(
                        "estimated_seconds must be a finite non-negative number",
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn topological_order(spec: &WorkflowSpec) -> Vec<String> {
    let dag = spec.dag();
    dag.topological_order()
        .into_iter()
        .map(|i| dag.name(i).to_string())
        .collect()
}

/// Drop every operator that cannot reach a declared output. Returns the
/// reduced spec (declaration order preserved) and the removed names.
pub fn prune_dead_operators(spec: &WorkflowSpec) -> (WorkflowSpec, BTreeSet<String>) {
    let dag = spec.dag();
    let outputs: Vec<usize> = spec
        .outputs
        .iter()
        .filter_map(|o| dag.index_of(o))
        .collect();
    let live = dag.ancestor_closure(&outputs);
    let mut kept = Vec::with_capacity(spec.nodes.len());
    let mut removed = BTreeSet::new();
    for (i, node) in spec.nodes.iter().enumerate() {
        if live[i] {
            kept.push(node.clone());
        } else {
            removed.insert(node.name.clone());
        }
    }
    let pruned = WorkflowSpec {
        version: spec.version,
        nodes: kept,
        outputs: spec.outputs.clone(),
    };
    (pruned, removed)
}

/// Index-based adjacency view of a workflow graph.
#[derive(Debug, Clone)]
pub struct Dag {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl Dag {
    /// Build from node names and `(parent, child)` edges. Fails on unknown
    /// endpoints, duplicate names or cycles.
    pub fn new(names: Vec<String>, edges: &[(String, String)]) -> Result<Self, WorkflowError> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(WorkflowError::DuplicateName(n.clone()));
            }
        }
        let mut parents = vec![Vec::new(); names.len()];
        let mut children = vec![Vec::new(); names.len()];
        for (p, c) in edges {
            let ci = *index.get(c).ok_or_else(|| WorkflowError::UnknownParent {
                node: c.clone(),
                parent: p.clone(),
            })?;
            let pi = *index.get(p).ok_or_else(|| WorkflowError::UnknownParent {
                node: c.clone(),
                parent: p.clone(),
            })?;
            if !parents[ci].contains(&pi) {
                parents[ci].push(pi);
                children[pi].push(ci);
            }
        }
        let dag = Dag {
            names,
            index,
            parents,
            children,
        };
        if let Some(cycle) = dag.find_cycle() {
            return Err(WorkflowError::CycleDetected(cycle));
        }
        Ok(dag)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// Kahn's algorithm with a min-heap on names for deterministic ties.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<(&str, usize)>> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| Reverse((self.names[i].as_str(), i)))
            .collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(Reverse((_, i))) = ready.pop() {
            order.push(i);
            for &c in &self.children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse((self.names[c].as_str(), c)));
                }
            }
        }
        order
    }

    /// Membership mask of `roots` plus all their ancestors.
    pub fn ancestor_closure(&self, roots: &[usize]) -> Vec<bool> {
        self.closure(roots, &self.parents)
    }

    /// Membership mask of `roots` plus all their descendants.
    pub fn descendant_closure(&self, roots: &[usize]) -> Vec<bool> {
        self.closure(roots, &self.children)
    }

    /// Strict ancestors of `i`, in index order.
    pub fn ancestors(&self, i: usize) -> Vec<usize> {
        let mask = self.ancestor_closure(&[i]);
        (0..self.len()).filter(|&j| j != i && mask[j]).collect()
    }

    fn closure(&self, roots: &[usize], adj: &[Vec<usize>]) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = roots.to_vec();
        while let Some(i) = stack.pop() {
            if !seen[i] {
                seen[i] = true;
                stack.extend(adj[i].iter().copied().filter(|&j| !seen[j]));
            }
        }
        seen
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut color = vec![0u8; self.len()];
        let mut path: Vec<usize> = Vec::new();
        let mut starts: Vec<usize> = (0..self.len()).collect();
        starts.sort_by(|a, b| self.names[*a].cmp(&self.names[*b]));
        for start in starts {
            if color[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            color[start] = 1;
            path.push(start);
            while let Some((node, next)) = stack.last_mut() {
                let node = *node;
                if let Some(&child) = self.children[node].get(*next) {
                    *next += 1;
                    match color[child] {
                        0 => {
                            color[child] = 1;
                            path.push(child);
                            stack.push((child, 0));
                        }
                        1 => {
                            let pos = path.iter().position(|&p| p == child).unwrap();
                            return Some(
                                path[pos..].iter().map(|&i| self.names[i].clone()).collect(),
                            );
                        }
                        _ => {}
                    }
                } else {
                    color[node] = 2;
                    path.pop();
                    stack.pop();
                }
            }
        }
        None
    }
}
