//! Recursive content signatures and cross-iteration change detection.
//!
//! A node's signature hashes its own definition together with the ordered
//! signatures of its parents, so an edit anywhere upstream changes every
//! downstream signature. Source file bytes and command input files are
//! streamed into the hash of the node that declares them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::workflow::{Action, OperatorNode, WorkflowSpec};

/// Identifier recorded in cache manifests. A manifest written with a
/// different algorithm is treated as empty.
pub const HASH_ALGORITHM: &str = "sha256";

const DOMAIN_TAG: &[u8] = b"iterflow.node-signature.v1\0";

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("declared source `{}` is missing", .0.display())]
    MissingSource(PathBuf),
    #[error("reading `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// 256-bit content hash, lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeSignature(String);

impl NodeSignature {
    pub fn from_hex(hex: impl Into<String>) -> Self {
        NodeSignature(hex.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Two-character fan-out prefix used by the cache layout.
    pub fn prefix(&self) -> &str {
        &self.0[..2.min(self.0.len())]
    }
}

impl fmt::Display for NodeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The parts of an operator that define what it computes. `kind` is a
/// reporting label and is deliberately not part of it.
#[derive(Serialize)]
struct CanonicalDefinition<'a> {
    name: &'a str,
    action: &'a Action,
    parents: &'a [String],
    sources: &'a [String],
    env_fingerprint: Option<&'a str>,
}

pub fn compute_signatures(
    spec: &WorkflowSpec,
    workspace: &Path,
) -> Result<BTreeMap<String, NodeSignature>, SignatureError> {
    let dag = spec.dag();
    let mut sigs: BTreeMap<String, NodeSignature> = BTreeMap::new();
    for i in dag.topological_order() {
        let node = spec.node(dag.name(i)).expect("dag built from spec");
        let parent_sigs: Vec<&NodeSignature> = node.parents.iter().map(|p| &sigs[p]).collect();
        let sig = node_signature(node, &parent_sigs, workspace)?;
        sigs.insert(node.name.clone(), sig);
    }
    Ok(sigs)
}

/// Signature of one node given its parents' signatures (in declared parent
/// order).
pub fn node_signature(
    node: &OperatorNode,
    parent_sigs: &[&NodeSignature],
    workspace: &Path,
) -> Result<NodeSignature, SignatureError> {
    let mut hasher = Sha256::new();
    hasher.update(DOMAIN_TAG);
    let definition = CanonicalDefinition {
        name: &node.name,
        action: &node.action,
        parents: &node.parents,
        sources: &node.sources,
        env_fingerprint: node.env_fingerprint.as_deref(),
    };
    let def = serde_json::to_vec(&definition).expect("definition serializes");
    hash_framed(&mut hasher, &def);
    for sig in parent_sigs {
        hash_framed(&mut hasher, sig.as_str().as_bytes());
    }
    for src in &node.sources {
        hash_file(&mut hasher, workspace, src)?;
    }
    if let Action::Command { inputs, .. } = &node.action {
        for input in inputs {
            hash_file(&mut hasher, workspace, input)?;
        }
    }
    Ok(NodeSignature(hex::encode(hasher.finalize())))
}

fn hash_framed(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

fn hash_file(hasher: &mut Sha256, workspace: &Path, rel: &str) -> Result<(), SignatureError> {
    let path = workspace.join(rel);
    let mut file = File::open(&path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => SignatureError::MissingSource(path.clone()),
        _ => SignatureError::Io {
            path: path.clone(),
            source: e,
        },
    })?;
    // Content digest framed by its path, so moving bytes between files is a
    // change.
    let mut content = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| SignatureError::Io {
            path: path.clone(),
            source: e,
        })?;
        if n == 0 {
            break;
        }
        content.update(&buf[..n]);
    }
    hash_framed(hasher, rel.as_bytes());
    hasher.update(content.finalize());
    Ok(())
}

/// Nodes of the current iteration, split by whether their signature
/// survived from the previous one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub changed: BTreeSet<String>,
    pub unchanged: BTreeSet<String>,
    pub added: BTreeSet<String>,
    pub deleted: BTreeSet<String>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.deleted.is_empty()
    }
}

pub fn diff_iterations(
    previous: &BTreeMap<String, NodeSignature>,
    current: &BTreeMap<String, NodeSignature>,
) -> ChangeSet {
    let mut set = ChangeSet::default();
    for (name, sig) in current {
        match previous.get(name) {
            Some(prev) if prev == sig => {
                set.unchanged.insert(name.clone());
            }
            Some(_) => {
                set.changed.insert(name.clone());
            }
            None => {
                set.changed.insert(name.clone());
                set.added.insert(name.clone());
            }
        }
    }
    set.deleted = previous
        .keys()
        .filter(|k| !current.contains_key(*k))
        .cloned()
        .collect();
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::parse_workflow;

    const CHAIN: &str = r#"{"version":1,"nodes":[
        {"name":"a","kind":"data-preprocessing","action":{"type":"simulated","compute_seconds":1,"output_bytes":1},"sources":["a.txt"]},
        {"name":"b","kind":"ml","action":{"type":"simulated","compute_seconds":2,"output_bytes":1},"parents":["a"]},
        {"name":"c","kind":"evaluation","action":{"type":"simulated","compute_seconds":3,"output_bytes":1},"parents":["b"]}],
        "outputs":["c"]}"#;

    fn workspace() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        dir
    }

    #[test]
    fn deterministic() {
        let ws = workspace();
        let spec = parse_workflow(CHAIN).unwrap();
        let one = compute_signatures(&spec, ws.path()).unwrap();
        let two = compute_signatures(&spec, ws.path()).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.len(), 3);
        assert!(one.values().all(|s| s.as_str().len() == 64));
    }

    #[test]
    fn source_byte_flip_propagates() {
        let ws = workspace();
        let spec = parse_workflow(CHAIN).unwrap();
        let before = compute_signatures(&spec, ws.path()).unwrap();
        std::fs::write(ws.path().join("a.txt"), b"hellp").unwrap();
        let after = compute_signatures(&spec, ws.path()).unwrap();
        for n in ["a", "b", "c"] {
            assert_ne!(before[n], after[n], "{n}");
        }
        let diff = diff_iterations(&before, &after);
        assert_eq!(diff.changed.len(), 3);
    }

    #[test]
    fn leaf_edit_is_local() {
        let ws = workspace();
        let spec = parse_workflow(CHAIN).unwrap();
        let before = compute_signatures(&spec, ws.path()).unwrap();
        let edited =
            parse_workflow(&CHAIN.replace("\"compute_seconds\":3", "\"compute_seconds\":4"))
                .unwrap();
        let after = compute_signatures(&edited, ws.path()).unwrap();
        assert_eq!(before["a"], after["a"]);
        assert_eq!(before["b"], after["b"]);
        assert_ne!(before["c"], after["c"]);
    }

    #[test]
    fn env_fingerprint_participates() {
        let ws = workspace();
        let spec = parse_workflow(CHAIN).unwrap();
        let before = compute_signatures(&spec, ws.path()).unwrap();
        let mut edited = spec.clone();
        edited.nodes[1].env_fingerprint = Some("numpy==2.1".into());
        let after = compute_signatures(&edited, ws.path()).unwrap();
        assert_eq!(before["a"], after["a"]);
        assert_ne!(before["b"], after["b"]);
        assert_ne!(before["c"], after["c"]);
    }

    #[test]
    fn kind_label_does_not_participate() {
        let ws = workspace();
        let spec = parse_workflow(CHAIN).unwrap();
        let mut relabeled = spec.clone();
        relabeled.nodes[2].kind = "reporting".into();
        assert_eq!(
            compute_signatures(&spec, ws.path()).unwrap(),
            compute_signatures(&relabeled, ws.path()).unwrap()
        );
    }

    #[test]
    fn declaration_order_is_irrelevant() {
        let ws = workspace();
        let spec = parse_workflow(CHAIN).unwrap();
        let mut shuffled = spec.clone();
        shuffled.nodes.reverse();
        assert_eq!(
            compute_signatures(&spec, ws.path()).unwrap(),
            compute_signatures(&shuffled, ws.path()).unwrap()
        );
    }

    #[test]
    fn missing_source() {
        let ws = tempfile::tempdir().unwrap();
        let spec = parse_workflow(CHAIN).unwrap();
        match compute_signatures(&spec, ws.path()) {
            Err(SignatureError::MissingSource(p)) => assert!(p.ends_with("a.txt")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diff_identity_and_cold_start() {
        let ws = workspace();
        let spec = parse_workflow(CHAIN).unwrap();
        let sigs = compute_signatures(&spec, ws.path()).unwrap();
        let same = diff_iterations(&sigs, &sigs);
        assert!(same.changed.is_empty());
        assert_eq!(same.unchanged.len(), 3);
        assert!(same.is_empty());

        let cold = diff_iterations(&BTreeMap::new(), &sigs);
        assert_eq!(cold.changed.len(), 3);
        assert_eq!(cold.added, cold.changed);
        assert!(cold.unchanged.is_empty());
    }

    #[test]
    fn deleted_nodes_reported() {
        let mut prev = BTreeMap::new();
        prev.insert("gone".to_string(), NodeSignature::from_hex("00"));
        prev.insert("kept".to_string(), NodeSignature::from_hex("11"));
        let mut cur = BTreeMap::new();
        cur.insert("kept".to_string(), NodeSignature::from_hex("11"));
        let d = diff_iterations(&prev, &cur);
        assert_eq!(d.deleted, BTreeSet::from(["gone".to_string()]));
        assert_eq!(d.unchanged, BTreeSet::from(["kept".to_string()]));
    }
}
