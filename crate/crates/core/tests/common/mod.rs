#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use iterflow::plan::Violation;
use iterflow::{Action, CostRecord, Dag, ExecutionPlan, OperatorNode, WorkflowSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn node_name(i: usize) -> String {
    format!("n{i:02}")
}

/// Random DAG over `n00..` with edges only from lower to higher index.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    for child in 1..n {
        for parent in 0..child {
            if rng.random_bool(density) {
                edges.push((node_name(parent), node_name(child)));
            }
        }
    }
    edges
}

/// One planner instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub dag: Dag,
    pub costs: BTreeMap<String, CostRecord>,
    pub mandatory: BTreeSet<String>,
    pub sinks: BTreeSet<String>,
}

/// Integer costs 0..=20 seconds, about half the nodes cached, random
/// mandatory and sink sets (at least one sink).
pub fn random_instance(rng: &mut ChaCha8Rng, max_nodes: usize) -> Instance {
    let n = rng.random_range(1..=max_nodes);
    let names: Vec<String> = (0..n).map(node_name).collect();
    let density = rng.random_range(0.1..0.6);
    let edges = random_edges(rng, n, density);
    let dag = Dag::new(names.clone(), &edges).expect("forward edges are acyclic");
    let mut costs = BTreeMap::new();
    for name in &names {
        let c = rng.random_range(0..=20u32) as f64;
        let record = if rng.random_bool(0.5) {
            CostRecord::cached(c, rng.random_range(0..=20u32) as f64, 1)
        } else {
            CostRecord::uncached(c, 1)
        };
        costs.insert(name.clone(), record);
    }
    let mandatory = names
        .iter()
        .filter(|_| rng.random_bool(0.2))
        .cloned()
        .collect();
    let mut sinks: BTreeSet<String> = names
        .iter()
        .filter(|_| rng.random_bool(0.25))
        .cloned()
        .collect();
    if sinks.is_empty() {
        sinks.insert(names[rng.random_range(0..n)].clone());
    }
    Instance {
        dag,
        costs,
        mandatory,
        sinks,
    }
}

pub fn violations(plan: &ExecutionPlan, inst: &Instance) -> Vec<Violation> {
    plan.violations(&inst.dag, &inst.costs, &inst.mandatory, &inst.sinks)
}

pub fn simulated(
    name: &str,
    kind: &str,
    parents: &[&str],
    compute: f64,
    bytes: u64,
) -> OperatorNode {
    OperatorNode {
        name: name.to_string(),
        kind: kind.to_string(),
        action: Action::Simulated {
            compute_seconds: compute,
            output_bytes: bytes,
        },
        parents: parents.iter().map(|p| p.to_string()).collect(),
        sources: if parents.is_empty() {
            vec![format!("src/{name}.txt")]
        } else {
            Vec::new()
        },
        env_fingerprint: None,
    }
}

/// Random all-simulated workflow whose sinks are the nodes without
/// children. Roots read `src/<name>.txt`.
pub fn random_workflow(rng: &mut ChaCha8Rng, max_nodes: usize) -> WorkflowSpec {
    let n = rng.random_range(1..=max_nodes);
    let density = rng.random_range(0.1..0.5);
    let edges = random_edges(rng, n, density);
    let mut nodes = Vec::new();
    for i in 0..n {
        let name = node_name(i);
        let parents: Vec<&str> = edges
            .iter()
            .filter(|(_, c)| *c == name)
            .map(|(p, _)| p.as_str())
            .collect();
        nodes.push(simulated(
            &name,
            "ml",
            &parents,
            rng.random_range(1..=20u32) as f64,
            rng.random_range(0..=4096),
        ));
    }
    let outputs = (0..n)
        .map(node_name)
        .filter(|name| !edges.iter().any(|(p, _)| p == name))
        .collect();
    WorkflowSpec::new(nodes, outputs).expect("random workflow is valid")
}

/// Write every declared source of `spec` under `workspace`.
pub fn write_sources(spec: &WorkflowSpec, workspace: &Path) {
    for node in &spec.nodes {
        for s in &node.sources {
            let path = workspace.join(s);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, format!("contents of {s}\n")).unwrap();
        }
    }
}

/// Digest of every file under `root` with its relative path, for
/// "nothing changed" checks.
pub fn tree_digest(root: &Path) -> String {
    let mut files = Vec::new();
    collect(root, root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        if !rel.ends_with('/') {
            h.update(fs::read(root.join(&rel)).unwrap());
        }
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.push(format!("{}/", path.strip_prefix(root).unwrap().display()));
            collect(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).unwrap().display().to_string());
        }
    }
}

/// Result of crashing `put` at every write boundary in turn.
#[derive(Debug, Default)]
pub struct FaultSweep {
    pub injection_points: usize,
    pub distinct_steps: BTreeSet<String>,
    pub violations: Vec<String>,
}

fn payload_bytes(len: usize, salt: u8) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt))
        .collect()
}

/// Every entry named by the on-disk manifest must have a complete payload
/// with exactly the bytes that were stored.
fn check_manifest(
    root: &Path,
    expected: &BTreeMap<String, Vec<u8>>,
    label: &str,
    out: &mut Vec<String>,
) {
    let manifest = match iterflow::cache::load_manifest(root) {
        Ok(m) => m,
        Err(e) => {
            out.push(format!("{label}: manifest unreadable: {e}"));
            return;
        }
    };
    for (sig, entry) in &manifest.entries {
        let path = root.join(&entry.payload_path);
        match fs::read(&path) {
            Ok(bytes) => {
                if bytes.len() as u64 != entry.output_bytes {
                    out.push(format!(
                        "{label}: {sig} is partial ({} of {})",
                        bytes.len(),
                        entry.output_bytes
                    ));
                } else if expected.get(sig.as_str()) != Some(&bytes) {
                    out.push(format!("{label}: {sig} has unexpected contents"));
                }
            }
            Err(_) => out.push(format!("{label}: {sig} references a missing payload")),
        }
    }
}

pub fn fault_injection_sweep() -> FaultSweep {
    use iterflow::{CacheStore, NodeSignature, WriteStep};
    use std::sync::{Arc, Mutex};

    let base_sig = NodeSignature::from_hex("aa".repeat(32));
    let sig = NodeSignature::from_hex("bb".repeat(32));
    let base = payload_bytes(1000, 1);
    // Four 64 KiB chunks.
    let payload = payload_bytes(200_000, 7);
    let expected: BTreeMap<String, Vec<u8>> = [
        (base_sig.as_str().to_string(), base.clone()),
        (sig.as_str().to_string(), payload.clone()),
    ]
    .into();

    let fresh = || {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CacheStore::open(dir.path()).unwrap();
        store
            .put(&base_sig, "base", &mut base.as_slice(), 1.0)
            .unwrap();
        (dir, store)
    };

    // Count the boundaries of one clean put.
    let seen = Arc::new(Mutex::new(Vec::<WriteStep>::new()));
    {
        let (_dir, mut store) = fresh();
        let log = seen.clone();
        store.set_fault_hook(Some(Box::new(move |s| {
            log.lock().unwrap().push(s);
            Ok(())
        })));
        store
            .put(&sig, "node", &mut payload.as_slice(), 1.0)
            .unwrap();
    }
    let steps = seen.lock().unwrap().clone();

    let mut sweep = FaultSweep::default();
    for (k, step) in steps.iter().enumerate() {
        let (dir, mut store) = fresh();
        let mut calls = 0usize;
        store.set_fault_hook(Some(Box::new(move |_| {
            calls += 1;
            if calls == k + 1 {
                Err(std::io::Error::other("injected crash"))
            } else {
                Ok(())
            }
        })));
        let label = format!("crash before {step:?} (#{k})");
        if store
            .put(&sig, "node", &mut payload.as_slice(), 1.0)
            .is_ok()
        {
            sweep
                .violations
                .push(format!("{label}: put reported success"));
        }
        drop(store);
        sweep.injection_points += 1;
        sweep.distinct_steps.insert(format!("{step:?}"));

        check_manifest(dir.path(), &expected, &label, &mut sweep.violations);
        match CacheStore::open(dir.path()) {
            Ok(mut reopened) => {
                check_manifest(
                    dir.path(),
                    &expected,
                    &format!("{label}, reopened"),
                    &mut sweep.violations,
                );
                if !reopened.contains(&base_sig) {
                    sweep
                        .violations
                        .push(format!("{label}: earlier entry lost"));
                }
                match reopened
                    .put(&sig, "node", &mut payload.as_slice(), 1.0)
                    .and_then(|_| reopened.get(&sig))
                {
                    Ok(bytes) if bytes == payload => {}
                    Ok(_) => sweep
                        .violations
                        .push(format!("{label}: retry stored wrong bytes")),
                    Err(e) => sweep.violations.push(format!("{label}: retry failed: {e}")),
                }
            }
            Err(e) => sweep
                .violations
                .push(format!("{label}: reopen failed: {e}")),
        }
    }
    sweep
}
