mod common;

use std::collections::BTreeSet;
use std::fs;

use iterflow::{compute_signatures, diff_iterations};
use rand::Rng;

use common::{random_workflow, rng, write_sources};

#[test]
fn single_edit_changes_node_and_descendants() {
    let mut r = rng(11);
    for _ in 0..200 {
        let spec = random_workflow(&mut r, 12);
        let dir = tempfile::tempdir().unwrap();
        write_sources(&spec, dir.path());
        let before = compute_signatures(&spec, dir.path()).unwrap();

        let target = r.random_range(0..spec.nodes.len());
        let mut edited = spec.clone();
        let node = &mut edited.nodes[target];
        if !node.sources.is_empty() && r.random_bool(0.5) {
            let path = dir.path().join(&node.sources[0]);
            fs::write(&path, b"edited bytes\n").unwrap();
        } else {
            node.env_fingerprint = Some("edited".into());
        }
        let after = compute_signatures(&edited, dir.path()).unwrap();
        let changes = diff_iterations(&before, &after);

        let dag = spec.dag();
        let i = dag.index_of(&spec.nodes[target].name).unwrap();
        let mask = dag.descendant_closure(&[i]);
        let expect: BTreeSet<String> = (0..dag.len())
            .filter(|&j| mask[j])
            .map(|j| dag.name(j).to_string())
            .collect();
        assert_eq!(changes.changed, expect);
        assert!(changes.added.is_empty() && changes.deleted.is_empty());
        assert_eq!(
            changes.changed.len() + changes.unchanged.len(),
            spec.nodes.len()
        );
    }
}
