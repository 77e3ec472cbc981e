use pyo3::prelude::*;
use pyo3::types::PyModule;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyModule>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "iterflow_py").unwrap();
        iterflow_py::register(&m).unwrap();
        f(py, &m);
    });
}

const DIAMOND: &str = r#"{
  "version": 1,
  "nodes": [
    {"name": "a", "kind": "data-preprocessing", "action": {"type": "simulated", "compute_seconds": 4.0, "output_bytes": 10}, "sources": ["a.txt"]},
    {"name": "b", "kind": "ml", "action": {"type": "simulated", "compute_seconds": 3.0, "output_bytes": 10}, "parents": ["a"]},
    {"name": "c", "kind": "ml", "action": {"type": "simulated", "compute_seconds": 2.0, "output_bytes": 10}, "parents": ["a"]},
    {"name": "d", "kind": "evaluation", "action": {"type": "simulated", "compute_seconds": 1.0, "output_bytes": 10}, "parents": ["b", "c"]}
  ],
  "outputs": ["d"]
}"#;

#[test]
fn planner_through_python() {
    with_module(|py, m| {
        let locals = pyo3::types::PyDict::new(py);
        locals.set_item("m", m).unwrap();
        locals.set_item("text", DIAMOND).unwrap();
        py.run(
            c"
wf = m.Workflow.from_json(text)
assert wf.nodes == ['a', 'b', 'c', 'd']
costs = {'a': (4.0, None), 'b': (3.0, 1.0), 'c': (2.0, None), 'd': (1.0, None)}
fast = m.plan_optimal(wf, costs, {'d'})
slow = m.plan_bruteforce(wf, costs, {'d'})
assert fast == slow, (fast, slow)
assert fast['total_cost_seconds'] == 8.0
assert fast['states'] == {'a': 'compute', 'b': 'load', 'c': 'compute', 'd': 'compute'}
assert m.r_value(wf, {'a': (1.0, 1.0), 'b': (2.0, 1.0), 'c': (1.0, 1.0), 'd': (1.0, 0.5)}, 'b') == 1.0
",
            None,
            Some(&locals),
        )
        .unwrap();
    });
}

#[test]
fn errors_become_exceptions() {
    with_module(|py, m| {
        let err = m
            .getattr("Workflow")
            .unwrap()
            .call_method1("from_json", ("{\"version\": 1}",))
            .unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}
