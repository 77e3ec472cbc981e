//! Workflows bundled for the simulator.
//!
//! Both are all-simulated DAGs whose cold-run compute splits roughly
//! 70/20/10 across pre-processing, ml and evaluation nodes. Output sizes are
//! in kilobytes and paired with a slow virtual disk, so load and write times
//! land on the same scale as compute without the simulator moving megabytes.

use crate::workflow::{parse_workflow, WorkflowSpec};

/// Virtual disk speed for the bundled scenarios, in bytes per second.
pub const SCENARIO_DISK_BANDWIDTH: f64 = 1000.0;

/// Information-extraction pipeline: a deep NLP pre-processing chain feeding
/// a factor graph whose grounding and marginals are large.
pub const IE: &str = "ie";

/// Text classification: parallel feature extractors, two models and an
/// ensemble.
pub const CLASSIFICATION: &str = "classification";

pub const SCENARIO_NAMES: [&str; 2] = [IE, CLASSIFICATION];

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: &'static str,
    pub spec: WorkflowSpec,
    pub disk_bandwidth: f64,
}

pub fn scenario_json(name: &str) -> Option<&'static str> {
    match name {
        IE => Some(include_str!("../scenarios/ie.json")),
        CLASSIFICATION => Some(include_str!("../scenarios/classification.json")),
        _ => None,
    }
}

pub fn scenario(name: &str) -> Option<Scenario> {
    let name = SCENARIO_NAMES.into_iter().find(|n| *n == name)?;
    let spec = parse_workflow(scenario_json(name)?).expect("bundled scenario parses");
    Some(Scenario {
        name,
        spec,
        disk_bandwidth: SCENARIO_DISK_BANDWIDTH,
    })
}
