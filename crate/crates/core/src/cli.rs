//! The `iterflow` command line.
//!
//! Exit codes: 0 success, 1 an operator failed, 2 bad usage or workflow,
//! 3 the cache is locked by another writer.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cache::{CacheError, CacheStore};
use crate::engine::{prepare_iteration, read_spec, run_iteration_spec, PreparedIteration};
use crate::executor::{ClockMode, ExecError, NodeOutcome, NoopObserver, RunConfig, RunReport};
use crate::plan::NodeState;
use crate::policy::{PolicyConfig, PolicyDirection, DEFAULT_DISK_BANDWIDTH};
use crate::scenarios::{scenario, SCENARIO_DISK_BANDWIDTH};
use crate::signature::ChangeSet;
use crate::sim::{
    format_csv, format_table, generate_trace, simulate, SimulationConfig, DEFAULT_KIND_FREQUENCIES,
};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OPERATOR_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_LOCKED: i32 = 3;

/// Environment variable that overrides the cache root.
pub const CACHE_ENV: &str = "ITERFLOW_CACHE";

/// Cache directory used when nothing else names one, relative to the
/// workspace.
pub const DEFAULT_CACHE_DIR: &str = ".iterflow";

#[derive(Debug, Parser)]
#[command(
    name = "iterflow",
    version,
    about = "Iteration-aware workflow runner with intermediate reuse"
)]
pub struct Cli {
    /// TOML file with defaults for any of the workflow options.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one iteration of the workflow.
    Run(RunArgs),
    /// Show the execution plan without running anything.
    Plan(WorkflowArgs),
    /// Show what changed since the last successful run.
    Diff(WorkflowArgs),
    /// Inspect or clean the cache.
    Cache {
        #[command(subcommand)]
        action: CacheCommand,
    },
    /// Compare materialization policies on a synthetic edit trace.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct WorkflowArgs {
    /// Workflow file.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Directory operators run in; source paths are relative to it.
    #[arg(long, value_name = "DIR")]
    pub workspace: Option<PathBuf>,
    /// Cache root (default: <workspace>/.iterflow).
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Storage budget for materialized intermediates.
    #[arg(long, value_name = "BYTES")]
    pub budget_bytes: Option<u64>,
    /// Sign convention of the materialization rule.
    #[arg(long, value_name = "DIRECTION")]
    pub policy_direction: Option<PolicyDirection>,
    /// real or simulated.
    #[arg(long, value_name = "MODE")]
    pub clock: Option<ClockMode>,
    /// Bytes per second assumed when estimating load times.
    #[arg(long, value_name = "BYTES_PER_SEC")]
    pub disk_bandwidth: Option<f64>,
    /// Print machine-readable JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub workflow: WorkflowArgs,
    /// Print the plan and stop; the cache is not touched.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum CacheCommand {
    /// List cached intermediates.
    Ls(CacheArgs),
    /// Remove unreferenced files; with --keep-latest also drop entries not
    /// produced by the last successful run.
    Gc {
        #[command(flatten)]
        cache: CacheArgs,
        #[arg(long)]
        keep_latest: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CacheArgs {
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub workspace: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Bundled scenario name (ie, classification) or a workflow file whose
    /// actions are all simulated.
    #[arg(long, default_value = "ie")]
    pub scenario: String,
    /// Comma-separated policies: engine, engine-negative, materialize-all,
    /// materialize-none.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "engine,materialize-all,materialize-none"
    )]
    pub policies: Vec<PolicyConfig>,
    /// Number of edit iterations after the initial run.
    #[arg(short = 'n', long = "iterations", default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Edit-kind mix as pre-processing,ml,evaluation.
    #[arg(long, value_delimiter = ',', num_args = 3, value_name = "P,M,E")]
    pub frequencies: Option<Vec<f64>>,
    #[arg(long, value_name = "BYTES")]
    pub budget_bytes: Option<u64>,
    /// Write the curves as CSV here.
    #[arg(long, value_name = "FILE")]
    pub data_out: Option<PathBuf>,
}

/// Defaults read from `--config`. Flags win over these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub spec: Option<PathBuf>,
    pub workspace: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub budget_bytes: Option<u64>,
    pub policy_direction: Option<PolicyDirection>,
    pub clock: Option<ClockMode>,
    pub disk_bandwidth: Option<f64>,
}

/// Fully resolved options for the workflow commands.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub spec_path: PathBuf,
    pub workspace_dir: PathBuf,
    pub cache_root: PathBuf,
    pub budget_bytes: Option<u64>,
    pub policy_direction: PolicyDirection,
    pub dry_run: bool,
    pub clock_mode: ClockMode,
    pub disk_bandwidth: f64,
}

impl CliConfig {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            clock: self.clock_mode,
            policy: PolicyConfig::Engine(self.policy_direction),
            budget_bytes: self.budget_bytes,
            disk_bandwidth: self.disk_bandwidth,
            dry_run: self.dry_run,
        }
    }
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError {
            code: exit_code(&err),
            message: err.to_string(),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Cache(CacheError::Locked { .. }) => EXIT_LOCKED,
        Error::Exec(ExecError::OperatorFailed { .. } | ExecError::LoadFailed { .. }) => {
            EXIT_OPERATOR_FAILED
        }
        _ => EXIT_USAGE,
    }
}

fn read_config_file(path: &Path) -> Result<ConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn cache_root(flag: Option<PathBuf>, file: Option<PathBuf>, workspace: &Path) -> PathBuf {
    flag.or_else(|| {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
    .or(file)
    .unwrap_or_else(|| workspace.join(DEFAULT_CACHE_DIR))
}

/// Merge flags over the config file and check paths before anything runs.
pub fn resolve(
    args: &WorkflowArgs,
    file: ConfigFile,
    dry_run: bool,
) -> Result<CliConfig, CliError> {
    let spec_path = args.spec.clone().or(file.spec).ok_or_else(|| {
        CliError::usage("no workflow given (use --spec or `spec` in the config file)")
    })?;
    if !spec_path.is_file() {
        return Err(CliError::usage(format!(
            "workflow file {} does not exist",
            spec_path.display()
        )));
    }
    let workspace_dir = args
        .workspace
        .clone()
        .or(file.workspace)
        .unwrap_or_else(|| PathBuf::from("."));
    if !workspace_dir.is_dir() {
        return Err(CliError::usage(format!(
            "workspace {} is not a directory",
            workspace_dir.display()
        )));
    }
    let cache_root = cache_root(args.cache.clone(), file.cache, &workspace_dir);
    if cache_root.exists() && !cache_root.is_dir() {
        return Err(CliError::usage(format!(
            "cache root {} is not a directory",
            cache_root.display()
        )));
    }
    let disk_bandwidth = args
        .disk_bandwidth
        .or(file.disk_bandwidth)
        .unwrap_or(DEFAULT_DISK_BANDWIDTH);
    if !(disk_bandwidth.is_finite() && disk_bandwidth > 0.0) {
        return Err(CliError::usage("disk bandwidth must be a positive number"));
    }
    Ok(CliConfig {
        spec_path,
        workspace_dir,
        cache_root,
        budget_bytes: args.budget_bytes.or(file.budget_bytes),
        policy_direction: args
            .policy_direction
            .or(file.policy_direction)
            .unwrap_or_default(),
        dry_run,
        clock_mode: args.clock.or(file.clock).unwrap_or_default(),
        disk_bandwidth,
    })
}

/// Parse `args` and run the command, writing to the given streams.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => read_config_file(path)?,
        None => ConfigFile::default(),
    };
    let text = match cli.command {
        Command::Run(args) => {
            let config = resolve(&args.workflow, file, args.dry_run)?;
            cmd_run(&config, args.workflow.json, out)?;
            return Ok(());
        }
        Command::Plan(args) => cmd_plan(&resolve(&args, file, true)?, args.json)?,
        Command::Diff(args) => cmd_diff(&resolve(&args, file, true)?, args.json)?,
        Command::Cache { action } => cmd_cache(action, file)?,
        Command::Simulate(args) => cmd_simulate(&args)?,
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write output: {e}")))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write output: {e}")))
}

fn prepare_read_only(config: &CliConfig) -> Result<PreparedIteration, CliError> {
    let spec = read_spec(&config.spec_path)?;
    let cache = CacheStore::open_read_only(&config.cache_root).map_err(Error::from)?;
    Ok(prepare_iteration(
        &spec,
        &config.workspace_dir,
        &cache,
        &config.run_config(),
    )?)
}

pub fn cmd_run(config: &CliConfig, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = read_spec(&config.spec_path)?;
    let result = run_iteration_spec(
        &spec,
        &config.workspace_dir,
        &config.cache_root,
        &config.run_config(),
        &mut NoopObserver,
    );
    match result {
        Ok(outcome) => {
            let text = match (&outcome.report, json) {
                (None, true) => plan_json(&outcome.prepared),
                (None, false) => plan_text(&outcome.prepared),
                (Some(report), true) => report_json(report),
                (Some(report), false) => report_text(report),
            };
            emit(out, &text)
        }
        Err(Error::Exec(exec)) if exec.report().is_some() => {
            let report = exec.report().expect("checked");
            let text = if json {
                report_json(report)
            } else {
                report_text(report)
            };
            emit(out, &text)?;
            Err(Error::Exec(exec).into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_plan(config: &CliConfig, json: bool) -> Result<String, CliError> {
    let prepared = prepare_read_only(config)?;
    Ok(if json {
        plan_json(&prepared)
    } else {
        plan_text(&prepared)
    })
}

pub fn cmd_diff(config: &CliConfig, json: bool) -> Result<String, CliError> {
    let prepared = prepare_read_only(config)?;
    Ok(if json {
        to_json(&prepared.changes)
    } else {
        diff_text(&prepared.changes)
    })
}

fn cache_args_root(args: &CacheArgs, file: &ConfigFile) -> PathBuf {
    let workspace = args
        .workspace
        .clone()
        .or(file.workspace.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    cache_root(args.cache.clone(), file.cache.clone(), &workspace)
}

pub fn cmd_cache(action: CacheCommand, file: ConfigFile) -> Result<String, CliError> {
    match action {
        CacheCommand::Ls(args) => {
            let store =
                CacheStore::open_read_only(cache_args_root(&args, &file)).map_err(Error::from)?;
            Ok(if args.json {
                to_json(&store.manifest().entries.values().collect::<Vec<_>>())
            } else {
                cache_text(&store)
            })
        }
        CacheCommand::Gc { cache, keep_latest } => {
            let mut store =
                CacheStore::open(cache_args_root(&cache, &file)).map_err(Error::from)?;
            let report = store.gc(keep_latest).map_err(Error::from)?;
            Ok(if cache.json {
                to_json(&report)
            } else {
                format!(
                    "removed {} entries and {} files, freed {} bytes\n",
                    report.removed_entries.len(),
                    report.removed_files,
                    report.freed_bytes
                )
            })
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String, CliError> {
    let (spec, bandwidth) = match scenario(&args.scenario) {
        Some(s) => (s.spec, s.disk_bandwidth),
        None => {
            let path = Path::new(&args.scenario);
            if !path.is_file() {
                return Err(CliError::usage(format!(
                    "`{}` is neither a bundled scenario (ie, classification) nor a workflow file",
                    args.scenario
                )));
            }
            (read_spec(path)?, SCENARIO_DISK_BANDWIDTH)
        }
    };
    let frequencies = match &args.frequencies {
        Some(f) => [f[0], f[1], f[2]],
        None => DEFAULT_KIND_FREQUENCIES,
    };
    if args.policies.is_empty() {
        return Err(CliError::usage("at least one policy is required"));
    }
    let trace =
        generate_trace(&spec, frequencies, args.iterations, args.seed).map_err(Error::from)?;
    let mut results = Vec::with_capacity(args.policies.len());
    for policy in &args.policies {
        let config = SimulationConfig {
            policy: *policy,
            budget_bytes: args.budget_bytes,
            disk_bandwidth: bandwidth,
        };
        results.push(simulate(&spec, &trace, &config)?);
    }
    if let Some(path) = &args.data_out {
        fs::write(path, format_csv(&results))
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    let mut text = format_table(&results);
    text.push('\n');
    for r in &results {
        let _ = writeln!(
            text,
            "# {}\tcumulative_seconds\t{:.3}",
            r.policy.label(),
            r.cumulative_seconds()
        );
    }
    Ok(text)
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct PlanDocument<'a> {
    total_cost_seconds: f64,
    states: &'a std::collections::BTreeMap<String, NodeState>,
    costs: &'a std::collections::BTreeMap<String, crate::plan::CostRecord>,
    changed: &'a std::collections::BTreeSet<String>,
    removed: &'a std::collections::BTreeSet<String>,
}

fn plan_json(p: &PreparedIteration) -> String {
    to_json(&PlanDocument {
        total_cost_seconds: p.plan.total_cost_seconds,
        states: &p.plan.states,
        costs: &p.costs,
        changed: &p.changes.changed,
        removed: &p.removed,
    })
}

fn plan_text(p: &PreparedIteration) -> String {
    let width = p
        .plan
        .states
        .keys()
        .map(String::len)
        .max()
        .unwrap_or(4)
        .max(4);
    let mut s = format!(
        "{:<width$}  {:<7}  {:>12}  {:>12}\n",
        "node", "state", "compute_s", "load_s"
    );
    for name in p.spec.topological_order() {
        let state = p.plan.states[&name];
        let cost = &p.costs[&name];
        let load = cost
            .load_seconds
            .map_or_else(|| "-".to_string(), |l| format!("{l:.3}"));
        let mark = if p.changes.changed.contains(&name) {
            " *"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "{name:<width$}  {:<7}  {:>12.3}  {load:>12}{mark}",
            state.as_str(),
            cost.compute_seconds
        );
    }
    if !p.removed.is_empty() {
        let removed: Vec<&str> = p.removed.iter().map(String::as_str).collect();
        let _ = writeln!(s, "dead operators skipped: {}", removed.join(", "));
    }
    let _ = writeln!(
        s,
        "total cost: {:.3} s (* = changed)",
        p.plan.total_cost_seconds
    );
    s
}

fn diff_text(c: &ChangeSet) -> String {
    if c.is_empty() {
        return "no changes\n".to_string();
    }
    let mut s = String::new();
    for name in &c.changed {
        let tag = if c.added.contains(name) {
            "added"
        } else {
            "changed"
        };
        let _ = writeln!(s, "{tag}\t{name}");
    }
    for name in &c.deleted {
        let _ = writeln!(s, "deleted\t{name}");
    }
    let _ = writeln!(s, "{} unchanged", c.unchanged.len());
    s
}

fn report_json(r: &RunReport) -> String {
    to_json(r)
}

fn outcome_label(o: &NodeOutcome) -> String {
    match o {
        NodeOutcome::Computed => "computed".into(),
        NodeOutcome::Loaded => "loaded".into(),
        NodeOutcome::Pruned => "pruned".into(),
        NodeOutcome::Skipped => "skipped".into(),
        NodeOutcome::Failed {
            exit_code: Some(c), ..
        } => format!("failed({c})"),
        NodeOutcome::Failed {
            exit_code: None, ..
        } => "failed".into(),
    }
}

fn report_text(r: &RunReport) -> String {
    let width = r
        .nodes
        .iter()
        .map(|n| n.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut s = format!(
        "iteration {} ({} clock, policy {})\n",
        r.iteration_index,
        match r.clock_mode {
            ClockMode::Real => "real",
            ClockMode::Simulated => "simulated",
        },
        r.policy
    );
    let _ = writeln!(
        s,
        "{:<width$}  {:<10}  {:>10}  stored",
        "node", "outcome", "seconds"
    );
    for n in &r.nodes {
        let _ = writeln!(
            s,
            "{:<width$}  {:<10}  {:>10.3}  {}",
            n.name,
            outcome_label(&n.outcome),
            n.wall_seconds,
            if n.materialized { "yes" } else { "" }
        );
    }
    let t = &r.totals;
    let _ = writeln!(
        s,
        "compute {:.3} s, load {:.3} s, write {:.3} s, iteration {:.3} s, cumulative {:.3} s",
        t.compute_seconds,
        t.load_seconds,
        t.write_seconds,
        t.iteration_seconds,
        r.cumulative_seconds
    );
    s
}

fn cache_text(store: &CacheStore) -> String {
    let mut entries: Vec<_> = store.manifest().entries.values().collect();
    entries.sort_by(|a, b| {
        a.node_name
            .cmp(&b.node_name)
            .then(a.signature.cmp(&b.signature))
    });
    let mut s = format!(
        "{:<16}  {:<24}  {:>12}  {:>10}\n",
        "signature", "node", "bytes", "load_s"
    );
    for e in &entries {
        let load = e
            .measured_load_seconds
            .map_or_else(|| "-".to_string(), |l| format!("{l:.3}"));
        let _ = writeln!(
            s,
            "{:<16}  {:<24}  {:>12}  {:>10}",
            &e.signature.as_str()[..16.min(e.signature.as_str().len())],
            e.node_name,
            e.output_bytes,
            load
        );
    }
    let _ = writeln!(
        s,
        "{} entries, {} bytes",
        entries.len(),
        store.total_bytes()
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_list_parses() {
        let cli = Cli::try_parse_from([
            "iterflow",
            "simulate",
            "--policies",
            "engine,all,none",
            "-n",
            "3",
        ])
        .unwrap();
        let Command::Simulate(args) = cli.command else {
            panic!()
        };
        assert_eq!(
            args.policies,
            vec![
                PolicyConfig::Engine(PolicyDirection::SavingsPositive),
                PolicyConfig::MaterializeAll,
                PolicyConfig::MaterializeNone
            ]
        );
        assert_eq!(args.iterations, 3);
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(toml::from_str::<ConfigFile>("spec = \"a.json\"\nclock = \"simulated\"\n").is_ok());
        assert!(toml::from_str::<ConfigFile>("colour = 1\n").is_err());
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(
            run(["iterflow", "frobnicate"], &mut out, &mut err),
            EXIT_USAGE
        );
        assert!(!err.is_empty());
    }

    #[test]
    fn diff_text_for_no_changes() {
        assert_eq!(diff_text(&ChangeSet::default()), "no changes\n");
    }
}
