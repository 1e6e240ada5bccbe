//! Workflow files and the full-stack run driver.
//!
//! A workflow file is JSON:
//!
//! ```json
//! {
//!   "pilot":    {"nodes": 2, "cores_per_node": 8, "walltime": 3600},
//!   "defaults": {"ranks": 1, "cores_per_rank": 1},
//!   "tasks": [
//!     {"uid": "a", "function": "noop", "duration": 1.0},
//!     {"uid": "b", "executable": "simulate", "ranks": 8, "depends_on": ["a"]}
//!   ],
//!   "run": {"clock": "virtual", "seed": 1}
//! }
//! ```
//!
//! Unknown fields are rejected at every level.

mod bench;
mod generate;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bridge::{executor_start, BridgeConfig, TaskDefaults};
use crate::clock::{Clock, ClockMode};
use crate::dataflow::{submit_workflow, DataflowError, DfkOptions, FutureState, TaskGraph};
use crate::events::{EventLog, Record};
use crate::funcpool::PoolOptions;
use crate::functions::FunctionRegistry;
use crate::metrics::{
    compute_metrics, compute_utilization, emit_report, MetricsError, MetricsOptions, ReportFormat, RunReport,
};
use crate::pilot::{CostModel, PilotDescription};
use crate::task::{ExecutableSpec, FunctionRef, GpuRequest, Payload, TaskDescription, TaskState};

pub use bench::{bench, write_bench_csv, BenchResult, BenchRow, BenchSpec, Stat, BENCH_COLUMNS};
pub use generate::{
    gen_colmena, gen_exp1, gen_iwp, generate, ColmenaParams, Exp1Params, IwpParams, Scaling, WorkloadSpec,
    COLMENA_TRIPLES_PER_NODE,
};

/// One task as written in a workflow file. Exactly one of `function` and
/// `executable` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub uid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executable: Option<String>,
    /// Function arguments (any JSON) or executable arguments (string list).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub args: Option<Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores_per_rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpus: Option<GpuRequest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
    /// Seconds of modeled body time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

impl TaskSpec {
    pub fn function(uid: impl Into<String>, name: impl Into<String>) -> Self {
        TaskSpec {
            uid: uid.into(),
            function: Some(name.into()),
            executable: None,
            args: None,
            env: BTreeMap::new(),
            ranks: None,
            cores_per_rank: None,
            gpus: None,
            depends_on: Vec::new(),
            duration: None,
        }
    }

    pub fn executable(uid: impl Into<String>, program: impl Into<String>) -> Self {
        TaskSpec {
            function: None,
            executable: Some(program.into()),
            ..TaskSpec::function(uid, "")
        }
    }

    pub fn to_description(&self) -> Result<TaskDescription, String> {
        let payload = match (&self.function, &self.executable) {
            (Some(name), None) => {
                if !self.env.is_empty() {
                    return Err(format!("task {}: env is only valid for executables", self.uid));
                }
                Payload::Function(FunctionRef {
                    name: name.clone(),
                    args: self.args.clone().unwrap_or(Value::Null),
                })
            }
            (None, Some(program)) => {
                let args = match &self.args {
                    None => Vec::new(),
                    Some(Value::Array(items)) => items
                        .iter()
                        .map(|v| v.as_str().map(str::to_string))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| format!("task {}: executable args must be strings", self.uid))?,
                    Some(_) => return Err(format!("task {}: executable args must be a list", self.uid)),
                };
                Payload::Executable(ExecutableSpec {
                    program: program.clone(),
                    args,
                    env: self.env.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
                })
            }
            _ => {
                return Err(format!(
                    "task {}: exactly one of function and executable is required",
                    self.uid
                ))
            }
        };
        Ok(TaskDescription {
            uid: self.uid.clone(),
            payload,
            ranks: self.ranks,
            cores_per_rank: self.cores_per_rank,
            gpus: self.gpus,
            depends_on: self.depends_on.clone(),
            synthetic_duration: self.duration,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub clock: ClockMode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    pub exclude_pool_start: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            clock: ClockMode::Virtual,
            seed: 0,
            run_id: None,
            log: None,
            report: None,
            exclude_pool_start: false,
        }
    }
}

impl RunSection {
    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("run-{}", self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowFile {
    pub pilot: PilotDescription,
    #[serde(default)]
    pub defaults: TaskDefaults,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub pool: PoolOptions,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid workflow: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataflow(#[from] DataflowError),
    #[error("execution failed: {0}")]
    Execution(String),
    #[error("io error: {0}")]
    Io(String),
}

impl WorkflowError {
    /// 2 for anything wrong with the input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkflowError::Parse(_) | WorkflowError::Invalid(_) | WorkflowError::Dataflow(_) => 2,
            WorkflowError::Execution(_) | WorkflowError::Io(_) => 1,
        }
    }
}

impl From<MetricsError> for WorkflowError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::IoFailure(m) => WorkflowError::Io(m),
            other => WorkflowError::Execution(other.to_string()),
        }
    }
}

impl WorkflowFile {
    pub fn parse(text: &str) -> Result<WorkflowFile, WorkflowError> {
        serde_json::from_str(text).map_err(|e| WorkflowError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<WorkflowFile, WorkflowError> {
        let text = fs::read_to_string(path).map_err(|e| WorkflowError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Pretty JSON with a trailing newline; identical inputs give identical
    /// bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("workflow files always serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), WorkflowError> {
        fs::write(path, self.to_json()).map_err(|e| WorkflowError::Io(format!("{}: {e}", path.display())))
    }

    /// Converts the task list and checks the dependency graph without
    /// running anything.
    pub fn descriptions(&self) -> Result<Vec<TaskDescription>, WorkflowError> {
        let tasks = self
            .tasks
            .iter()
            .map(TaskSpec::to_description)
            .collect::<Result<Vec<_>, _>>()
            .map_err(WorkflowError::Invalid)?;
        TaskGraph::build(tasks.clone())?;
        Ok(tasks)
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub records: Vec<Record>,
    /// Final state per task uid.
    pub states: BTreeMap<String, TaskState>,
    /// Error messages of tasks that did not finish DONE.
    pub failures: BTreeMap<String, String>,
}

impl RunOutcome {
    pub fn all_done(&self) -> bool {
        self.states.values().all(|s| *s == TaskState::Done)
    }

    pub fn count(&self, state: TaskState) -> usize {
        self.states.values().filter(|s| **s == state).count()
    }

    pub fn log_text(&self) -> String {
        crate::events::format_log(&self.records)
    }
}

/// Runs a workflow through dataflow, bridge, pilot and function pool, then
/// computes its metrics.
pub fn run_workflow(file: &WorkflowFile, registry: Arc<FunctionRegistry>) -> Result<RunOutcome, WorkflowError> {
    let tasks = file.descriptions()?;
    let unknown: Vec<&str> = tasks
        .iter()
        .filter_map(|t| match &t.payload {
            Payload::Function(f) if !registry.contains(&f.name) => Some(f.name.as_str()),
            _ => None,
        })
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        let mut unknown = unknown;
        unknown.sort_unstable();
        return Err(WorkflowError::Invalid(format!(
            "unsupported functions: {}",
            unknown.join(", ")
        )));
    }
    let log = EventLog::new(Clock::new(file.run.clock));
    let cfg = BridgeConfig {
        pilot: file.pilot.clone(),
        defaults: file.defaults,
        callback_capacity: 1024,
        costs: file.costs,
        pool: file.pool,
    };
    let executor = executor_start(cfg, registry, log.clone()).map_err(|e| WorkflowError::Execution(e.to_string()))?;
    let opts = DfkOptions {
        log: log.clone(),
        dag_build_us_per_task: file.costs.dag_build_us_per_task,
        poll: Duration::from_millis(20),
    };
    let wf = submit_workflow(tasks, Box::new(executor), opts)?;
    let futures = wf.futures().clone();
    wf.wait();

    let mut states = BTreeMap::new();
    let mut failures = BTreeMap::new();
    let records = log.snapshot();
    for r in &records {
        if let Some(s) = r.task_state().filter(|s| s.is_terminal()) {
            states.insert(r.uid.clone(), s);
        }
    }
    for (uid, f) in &futures {
        if f.state() == FutureState::Failed {
            let msg = f.result().and_then(|r| r.error_message().map(str::to_string));
            failures.insert(uid.clone(), msg.unwrap_or_default());
        }
    }
    let opts = MetricsOptions {
        exclude_pool_start: file.run.exclude_pool_start,
    };
    let report = RunReport {
        run_id: file.run.run_id(),
        clock_mode: file.run.clock,
        metrics: compute_metrics(&records, opts)?,
        utilization: compute_utilization(&records)?,
    };
    Ok(RunOutcome {
        report,
        records,
        states,
        failures,
    })
}

/// Writes the event log and appends the report row.
pub fn write_outputs(outcome: &RunOutcome, log_path: &Path, report_path: &Path) -> Result<(), WorkflowError> {
    for p in [log_path, report_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| WorkflowError::Io(format!("{}: {e}", dir.display())))?;
        }
    }
    fs::write(log_path, outcome.log_text()).map_err(|e| WorkflowError::Io(format!("{}: {e}", log_path.display())))?;
    emit_report(&outcome.report, ReportFormat::from_path(report_path), report_path)?;
    Ok(())
}
