//! Executor backed by the pilot agent: translates dataflow tasks 1:1 into
//! workload task records and maps agent notices back onto futures.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::{Completion, Executor, ExecutorError, ExecutorStatus, Future};
use crate::events::{EventLog, SystemEvent, EXECUTOR_UID};
use crate::funcpool::PoolOptions;
use crate::functions::FunctionRegistry;
use crate::pilot::{Agent, AgentConfig, CostModel, Notice, PilotDescription, PilotSummary, Request};
use crate::task::{
    advance_state, validate_task, GpuRequest, IllegalTransition, Payload, TaskDescription, TaskKind, TaskResult,
    TaskState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Function,
    Executable,
    MpiFunction,
}

/// Pilot-side task record: the translated task plus its lifecycle history.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTask {
    pub uid: String,
    pub mode: TaskMode,
    pub payload: Payload,
    pub ranks: u32,
    pub cores_per_rank: u32,
    pub gpus: GpuRequest,
    pub env: Vec<(String, String)>,
    pub synthetic_duration: Option<f64>,
    pub state: TaskState,
    /// One entry per entered state, in order, with nondecreasing times.
    pub timestamps: Vec<(TaskState, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
    #[error("timestamp {ts} precedes previous {prev}")]
    NonMonotonic { prev: u64, ts: u64 },
}

impl WorkloadTask {
    pub fn request(&self) -> Request {
        Request {
            ranks: self.ranks,
            cores_per_rank: self.cores_per_rank,
            gpus: self.gpus.total(self.ranks),
        }
    }

    pub fn timestamp(&self, state: TaskState) -> Option<u64> {
        self.timestamps.iter().find(|(s, _)| *s == state).map(|(_, t)| *t)
    }

    /// Applies a transition and stamps it.
    pub fn record(&mut self, state: TaskState, ts: u64) -> Result<(), RecordError> {
        if let Some(&(_, prev)) = self.timestamps.last() {
            if ts < prev {
                return Err(RecordError::NonMonotonic { prev, ts });
            }
        }
        self.state = advance_state(self.state, state)?;
        self.timestamps.push((state, ts));
        Ok(())
    }

    /// Projects back onto the user-facing fields. Dependencies are not
    /// carried by workload records.
    pub fn to_description(&self) -> TaskDescription {
        TaskDescription {
            uid: self.uid.clone(),
            payload: self.payload.clone(),
            ranks: Some(self.ranks),
            cores_per_rank: Some(self.cores_per_rank),
            gpus: Some(self.gpus),
            depends_on: Vec::new(),
            synthetic_duration: self.synthetic_duration,
        }
    }
}

/// Resource values for tasks that leave them unset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDefaults {
    pub ranks: u32,
    pub cores_per_rank: u32,
    pub gpus: GpuRequest,
}

impl Default for TaskDefaults {
    fn default() -> Self {
        TaskDefaults {
            ranks: 1,
            cores_per_rank: 1,
            gpus: GpuRequest::PerRank(0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub pilot: PilotDescription,
    pub defaults: TaskDefaults,
    pub callback_capacity: usize,
    pub costs: CostModel,
    pub pool: PoolOptions,
}

impl BridgeConfig {
    pub fn new(pilot: PilotDescription) -> Self {
        BridgeConfig {
            pilot,
            defaults: TaskDefaults::default(),
            callback_capacity: 1024,
            costs: CostModel::default(),
            pool: PoolOptions::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BridgeError {
    #[error("UnsupportedPayload: function {0} is not registered")]
    UnsupportedPayload(String),
    #[error("invalid task {uid}: {reason}")]
    InvalidTask { uid: String, reason: String },
    #[error("invalid defaults: {0}")]
    InvalidDefaults(String),
    #[error("PilotStartupFailure: {0}")]
    PilotStartupFailure(String),
    #[error("UnknownUid: {0}")]
    UnknownUid(String),
    #[error("duplicate uid {0}")]
    DuplicateUid(String),
    #[error("executor is not running")]
    NotRunning,
}

/// Translates one task, filling unset resources from `cfg.defaults`.
pub fn translate(
    desc: &TaskDescription,
    cfg: &BridgeConfig,
    registry: &FunctionRegistry,
) -> Result<WorkloadTask, BridgeError> {
    let report = validate_task(desc);
    if !report.is_ok() {
        return Err(BridgeError::InvalidTask {
            uid: desc.uid.clone(),
            reason: report.to_string(),
        });
    }
    let ranks = desc.ranks.unwrap_or(cfg.defaults.ranks);
    let mode = match (&desc.payload, ranks) {
        (Payload::Function(f), _) if !registry.contains(&f.name) => {
            return Err(BridgeError::UnsupportedPayload(f.name.clone()))
        }
        (Payload::Function(_), 1) => TaskMode::Function,
        (Payload::Function(_), _) => TaskMode::MpiFunction,
        (Payload::Executable(_), _) => TaskMode::Executable,
    };
    let env = match &desc.payload {
        Payload::Executable(e) => e.env.clone(),
        Payload::Function(_) => Vec::new(),
    };
    Ok(WorkloadTask {
        uid: desc.uid.clone(),
        mode,
        payload: desc.payload.clone(),
        ranks,
        cores_per_rank: desc.cores_per_rank.unwrap_or(cfg.defaults.cores_per_rank),
        gpus: desc.gpus.unwrap_or(cfg.defaults.gpus),
        env,
        synthetic_duration: desc.synthetic_duration,
        state: TaskState::Translated,
        timestamps: Vec::new(),
    })
}

/// The mode a task of `kind` with `ranks` ranks translates to.
pub fn mode_for(kind: TaskKind, ranks: u32) -> TaskMode {
    match (kind, ranks) {
        (TaskKind::Function, 1) => TaskMode::Function,
        (TaskKind::Function, _) => TaskMode::MpiFunction,
        (TaskKind::Executable, _) => TaskMode::Executable,
    }
}

/// Executor handle over a running pilot agent.
pub struct PilotExecutor {
    cfg: BridgeConfig,
    registry: Arc<FunctionRegistry>,
    log: EventLog,
    agent: Option<Agent>,
    futures: HashMap<String, Future>,
    records: HashMap<String, WorkloadTask>,
    seen: HashSet<(String, TaskState)>,
    completions: VecDeque<Completion>,
    translated: usize,
    pending: usize,
    summary: Option<PilotSummary>,
}

impl std::fmt::Debug for PilotExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PilotExecutor")
            .field("running", &self.agent.is_some())
            .field("translated", &self.translated)
            .finish()
    }
}

/// Starts the pilot and returns a ready executor. Start-up is bracketed by
/// executor events in the log.
pub fn executor_start(
    cfg: BridgeConfig,
    registry: Arc<FunctionRegistry>,
    log: EventLog,
) -> Result<PilotExecutor, BridgeError> {
    if cfg.defaults.ranks == 0 || cfg.defaults.cores_per_rank == 0 {
        return Err(BridgeError::InvalidDefaults(
            "default ranks and cores_per_rank must be ≥ 1".into(),
        ));
    }
    log.system(EXECUTOR_UID, SystemEvent::ExecutorStart);
    let agent_cfg = AgentConfig {
        pilot: cfg.pilot.clone(),
        costs: cfg.costs,
        pool: cfg.pool,
        callback_capacity: cfg.callback_capacity,
    };
    let agent = Agent::start(agent_cfg, registry.clone(), log.clone())
        .map_err(|e| BridgeError::PilotStartupFailure(e.to_string()))?;
    log.clock().charge(cfg.costs.executor_startup_ms);
    log.system(EXECUTOR_UID, SystemEvent::ExecutorReady);
    Ok(PilotExecutor {
        cfg,
        registry,
        log,
        agent: Some(agent),
        futures: HashMap::new(),
        records: HashMap::new(),
        seen: HashSet::new(),
        completions: VecDeque::new(),
        translated: 0,
        pending: 0,
        summary: None,
    })
}

impl PilotExecutor {
    pub fn config(&self) -> &BridgeConfig {
        &self.cfg
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    /// Number of workload records created so far.
    pub fn translated(&self) -> usize {
        self.translated
    }

    pub fn record(&self, uid: &str) -> Option<&WorkloadTask> {
        self.records.get(uid)
    }

    pub fn future(&self, uid: &str) -> Option<&Future> {
        self.futures.get(uid)
    }

    /// Agent summary, available after shutdown.
    pub fn summary(&self) -> Option<&PilotSummary> {
        self.summary.as_ref()
    }

    /// Applies one agent notice. Duplicate (uid, state) pairs are ignored.
    /// Terminal states complete the task's future and are queued for
    /// [`Executor::wait_any`].
    pub fn on_pilot_callback(&mut self, n: Notice) -> Result<(), BridgeError> {
        let Some(rec) = self.records.get_mut(&n.uid) else {
            log::warn!("bridge: notice for unknown task {} ({})", n.uid, n.state);
            return Err(BridgeError::UnknownUid(n.uid));
        };
        if !self.seen.insert((n.uid.clone(), n.state)) {
            return Ok(());
        }
        if let Err(e) = rec.record(n.state, n.ts_ms) {
            log::warn!("bridge: {}: {e}", n.uid);
        }
        if n.state.is_terminal() {
            let result = n.result.unwrap_or_else(|| TaskResult::error(&n.uid, n.state.as_str()));
            if let Some(f) = self.futures.get(&n.uid) {
                f.complete(result.clone());
            }
            self.pending -= 1;
            self.completions.push_back(Completion {
                uid: n.uid,
                state: n.state,
                result,
            });
        }
        Ok(())
    }

    fn absorb(&mut self, notices: Vec<Notice>) {
        for n in notices {
            let _ = self.on_pilot_callback(n);
        }
    }

    fn try_submit(&mut self, desc: &TaskDescription) -> Result<Future, BridgeError> {
        if self.agent.is_none() {
            return Err(BridgeError::NotRunning);
        }
        if self.records.contains_key(&desc.uid) {
            return Err(BridgeError::DuplicateUid(desc.uid.clone()));
        }
        let mut task = translate(desc, &self.cfg, &self.registry)?;
        let req = task.request();
        let ts = self
            .log
            .record(&task.uid, TaskState::Translated, &[], req.cores(), req.gpus);
        task.timestamps = vec![(TaskState::New, ts), (TaskState::Translated, ts)];
        self.translated += 1;
        self.pending += 1;
        let fut = Future::new(&task.uid);
        self.futures.insert(task.uid.clone(), fut.clone());
        self.records.insert(task.uid.clone(), task.clone());
        let agent = self.agent.as_mut().expect("checked above");
        agent
            .submit(task)
            .map_err(|e| BridgeError::PilotStartupFailure(e.to_string()))?;
        Ok(fut)
    }
}

impl Executor for PilotExecutor {
    fn submit(&mut self, desc: &TaskDescription) -> Result<Future, ExecutorError> {
        self.try_submit(desc).map_err(|e| match e {
            BridgeError::NotRunning => ExecutorError::NotRunning,
            other => ExecutorError::Rejected(other.to_string()),
        })
    }

    fn wait_any(&mut self, timeout: Duration) -> Vec<Completion> {
        if self.completions.is_empty() {
            if let Some(agent) = self.agent.as_mut() {
                let notices = agent.step(timeout);
                self.absorb(notices);
            }
        }
        self.completions.drain(..).collect()
    }

    fn status(&self) -> ExecutorStatus {
        ExecutorStatus {
            running: self.agent.is_some(),
            cores: self.cfg.pilot.total_cores(),
            gpus: self.cfg.pilot.total_gpus(),
            in_flight: self.pending,
        }
    }

    fn shutdown(&mut self, cancel: bool) -> Vec<Completion> {
        let Some(mut agent) = self.agent.take() else {
            return self.completions.drain(..).collect();
        };
        self.log.system(EXECUTOR_UID, SystemEvent::ExecutorShutdown);
        let (notices, summary) = agent.drain_and_stop(cancel);
        self.absorb(notices);
        self.summary = Some(summary);
        self.log.clock().charge(self.cfg.costs.executor_shutdown_ms);
        self.log.system(EXECUTOR_UID, SystemEvent::ExecutorStopped);
        self.completions.drain(..).collect()
    }
}

impl Drop for PilotExecutor {
    fn drop(&mut self) {
        if self.agent.is_some() {
            self.shutdown(true);
        }
    }
}
