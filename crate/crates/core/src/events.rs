//! Run event log.
//!
//! One record per line, UTF-8, six comma-separated fields in fixed order:
//!
//! ```text
//! ts_ms,uid,state,node_list,core_count,gpu_count
//! ```
//!
//! `state` is either a task lifecycle state (`SCHEDULED`, `DONE`, ...) or a
//! component event (`PILOT_START`, `EXECUTOR_READY`, ...). `node_list` is a
//! `;`-separated list of `node:cores:gpus` shares and may be empty. For task
//! records the counts are the task's held totals; for `PILOT_START` the
//! node list describes the whole pilot geometry.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::clock::Clock;
use crate::task::TaskState;

pub const DFK_UID: &str = "dfk";
pub const EXECUTOR_UID: &str = "executor";
pub const PILOT_UID: &str = "pilot";
pub const POOL_UID: &str = "funcpool";

/// Component-level events that bracket start-up, DAG construction and
/// shutdown phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemEvent {
    DfkStart,
    DagBuild,
    DagBuilt,
    DfkStop,
    ExecutorStart,
    ExecutorReady,
    ExecutorShutdown,
    ExecutorStopped,
    PilotStart,
    PilotActive,
    PilotDrain,
    PilotStopped,
    PoolStart,
    PoolReady,
    PoolStop,
}

impl SystemEvent {
    const ALL: [SystemEvent; 15] = [
        SystemEvent::DfkStart,
        SystemEvent::DagBuild,
        SystemEvent::DagBuilt,
        SystemEvent::DfkStop,
        SystemEvent::ExecutorStart,
        SystemEvent::ExecutorReady,
        SystemEvent::ExecutorShutdown,
        SystemEvent::ExecutorStopped,
        SystemEvent::PilotStart,
        SystemEvent::PilotActive,
        SystemEvent::PilotDrain,
        SystemEvent::PilotStopped,
        SystemEvent::PoolStart,
        SystemEvent::PoolReady,
        SystemEvent::PoolStop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemEvent::DfkStart => "DFK_START",
            SystemEvent::DagBuild => "DAG_BUILD",
            SystemEvent::DagBuilt => "DAG_BUILT",
            SystemEvent::DfkStop => "DFK_STOP",
            SystemEvent::ExecutorStart => "EXECUTOR_START",
            SystemEvent::ExecutorReady => "EXECUTOR_READY",
            SystemEvent::ExecutorShutdown => "EXECUTOR_SHUTDOWN",
            SystemEvent::ExecutorStopped => "EXECUTOR_STOPPED",
            SystemEvent::PilotStart => "PILOT_START",
            SystemEvent::PilotActive => "PILOT_ACTIVE",
            SystemEvent::PilotDrain => "PILOT_DRAIN",
            SystemEvent::PilotStopped => "PILOT_STOPPED",
            SystemEvent::PoolStart => "POOL_START",
            SystemEvent::PoolReady => "POOL_READY",
            SystemEvent::PoolStop => "POOL_STOP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LogState {
    Task(TaskState),
    System(SystemEvent),
}

impl LogState {
    pub fn as_str(self) -> &'static str {
        match self {
            LogState::Task(s) => s.as_str(),
            LogState::System(e) => e.as_str(),
        }
    }
}

impl From<TaskState> for LogState {
    fn from(s: TaskState) -> Self {
        LogState::Task(s)
    }
}

impl From<SystemEvent> for LogState {
    fn from(e: SystemEvent) -> Self {
        LogState::System(e)
    }
}

impl FromStr for LogState {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(t) = s.parse::<TaskState>() {
            return Ok(LogState::Task(t));
        }
        SystemEvent::ALL
            .iter()
            .find(|e| e.as_str() == s)
            .map(|e| LogState::System(*e))
            .ok_or(())
    }
}

/// Resources a record refers to on one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeShare {
    pub node: u32,
    pub cores: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub ts_ms: u64,
    pub uid: String,
    pub state: LogState,
    pub nodes: Vec<NodeShare>,
    pub cores: u32,
    pub gpus: u32,
}

impl Record {
    pub fn task_state(&self) -> Option<TaskState> {
        match self.state {
            LogState::Task(s) => Some(s),
            LogState::System(_) => None,
        }
    }

    pub fn system_event(&self) -> Option<SystemEvent> {
        match self.state {
            LogState::System(e) => Some(e),
            LogState::Task(_) => None,
        }
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes: Vec<String> = self
            .nodes
            .iter()
            .map(|n| format!("{}:{}:{}", n.node, n.cores, n.gpus))
            .collect();
        write!(
            f,
            "{},{},{},{},{},{}",
            self.ts_ms,
            self.uid,
            self.state.as_str(),
            nodes.join(";"),
            self.cores,
            self.gpus
        )
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed log line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn parse_share(s: &str) -> Option<NodeShare> {
    let mut it = s.split(':');
    let node = it.next()?.parse().ok()?;
    let cores = it.next()?.parse().ok()?;
    let gpus = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some(NodeShare { node, cores, gpus })
}

/// Parses one record. `line` is the 1-based line number used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<Record, LogError> {
    let bad = |reason: &str| LogError::Malformed {
        line,
        reason: reason.to_string(),
    };
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() != 6 {
        return Err(bad(&format!("expected 6 fields, found {}", fields.len())));
    }
    let ts_ms = fields[0].parse().map_err(|_| bad("bad timestamp"))?;
    if fields[1].is_empty() {
        return Err(bad("empty uid"));
    }
    let state = fields[2]
        .parse::<LogState>()
        .map_err(|_| bad(&format!("unknown state {:?}", fields[2])))?;
    let nodes = if fields[3].is_empty() {
        Vec::new()
    } else {
        fields[3]
            .split(';')
            .map(|s| parse_share(s).ok_or_else(|| bad(&format!("bad node share {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?
    };
    let cores = fields[4].parse().map_err(|_| bad("bad core count"))?;
    let gpus = fields[5].parse().map_err(|_| bad("bad gpu count"))?;
    Ok(Record {
        ts_ms,
        uid: fields[1].to_string(),
        state,
        nodes,
        cores,
        gpus,
    })
}

pub fn parse_log(text: &str) -> Result<Vec<Record>, LogError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<Record>, LogError> {
    parse_log(&fs::read_to_string(path)?)
}

pub fn format_log(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Append-only, thread-safe event log. Cloning shares the same buffer.
///
/// Timestamps are read from the clock while the log lock is held, so the
/// log is ordered by time even when several threads append.
#[derive(Debug, Clone)]
pub struct EventLog {
    clock: Clock,
    records: Arc<Mutex<Vec<Record>>>,
}

impl EventLog {
    pub fn new(clock: Clock) -> Self {
        EventLog {
            clock,
            records: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Appends a record stamped with the current time and returns the stamp.
    pub fn record(&self, uid: &str, state: impl Into<LogState>, nodes: &[NodeShare], cores: u32, gpus: u32) -> u64 {
        let mut records = self.records.lock().unwrap();
        let ts_ms = self.clock.now_ms();
        records.push(Record {
            ts_ms,
            uid: uid.to_string(),
            state: state.into(),
            nodes: nodes.to_vec(),
            cores,
            gpus,
        });
        ts_ms
    }

    pub fn system(&self, uid: &str, event: SystemEvent) -> u64 {
        self.record(uid, event, &[], 0, 0)
    }

    pub fn snapshot(&self) -> Vec<Record> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_text(&self) -> String {
        format_log(&self.records.lock().unwrap())
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_text())
    }
}
