//! Task descriptions, lifecycle states and results shared by every layer.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Characters that cannot appear in a uid because the event log is
/// comma-separated and line-oriented.
const RESERVED_UID_CHARS: [char; 4] = [',', '\n', '\r', ';'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Function,
    Executable,
}

/// A call into the function registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionRef {
    pub name: String,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutableSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Function(FunctionRef),
    Executable(ExecutableSpec),
}

impl Payload {
    pub fn kind(&self) -> TaskKind {
        match self {
            Payload::Function(_) => TaskKind::Function,
            Payload::Executable(_) => TaskKind::Executable,
        }
    }
}

/// GPU demand of a task. Whole GPUs only; a per-task count is spread over
/// the ranks when the task is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpuRequest {
    PerRank(u32),
    PerTask(u32),
}

impl GpuRequest {
    pub fn total(&self, ranks: u32) -> u32 {
        match *self {
            GpuRequest::PerRank(g) => g * ranks,
            GpuRequest::PerTask(g) => g,
        }
    }
}

/// A user-facing task. Resource fields left as `None` are filled from the
/// executor defaults at translation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub uid: String,
    pub payload: Payload,
    pub ranks: Option<u32>,
    pub cores_per_rank: Option<u32>,
    pub gpus: Option<GpuRequest>,
    pub depends_on: Vec<String>,
    /// Seconds. When set, the task body is modeled as taking this long.
    pub synthetic_duration: Option<f64>,
}

impl TaskDescription {
    pub fn function(uid: impl Into<String>, name: impl Into<String>) -> Self {
        Self::new(
            uid,
            Payload::Function(FunctionRef {
                name: name.into(),
                args: Value::Null,
            }),
        )
    }

    pub fn executable(uid: impl Into<String>, program: impl Into<String>) -> Self {
        Self::new(
            uid,
            Payload::Executable(ExecutableSpec {
                program: program.into(),
                args: Vec::new(),
                env: Vec::new(),
            }),
        )
    }

    pub fn new(uid: impl Into<String>, payload: Payload) -> Self {
        TaskDescription {
            uid: uid.into(),
            payload,
            ranks: None,
            cores_per_rank: None,
            gpus: None,
            depends_on: Vec::new(),
            synthetic_duration: None,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.payload.kind()
    }

    pub fn with_ranks(mut self, ranks: u32) -> Self {
        self.ranks = Some(ranks);
        self
    }

    pub fn with_cores_per_rank(mut self, cores: u32) -> Self {
        self.cores_per_rank = Some(cores);
        self
    }

    pub fn with_gpus(mut self, gpus: GpuRequest) -> Self {
        self.gpus = Some(gpus);
        self
    }

    pub fn with_args(mut self, args: Value) -> Self {
        if let Payload::Function(f) = &mut self.payload {
            f.args = args;
        }
        self
    }

    pub fn with_duration(mut self, seconds: f64) -> Self {
        self.synthetic_duration = Some(seconds);
        self
    }

    pub fn after<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.depends_on.extend(deps.into_iter().map(Into::into));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyUid,
    ReservedCharacter(char),
    ZeroRanks,
    ZeroCoresPerRank,
    SelfReference,
    DuplicateDependency(String),
    InvalidDuration,
    EmptyFunctionName,
    EmptyProgram,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyUid => write!(f, "uid must be nonempty"),
            Violation::ReservedCharacter(c) => write!(f, "uid contains reserved character {c:?}"),
            Violation::ZeroRanks => write!(f, "ranks ≥ 1"),
            Violation::ZeroCoresPerRank => write!(f, "cores_per_rank ≥ 1"),
            Violation::SelfReference => write!(f, "depends_on must contain no self-reference"),
            Violation::DuplicateDependency(d) => write!(f, "dependency {d:?} listed twice"),
            Violation::InvalidDuration => {
                write!(f, "synthetic_duration must be finite and ≥ 0")
            }
            Violation::EmptyFunctionName => write!(f, "function name must be nonempty"),
            Violation::EmptyProgram => write!(f, "program must be nonempty"),
        }
    }
}

/// Outcome of [`validate_task`]: empty means the task is legal.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

pub fn validate_task(desc: &TaskDescription) -> ValidationReport {
    let mut violations = Vec::new();
    if desc.uid.is_empty() {
        violations.push(Violation::EmptyUid);
    }
    if let Some(c) = desc.uid.chars().find(|c| RESERVED_UID_CHARS.contains(c)) {
        violations.push(Violation::ReservedCharacter(c));
    }
    if desc.ranks == Some(0) {
        violations.push(Violation::ZeroRanks);
    }
    if desc.cores_per_rank == Some(0) {
        violations.push(Violation::ZeroCoresPerRank);
    }
    if desc.depends_on.contains(&desc.uid) {
        violations.push(Violation::SelfReference);
    }
    let mut seen = BTreeSet::new();
    for dep in &desc.depends_on {
        if !seen.insert(dep.as_str()) {
            violations.push(Violation::DuplicateDependency(dep.clone()));
        }
    }
    if let Some(d) = desc.synthetic_duration {
        if !d.is_finite() || d < 0.0 {
            violations.push(Violation::InvalidDuration);
        }
    }
    match &desc.payload {
        Payload::Function(f) if f.name.is_empty() => violations.push(Violation::EmptyFunctionName),
        Payload::Executable(e) if e.program.is_empty() => violations.push(Violation::EmptyProgram),
        _ => {}
    }
    ValidationReport { violations }
}

/// Lifecycle of a task, from creation to a terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    New,
    Translated,
    Submitted,
    Scheduled,
    Launching,
    Running,
    Done,
    Failed,
    Canceled,
}

impl TaskState {
    pub const ALL: [TaskState; 9] = [
        TaskState::New,
        TaskState::Translated,
        TaskState::Submitted,
        TaskState::Scheduled,
        TaskState::Launching,
        TaskState::Running,
        TaskState::Done,
        TaskState::Failed,
        TaskState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed | TaskState::Canceled)
    }

    /// Position along the main chain; DONE and FAILED share the last slot.
    fn chain_index(self) -> Option<u8> {
        Some(match self {
            TaskState::New => 0,
            TaskState::Translated => 1,
            TaskState::Submitted => 2,
            TaskState::Scheduled => 3,
            TaskState::Launching => 4,
            TaskState::Running => 5,
            TaskState::Done | TaskState::Failed => 6,
            TaskState::Canceled => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::New => "NEW",
            TaskState::Translated => "TRANSLATED",
            TaskState::Submitted => "SUBMITTED",
            TaskState::Scheduled => "SCHEDULED",
            TaskState::Launching => "LAUNCHING",
            TaskState::Running => "RUNNING",
            TaskState::Done => "DONE",
            TaskState::Failed => "FAILED",
            TaskState::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskState {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskState::ALL.iter().copied().find(|st| st.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub to: TaskState,
}

/// Moves a task forward along its lifecycle.
///
/// A transition is legal when the target lies strictly further along the
/// chain NEW → TRANSLATED → SUBMITTED → SCHEDULED → LAUNCHING → RUNNING →
/// {DONE | FAILED}, or when the target is CANCELED and the current state is
/// not terminal. Intermediate states may be skipped, so a task rejected at
/// submission can go straight to FAILED. Terminal states absorb.
pub fn advance_state(current: TaskState, target: TaskState) -> Result<TaskState, IllegalTransition> {
    let err = IllegalTransition {
        from: current,
        to: target,
    };
    if current.is_terminal() {
        return Err(err);
    }
    if target == TaskState::Canceled {
        return Ok(target);
    }
    match (current.chain_index(), target.chain_index()) {
        (Some(a), Some(b)) if b > a => Ok(target),
        _ => Err(err),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Outcome {
    /// Serialized result blob.
    Ok(String),
    /// Error message.
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub uid: String,
    pub outcome: Outcome,
    pub exit_code: Option<i32>,
}

impl TaskResult {
    pub fn ok(uid: impl Into<String>, value: impl Into<String>) -> Self {
        TaskResult {
            uid: uid.into(),
            outcome: Outcome::Ok(value.into()),
            exit_code: None,
        }
    }

    pub fn error(uid: impl Into<String>, message: impl Into<String>) -> Self {
        TaskResult {
            uid: uid.into(),
            outcome: Outcome::Error(message.into()),
            exit_code: None,
        }
    }

    pub fn with_exit_code(mut self, code: i32) -> Self {
        self.exit_code = Some(code);
        self
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.outcome, Outcome::Ok(_))
    }

    pub fn value(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Ok(v) => Some(v),
            Outcome::Error(_) => None,
        }
    }

    pub fn error_message(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Ok(_) => None,
            Outcome::Error(e) => Some(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> TaskDescription {
        TaskDescription::function("t", "noop")
            .with_ranks(1)
            .with_cores_per_rank(1)
            .with_gpus(GpuRequest::PerRank(0))
    }

    #[test]
    fn minimal_task_is_valid() {
        assert!(validate_task(&minimal()).is_ok());
    }

    #[test]
    fn zero_ranks_is_reported() {
        let report = validate_task(&minimal().with_ranks(0));
        assert_eq!(report.violations, vec![Violation::ZeroRanks]);
        assert!(report.to_string().contains("ranks ≥ 1"));
    }

    #[test]
    fn self_dependency_is_reported() {
        let t = TaskDescription::function("a", "noop").after(["a"]);
        let report = validate_task(&t);
        assert_eq!(report.violations, vec![Violation::SelfReference]);
        assert!(report.to_string().contains("no self-reference"));
    }

    #[test]
    fn reserved_characters_rejected() {
        let t = TaskDescription::function("a,b", "noop");
        assert_eq!(validate_task(&t).violations, vec![Violation::ReservedCharacter(',')]);
        assert!(!validate_task(&TaskDescription::function("", "noop")).is_ok());
    }

    #[test]
    fn validation_is_pure() {
        let t = minimal().with_ranks(0).after(["t", "x", "x"]);
        assert_eq!(validate_task(&t), validate_task(&t));
        assert_eq!(validate_task(&t).violations.len(), 3);
    }

    #[test]
    fn transition_examples() {
        use TaskState::*;
        assert_eq!(advance_state(Scheduled, Launching), Ok(Launching));
        assert!(advance_state(Done, Running).is_err());
        assert_eq!(advance_state(Running, Canceled), Ok(Canceled));
    }

    /// Independent statement of the legal pairs: (a, b) is accepted exactly
    /// when [a, b] is a subsequence of a legal full path.
    fn legal_paths() -> Vec<Vec<TaskState>> {
        use TaskState::*;
        let chain = [New, Translated, Submitted, Scheduled, Launching, Running];
        let mut paths = Vec::new();
        for end in [Done, Failed] {
            let mut p = chain.to_vec();
            p.push(end);
            paths.push(p);
        }
        // cancel after any non-terminal prefix
        for i in 0..chain.len() {
            let mut p = chain[..=i].to_vec();
            p.push(Canceled);
            paths.push(p);
        }
        paths
    }

    fn is_subsequence(pair: (TaskState, TaskState), path: &[TaskState]) -> bool {
        match path.iter().position(|s| *s == pair.0) {
            Some(i) => path[i + 1..].contains(&pair.1),
            None => false,
        }
    }

    #[test]
    fn exhaustive_pairs_match_path_oracle() {
        let paths = legal_paths();
        let mut accepted = 0;
        for a in TaskState::ALL {
            for b in TaskState::ALL {
                let oracle = paths.iter().any(|p| is_subsequence((a, b), p));
                assert_eq!(advance_state(a, b).is_ok(), oracle, "{a} -> {b}");
                accepted += usize::from(oracle);
            }
        }
        // forward pairs inside the chain, entries into DONE/FAILED, cancels
        assert_eq!(accepted, 15 + 12 + 6);
    }

    #[test]
    fn state_names_round_trip() {
        for s in TaskState::ALL {
            assert_eq!(s.as_str().parse::<TaskState>(), Ok(s));
        }
        assert!("BOGUS".parse::<TaskState>().is_err());
    }

    #[test]
    fn result_status_matches_message_presence() {
        let ok = TaskResult::ok("a", "1");
        assert!(ok.is_ok() && ok.error_message().is_none());
        let err = TaskResult::error("a", "boom");
        assert!(!err.is_ok() && err.error_message() == Some("boom") && err.value().is_none());
    }

    #[test]
    fn gpu_request_totals() {
        assert_eq!(GpuRequest::PerRank(2).total(4), 8);
        assert_eq!(GpuRequest::PerTask(2).total(8), 2);
    }
}
