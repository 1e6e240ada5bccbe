//! Dataflow kernel: builds the dependency graph of a workflow, hands ready
//! tasks to an executor one at a time and resolves one future per task.

mod future;
mod graph;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::events::{EventLog, SystemEvent, DFK_UID};
use crate::task::{TaskDescription, TaskResult, TaskState};
pub use future::{Future, FutureState};
pub use graph::TaskGraph;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataflowError {
    #[error("duplicate task uid {0}")]
    DuplicateUid(String),
    #[error("task {task} depends on unknown task {dependency}")]
    UnknownDependency { task: String, dependency: String },
    #[error("CycleDetected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("task {uid} is invalid: {reason}")]
    InvalidTask { uid: String, reason: String },
    #[error("unknown task uid {0}")]
    UnknownUid(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecutorError {
    #[error("executor is not running")]
    NotRunning,
    #[error("task rejected: {0}")]
    Rejected(String),
}

/// A task that reached a terminal state inside the executor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub uid: String,
    pub state: TaskState,
    pub result: TaskResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutorStatus {
    pub running: bool,
    pub cores: u64,
    pub gpus: u64,
    /// Submitted tasks not yet terminal.
    pub in_flight: usize,
}

/// Backend contract used by the dataflow kernel. `submit` is only accepted
/// between start-up and shutdown.
pub trait Executor: Send {
    fn submit(&mut self, desc: &TaskDescription) -> Result<Future, ExecutorError>;
    /// Completions since the last call, waiting up to `timeout` for at
    /// least one when there are none yet.
    fn wait_any(&mut self, timeout: Duration) -> Vec<Completion>;
    fn status(&self) -> ExecutorStatus;
    /// Stops the executor; with `cancel`, in-flight tasks are canceled
    /// instead of completed. Returns the resulting completions.
    fn shutdown(&mut self, cancel: bool) -> Vec<Completion>;
}

#[derive(Debug, Clone)]
pub struct DfkOptions {
    pub log: EventLog,
    /// Modeled graph construction cost per task, charged to a virtual clock.
    pub dag_build_us_per_task: u64,
    /// Longest single wait on the executor before checking for shutdown.
    pub poll: Duration,
}

impl DfkOptions {
    pub fn new(log: EventLog) -> Self {
        DfkOptions {
            log,
            dag_build_us_per_task: 0,
            poll: Duration::from_millis(20),
        }
    }
}

pub struct DfkOutcome {
    pub executor: Box<dyn Executor>,
    /// Uids in the order they were handed to the executor.
    pub submitted: Vec<String>,
    /// Uids failed because a producer failed; never submitted.
    pub propagated: Vec<String>,
    /// Uids canceled by a shutdown before they were submitted.
    pub canceled: Vec<String>,
}

enum Control {
    Shutdown,
}

/// A running workflow. Futures are available immediately.
pub struct Workflow {
    futures: BTreeMap<String, Future>,
    control: Sender<Control>,
    handle: JoinHandle<DfkOutcome>,
}

impl Workflow {
    pub fn futures(&self) -> &BTreeMap<String, Future> {
        &self.futures
    }

    pub fn future(&self, uid: &str) -> Option<&Future> {
        self.futures.get(uid)
    }

    /// Waits until every task is terminal and the executor has shut down.
    pub fn wait(self) -> DfkOutcome {
        self.handle.join().expect("dataflow loop panicked")
    }

    /// Stops mid-workflow: in-flight tasks are canceled in the executor and
    /// unsubmitted tasks are canceled without submission.
    pub fn shutdown(self) -> DfkOutcome {
        let _ = self.control.send(Control::Shutdown);
        self.wait()
    }
}

/// Validates and builds the graph, then starts the event loop that submits
/// tasks as their dependencies clear. Returns without waiting for any task.
pub fn submit_workflow(
    tasks: Vec<TaskDescription>,
    executor: Box<dyn Executor>,
    opts: DfkOptions,
) -> Result<Workflow, DataflowError> {
    let log = opts.log.clone();
    log.system(DFK_UID, SystemEvent::DfkStart);
    log.system(DFK_UID, SystemEvent::DagBuild);
    let graph = TaskGraph::build(tasks)?;
    let mut futures = BTreeMap::new();
    for t in graph.tasks() {
        log.record(&t.uid, TaskState::New, &[], 0, 0);
        futures.insert(t.uid.clone(), Future::new(&t.uid));
    }
    log.clock()
        .charge((opts.dag_build_us_per_task * graph.len() as u64).div_ceil(1000));
    log.system(DFK_UID, SystemEvent::DagBuilt);
    let (tx, rx) = channel();
    let lp = Loop {
        graph,
        executor,
        futures: futures.clone(),
        log,
        poll: opts.poll,
        terminal: HashSet::new(),
        outstanding: 0,
        submitted: Vec::new(),
        propagated: Vec::new(),
    };
    let handle = thread::Builder::new()
        .name("dataflow".into())
        .spawn(move || lp.run(rx))
        .expect("spawn dataflow loop");
    Ok(Workflow {
        futures,
        control: tx,
        handle,
    })
}

enum Work {
    Submit(String),
    Finish(Completion),
}

struct Loop {
    graph: TaskGraph,
    executor: Box<dyn Executor>,
    futures: BTreeMap<String, Future>,
    log: EventLog,
    poll: Duration,
    terminal: HashSet<String>,
    outstanding: usize,
    submitted: Vec<String>,
    propagated: Vec<String>,
}

impl Loop {
    fn run(mut self, control: Receiver<Control>) -> DfkOutcome {
        let mut work: VecDeque<Work> = self.graph.roots().into_iter().map(Work::Submit).collect();
        let mut stop = false;
        loop {
            while let Some(w) = work.pop_front() {
                self.handle(w, &mut work);
            }
            if self.terminal.len() == self.graph.len() {
                break;
            }
            match control.try_recv() {
                Ok(Control::Shutdown) | Err(TryRecvError::Disconnected) => {
                    stop = true;
                    break;
                }
                Err(TryRecvError::Empty) => {}
            }
            if self.outstanding == 0 {
                log::error!("dataflow: no task in flight but workflow incomplete");
                stop = true;
                break;
            }
            for c in self.executor.wait_any(self.poll) {
                work.push_back(Work::Finish(c));
            }
        }
        let mut canceled = Vec::new();
        if !stop {
            for c in self.executor.shutdown(false) {
                self.finish(c, &mut VecDeque::new(), false);
            }
        } else {
            for c in self.executor.shutdown(true) {
                self.finish(c, &mut VecDeque::new(), false);
            }
            for t in self.graph.tasks() {
                if !self.terminal.contains(&t.uid) {
                    self.log.record(&t.uid, TaskState::Canceled, &[], 0, 0);
                    self.futures[&t.uid].complete(TaskResult::error(&t.uid, "canceled"));
                    canceled.push(t.uid.clone());
                }
            }
        }
        self.log.system(DFK_UID, SystemEvent::DfkStop);
        DfkOutcome {
            executor: self.executor,
            submitted: self.submitted,
            propagated: self.propagated,
            canceled,
        }
    }

    fn handle(&mut self, w: Work, work: &mut VecDeque<Work>) {
        match w {
            Work::Submit(uid) => {
                let desc = self.graph.task(&uid).expect("graph task").clone();
                match self.executor.submit(&desc) {
                    Ok(_) => {
                        self.submitted.push(uid);
                        self.outstanding += 1;
                    }
                    Err(e) => {
                        self.log.record(&uid, TaskState::Failed, &[], 0, 0);
                        let result = TaskResult::error(&uid, e.to_string());
                        self.outstanding += 1;
                        work.push_front(Work::Finish(Completion {
                            uid,
                            state: TaskState::Failed,
                            result,
                        }));
                    }
                }
            }
            Work::Finish(c) => self.finish(c, work, true),
        }
    }

    fn finish(&mut self, c: Completion, work: &mut VecDeque<Work>, follow: bool) {
        if !self.terminal.insert(c.uid.clone()) {
            return;
        }
        self.outstanding = self.outstanding.saturating_sub(1);
        let Some(fut) = self.futures.get(&c.uid) else {
            log::warn!("dataflow: completion for unknown task {}", c.uid);
            return;
        };
        fut.complete(c.result.clone());
        if !follow {
            return;
        }
        if c.state == TaskState::Done {
            let ready = self.graph.resolve_dependencies(&c.uid).unwrap_or_default();
            work.extend(ready.into_iter().map(Work::Submit));
            return;
        }
        let cause = c.result.error_message().unwrap_or(c.state.as_str()).to_string();
        for (uid, chain) in self.graph.propagate_failure(&c.uid).unwrap_or_default() {
            if !self.terminal.insert(uid.clone()) {
                continue;
            }
            self.log.record(&uid, TaskState::Failed, &[], 0, 0);
            let msg = format!(
                "dependency chain {}: {} {}: {cause}",
                chain.join(" -> "),
                c.uid,
                c.state.as_str()
            );
            self.futures[&uid].complete(TaskResult::error(&uid, msg));
            self.propagated.push(uid);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;
    use crate::events::Record;
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex};

    /// In-memory executor: completes the oldest in-flight task on each
    /// wait, failing tasks whose uid starts with "bad".
    struct Fifo {
        log: EventLog,
        inflight: VecDeque<String>,
        running: bool,
        futures: HashMap<String, Future>,
        max_inflight: Arc<Mutex<usize>>,
        batch: usize,
    }

    impl Fifo {
        fn new(log: EventLog, batch: usize) -> (Self, Arc<Mutex<usize>>) {
            let peak = Arc::new(Mutex::new(0));
            (
                Fifo {
                    log,
                    inflight: VecDeque::new(),
                    running: true,
                    futures: HashMap::new(),
                    max_inflight: peak.clone(),
                    batch,
                },
                peak,
            )
        }
    }

    impl Executor for Fifo {
        fn submit(&mut self, desc: &TaskDescription) -> Result<Future, ExecutorError> {
            if !self.running {
                return Err(ExecutorError::NotRunning);
            }
            if desc.uid.starts_with("reject") {
                return Err(ExecutorError::Rejected("no".into()));
            }
            self.log.record(&desc.uid, TaskState::Submitted, &[], 0, 0);
            self.inflight.push_back(desc.uid.clone());
            let mut peak = self.max_inflight.lock().unwrap();
            *peak = (*peak).max(self.inflight.len());
            let f = Future::new(&desc.uid);
            self.futures.insert(desc.uid.clone(), f.clone());
            Ok(f)
        }

        fn wait_any(&mut self, _: Duration) -> Vec<Completion> {
            let n = self.batch.min(self.inflight.len()).max(1);
            let mut out = Vec::new();
            for _ in 0..n {
                let Some(uid) = self.inflight.pop_front() else {
                    break;
                };
                let (state, result) = if uid.starts_with("bad") {
                    (TaskState::Failed, TaskResult::error(&uid, "boom"))
                } else {
                    (TaskState::Done, TaskResult::ok(&uid, "null"))
                };
                self.log.record(&uid, state, &[], 0, 0);
                self.futures[&uid].complete(result.clone());
                out.push(Completion { uid, state, result });
            }
            out
        }

        fn status(&self) -> ExecutorStatus {
            ExecutorStatus {
                running: self.running,
                cores: 0,
                gpus: 0,
                in_flight: self.inflight.len(),
            }
        }

        fn shutdown(&mut self, cancel: bool) -> Vec<Completion> {
            self.running = false;
            let mut out = Vec::new();
            while let Some(uid) = self.inflight.pop_front() {
                let (state, result) = if cancel {
                    (TaskState::Canceled, TaskResult::error(&uid, "canceled"))
                } else {
                    (TaskState::Done, TaskResult::ok(&uid, "null"))
                };
                self.log.record(&uid, state, &[], 0, 0);
                out.push(Completion { uid, state, result });
            }
            out
        }
    }

    fn t(uid: &str, deps: &[&str]) -> TaskDescription {
        TaskDescription::function(uid, "noop").after(deps.iter().copied())
    }

    fn run(tasks: Vec<TaskDescription>, batch: usize) -> (DfkOutcome, Vec<Record>, BTreeMap<String, Future>, usize) {
        let log = EventLog::new(Clock::virtual_at(0));
        let (exec, peak) = Fifo::new(log.clone(), batch);
        let wf = submit_workflow(tasks, Box::new(exec), DfkOptions::new(log.clone())).unwrap();
        let futures = wf.futures().clone();
        let out = wf.wait();
        let peak = *peak.lock().unwrap();
        (out, log.snapshot(), futures, peak)
    }

    fn position(order: &[String], uid: &str) -> usize {
        order.iter().position(|u| u == uid).unwrap()
    }

    #[test]
    fn diamond_submits_in_dependency_order() {
        let (out, _, futures, _) = run(
            vec![t("A", &[]), t("B", &["A"]), t("C", &["A"]), t("D", &["B", "C"])],
            1,
        );
        let s = &out.submitted;
        assert_eq!(s[0], "A");
        assert_eq!(s[3], "D");
        assert!(position(s, "B") < 3 && position(s, "C") < 3);
        assert!(futures.values().all(|f| f.state() == FutureState::Resolved));
    }

    #[test]
    fn independent_tasks_are_all_in_flight_together() {
        let tasks: Vec<_> = (0..50).map(|i| t(&format!("x{i}"), &[])).collect();
        let (out, log, _, peak) = run(tasks, 1);
        assert_eq!(out.submitted.len(), 50);
        assert_eq!(peak, 50);
        let first_done = log
            .iter()
            .position(|r| r.task_state() == Some(TaskState::Done))
            .unwrap();
        let submits = log[..first_done]
            .iter()
            .filter(|r| r.task_state() == Some(TaskState::Submitted))
            .count();
        assert_eq!(submits, 50);
    }

    /// Kahn's algorithm with a FIFO frontier, the reference the chain and
    /// random-DAG checks compare against.
    fn topo_oracle(tasks: &[TaskDescription]) -> Option<Vec<String>> {
        let mut indeg: HashMap<&str, usize> = tasks.iter().map(|t| (t.uid.as_str(), t.depends_on.len())).collect();
        let mut frontier: VecDeque<&str> = tasks
            .iter()
            .filter(|t| t.depends_on.is_empty())
            .map(|t| t.uid.as_str())
            .collect();
        let mut out = Vec::new();
        while let Some(u) = frontier.pop_front() {
            out.push(u.to_string());
            for t in tasks {
                if t.depends_on.iter().any(|d| d == u) {
                    let e = indeg.get_mut(t.uid.as_str()).unwrap();
                    *e -= 1;
                    if *e == 0 {
                        frontier.push_back(&t.uid);
                    }
                }
            }
        }
        (out.len() == tasks.len()).then_some(out)
    }

    #[test]
    fn chain_of_one_hundred_is_strictly_sequential() {
        let tasks: Vec<_> = (0..100)
            .map(|i| {
                let deps: Vec<String> = if i == 0 { vec![] } else { vec![format!("c{}", i - 1)] };
                TaskDescription::function(format!("c{i}"), "noop").after(deps)
            })
            .collect();
        let oracle = topo_oracle(&tasks).unwrap();
        let (out, log, _, peak) = run(tasks, 1);
        assert_eq!(out.submitted, oracle);
        assert_eq!(peak, 1);
        // replay: every SUBMITTED comes after its producer's DONE
        let mut done = HashSet::new();
        for r in &log {
            match r.task_state() {
                Some(TaskState::Done) => {
                    done.insert(r.uid.clone());
                }
                Some(TaskState::Submitted) => {
                    let i: usize = r.uid[1..].parse().unwrap();
                    assert!(i == 0 || done.contains(&format!("c{}", i - 1)));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn failure_propagates_with_cause_chain() {
        let (out, log, futures, _) = run(
            vec![
                t("bad", &[]),
                t("B", &["bad"]),
                t("C", &["bad"]),
                t("D", &["B", "C"]),
                t("X", &[]),
            ],
            1,
        );
        assert_eq!(out.submitted, vec!["bad", "X"]);
        assert_eq!(out.propagated, vec!["B", "C", "D"]);
        let d = futures["D"].wait();
        assert_eq!(
            d.error_message().unwrap(),
            "dependency chain bad -> B -> D: bad FAILED: boom"
        );
        assert_eq!(futures["X"].state(), FutureState::Resolved);
        let failed = log.iter().filter(|r| r.task_state() == Some(TaskState::Failed)).count();
        assert_eq!(failed, 4);
    }

    #[test]
    fn rejected_submission_fails_task_and_dependents() {
        let (out, _, futures, _) = run(vec![t("reject1", &[]), t("after", &["reject1"])], 1);
        assert!(out.submitted.is_empty());
        assert_eq!(futures["reject1"].state(), FutureState::Failed);
        assert!(futures["reject1"].wait().error_message().unwrap().contains("rejected"));
        assert_eq!(futures["after"].state(), FutureState::Failed);
    }

    #[test]
    fn graph_errors_surface_before_any_submission() {
        let log = EventLog::new(Clock::virtual_at(0));
        let (exec, _) = Fifo::new(log.clone(), 1);
        let err = submit_workflow(
            vec![t("a", &["b"]), t("b", &["a"])],
            Box::new(exec),
            DfkOptions::new(log),
        )
        .err()
        .unwrap();
        assert!(matches!(err, DataflowError::CycleDetected(_)));
    }

    /// An executor that never completes anything on its own.
    struct Stalled(Fifo);

    impl Executor for Stalled {
        fn submit(&mut self, desc: &TaskDescription) -> Result<Future, ExecutorError> {
            self.0.submit(desc)
        }
        fn wait_any(&mut self, timeout: Duration) -> Vec<Completion> {
            thread::sleep(timeout);
            Vec::new()
        }
        fn status(&self) -> ExecutorStatus {
            self.0.status()
        }
        fn shutdown(&mut self, cancel: bool) -> Vec<Completion> {
            self.0.shutdown(cancel)
        }
    }

    #[test]
    fn shutdown_mid_workflow_cancels_everything_left() {
        let log = EventLog::new(Clock::virtual_at(0));
        let (exec, _) = Fifo::new(log.clone(), 1);
        let mut opts = DfkOptions::new(log.clone());
        opts.poll = Duration::from_millis(2);
        let wf = submit_workflow(
            vec![t("a", &[]), t("b", &[]), t("c", &["a"])],
            Box::new(Stalled(exec)),
            opts,
        )
        .unwrap();
        let futures = wf.futures().clone();
        let out = wf.shutdown();
        assert_eq!(out.canceled, vec!["c"]);
        assert!(futures.values().all(|f| f.state() == FutureState::Failed));
        assert!(futures.values().all(|f| f.completion_attempts() == 1));
        assert!(!out.executor.status().running);
        let canceled = log
            .snapshot()
            .iter()
            .filter(|r| r.task_state() == Some(TaskState::Canceled))
            .count();
        assert_eq!(canceled, 3);
    }
}
