//! The agent loop. One thread owns the slot map, the wait queue and the
//! timer heap; clients talk to it only through channels.
//!
//! Under a virtual clock the agent is driven in lockstep: it moves time
//! only when asked to advance, and then stops right after the earliest
//! batch of completions. Under a real clock it fires timers as they fall
//! due and runs task bodies on their own threads.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::process::Command;
use std::sync::mpsc::{channel, sync_channel, Receiver, RecvTimeoutError, Sender, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::Value;

use super::slots::{fits_pilot, schedule, NodeSlotMap, Placement, Request};
use super::{secs_to_ms, CostModel, PilotDescription, PilotError};
use crate::bridge::{TaskMode, WorkloadTask};
use crate::clock::Clock;
use crate::events::{EventLog, NodeShare, SystemEvent, PILOT_UID, POOL_UID};
use crate::funcpool::{FuncPool, FunctionInvocation, PoolOptions, PoolStats};
use crate::functions::{run_single, FunctionRegistry};
use crate::task::{ExecutableSpec, Payload, TaskResult, TaskState};

/// Largest function pool the agent will start.
const MAX_POOL_WORKERS: u64 = 1024;

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub pilot: PilotDescription,
    pub costs: CostModel,
    pub pool: PoolOptions,
    /// Capacity of the bounded notice queue back to the client.
    pub callback_capacity: usize,
}

impl AgentConfig {
    pub fn new(pilot: PilotDescription) -> Self {
        AgentConfig {
            pilot,
            costs: CostModel::default(),
            pool: PoolOptions::default(),
            callback_capacity: 1024,
        }
    }
}

/// A task state change reported by the agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notice {
    pub uid: String,
    pub state: TaskState,
    pub ts_ms: u64,
    /// Present on terminal states.
    pub result: Option<TaskResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PilotSummary {
    /// Core and GPU slots acquired over the run, counted per slot.
    pub acquired: u64,
    pub released: u64,
    pub pool: Option<PoolStats>,
}

enum Cmd {
    Submit(Box<WorkloadTask>),
    Advance,
    Shutdown { cancel: bool },
    Finished { idx: usize, result: TaskResult },
}

enum Msg {
    Ready,
    Notice(Notice),
    Ack(Result<(), PilotError>),
    Stepped,
    Stopped(PilotSummary),
}

/// Client handle to a running agent.
pub struct Agent {
    cmd: Sender<Cmd>,
    rx: Receiver<Msg>,
    held: VecDeque<Notice>,
    thread: Option<JoinHandle<()>>,
    virtual_clock: bool,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("virtual_clock", &self.virtual_clock)
            .field("running", &self.thread.is_some())
            .finish()
    }
}

impl Agent {
    /// Starts the agent thread and returns once the pilot is active.
    pub fn start(cfg: AgentConfig, registry: Arc<FunctionRegistry>, log: EventLog) -> Result<Agent, PilotError> {
        cfg.pilot.validate()?;
        let (cmd_tx, cmd_rx) = channel();
        let (out_tx, out_rx) = sync_channel(cfg.callback_capacity.max(1));
        let virtual_clock = log.clock().is_virtual();
        let inbox = cmd_tx.clone();
        let thread = thread::Builder::new()
            .name("pilot-agent".into())
            .spawn(move || Core::new(cfg, registry, log, out_tx, inbox).run(cmd_rx))
            .map_err(|e| PilotError::StartupFailure(e.to_string()))?;
        match out_rx.recv() {
            Ok(Msg::Ready) => {}
            _ => return Err(PilotError::StartupFailure("agent exited during start-up".into())),
        }
        Ok(Agent {
            cmd: cmd_tx,
            rx: out_rx,
            held: VecDeque::new(),
            thread: Some(thread),
            virtual_clock,
        })
    }

    pub fn is_virtual(&self) -> bool {
        self.virtual_clock
    }

    /// Hands one translated task to the agent. Returns after the agent has
    /// accepted it, so log order matches submission order.
    pub fn submit(&mut self, task: WorkloadTask) -> Result<(), PilotError> {
        if self.thread.is_none() {
            return Err(PilotError::NotRunning);
        }
        self.cmd
            .send(Cmd::Submit(Box::new(task)))
            .map_err(|_| PilotError::NotRunning)?;
        loop {
            match self.rx.recv() {
                Ok(Msg::Notice(n)) => self.held.push_back(n),
                Ok(Msg::Ack(r)) => return r,
                Ok(_) => {}
                Err(_) => return Err(PilotError::NotRunning),
            }
        }
    }

    /// Returns the notices produced since the last call, waiting for
    /// progress if there are none yet. Under a virtual clock this advances
    /// time to the next completion; under a real clock it waits at most
    /// `timeout`.
    pub fn step(&mut self, timeout: Duration) -> Vec<Notice> {
        let mut out: Vec<Notice> = self.held.drain(..).collect();
        if self.thread.is_none() {
            return out;
        }
        if self.virtual_clock {
            if out.iter().any(|n| n.state.is_terminal()) {
                return out;
            }
            if self.cmd.send(Cmd::Advance).is_err() {
                return out;
            }
            while let Ok(msg) = self.rx.recv() {
                match msg {
                    Msg::Notice(n) => out.push(n),
                    Msg::Stepped => break,
                    _ => {}
                }
            }
            return out;
        }
        if out.is_empty() {
            if let Ok(Msg::Notice(n)) = self.rx.recv_timeout(timeout) {
                out.push(n);
            }
        }
        while let Ok(msg) = self.rx.try_recv() {
            if let Msg::Notice(n) = msg {
                out.push(n);
            }
        }
        out
    }

    /// Cancels the wait queue, completes or cancels running tasks per
    /// `cancel`, frees all slots and stops the agent.
    pub fn drain_and_stop(&mut self, cancel: bool) -> (Vec<Notice>, PilotSummary) {
        let mut out: Vec<Notice> = self.held.drain(..).collect();
        let Some(thread) = self.thread.take() else {
            return (out, PilotSummary::default());
        };
        let _ = self.cmd.send(Cmd::Shutdown { cancel });
        let mut summary = PilotSummary::default();
        while let Ok(msg) = self.rx.recv() {
            match msg {
                Msg::Notice(n) => out.push(n),
                Msg::Stopped(s) => {
                    summary = s;
                    break;
                }
                _ => {}
            }
        }
        let _ = thread.join();
        (out, summary)
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.drain_and_stop(true);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Timer {
    Launched(usize),
    Finished(usize),
    PoolReady,
    Walltime,
}

struct Entry {
    task: WorkloadTask,
    req: Request,
    placement: Option<Placement>,
    /// Result computed ahead of a virtual-time completion.
    result: Option<TaskResult>,
}

struct Core {
    cfg: AgentConfig,
    registry: Arc<FunctionRegistry>,
    log: EventLog,
    clock: Clock,
    slots: NodeSlotMap,
    entries: Vec<Entry>,
    queue: VecDeque<usize>,
    timers: BinaryHeap<Reverse<(u64, u64, Timer)>>,
    timer_seq: u64,
    launch_channel_free: u64,
    deadline: u64,
    expired: bool,
    in_flight: usize,
    terminal_seen: bool,
    out: SyncSender<Msg>,
    inbox: Sender<Cmd>,
    pool: Option<Arc<FuncPool>>,
    pool_ready_at: u64,
    acquired: u64,
    released: u64,
}

impl Core {
    fn new(
        cfg: AgentConfig,
        registry: Arc<FunctionRegistry>,
        log: EventLog,
        out: SyncSender<Msg>,
        inbox: Sender<Cmd>,
    ) -> Self {
        Core {
            slots: cfg.pilot.slot_map(),
            clock: log.clock().clone(),
            cfg,
            registry,
            log,
            entries: Vec::new(),
            queue: VecDeque::new(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            launch_channel_free: 0,
            deadline: u64::MAX,
            expired: false,
            in_flight: 0,
            terminal_seen: false,
            out,
            inbox,
            pool: None,
            pool_ready_at: 0,
            acquired: 0,
            released: 0,
        }
    }

    fn run(mut self, rx: Receiver<Cmd>) {
        let p = &self.cfg.pilot;
        let geometry = p.geometry();
        let (cores, gpus) = (p.total_cores() as u32, p.total_gpus() as u32);
        let start = self
            .log
            .record(PILOT_UID, SystemEvent::PilotStart, &geometry, cores, gpus);
        self.clock.charge(self.cfg.costs.pilot_startup_ms);
        self.log.system(PILOT_UID, SystemEvent::PilotActive);
        self.deadline = start + secs_to_ms(self.cfg.pilot.walltime);
        self.push_timer(self.deadline, Timer::Walltime);
        if self.out.send(Msg::Ready).is_err() {
            return;
        }
        loop {
            let cmd = if self.clock.is_virtual() {
                rx.recv().map_err(|_| RecvTimeoutError::Disconnected)
            } else {
                match self.timers.peek() {
                    Some(Reverse((t, _, _))) => rx.recv_timeout(self.clock.until(*t)),
                    None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                }
            };
            match cmd {
                Ok(Cmd::Submit(task)) => {
                    let r = self.submit(*task);
                    self.send(Msg::Ack(r));
                }
                Ok(Cmd::Advance) => {
                    self.step_virtual();
                    self.send(Msg::Stepped);
                }
                Ok(Cmd::Finished { idx, result }) => self.finished(idx, result),
                Ok(Cmd::Shutdown { cancel }) => {
                    let summary = self.shutdown(cancel, &rx);
                    self.send(Msg::Stopped(summary));
                    return;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    self.shutdown(true, &rx);
                    return;
                }
            }
            if !self.clock.is_virtual() {
                self.fire_due_timers();
            }
        }
    }

    fn send(&self, msg: Msg) {
        let _ = self.out.send(msg);
    }

    fn push_timer(&mut self, at: u64, t: Timer) {
        self.timer_seq += 1;
        self.timers.push(Reverse((at, self.timer_seq, t)));
    }

    fn fire_due_timers(&mut self) {
        let now = self.clock.now_ms();
        while let Some(Reverse((at, _, _))) = self.timers.peek() {
            if *at > now {
                break;
            }
            let Reverse((_, _, t)) = self.timers.pop().unwrap();
            self.on_timer(t);
        }
    }

    /// Processes timers in time order until at least one task reaches a
    /// terminal state, then finishes every timer due at that same instant.
    fn step_virtual(&mut self) {
        if self.in_flight == 0 {
            return;
        }
        self.terminal_seen = false;
        let mut stop_at = None;
        while let Some(Reverse((at, _, _))) = self.timers.peek() {
            let at = *at;
            if stop_at.is_some_and(|s| at > s) {
                break;
            }
            let Reverse((_, _, t)) = self.timers.pop().unwrap();
            self.clock.advance_to(at);
            self.on_timer(t);
            if stop_at.is_none() && self.terminal_seen {
                stop_at = Some(at);
            }
        }
    }

    fn on_timer(&mut self, t: Timer) {
        match t {
            Timer::Launched(idx) => self.launched(idx),
            Timer::Finished(idx) => {
                if let Some(result) = self.entries[idx].result.take() {
                    self.finished(idx, result);
                }
            }
            Timer::PoolReady => {
                self.log.system(POOL_UID, SystemEvent::PoolReady);
            }
            Timer::Walltime => self.expire(),
        }
    }

    /// Moves entry `idx` to `state`, logs it and notifies the client.
    fn set_state(&mut self, idx: usize, state: TaskState, result: Option<TaskResult>) {
        let e = &mut self.entries[idx];
        let (shares, cores, gpus) = match &e.placement {
            Some(p) => (p.shares(), p.cores(), p.gpus()),
            None => (Vec::<NodeShare>::new(), e.req.cores(), e.req.gpus),
        };
        let ts = self.log.record(&e.task.uid, state, &shares, cores, gpus);
        if let Err(err) = e.task.record(state, ts) {
            log::error!("agent: {} {err}", e.task.uid);
            return;
        }
        if state.is_terminal() {
            self.in_flight -= 1;
            self.terminal_seen = true;
        }
        let notice = Notice {
            uid: e.task.uid.clone(),
            state,
            ts_ms: ts,
            result,
        };
        self.send(Msg::Notice(notice));
    }

    fn submit(&mut self, task: WorkloadTask) -> Result<(), PilotError> {
        if task.state != TaskState::Translated {
            return Err(PilotError::NotTranslated {
                uid: task.uid.clone(),
                state: task.state.to_string(),
            });
        }
        let idx = self.entries.len();
        let req = task.request();
        self.entries.push(Entry {
            task,
            req,
            placement: None,
            result: None,
        });
        self.in_flight += 1;
        self.set_state(idx, TaskState::Submitted, None);
        if !fits_pilot(&req, &self.slots) {
            let uid = self.entries[idx].task.uid.clone();
            let msg = format!(
                "CapacityExceeded: {} ranks x {} cores, {} gpus cannot fit {} nodes x {} cores, {} gpus",
                req.ranks,
                req.cores_per_rank,
                req.gpus,
                self.slots.nodes(),
                self.slots.cores_per_node(),
                self.slots.gpus_per_node()
            );
            self.set_state(idx, TaskState::Failed, Some(TaskResult::error(uid, msg)));
        } else if self.expired {
            self.cancel(idx);
        } else {
            self.queue.push_back(idx);
            self.pump();
        }
        Ok(())
    }

    /// Places queued tasks in FIFO order until the head does not fit.
    fn pump(&mut self) {
        while let Some(&idx) = self.queue.front() {
            let e = &self.entries[idx];
            let Some(p) = schedule(&e.task.uid, &e.req, &self.slots) else {
                break;
            };
            self.queue.pop_front();
            self.slots
                .acquire(&p, idx as u64)
                .expect("placement computed from current map");
            self.acquired += u64::from(p.cores() + p.gpus());
            self.entries[idx].placement = Some(p);
            self.set_state(idx, TaskState::Scheduled, None);
            self.set_state(idx, TaskState::Launching, None);
            let now = self.clock.now_ms();
            let at = self.cfg.pilot.launcher.launch_end(now, &mut self.launch_channel_free);
            if at <= now {
                self.launched(idx);
            } else {
                self.push_timer(at, Timer::Launched(idx));
            }
        }
    }

    fn launched(&mut self, idx: usize) {
        if self.entries[idx].task.state != TaskState::Launching {
            return;
        }
        self.set_state(idx, TaskState::Running, None);
        self.execute(idx);
    }

    fn execute(&mut self, idx: usize) {
        let task = self.entries[idx].task.clone();
        let duration_ms = task.synthetic_duration.map(secs_to_ms).unwrap_or(0);
        if task.mode == TaskMode::MpiFunction {
            self.ensure_pool();
        }
        if self.clock.is_virtual() {
            let now = self.clock.now_ms();
            let (result, extra_ms) = match task.mode {
                TaskMode::MpiFunction => {
                    let pool = self.pool.clone().expect("pool started");
                    let before = pool.stats().constructions;
                    let result = run_mpi(&pool, &task);
                    let setup = if pool.stats().constructions > before {
                        self.cfg.costs.group_setup_ms(task.ranks)
                    } else {
                        0
                    };
                    (result, self.pool_ready_at.saturating_sub(now) + setup)
                }
                TaskMode::Executable if task.synthetic_duration.is_none() => {
                    let t = Instant::now();
                    let result = run_body(&self.registry, None, &task);
                    (result, t.elapsed().as_millis() as u64)
                }
                _ => (run_body(&self.registry, None, &task), 0),
            };
            self.entries[idx].result = Some(result);
            self.push_timer(now + extra_ms + duration_ms, Timer::Finished(idx));
            return;
        }
        let registry = self.registry.clone();
        let pool = self.pool.clone();
        let inbox = self.inbox.clone();
        let spawned = thread::Builder::new()
            .name(format!("task-{}", task.uid))
            .spawn(move || {
                let result = run_body(&registry, pool.as_deref(), &task);
                if duration_ms > 0 {
                    thread::sleep(Duration::from_millis(duration_ms));
                }
                let _ = inbox.send(Cmd::Finished { idx, result });
            });
        if let Err(e) = spawned {
            let uid = self.entries[idx].task.uid.clone();
            self.finished(idx, TaskResult::error(uid, format!("cannot start task thread: {e}")));
        }
    }

    fn ensure_pool(&mut self) {
        if self.pool.is_some() {
            return;
        }
        let workers = self.cfg.pilot.total_cores().min(MAX_POOL_WORKERS) as usize;
        self.log.system(POOL_UID, SystemEvent::PoolStart);
        match FuncPool::start(workers + 1, self.registry.clone(), self.cfg.pool) {
            Ok(pool) => self.pool = Some(Arc::new(pool)),
            Err(e) => {
                log::error!("function pool failed to start: {e}");
                return;
            }
        }
        if self.clock.is_virtual() {
            self.pool_ready_at = self.clock.now_ms() + self.cfg.costs.pool_startup_ms;
            self.push_timer(self.pool_ready_at, Timer::PoolReady);
        } else {
            self.log.system(POOL_UID, SystemEvent::PoolReady);
        }
    }

    fn finished(&mut self, idx: usize, result: TaskResult) {
        if self.entries[idx].task.state.is_terminal() {
            return;
        }
        self.release(idx);
        let state = if result.is_ok() {
            TaskState::Done
        } else {
            TaskState::Failed
        };
        self.set_state(idx, state, Some(result));
        self.pump();
    }

    fn release(&mut self, idx: usize) {
        if let Some(p) = &self.entries[idx].placement {
            self.slots
                .release(p, idx as u64)
                .expect("entry holds its own placement");
            self.released += u64::from(p.cores() + p.gpus());
        }
    }

    fn cancel(&mut self, idx: usize) {
        if self.entries[idx].task.state.is_terminal() {
            return;
        }
        let uid = self.entries[idx].task.uid.clone();
        self.set_state(idx, TaskState::Canceled, Some(TaskResult::error(uid, "canceled")));
        self.release(idx);
    }

    fn cancel_queue(&mut self) {
        while let Some(idx) = self.queue.pop_front() {
            self.cancel(idx);
        }
    }

    fn cancel_running(&mut self) {
        for idx in 0..self.entries.len() {
            if self.entries[idx].placement.is_some() {
                self.cancel(idx);
            }
        }
    }

    fn expire(&mut self) {
        if self.expired {
            return;
        }
        self.expired = true;
        log::warn!("pilot walltime reached; canceling outstanding tasks");
        self.cancel_queue();
        self.cancel_running();
    }

    fn shutdown(&mut self, cancel: bool, rx: &Receiver<Cmd>) -> PilotSummary {
        self.log.system(PILOT_UID, SystemEvent::PilotDrain);
        self.cancel_queue();
        if cancel {
            self.cancel_running();
        }
        while self.in_flight > 0 {
            if self.clock.is_virtual() {
                let Some(Reverse((at, _, t))) = self.timers.pop() else {
                    break;
                };
                self.clock.advance_to(at);
                self.on_timer(t);
                continue;
            }
            match rx.recv_timeout(self.clock.until(self.deadline)) {
                Ok(Cmd::Finished { idx, result }) => self.finished(idx, result),
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout) => self.expire(),
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        debug_assert!(self.slots.is_empty());
        let now = self.clock.now_ms();
        let teardown_end = (now + self.cfg.costs.pilot_teardown_ms).min(self.deadline.max(now));
        self.clock.advance_to(teardown_end);
        let pool_stats = self.pool.take().map(|pool| {
            self.log.system(POOL_UID, SystemEvent::PoolStop);
            let stats = pool.stats();
            // A real-clock task thread may still hold a clone; it stops the
            // pool when it drops.
            if let Ok(pool) = Arc::try_unwrap(pool) {
                pool.stop();
            }
            stats
        });
        self.log.system(PILOT_UID, SystemEvent::PilotStopped);
        PilotSummary {
            acquired: self.acquired,
            released: self.released,
            pool: pool_stats,
        }
    }
}

fn run_body(registry: &FunctionRegistry, pool: Option<&FuncPool>, task: &WorkloadTask) -> TaskResult {
    match (&task.payload, task.mode) {
        (Payload::Function(_), TaskMode::MpiFunction) => match pool {
            Some(pool) => run_mpi(pool, task),
            None => TaskResult::error(&task.uid, "function pool unavailable"),
        },
        (Payload::Function(f), _) => match registry.get(&f.name) {
            Some(func) => match run_single(&*func, &task.uid, &f.args) {
                Ok(v) => TaskResult::ok(&task.uid, v.to_string()),
                Err(e) => TaskResult::error(&task.uid, e),
            },
            None => TaskResult::error(&task.uid, format!("unsupported function {}", f.name)),
        },
        (Payload::Executable(_), _) if task.synthetic_duration.is_some() => {
            TaskResult::ok(&task.uid, "").with_exit_code(0)
        }
        (Payload::Executable(spec), _) => run_process(&task.uid, spec),
    }
}

fn run_mpi(pool: &FuncPool, task: &WorkloadTask) -> TaskResult {
    let Payload::Function(f) = &task.payload else {
        return TaskResult::error(&task.uid, "mpi_function task without a function payload");
    };
    let inv = FunctionInvocation {
        uid: task.uid.clone(),
        function: f.name.clone(),
        args: f.args.clone(),
        k: task.ranks,
    };
    match pool.run(&inv) {
        Ok(r) if r.is_ok() => {
            let values: Vec<Value> = r
                .blobs
                .iter()
                .map(|b| serde_json::from_slice(b).unwrap_or(Value::Null))
                .collect();
            TaskResult::ok(&task.uid, Value::Array(values).to_string())
        }
        Ok(r) => TaskResult::error(&task.uid, r.error_message().unwrap_or_default()),
        Err(e) => TaskResult::error(&task.uid, e.to_string()),
    }
}

fn run_process(uid: &str, spec: &ExecutableSpec) -> TaskResult {
    let output = Command::new(&spec.program)
        .args(&spec.args)
        .envs(spec.env.iter().map(|(k, v)| (k, v)))
        .output();
    match output {
        Err(e) => TaskResult::error(uid, format!("cannot start {}: {e}", spec.program)).with_exit_code(-1),
        Ok(out) => {
            let code = out.status.code().unwrap_or(-1);
            if out.status.success() {
                TaskResult::ok(uid, String::from_utf8_lossy(&out.stdout).trim_end()).with_exit_code(code)
            } else {
                let stderr = String::from_utf8_lossy(&out.stderr);
                let msg = format!("{} exited with status {code}: {}", spec.program, stderr.trim_end());
                TaskResult::error(uid, msg).with_exit_code(code)
            }
        }
    }
}
