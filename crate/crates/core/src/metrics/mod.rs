//! Run metrics and resource-utilization accounting computed from an event
//! log, plus CSV/JSON report output.
//!
//! All computations are pure functions of the records. Times are integer
//! milliseconds internally and are converted to seconds only for output.

mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{NodeShare, Record, SystemEvent};
use crate::task::{advance_state, TaskState};

pub use report::{emit_report, read_csv_report, read_json_report, ReportFormat, ReportRow, RunReport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("MalformedLog: line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error("IoFailure: {0}")]
    IoFailure(String),
}

fn malformed(line: usize, reason: impl Into<String>) -> MetricsError {
    MetricsError::MalformedLog {
        line,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tpt_s: f64,
    pub ts_per_s: f64,
    pub ttx_s: f64,
    pub runtime_overhead_s: f64,
    pub total_overhead_s: f64,
    pub n_tasks: u64,
    pub n_nodes: u32,
}

/// Core-milliseconds per utilization state over the pilot's life.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationBreakdown {
    pub scheduled_core_ms: u64,
    pub launching_core_ms: u64,
    pub running_core_ms: u64,
    pub idle_core_ms: u64,
    pub total_core_ms: u64,
}

impl UtilizationBreakdown {
    /// Scheduled + Launching + Running + Idle == total.
    pub fn identity_holds(&self) -> bool {
        self.scheduled_core_ms + self.launching_core_ms + self.running_core_ms + self.idle_core_ms == self.total_core_ms
    }

    pub fn fraction(&self, core_ms: u64) -> f64 {
        if self.total_core_ms == 0 {
            0.0
        } else {
            core_ms as f64 / self.total_core_ms as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricsOptions {
    /// Remove the function pool's start-up interval from the busy union.
    pub exclude_pool_start: bool,
}

/// Lifecycle of one task as found in the log.
#[derive(Debug, Clone, Default)]
struct TaskTrace {
    stamps: Vec<(TaskState, u64)>,
    /// Cores held once placed, per node.
    shares: Vec<NodeShare>,
    held_cores: u32,
}

impl TaskTrace {
    fn at(&self, s: TaskState) -> Option<u64> {
        self.stamps.iter().find(|(x, _)| *x == s).map(|(_, t)| *t)
    }

    fn terminal(&self) -> Option<u64> {
        self.stamps.iter().find(|(s, _)| s.is_terminal()).map(|(_, t)| *t)
    }
}

/// Replay-validated view of a log.
#[derive(Debug, Clone)]
struct Replay {
    tasks: BTreeMap<String, TaskTrace>,
    system: HashMap<SystemEvent, u64>,
    geometry: Vec<NodeShare>,
}

impl Replay {
    fn sys(&self, e: SystemEvent) -> Option<u64> {
        self.system.get(&e).copied()
    }

    fn span(&self, from: SystemEvent, to: SystemEvent) -> u64 {
        match (self.sys(from), self.sys(to)) {
            (Some(a), Some(b)) => b.saturating_sub(a),
            _ => 0,
        }
    }
}

/// Checks that a log could have been produced by a run: nondecreasing
/// timestamps, legal per-task transitions, nothing after a terminal state,
/// each component event at most once, and placements within the pilot.
pub fn validate_log(records: &[Record]) -> Result<(), MetricsError> {
    replay(records).map(|_| ())
}

fn replay(records: &[Record]) -> Result<Replay, MetricsError> {
    let mut tasks: BTreeMap<String, TaskTrace> = BTreeMap::new();
    let mut system = HashMap::new();
    let mut geometry = Vec::new();
    let mut prev = 0;
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if r.ts_ms < prev {
            return Err(malformed(line, format!("timestamp {} precedes {prev}", r.ts_ms)));
        }
        prev = r.ts_ms;
        match r.task_state() {
            None => {
                let ev = r.system_event().expect("non-task record is a system event");
                if system.insert(ev, r.ts_ms).is_some() {
                    return Err(malformed(line, format!("repeated {}", ev.as_str())));
                }
                if ev == SystemEvent::PilotStart {
                    geometry = r.nodes.clone();
                }
            }
            Some(state) => {
                let t = tasks.entry(r.uid.clone()).or_default();
                let current = t.stamps.last().map_or(TaskState::New, |(s, _)| *s);
                if !(t.stamps.is_empty() && state == TaskState::New) {
                    advance_state(current, state).map_err(|e| malformed(line, format!("{}: {e}", r.uid)))?;
                }
                if matches!(state, TaskState::Scheduled) || (t.shares.is_empty() && !r.nodes.is_empty()) {
                    t.shares = r.nodes.clone();
                    t.held_cores = if r.nodes.is_empty() {
                        r.cores
                    } else {
                        r.nodes.iter().map(|s| s.cores).sum()
                    };
                }
                t.stamps.push((state, r.ts_ms));
            }
        }
    }
    let cpn: HashMap<u32, u32> = geometry.iter().map(|s| (s.node, s.cores)).collect();
    for (uid, t) in &tasks {
        for s in &t.shares {
            match cpn.get(&s.node) {
                Some(&c) if s.cores <= c => {}
                _ => {
                    return Err(malformed(
                        0,
                        format!("{uid} holds {} cores on node {} outside the pilot", s.cores, s.node),
                    ))
                }
            }
        }
    }
    Ok(Replay {
        tasks,
        system,
        geometry,
    })
}

/// Length of the union of half-open intervals.
fn union_len(mut spans: Vec<(u64, u64)>) -> u64 {
    spans.retain(|(a, b)| b > a);
    spans.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(u64, u64)> = None;
    for (a, b) in spans {
        cur = match cur {
            Some((ca, cb)) if a <= cb => Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    total + cur.map_or(0, |(a, b)| b - a)
}

/// Length of the union of `spans` minus its overlap with `cut`.
fn union_len_without(spans: Vec<(u64, u64)>, cut: (u64, u64)) -> u64 {
    let mut pieces = Vec::with_capacity(spans.len() * 2);
    for (a, b) in spans {
        pieces.push((a, b.min(cut.0)));
        pieces.push((a.max(cut.1), b));
    }
    union_len(pieces)
}

fn secs(ms: u64) -> f64 {
    ms as f64 / 1000.0
}

/// TPT, TS, TTX and the two overhead brackets.
///
/// TPT is the length of the union of per-task `[SCHEDULED, terminal]`
/// spans, so gaps where no task holds resources do not count. TTX runs
/// from the first SUBMITTED to the last terminal record.
pub fn compute_metrics(records: &[Record], opts: MetricsOptions) -> Result<RunMetrics, MetricsError> {
    let rp = replay(records)?;
    let spans: Vec<(u64, u64)> = rp
        .tasks
        .values()
        .filter_map(|t| Some((t.at(TaskState::Scheduled)?, t.terminal()?)))
        .collect();
    let pool = (rp.sys(SystemEvent::PoolStart), rp.sys(SystemEvent::PoolReady));
    let tpt_ms = match pool {
        (Some(a), Some(b)) if opts.exclude_pool_start => union_len_without(spans, (a, b)),
        _ => union_len(spans),
    };
    let finished: Vec<&TaskTrace> = rp.tasks.values().filter(|t| t.terminal().is_some()).collect();
    let n_tasks = finished.len() as u64;
    let first_submit = rp.tasks.values().filter_map(|t| t.at(TaskState::Submitted)).min();
    let last_terminal = finished.iter().filter_map(|t| t.terminal()).max();
    let ttx_ms = match (first_submit, last_terminal) {
        (Some(a), Some(b)) => b.saturating_sub(a),
        _ => 0,
    };
    use SystemEvent::*;
    let runtime = rp.span(PilotStart, PilotActive) + rp.span(PilotDrain, PilotStopped);
    let bridge = rp.span(ExecutorStart, ExecutorReady) + rp.span(ExecutorShutdown, ExecutorStopped);
    // The executor brackets contain the pilot's own start and stop.
    let total = runtime.max(bridge) + rp.span(DagBuild, DagBuilt);
    let tpt_s = secs(tpt_ms);
    Ok(RunMetrics {
        tpt_s,
        ts_per_s: if tpt_ms == 0 { 0.0 } else { n_tasks as f64 / tpt_s },
        ttx_s: secs(ttx_ms),
        runtime_overhead_s: secs(runtime),
        total_overhead_s: secs(total),
        n_tasks,
        n_nodes: rp.geometry.len() as u32,
    })
}

/// Core-time in each utilization state over `[PILOT_ACTIVE, PILOT_STOPPED]`.
///
/// A task holds its cores in Scheduled from SCHEDULED to LAUNCHING, in
/// Launching until RUNNING and in Running until its terminal record. Idle is
/// integrated separately per node from the free-core count, so the identity
/// with the total is a check rather than a definition.
pub fn compute_utilization(records: &[Record]) -> Result<UtilizationBreakdown, MetricsError> {
    let rp = replay(records)?;
    let (Some(lo), Some(hi)) = (rp.sys(SystemEvent::PilotActive), rp.sys(SystemEvent::PilotStopped)) else {
        return Ok(UtilizationBreakdown::default());
    };
    let clip = |a: u64, b: u64| -> (u64, u64) { (a.clamp(lo, hi), b.clamp(lo, hi)) };
    let mut u = UtilizationBreakdown {
        total_core_ms: rp.geometry.iter().map(|s| s.cores as u64).sum::<u64>() * (hi - lo),
        ..Default::default()
    };
    // node -> (time, delta cores)
    let mut deltas: BTreeMap<u32, Vec<(u64, i64)>> = BTreeMap::new();
    for t in rp.tasks.values() {
        let Some(sched) = t.at(TaskState::Scheduled) else {
            continue;
        };
        let end = t.terminal().unwrap_or(hi);
        let launch = t.at(TaskState::Launching).unwrap_or(end);
        let run = t.at(TaskState::Running).unwrap_or(end);
        let cores = t.held_cores as u64;
        let phases = [
            (&mut u.scheduled_core_ms, sched, launch),
            (&mut u.launching_core_ms, launch, run),
            (&mut u.running_core_ms, run, end),
        ];
        for (acc, a, b) in phases {
            let (a, b) = clip(a, b);
            *acc += cores * (b - a);
        }
        let (a, b) = clip(sched, end);
        for s in &t.shares {
            let d = deltas.entry(s.node).or_default();
            d.push((a, s.cores as i64));
            d.push((b, -(s.cores as i64)));
        }
    }
    for node in &rp.geometry {
        let mut events = deltas.remove(&node.node).unwrap_or_default();
        events.sort_unstable();
        let mut t = lo;
        let mut used: i64 = 0;
        for (at, d) in events {
            u.idle_core_ms += (node.cores as i64 - used).max(0) as u64 * (at - t);
            used += d;
            t = at;
        }
        u.idle_core_ms += (node.cores as i64 - used).max(0) as u64 * (hi - t);
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{parse_log, LogState, DFK_UID, EXECUTOR_UID, PILOT_UID};
    use proptest::prelude::*;

    fn rec(ts: u64, uid: &str, state: impl Into<LogState>, nodes: &[(u32, u32)], cores: u32) -> Record {
        Record {
            ts_ms: ts,
            uid: uid.into(),
            state: state.into(),
            nodes: nodes
                .iter()
                .map(|&(node, cores)| NodeShare { node, cores, gpus: 0 })
                .collect(),
            cores,
            gpus: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn task(uid: &str, submit: u64, sched: u64, launch: u64, run: u64, end: u64, node: u32, cores: u32) -> Vec<Record> {
        let n = [(node, cores)];
        vec![
            rec(submit, uid, TaskState::Submitted, &[], cores),
            rec(sched, uid, TaskState::Scheduled, &n, cores),
            rec(launch, uid, TaskState::Launching, &n, cores),
            rec(run, uid, TaskState::Running, &n, cores),
            rec(end, uid, TaskState::Done, &n, cores),
        ]
    }

    fn pilot(nodes: u32, cores: u32, start: u64, active: u64) -> Vec<Record> {
        let geo: Vec<(u32, u32)> = (0..nodes).map(|n| (n, cores)).collect();
        vec![
            rec(start, PILOT_UID, SystemEvent::PilotStart, &geo, nodes * cores),
            rec(active, PILOT_UID, SystemEvent::PilotActive, &[], 0),
        ]
    }

    fn stop(drain: u64, stopped: u64) -> Vec<Record> {
        vec![
            rec(drain, PILOT_UID, SystemEvent::PilotDrain, &[], 0),
            rec(stopped, PILOT_UID, SystemEvent::PilotStopped, &[], 0),
        ]
    }

    fn sorted(mut v: Vec<Record>) -> Vec<Record> {
        v.sort_by_key(|r| r.ts_ms);
        v
    }

    #[test]
    fn idle_gap_between_busy_phases_is_not_processing_time() {
        let mut log = pilot(1, 4, 0, 0);
        log.extend(task("a", 0, 0, 0, 0, 5000, 0, 1));
        log.extend(task("b", 0, 15000, 15000, 15000, 20000, 0, 1));
        log.extend(stop(20000, 20000));
        let m = compute_metrics(&sorted(log), MetricsOptions::default()).unwrap();
        assert_eq!(m.tpt_s, 10.0);
        assert_eq!(m.ttx_s, 20.0);
        assert_eq!(m.ts_per_s, 0.2);
        assert_eq!(m.n_tasks, 2);
    }

    #[test]
    fn hundred_tasks_in_fifty_seconds() {
        let mut log = pilot(1, 100, 0, 0);
        for i in 0..100 {
            log.extend(task(&format!("t{i}"), 0, 0, 0, 0, 50_000, 0, 1));
        }
        let m = compute_metrics(&sorted(log), MetricsOptions::default()).unwrap();
        assert_eq!(m.ts_per_s, 2.0);
    }

    #[test]
    fn one_task_on_two_nodes_of_four() {
        let mut log = pilot(2, 4, 0, 0);
        log.extend(task("t", 1000, 2000, 2000, 2000, 7000, 0, 4));
        log.extend(stop(10_000, 10_000));
        let u = compute_utilization(&sorted(log)).unwrap();
        assert_eq!(u.running_core_ms, 20_000);
        assert_eq!(u.idle_core_ms, 60_000);
        assert_eq!(u.scheduled_core_ms + u.launching_core_ms, 0);
        assert_eq!(u.total_core_ms, 80_000);
        assert!(u.identity_holds());
    }

    #[test]
    fn empty_run_is_all_idle() {
        let mut log = pilot(3, 2, 0, 1000);
        log.extend(stop(5000, 5100));
        let u = compute_utilization(&log).unwrap();
        assert_eq!(u.idle_core_ms, u.total_core_ms);
        assert_eq!(u.total_core_ms, 6 * 4100);
        let m = compute_metrics(&log, MetricsOptions::default()).unwrap();
        assert_eq!((m.tpt_s, m.ts_per_s, m.n_tasks), (0.0, 0.0, 0));
        assert_eq!(m.runtime_overhead_s, 1.1);
    }

    #[test]
    fn pool_start_can_be_left_out_of_processing_time() {
        let mut log = pilot(1, 8, 0, 0);
        log.push(rec(1000, "funcpool", SystemEvent::PoolStart, &[], 0));
        log.push(rec(1200, "funcpool", SystemEvent::PoolReady, &[], 0));
        log.extend(task("m", 1000, 1000, 1000, 1000, 2200, 0, 4));
        let log = sorted(log);
        let with = compute_metrics(&log, MetricsOptions::default()).unwrap();
        let without = compute_metrics(
            &log,
            MetricsOptions {
                exclude_pool_start: true,
            },
        )
        .unwrap();
        assert_eq!(with.tpt_s, 1.2);
        assert_eq!(without.tpt_s, 1.0);
    }

    #[test]
    fn overheads_nest() {
        let log = parse_log(
            "0,dfk,DFK_START,,0,0\n\
             0,dfk,DAG_BUILD,,0,0\n\
             40,dfk,DAG_BUILT,,0,0\n\
             40,executor,EXECUTOR_START,,0,0\n\
             40,pilot,PILOT_START,0:4:0,4,0\n\
             1040,pilot,PILOT_ACTIVE,,0,0\n\
             1540,executor,EXECUTOR_READY,,0,0\n\
             1540,t,TRANSLATED,,1,0\n\
             1540,t,SUBMITTED,,1,0\n\
             1540,t,SCHEDULED,0:1:0,1,0\n\
             1540,t,LAUNCHING,0:1:0,1,0\n\
             1540,t,RUNNING,0:1:0,1,0\n\
             2540,t,DONE,0:1:0,1,0\n\
             2540,executor,EXECUTOR_SHUTDOWN,,0,0\n\
             2540,pilot,PILOT_DRAIN,,0,0\n\
             2640,pilot,PILOT_STOPPED,,0,0\n\
             2840,executor,EXECUTOR_STOPPED,,0,0\n\
             2840,dfk,DFK_STOP,,0,0\n",
        )
        .unwrap();
        let m = compute_metrics(&log, MetricsOptions::default()).unwrap();
        assert_eq!(m.runtime_overhead_s, 1.1);
        // executor start..ready 1.5 s + shutdown..stopped 0.3 s + DAG 0.04 s
        assert_eq!(m.total_overhead_s, 1.84);
        assert_eq!(m.tpt_s, 1.0);
        assert_eq!(m.ttx_s, 1.0);
        let _ = (DFK_UID, EXECUTOR_UID);
    }

    #[test]
    fn replay_rejects_impossible_logs() {
        let back_in_time = vec![
            rec(10, "t", TaskState::Submitted, &[], 1),
            rec(5, "t", TaskState::Scheduled, &[(0, 1)], 1),
        ];
        assert!(matches!(
            compute_metrics(&back_in_time, MetricsOptions::default()),
            Err(MetricsError::MalformedLog { line: 2, .. })
        ));
        let after_terminal = vec![
            rec(0, "t", TaskState::Done, &[], 1),
            rec(1, "t", TaskState::Running, &[], 1),
        ];
        assert!(matches!(
            validate_log(&after_terminal),
            Err(MetricsError::MalformedLog { line: 2, .. })
        ));
        let backwards = vec![
            rec(0, "t", TaskState::Running, &[], 1),
            rec(1, "t", TaskState::Scheduled, &[], 1),
        ];
        assert!(validate_log(&backwards).is_err());
        let mut twice = pilot(1, 1, 0, 0);
        twice.extend(pilot(1, 1, 0, 0));
        assert!(validate_log(&twice).is_err());
        let mut outside = pilot(1, 2, 0, 0);
        outside.extend(task("t", 0, 0, 0, 0, 1, 3, 1));
        assert!(validate_log(&outside).is_err());
    }

    /// Brute-force oracle: one counter per millisecond.
    fn union_oracle(spans: &[(u64, u64)]) -> u64 {
        let end = spans.iter().map(|s| s.1).max().unwrap_or(0);
        (0..end)
            .filter(|&t| spans.iter().any(|&(a, b)| a <= t && t < b))
            .count() as u64
    }

    proptest! {
        #[test]
        fn union_matches_per_millisecond_count(
            spans in prop::collection::vec((0u64..500, 0u64..100), 0..30),
        ) {
            let spans: Vec<(u64, u64)> = spans.into_iter().map(|(a, l)| (a, a + l)).collect();
            prop_assert_eq!(union_len(spans.clone()), union_oracle(&spans));
        }

        #[test]
        fn recomputation_is_bit_identical(
            durs in prop::collection::vec(1u64..690, 1..20),
        ) {
            let mut log = pilot(1, 4, 0, 100);
            for (i, d) in durs.iter().enumerate() {
                let s = 100 + 700 * i as u64;
                log.extend(task(&format!("t{i}"), 100, s, s, s + 10, s + 10 + d, 0, 1 + (i as u32 % 4)));
            }
            let end = log.iter().map(|r| r.ts_ms).max().unwrap();
            log.extend(stop(end, end + 100));
            let log = sorted(log);
            let a = compute_metrics(&log, MetricsOptions::default()).unwrap();
            let b = compute_metrics(&log, MetricsOptions::default()).unwrap();
            prop_assert_eq!(a.tpt_s.to_bits(), b.tpt_s.to_bits());
            prop_assert_eq!(a.ts_per_s.to_bits(), b.ts_per_s.to_bits());
            prop_assert!(a.tpt_s <= a.ttx_s);
            prop_assert!(a.runtime_overhead_s <= a.total_overhead_s);
            let u = compute_utilization(&log).unwrap();
            prop_assert!(u.identity_holds(), "{:?}", u);
        }
    }
}
