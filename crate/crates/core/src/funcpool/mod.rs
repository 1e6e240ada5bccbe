//! SPMD function pool: a master rank plus `W - 1` worker ranks.
//!
//! The master receives invocations over an intake channel, carves a worker
//! group for each one, and returns the gathered per-rank results. Workers
//! only talk to each other through group-scoped messages.

mod group;
pub mod protocol;
pub mod scheduler;
pub mod transport;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::functions::{invoke, FunctionRegistry, RankContext};
use group::GroupComm;
use protocol::{decode_invocation, decode_result, encode_invocation, encode_result, Reader, Writer};
pub use protocol::{FunctionInvocation, InvocationResult, ProtocolError, ResultStatus};
pub use scheduler::WorkerStatus;
use scheduler::{Dispatch, GroupScheduler};
pub use transport::{Delivery, MsgKind, TransportKind, CLIENT_RANK};
use transport::{DeliveryLog, Envelope, Fabric, Mailbox, Net};

static LIVE_CONTEXTS: AtomicUsize = AtomicUsize::new(0);

/// Number of pool execution contexts (threads) currently alive, across all
/// pools in the process.
pub fn live_contexts() -> usize {
    LIVE_CONTEXTS.load(Ordering::SeqCst)
}

pub(crate) struct ContextGuard(());

impl ContextGuard {
    pub fn new() -> Self {
        LIVE_CONTEXTS.fetch_add(1, Ordering::SeqCst);
        ContextGuard(())
    }
}

impl Drop for ContextGuard {
    fn drop(&mut self) {
        LIVE_CONTEXTS.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("pool needs at least 2 ranks, got {0}")]
    InvalidSize(usize),
    #[error("task needs {k} workers but the pool has {capacity}")]
    TooLarge { k: usize, capacity: usize },
    #[error("uid {0} already has an invocation in flight")]
    DuplicateUid(String),
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("pool stopped")]
    Stopped,
    #[error("timed out waiting for result")]
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolOptions {
    pub transport: TransportKind,
    /// Reuse a group whose member set matches instead of building a new one.
    pub cache_groups: bool,
    /// Keep a log of every message delivery, for isolation checks.
    pub record_deliveries: bool,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions {
            transport: TransportKind::Channel,
            cache_groups: false,
            record_deliveries: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveOp {
    Barrier,
    Broadcast,
    Gather,
}

/// Master-side history, in the order the master observed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PoolEvent {
    Queued {
        uid: String,
        k: usize,
    },
    Dispatched {
        uid: String,
        gid: u64,
        epoch: u64,
        members: Vec<u32>,
        constructed: bool,
    },
    Completed {
        uid: String,
        gid: u64,
        epoch: u64,
        ok: bool,
    },
    Rejected {
        uid: String,
        reason: String,
    },
    /// Logged by intra-rank 0 when it leaves a collective.
    Collective {
        gid: u64,
        epoch: u64,
        op: CollectiveOp,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    /// Worker environments initialized; one per worker for the pool's life.
    pub env_inits: u64,
    pub dispatches: u64,
    /// Groups built from scratch, each paying the join handshake.
    pub constructions: u64,
    pub cache_hits: u64,
    /// Join handshake time summed over constructions, measured at the root.
    pub setup_ns: u64,
    pub completed: u64,
    pub failed: u64,
    pub rejected: u64,
}

#[derive(Default)]
pub(crate) struct PoolShared {
    events: Mutex<Vec<PoolEvent>>,
    stats: Mutex<PoolStats>,
}

impl PoolShared {
    pub fn push_event(&self, e: PoolEvent) {
        self.events.lock().unwrap().push(e);
    }

    fn stats(&self, f: impl FnOnce(&mut PoolStats)) {
        f(&mut self.stats.lock().unwrap());
    }
}

type Waiters = Arc<Mutex<HashMap<String, Sender<Vec<u8>>>>>;

/// Handle to one in-flight invocation.
#[derive(Debug)]
pub struct Pending {
    pub uid: String,
    rx: Receiver<Vec<u8>>,
}

impl Pending {
    pub fn wait(self) -> Result<InvocationResult, PoolError> {
        let frame = self.rx.recv().map_err(|_| PoolError::Stopped)?;
        Ok(decode_result(&frame)?)
    }

    pub fn wait_timeout(self, timeout: Duration) -> Result<InvocationResult, PoolError> {
        match self.rx.recv_timeout(timeout) {
            Ok(frame) => Ok(decode_result(&frame)?),
            Err(RecvTimeoutError::Timeout) => Err(PoolError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(PoolError::Stopped),
        }
    }
}

/// Everything the pool recorded over its life, returned by [`FuncPool::stop`].
#[derive(Debug, Clone)]
pub struct PoolReport {
    pub stats: PoolStats,
    pub events: Vec<PoolEvent>,
    pub deliveries: Vec<Delivery>,
}

pub struct FuncPool {
    size: usize,
    client: Arc<dyn Net>,
    waiters: Waiters,
    shared: Arc<PoolShared>,
    deliveries: Option<DeliveryLog>,
    threads: Vec<JoinHandle<()>>,
    // Mutex only for Sync; the endpoints have already been moved out.
    fabric: Mutex<Option<Fabric>>,
}

impl std::fmt::Debug for FuncPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FuncPool").field("size", &self.size).finish()
    }
}

impl FuncPool {
    /// Brings up a master and `size - 1` workers. Each worker loads the
    /// registry once and then serves invocations until the pool stops.
    pub fn start(size: usize, registry: Arc<FunctionRegistry>, opts: PoolOptions) -> Result<FuncPool, PoolError> {
        if size < 2 {
            return Err(PoolError::InvalidSize(size));
        }
        let deliveries = opts.record_deliveries.then(DeliveryLog::default);
        let mut fabric = Fabric::build(opts.transport, size, deliveries.clone())?;
        let shared = Arc::new(PoolShared::default());
        let waiters = Waiters::default();
        let mut threads = Vec::with_capacity(size);
        for ep in fabric.take_endpoints() {
            let mb = Mailbox::new(ep);
            let shared = shared.clone();
            let handle = if mb.rank() == 0 {
                let registry = registry.clone();
                let waiters = waiters.clone();
                let cache = opts.cache_groups;
                thread::Builder::new()
                    .name("funcpool-master".into())
                    .spawn(move || master_main(mb, size, cache, registry, shared, waiters))
            } else {
                let registry = registry.clone();
                thread::Builder::new()
                    .name(format!("funcpool-worker-{}", mb.rank()))
                    .spawn(move || worker_main(mb, registry, shared))
            };
            threads.push(handle.map_err(|e| PoolError::TransportFailure(e.to_string()))?);
        }
        Ok(FuncPool {
            size,
            client: fabric.client.clone(),
            waiters,
            shared,
            deliveries,
            threads,
            fabric: Mutex::new(Some(fabric)),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn capacity(&self) -> usize {
        self.size - 1
    }

    /// Sends one invocation to the master's intake channel.
    pub fn submit(&self, inv: &FunctionInvocation) -> Result<Pending, PoolError> {
        let k = inv.k as usize;
        if k == 0 || k > self.capacity() {
            return Err(PoolError::TooLarge {
                k,
                capacity: self.capacity(),
            });
        }
        let (tx, rx) = channel();
        {
            let mut w = self.waiters.lock().unwrap();
            if w.contains_key(&inv.uid) {
                return Err(PoolError::DuplicateUid(inv.uid.clone()));
            }
            w.insert(inv.uid.clone(), tx);
        }
        let sent = self.client.send(Envelope {
            src: CLIENT_RANK,
            dst: 0,
            kind: MsgKind::Intake,
            gid: 0,
            epoch: 0,
            seq: 0,
            payload: encode_invocation(inv),
        });
        if let Err(e) = sent {
            self.waiters.lock().unwrap().remove(&inv.uid);
            return Err(PoolError::TransportFailure(e.to_string()));
        }
        Ok(Pending {
            uid: inv.uid.clone(),
            rx,
        })
    }

    /// Submits and waits.
    pub fn run(&self, inv: &FunctionInvocation) -> Result<InvocationResult, PoolError> {
        self.submit(inv)?.wait()
    }

    pub fn events(&self) -> Vec<PoolEvent> {
        self.shared.events.lock().unwrap().clone()
    }

    pub fn stats(&self) -> PoolStats {
        self.shared.stats.lock().unwrap().clone()
    }

    pub fn deliveries(&self) -> Vec<Delivery> {
        self.deliveries
            .as_ref()
            .map(|d| d.lock().unwrap().clone())
            .unwrap_or_default()
    }

    /// Finishes queued and running invocations, then stops every rank and
    /// joins all pool threads.
    pub fn stop(mut self) -> PoolReport {
        self.shutdown();
        PoolReport {
            stats: self.stats(),
            events: self.events(),
            deliveries: self.deliveries(),
        }
    }

    fn shutdown(&mut self) {
        let Some(fabric) = self.fabric.get_mut().unwrap().take() else {
            return;
        };
        let _ = self.client.send(Envelope {
            src: CLIENT_RANK,
            dst: 0,
            kind: MsgKind::Shutdown,
            gid: 0,
            epoch: 0,
            seq: 0,
            payload: Vec::new(),
        });
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        fabric.close();
    }
}

impl Drop for FuncPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Assign {
    uid: String,
    function: String,
    args: Value,
    intra: u32,
    fresh: bool,
    members: Vec<u32>,
}

fn encode_assign(d: &Dispatch<FunctionInvocation>, intra: u32) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&d.item.uid)
        .str(&d.item.function)
        .str(&d.item.args.to_string())
        .u32(intra)
        .u8(d.constructed as u8)
        .u32(d.members.len() as u32);
    for m in &d.members {
        w.u32(*m);
    }
    w.finish()
}

fn decode_assign(b: &[u8]) -> Result<Assign, ProtocolError> {
    let mut r = Reader::new(b);
    let uid = r.str()?;
    let function = r.str()?;
    let args = serde_json::from_str(&r.str()?).map_err(|e| ProtocolError::Json(e.to_string()))?;
    let intra = r.u32()?;
    let fresh = r.u8()? != 0;
    let n = r.u32()? as usize;
    let mut members = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        members.push(r.u32()?);
    }
    r.end()?;
    Ok(Assign {
        uid,
        function,
        args,
        intra,
        fresh,
        members,
    })
}

struct DoneMsg {
    intra: usize,
    ok: bool,
    /// The error originated in this member rather than being a reaction to
    /// another member's abort.
    origin: bool,
    blob: Vec<u8>,
    setup_ns: u64,
}

fn encode_done(d: &DoneMsg) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(d.intra as u32)
        .u8(d.ok as u8)
        .u8(d.origin as u8)
        .bytes(&d.blob)
        .u64(d.setup_ns);
    w.finish()
}

fn decode_done(b: &[u8]) -> Result<DoneMsg, ProtocolError> {
    let mut r = Reader::new(b);
    let d = DoneMsg {
        intra: r.u32()? as usize,
        ok: r.u8()? != 0,
        origin: r.u8()? != 0,
        blob: r.bytes()?,
        setup_ns: r.u64()?,
    };
    r.end()?;
    Ok(d)
}

fn worker_main(mut mb: Mailbox, registry: Arc<FunctionRegistry>, shared: Arc<PoolShared>) {
    let _guard = ContextGuard::new();
    shared.stats(|s| s.env_inits += 1);
    let me = mb.rank();
    loop {
        let Ok(env) = mb.recv_match(|e| matches!(e.kind, MsgKind::Assign | MsgKind::Shutdown)) else {
            return;
        };
        if env.kind == MsgKind::Shutdown {
            return;
        }
        let epoch = env.epoch;
        mb.discard(|e| e.kind.is_group_scoped() && e.epoch < epoch);
        let done = match decode_assign(&env.payload) {
            Ok(a) => run_member(&mut mb, env.gid, epoch, &a, &registry, &shared),
            Err(e) => DoneMsg {
                intra: 0,
                ok: false,
                origin: true,
                blob: format!("bad assignment: {e}").into_bytes(),
                setup_ns: 0,
            },
        };
        let sent = mb.send(Envelope {
            src: me,
            dst: 0,
            kind: MsgKind::Done,
            gid: env.gid,
            epoch,
            seq: 0,
            payload: encode_done(&done),
        });
        if sent.is_err() {
            return;
        }
    }
}

fn run_member(
    mb: &mut Mailbox,
    gid: u64,
    epoch: u64,
    a: &Assign,
    registry: &FunctionRegistry,
    shared: &Arc<PoolShared>,
) -> DoneMsg {
    let intra = a.intra as usize;
    let mut comm = GroupComm::new(mb, gid, epoch, &a.members, intra, shared);
    let mut setup_ns = 0;
    let mut outcome = Ok(Value::Null);
    if a.fresh {
        let t = Instant::now();
        outcome = comm.join().map(|_| Value::Null).map_err(|e| e.to_string());
        setup_ns = t.elapsed().as_nanos() as u64;
    }
    if outcome.is_ok() {
        outcome = match registry.get(&a.function) {
            Some(f) => {
                let mut ctx = RankContext::new(&a.uid, intra, a.members.len(), &mut comm);
                invoke(&*f, &a.args, &mut ctx)
            }
            None => Err(format!("unknown function {}", a.function)),
        };
    }
    let origin = comm.aborted_by.is_none();
    if outcome.is_err() && origin {
        comm.abort();
    }
    match outcome {
        Ok(v) => DoneMsg {
            intra,
            ok: true,
            origin: false,
            blob: v.to_string().into_bytes(),
            setup_ns,
        },
        Err(msg) => DoneMsg {
            intra,
            ok: false,
            origin,
            blob: msg.into_bytes(),
            setup_ns,
        },
    }
}

struct InFlight {
    uid: String,
    gid: u64,
    parts: Vec<Option<DoneMsg>>,
}

struct Master {
    mb: Mailbox,
    sched: GroupScheduler<FunctionInvocation>,
    registry: Arc<FunctionRegistry>,
    shared: Arc<PoolShared>,
    waiters: Waiters,
    active: BTreeMap<u64, InFlight>,
}

fn master_main(
    mb: Mailbox,
    size: usize,
    cache: bool,
    registry: Arc<FunctionRegistry>,
    shared: Arc<PoolShared>,
    waiters: Waiters,
) {
    let _guard = ContextGuard::new();
    let mut m = Master {
        mb,
        sched: GroupScheduler::new(size, cache),
        registry,
        shared,
        waiters,
        active: BTreeMap::new(),
    };
    let mut stopping = false;
    while !(stopping && m.sched.queued() == 0 && m.active.is_empty()) {
        let Ok(env) = m.mb.recv_match(|_| true) else {
            break;
        };
        match env.kind {
            MsgKind::Intake => m.intake(&env.payload),
            MsgKind::Done => m.done(env.epoch, &env.payload),
            MsgKind::Shutdown => stopping = true,
            other => log::warn!("master ignoring {other:?} from rank {}", env.src),
        }
    }
    for r in 1..size as u32 {
        let _ = m.mb.send(Envelope {
            src: 0,
            dst: r,
            kind: MsgKind::Shutdown,
            gid: 0,
            epoch: 0,
            seq: 0,
            payload: Vec::new(),
        });
    }
    // Anyone still waiting sees their channel close.
    m.waiters.lock().unwrap().clear();
}

impl Master {
    fn reply(&self, res: &InvocationResult) {
        if let Some(tx) = self.waiters.lock().unwrap().remove(&res.uid) {
            let _ = tx.send(encode_result(res));
        }
    }

    fn reject(&self, uid: String, reason: String) {
        self.shared.stats(|s| s.rejected += 1);
        self.shared.push_event(PoolEvent::Rejected {
            uid: uid.clone(),
            reason: reason.clone(),
        });
        self.reply(&InvocationResult {
            uid,
            status: ResultStatus::Error,
            blobs: vec![reason.into_bytes()],
        });
    }

    fn intake(&mut self, body: &[u8]) {
        let inv = match decode_invocation(body) {
            Ok(inv) => inv,
            Err(e) => {
                log::error!("dropping undecodable invocation: {e}");
                return;
            }
        };
        if !self.registry.contains(&inv.function) {
            let reason = format!("unsupported function {}", inv.function);
            return self.reject(inv.uid, reason);
        }
        let (uid, k) = (inv.uid.clone(), inv.k as usize);
        match self.sched.submit(inv, k) {
            Err(e) => {
                let reason = format!("task needs {} workers but the pool has {}", e.k, e.capacity);
                self.reject(uid, reason);
            }
            Ok(ds) => {
                self.shared.push_event(PoolEvent::Queued { uid, k });
                self.assign(ds);
            }
        }
    }

    fn assign(&mut self, ds: Vec<Dispatch<FunctionInvocation>>) {
        for d in ds {
            self.shared.stats(|s| {
                s.dispatches += 1;
                if d.constructed {
                    s.constructions += 1;
                } else {
                    s.cache_hits += 1;
                }
            });
            self.shared.push_event(PoolEvent::Dispatched {
                uid: d.item.uid.clone(),
                gid: d.gid,
                epoch: d.epoch,
                members: d.members.clone(),
                constructed: d.constructed,
            });
            for (intra, rank) in d.members.iter().enumerate() {
                let sent = self.mb.send(Envelope {
                    src: 0,
                    dst: *rank,
                    kind: MsgKind::Assign,
                    gid: d.gid,
                    epoch: d.epoch,
                    seq: 0,
                    payload: encode_assign(&d, intra as u32),
                });
                if let Err(e) = sent {
                    log::error!("assign to rank {rank} failed: {e}");
                }
            }
            self.active.insert(
                d.epoch,
                InFlight {
                    uid: d.item.uid,
                    gid: d.gid,
                    parts: (0..d.members.len()).map(|_| None).collect(),
                },
            );
        }
    }

    fn done(&mut self, epoch: u64, body: &[u8]) {
        let msg = match decode_done(body) {
            Ok(m) => m,
            Err(e) => {
                log::error!("dropping undecodable completion: {e}");
                return;
            }
        };
        let Some(fl) = self.active.get_mut(&epoch) else {
            log::warn!("completion for unknown epoch {epoch}");
            return;
        };
        if let Some(slot) = fl.parts.get_mut(msg.intra) {
            *slot = Some(msg);
        }
        if fl.parts.iter().any(Option::is_none) {
            return;
        }
        let fl = self.active.remove(&epoch).unwrap();
        let parts: Vec<DoneMsg> = fl.parts.into_iter().map(Option::unwrap).collect();
        let ok = parts.iter().all(|p| p.ok);
        let setup = parts[0].setup_ns;
        let res = if ok {
            InvocationResult {
                uid: fl.uid.clone(),
                status: ResultStatus::Ok,
                blobs: parts.into_iter().map(|p| p.blob).collect(),
            }
        } else {
            let cause = parts
                .iter()
                .find(|p| !p.ok && p.origin)
                .or_else(|| parts.iter().find(|p| !p.ok))
                .unwrap();
            let msg = format!("rank {}: {}", cause.intra, String::from_utf8_lossy(&cause.blob));
            InvocationResult {
                uid: fl.uid.clone(),
                status: ResultStatus::Error,
                blobs: vec![msg.into_bytes()],
            }
        };
        self.shared.stats(|s| {
            s.setup_ns += setup;
            if ok {
                s.completed += 1;
            } else {
                s.failed += 1;
            }
        });
        self.shared.push_event(PoolEvent::Completed {
            uid: fl.uid,
            gid: fl.gid,
            epoch,
            ok,
        });
        self.reply(&res);
        let next = self.sched.complete(epoch);
        self.assign(next);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;
    use std::collections::BTreeSet;

    fn inv(uid: &str, function: &str, k: u32) -> FunctionInvocation {
        FunctionInvocation {
            uid: uid.into(),
            function: function.into(),
            args: Value::Null,
            k,
        }
    }

    fn pool(size: usize, opts: PoolOptions) -> FuncPool {
        FuncPool::start(size, Arc::new(FunctionRegistry::with_builtins()), opts).unwrap()
    }

    #[test]
    fn size_below_two_is_rejected() {
        let r = FuncPool::start(1, Arc::new(FunctionRegistry::new()), PoolOptions::default());
        assert_eq!(r.unwrap_err(), PoolError::InvalidSize(1));
    }

    #[test]
    fn minimal_pool_runs_single_rank_tasks() {
        let p = pool(2, PoolOptions::default());
        assert_eq!(p.capacity(), 1);
        assert!(p.run(&inv("a", "noop", 1)).unwrap().is_ok());
        assert_eq!(
            p.submit(&inv("b", "noop", 2)).unwrap_err(),
            PoolError::TooLarge { k: 2, capacity: 1 }
        );
    }

    #[test]
    fn k4_noop_returns_four_results_and_frees_workers() {
        let p = pool(9, PoolOptions::default());
        let r = p.run(&inv("t", "noop", 4)).unwrap();
        assert!(r.is_ok());
        assert_eq!(r.blobs.len(), 4);
        let report = p.stop();
        assert!(matches!(
            &report.events[1],
            PoolEvent::Dispatched { members, .. } if members == &vec![1, 2, 3, 4]
        ));
        assert_eq!(report.stats.completed, 1);
    }

    #[test]
    fn rank_sum_uses_gather_and_broadcast() {
        let p = pool(9, PoolOptions::default());
        let r = p.run(&inv("t", "rank_sum", 4)).unwrap();
        let per_rank: Vec<Value> = r.blobs.iter().map(|b| serde_json::from_slice(b).unwrap()).collect();
        assert_eq!(per_rank, vec![json!(6); 4]);
    }

    #[test]
    fn broadcast_reaches_every_member() {
        let mut reg = FunctionRegistry::new();
        reg.register("bcast", |_, ctx| {
            let data = (ctx.rank == 0).then(|| b"x".to_vec());
            let got = ctx.broadcast(data).map_err(|e| e.to_string())?;
            Ok(json!(String::from_utf8(got).unwrap()))
        });
        let p = FuncPool::start(5, Arc::new(reg), PoolOptions::default()).unwrap();
        let r = p.run(&inv("t", "bcast", 4)).unwrap();
        for b in &r.blobs {
            assert_eq!(b, br#""x""#);
        }
    }

    #[test]
    fn singleton_barrier_returns_immediately() {
        let mut reg = FunctionRegistry::new();
        reg.register("b", |_, ctx| {
            ctx.barrier().map(|_| Value::Null).map_err(|e| e.to_string())
        });
        let p = FuncPool::start(2, Arc::new(reg), PoolOptions::default()).unwrap();
        assert!(p.run(&inv("t", "b", 1)).unwrap().is_ok());
    }

    #[test]
    fn failing_member_fails_invocation_and_frees_group() {
        let mut reg = FunctionRegistry::with_builtins();
        reg.register("fail_rank2", |_, ctx| {
            if ctx.rank == 2 {
                return Err("rank two exploded".into());
            }
            ctx.barrier().map_err(|e| e.to_string())?;
            Ok(Value::Null)
        });
        let p = FuncPool::start(5, Arc::new(reg), PoolOptions::default()).unwrap();
        let r = p.run(&inv("t", "fail_rank2", 4)).unwrap();
        assert!(!r.is_ok());
        assert_eq!(r.error_message().unwrap(), "rank 2: rank two exploded");
        // the same four workers are immediately reusable
        assert!(p.run(&inv("u", "noop", 4)).unwrap().is_ok());
        let stats = p.stop().stats;
        assert_eq!((stats.completed, stats.failed), (1, 1));
    }

    #[test]
    fn unknown_function_is_rejected() {
        let p = pool(3, PoolOptions::default());
        let r = p.run(&inv("t", "missing", 1)).unwrap();
        assert!(r.error_message().unwrap().contains("unsupported function"));
        assert_eq!(p.stop().stats.rejected, 1);
    }

    #[test]
    fn duplicate_in_flight_uid_is_refused() {
        let mut reg = FunctionRegistry::new();
        reg.register("slow", |_, _| {
            thread::sleep(Duration::from_millis(50));
            Ok(Value::Null)
        });
        let p = FuncPool::start(2, Arc::new(reg), PoolOptions::default()).unwrap();
        let a = p.submit(&inv("t", "slow", 1)).unwrap();
        assert_eq!(
            p.submit(&inv("t", "slow", 1)).unwrap_err(),
            PoolError::DuplicateUid("t".into())
        );
        assert!(a.wait().unwrap().is_ok());
    }

    #[test]
    fn environment_is_initialized_once_per_worker() {
        let p = pool(5, PoolOptions::default());
        for i in 0..20 {
            p.run(&inv(&format!("t{i}"), "noop", 2)).unwrap();
        }
        let s = p.stop().stats;
        assert_eq!(s.env_inits, 4);
        assert_eq!(s.dispatches, 20);
        assert_eq!(s.constructions, 20);
    }

    #[test]
    fn group_cache_skips_reconstruction() {
        let opts = PoolOptions {
            cache_groups: true,
            ..PoolOptions::default()
        };
        let p = pool(5, opts);
        for i in 0..10 {
            p.run(&inv(&format!("t{i}"), "rank_sum", 4)).unwrap();
        }
        let s = p.stop().stats;
        assert_eq!((s.constructions, s.cache_hits), (1, 9));
    }

    #[test]
    fn socket_transport_runs_collectives() {
        let opts = PoolOptions {
            transport: TransportKind::Socket,
            ..PoolOptions::default()
        };
        let p = pool(5, opts);
        let pending: Vec<_> = (0..6)
            .map(|i| p.submit(&inv(&format!("t{i}"), "rank_sum", 2)).unwrap())
            .collect();
        for pd in pending {
            let r = pd.wait().unwrap();
            assert_eq!(r.blobs[0], b"1");
        }
    }

    /// Replays the master's event history and checks that active groups
    /// never overlap and never exceed the worker count.
    fn replay_disjoint(events: &[PoolEvent], workers: usize) {
        let mut active: HashMap<u64, Vec<u32>> = HashMap::new();
        for e in events {
            match e {
                PoolEvent::Dispatched { epoch, members, .. } => {
                    let busy: BTreeSet<u32> = active.values().flatten().copied().collect();
                    assert!(members.iter().all(|m| !busy.contains(m) && *m != 0));
                    active.insert(*epoch, members.clone());
                    let total: usize = active.values().map(Vec::len).sum();
                    assert!(total <= workers);
                }
                PoolEvent::Completed { epoch, .. } => {
                    assert!(active.remove(epoch).is_some());
                }
                _ => {}
            }
        }
        assert!(active.is_empty());
    }

    #[test]
    fn random_stream_keeps_groups_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = pool(9, PoolOptions::default());
        let pending: Vec<_> = (0..300)
            .map(|i| {
                let k = rng.gen_range(1..=4);
                p.submit(&inv(&format!("t{i}"), "rank_sum", k)).unwrap()
            })
            .collect();
        for pd in pending {
            assert!(pd.wait().unwrap().is_ok());
        }
        replay_disjoint(&p.stop().events, 8);
    }

    /// Independent model of the dispatch policy: FIFO queue, lowest-id idle
    /// workers, completions in submission order of the running groups.
    fn simulate_pairs(n: usize, k: usize, workers: usize) -> BTreeMap<Vec<u32>, usize> {
        let mut formations = BTreeMap::new();
        let mut idle: BTreeSet<u32> = (1..=workers as u32).collect();
        let mut running: Vec<Vec<u32>> = Vec::new();
        let mut left = n;
        while left > 0 {
            while left > 0 && idle.len() >= k {
                let g: Vec<u32> = idle.iter().take(k).copied().collect();
                for m in &g {
                    idle.remove(m);
                }
                *formations.entry(g.clone()).or_insert(0) += 1;
                running.push(g);
                left -= 1;
            }
            for g in running.drain(..) {
                idle.extend(g);
            }
        }
        formations
    }

    #[test]
    fn two_hundred_k4_tasks_alternate_between_two_groups() {
        let expected = simulate_pairs(200, 4, 8);
        assert_eq!(expected.len(), 2);
        assert!(expected.values().all(|c| *c == 100));

        let p = pool(9, PoolOptions::default());
        for pair in 0..100 {
            let a = p.submit(&inv(&format!("a{pair}"), "noop", 4)).unwrap();
            let b = p.submit(&inv(&format!("b{pair}"), "noop", 4)).unwrap();
            a.wait().unwrap();
            b.wait().unwrap();
        }
        let mut observed = BTreeMap::new();
        for e in p.stop().events {
            if let PoolEvent::Dispatched { members, .. } = e {
                *observed.entry(members).or_insert(0) += 1;
            }
        }
        assert_eq!(observed, expected);
    }

    #[test]
    fn no_starvation_under_mixed_sizes() {
        let p = pool(5, PoolOptions::default());
        let sizes = [4, 1, 3, 4, 2, 1, 4, 4, 3, 1];
        let pending: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, k)| p.submit(&inv(&format!("t{i}"), "noop", *k)).unwrap())
            .collect();
        for pd in pending {
            assert!(pd.wait_timeout(Duration::from_secs(10)).unwrap().is_ok());
        }
    }

    #[test]
    fn barrier_releases_only_after_all_members_enter() {
        static ENTERED: AtomicUsize = AtomicUsize::new(0);
        let mut reg = FunctionRegistry::new();
        reg.register("b", |args, ctx| {
            let k = args["k"].as_u64().unwrap() as usize;
            thread::sleep(Duration::from_millis(5 * ctx.rank as u64));
            ENTERED.fetch_add(1, Ordering::SeqCst);
            ctx.barrier().map_err(|e| e.to_string())?;
            let seen = ENTERED.load(Ordering::SeqCst);
            Ok(json!(seen >= k))
        });
        let p = FuncPool::start(5, Arc::new(reg), PoolOptions::default()).unwrap();
        let r = p
            .run(&FunctionInvocation {
                uid: "t".into(),
                function: "b".into(),
                args: json!({"k": 4}),
                k: 4,
            })
            .unwrap();
        assert!(r.blobs.iter().all(|b| b == b"true"));
    }

    /// Two concurrent k=3 groups exchange distinct payloads with randomized
    /// delays. No delivery may cross group boundaries, and every member must
    /// see only its own group's payload.
    fn isolation_round(seed: u64, transport: TransportKind) {
        let mut reg = FunctionRegistry::new();
        reg.register("mix", |args, ctx| {
            let tag = args["tag"].as_str().unwrap().to_string();
            let delays: Vec<u64> = serde_json::from_value(args["delays"].clone()).unwrap();
            let e = |e: crate::functions::CommError| e.to_string();
            let mut seen = Vec::new();
            for (round, d) in delays.iter().enumerate() {
                if *d > 0 && (round + ctx.rank) % 3 == 0 {
                    thread::sleep(Duration::from_micros(*d));
                }
                let data = (ctx.rank == 0).then(|| format!("{tag}{round}").into_bytes());
                seen.push(String::from_utf8(ctx.broadcast(data).map_err(e)?).unwrap());
                if let Some(parts) = ctx.gather(tag.clone().into_bytes()).map_err(e)? {
                    for p in parts {
                        seen.push(String::from_utf8(p).unwrap());
                    }
                }
            }
            Ok(json!(seen))
        });
        let opts = PoolOptions {
            transport,
            record_deliveries: true,
            ..PoolOptions::default()
        };
        let p = FuncPool::start(7, Arc::new(reg), opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tags = ["A", "B"];
        tags.shuffle(&mut rng);
        let pending: Vec<_> = tags
            .iter()
            .map(|tag| {
                let delays: Vec<u64> = (0..3).map(|_| rng.gen_range(0..40)).collect();
                p.submit(&FunctionInvocation {
                    uid: tag.to_string(),
                    function: "mix".into(),
                    args: json!({"tag": tag, "delays": delays}),
                    k: 3,
                })
                .unwrap()
            })
            .collect();
        for (pd, tag) in pending.into_iter().zip(tags) {
            let r = pd.wait().unwrap();
            assert!(r.is_ok(), "{:?}", r.error_message());
            for blob in &r.blobs {
                let seen: Vec<String> = serde_json::from_slice(blob).unwrap();
                assert!(seen.iter().all(|s| s.starts_with(tag)), "{seen:?}");
            }
        }
        let report = p.stop();
        let mut members: HashMap<u64, BTreeSet<u32>> = HashMap::new();
        for e in &report.events {
            if let PoolEvent::Dispatched { epoch, members: m, .. } = e {
                members.insert(*epoch, m.iter().copied().collect());
            }
        }
        let mut scoped = 0;
        for d in &report.deliveries {
            if d.kind.is_group_scoped() {
                let m = &members[&d.epoch];
                assert!(m.contains(&d.src) && m.contains(&d.dst), "{d:?}");
                scoped += 1;
            }
        }
        assert!(scoped > 0);
    }

    #[test]
    fn concurrent_groups_never_cross_deliver() {
        for seed in 0..1000 {
            isolation_round(seed, TransportKind::Channel);
        }
    }

    #[test]
    fn concurrent_groups_never_cross_deliver_over_sockets() {
        for seed in 0..25 {
            isolation_round(seed, TransportKind::Socket);
        }
    }
}
