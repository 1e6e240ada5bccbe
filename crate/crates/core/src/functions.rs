//! Registry of named task functions and the per-rank context they run in.
//!
//! Function payloads reference registry entries by name; arguments are
//! JSON values. A function runs once per rank and may use the group
//! collectives exposed through [`RankContext`].

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("group member {0} failed")]
    MemberFailure(usize),
    #[error("transport failure: {0}")]
    Transport(String),
}

/// Group-scoped collectives. Implementations only ever exchange messages
/// with members of the caller's own group.
pub trait Collective {
    /// Returns once every member of the group has entered the barrier.
    fn barrier(&mut self) -> Result<(), CommError>;
    /// Delivers intra-rank 0's `data` to every member. Non-root callers
    /// pass `None`.
    fn broadcast(&mut self, data: Option<Vec<u8>>) -> Result<Vec<u8>, CommError>;
    /// Intra-rank 0 receives all payloads ordered by intra-rank; every
    /// other member gets `None`.
    fn gather(&mut self, data: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>, CommError>;
}

/// The trivial group of one.
#[derive(Debug, Default)]
pub struct Singleton;

impl Collective for Singleton {
    fn barrier(&mut self) -> Result<(), CommError> {
        Ok(())
    }

    fn broadcast(&mut self, data: Option<Vec<u8>>) -> Result<Vec<u8>, CommError> {
        Ok(data.unwrap_or_default())
    }

    fn gather(&mut self, data: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>, CommError> {
        Ok(Some(vec![data]))
    }
}

pub struct RankContext<'a> {
    pub uid: &'a str,
    /// Rank inside the task's group, `0..size`.
    pub rank: usize,
    pub size: usize,
    comm: &'a mut dyn Collective,
}

impl<'a> RankContext<'a> {
    pub fn new(uid: &'a str, rank: usize, size: usize, comm: &'a mut dyn Collective) -> Self {
        RankContext { uid, rank, size, comm }
    }

    pub fn barrier(&mut self) -> Result<(), CommError> {
        self.comm.barrier()
    }

    pub fn broadcast(&mut self, data: Option<Vec<u8>>) -> Result<Vec<u8>, CommError> {
        self.comm.broadcast(data)
    }

    pub fn gather(&mut self, data: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>, CommError> {
        self.comm.gather(data)
    }
}

pub type TaskFn = dyn Fn(&Value, &mut RankContext<'_>) -> Result<Value, String> + Send + Sync;

#[derive(Clone, Default)]
pub struct FunctionRegistry {
    fns: BTreeMap<String, Arc<TaskFn>>,
}

impl std::fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.fns.keys()).finish()
    }
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry preloaded with the functions used by the bundled workloads.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register("noop", |_, _| Ok(Value::Null));
        r.register("echo", |args, _| Ok(args.clone()));
        r.register("raise_error", |args, _| {
            Err(args
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("raise_error invoked")
                .to_string())
        });
        r.register("rank_sum", rank_sum);
        r.register("colmena_pre", |args, _| {
            Ok(json!({ "prepared": args.get("index").cloned().unwrap_or(Value::Null) }))
        });
        r.register("colmena_post", |args, _| {
            Ok(json!({ "collected": args.get("index").cloned().unwrap_or(Value::Null) }))
        });
        r.register("tile_and_infer", tile_and_infer);
        r
    }

    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&Value, &mut RankContext<'_>) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.fns.insert(name.to_string(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<Arc<TaskFn>> {
        self.fns.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fns.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }
}

/// Calls `f` for one rank, turning panics into errors.
pub fn invoke(f: &TaskFn, args: &Value, ctx: &mut RankContext<'_>) -> Result<Value, String> {
    match catch_unwind(AssertUnwindSafe(|| f(args, ctx))) {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            Err(format!("panicked: {msg}"))
        }
    }
}

/// Runs a single-rank function in the current thread.
pub fn run_single(f: &TaskFn, uid: &str, args: &Value) -> Result<Value, String> {
    let mut comm = Singleton;
    let mut ctx = RankContext::new(uid, 0, 1, &mut comm);
    invoke(f, args, &mut ctx)
}

fn comm_err(e: CommError) -> String {
    e.to_string()
}

fn rank_sum(_: &Value, ctx: &mut RankContext<'_>) -> Result<Value, String> {
    let gathered = ctx.gather((ctx.rank as u64).to_le_bytes().to_vec()).map_err(comm_err)?;
    let root = gathered.map(|parts| {
        let total: u64 = parts
            .iter()
            .map(|p| u64::from_le_bytes(p.as_slice().try_into().unwrap_or([0; 8])))
            .sum();
        total.to_le_bytes().to_vec()
    });
    let total = ctx.broadcast(root).map_err(comm_err)?;
    let total = u64::from_le_bytes(total.as_slice().try_into().map_err(|_| "short broadcast")?);
    Ok(json!(total))
}

/// Two-phase SPMD body: a CPU tiling phase over this rank's share of the
/// tiles, a group barrier, then a GPU-tagged inference phase whose
/// per-rank counts are gathered at intra-rank 0.
fn tile_and_infer(args: &Value, ctx: &mut RankContext<'_>) -> Result<Value, String> {
    let tiles: Vec<u64> = match args.get("tiles") {
        Some(Value::Array(a)) => a.iter().filter_map(Value::as_u64).collect(),
        Some(v) => (0..v.as_u64().unwrap_or(0)).collect(),
        None => (0..ctx.size as u64).collect(),
    };
    let mine: Vec<u64> = tiles
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| i % ctx.size == ctx.rank)
        .map(|(_, t)| t)
        .collect();

    // cpu:tile
    let tiled = mine.len() as u64;
    ctx.barrier().map_err(comm_err)?;
    // gpu:infer, a fixed pseudo-count per tile
    let polygons: u64 = mine.iter().map(|t| t.wrapping_mul(2654435761) % 7).sum();

    let report = json!([tiled, polygons]).to_string().into_bytes();
    match ctx.gather(report).map_err(comm_err)? {
        Some(parts) => {
            let mut total_tiles = 0;
            let mut total_polygons = 0;
            for p in parts {
                let v: Vec<u64> = serde_json::from_slice(&p).map_err(|e| e.to_string())?;
                total_tiles += v[0];
                total_polygons += v[1];
            }
            Ok(json!({
                "tiles": total_tiles,
                "polygons": total_polygons,
                "phases": ["cpu:tile", "gpu:infer"],
            }))
        }
        None => Ok(json!({ "rank": ctx.rank, "tiles": tiled })),
    }
}
