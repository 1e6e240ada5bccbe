//! Local pilot agent: holds a fixed pool of nodes, places tasks on core and
//! GPU slots, launches them through a latency model and executes them.

mod agent;
pub mod slots;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::NodeShare;
pub use agent::{Agent, AgentConfig, Notice, PilotSummary};
pub use slots::{fits_pilot, schedule, NodeSlotMap, Placement, RankSlot, Request, SlotError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PilotError {
    #[error("pilot start-up failed: {0}")]
    StartupFailure(String),
    #[error("pilot agent is not running")]
    NotRunning,
    #[error("task {uid} is in state {state}, expected TRANSLATED")]
    NotTranslated { uid: String, state: String },
}

/// How long a scheduled task waits before it is running.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LauncherModel {
    /// Running at the moment it is scheduled.
    #[default]
    Instant,
    /// Every launch takes `latency` seconds, all in parallel.
    FixedLatency { latency: f64 },
    /// One launch channel: each launch starts when the previous one ends.
    Serialized { latency: f64 },
}

impl LauncherModel {
    pub fn latency_ms(&self) -> u64 {
        match *self {
            LauncherModel::Instant => 0,
            LauncherModel::FixedLatency { latency } | LauncherModel::Serialized { latency } => secs_to_ms(latency),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            LauncherModel::Instant => Ok(()),
            LauncherModel::FixedLatency { latency } | LauncherModel::Serialized { latency } => {
                if latency.is_finite() && latency >= 0.0 {
                    Ok(())
                } else {
                    Err(format!("launcher latency must be finite and ≥ 0, got {latency}"))
                }
            }
        }
    }

    /// Time at which a launch requested at `now` completes. `channel_free`
    /// is when the serialized channel next becomes idle; it is updated.
    pub fn launch_end(&self, now: u64, channel_free: &mut u64) -> u64 {
        let l = self.latency_ms();
        match self {
            LauncherModel::Instant => now,
            LauncherModel::FixedLatency { .. } => now + l,
            LauncherModel::Serialized { .. } => {
                let end = now.max(*channel_free) + l;
                *channel_free = end;
                end
            }
        }
    }
}

pub(crate) fn secs_to_ms(s: f64) -> u64 {
    (s * 1000.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotDescription {
    pub nodes: u32,
    pub cores_per_node: u32,
    #[serde(default)]
    pub gpus_per_node: u32,
    /// Seconds.
    pub walltime: f64,
    #[serde(default)]
    pub launcher: LauncherModel,
}

impl PilotDescription {
    pub fn new(nodes: u32, cores_per_node: u32, gpus_per_node: u32) -> Self {
        PilotDescription {
            nodes,
            cores_per_node,
            gpus_per_node,
            walltime: 86_400.0,
            launcher: LauncherModel::Instant,
        }
    }

    pub fn with_launcher(mut self, launcher: LauncherModel) -> Self {
        self.launcher = launcher;
        self
    }

    pub fn with_walltime(mut self, seconds: f64) -> Self {
        self.walltime = seconds;
        self
    }

    pub fn validate(&self) -> Result<(), PilotError> {
        let fail = |m: String| Err(PilotError::StartupFailure(m));
        if self.nodes == 0 {
            return fail("pilot needs at least one node".into());
        }
        if self.cores_per_node == 0 {
            return fail("nodes need at least one core".into());
        }
        if !(self.walltime.is_finite() && self.walltime > 0.0) {
            return fail(format!("walltime must be > 0, got {}", self.walltime));
        }
        self.launcher.validate().map_err(PilotError::StartupFailure)
    }

    pub fn total_cores(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.cores_per_node)
    }

    pub fn total_gpus(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.gpus_per_node)
    }

    pub fn slot_map(&self) -> NodeSlotMap {
        NodeSlotMap::new(self.nodes, self.cores_per_node, self.gpus_per_node)
    }

    /// One share per node describing its full capacity; carried by the
    /// pilot start record so logs are self-describing.
    pub fn geometry(&self) -> Vec<NodeShare> {
        (0..self.nodes)
            .map(|node| NodeShare {
                node,
                cores: self.cores_per_node,
                gpus: self.gpus_per_node,
            })
            .collect()
    }
}

/// Modeled costs charged to the virtual clock. Real-clock runs pay whatever
/// the work actually takes and ignore these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub pilot_startup_ms: u64,
    pub pilot_teardown_ms: u64,
    pub executor_startup_ms: u64,
    pub executor_shutdown_ms: u64,
    pub dag_build_us_per_task: u64,
    pub pool_startup_ms: u64,
    /// Building a worker group, paid once per construction.
    pub group_setup_us: u64,
    pub group_setup_us_per_rank: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            pilot_startup_ms: 1000,
            pilot_teardown_ms: 100,
            executor_startup_ms: 500,
            executor_shutdown_ms: 200,
            dag_build_us_per_task: 20,
            pool_startup_ms: 200,
            group_setup_us: 2000,
            group_setup_us_per_rank: 50,
        }
    }
}

impl CostModel {
    /// Every cost zero, for tests that want pure task arithmetic.
    pub fn free() -> Self {
        CostModel {
            pilot_startup_ms: 0,
            pilot_teardown_ms: 0,
            executor_startup_ms: 0,
            executor_shutdown_ms: 0,
            dag_build_us_per_task: 0,
            pool_startup_ms: 0,
            group_setup_us: 0,
            group_setup_us_per_rank: 0,
        }
    }

    pub fn group_setup_ms(&self, k: u32) -> u64 {
        (self.group_setup_us + self.group_setup_us_per_rank * u64::from(k)).div_ceil(1000)
    }

    pub fn dag_build_ms(&self, tasks: usize) -> u64 {
        (self.dag_build_us_per_task * tasks as u64).div_ceil(1000)
    }
}
