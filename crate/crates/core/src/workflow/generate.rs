//! Synthetic workload generators for the three benchmark shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{RunSection, TaskSpec, WorkflowError, WorkflowFile};
use crate::bridge::TaskDefaults;
use crate::funcpool::PoolOptions;
use crate::pilot::{CostModel, PilotDescription};
use crate::task::GpuRequest;

/// Simulation triples per node in the reference campaign (450 on 32 nodes).
pub const COLMENA_TRIPLES_PER_NODE: f64 = 450.0 / 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Task count grows with the node count.
    Weak,
    /// Task count is fixed.
    Strong,
}

/// Homogeneous multi-rank no-op functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp1Params {
    pub cores_per_node: u32,
    pub scaling: Scaling,
    /// Per node under weak scaling, total under strong scaling.
    pub tasks: u32,
    /// Defaults to two nodes' worth of cores.
    pub ranks_per_task: Option<u32>,
    /// Seconds of modeled body time per task.
    pub duration: f64,
}

impl Default for Exp1Params {
    fn default() -> Self {
        Exp1Params {
            cores_per_node: 8,
            scaling: Scaling::Weak,
            tasks: 8,
            ranks_per_task: None,
            duration: 1.0,
        }
    }
}

/// pre-process function, whole-node simulation, post-process function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColmenaParams {
    pub cores_per_node: u32,
    pub triples_per_node: f64,
    pub sim_duration: f64,
    pub pre_duration: f64,
    pub post_duration: f64,
    /// Relative spread of simulation durations, drawn from the seed.
    pub jitter: f64,
}

impl Default for ColmenaParams {
    fn default() -> Self {
        ColmenaParams {
            cores_per_node: 56,
            triples_per_node: COLMENA_TRIPLES_PER_NODE,
            sim_duration: 1.0,
            pre_duration: 0.1,
            post_duration: 0.1,
            jitter: 0.0,
        }
    }
}

/// Independent two-phase tile/inference functions on GPU nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IwpParams {
    pub cores_per_node: u32,
    pub gpus_per_node: u32,
    pub tasks: u32,
    pub ranks: u32,
    pub gpus_per_task: u32,
    pub tiles: u32,
    pub duration: f64,
}

impl Default for IwpParams {
    fn default() -> Self {
        IwpParams {
            cores_per_node: 16,
            gpus_per_node: 4,
            tasks: 16,
            ranks: 8,
            gpus_per_task: 2,
            tiles: 64,
            duration: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadSpec {
    Exp1(Exp1Params),
    Colmena(ColmenaParams),
    Iwp(IwpParams),
}

pub fn generate(spec: &WorkloadSpec, nodes: u32, seed: u64) -> Result<WorkflowFile, WorkflowError> {
    match spec {
        WorkloadSpec::Exp1(p) => gen_exp1(nodes, p, seed),
        WorkloadSpec::Colmena(p) => gen_colmena(nodes, p, seed),
        WorkloadSpec::Iwp(p) => gen_iwp(nodes, p, seed),
    }
}

fn file(pilot: PilotDescription, tasks: Vec<TaskSpec>, seed: u64) -> WorkflowFile {
    WorkflowFile {
        pilot,
        defaults: TaskDefaults::default(),
        costs: CostModel::default(),
        pool: PoolOptions::default(),
        tasks,
        run: RunSection {
            seed,
            ..RunSection::default()
        },
    }
}

fn invalid(msg: impl Into<String>) -> WorkflowError {
    WorkflowError::Invalid(msg.into())
}

fn check_common(nodes: u32, cores_per_node: u32, durations: &[f64]) -> Result<(), WorkflowError> {
    if nodes == 0 || cores_per_node == 0 {
        return Err(invalid("nodes and cores_per_node must be ≥ 1"));
    }
    if durations.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(invalid("durations must be finite and ≥ 0"));
    }
    Ok(())
}

pub fn gen_exp1(nodes: u32, p: &Exp1Params, seed: u64) -> Result<WorkflowFile, WorkflowError> {
    check_common(nodes, p.cores_per_node, &[p.duration])?;
    let k = p.ranks_per_task.unwrap_or(2 * p.cores_per_node);
    if k == 0 || k > nodes * p.cores_per_node {
        return Err(invalid(format!(
            "{k}-rank tasks cannot fit {nodes} nodes of {} cores",
            p.cores_per_node
        )));
    }
    let n = match p.scaling {
        Scaling::Weak => p.tasks * nodes,
        Scaling::Strong => p.tasks,
    };
    let tasks = (0..n)
        .map(|i| TaskSpec {
            ranks: Some(k),
            cores_per_rank: Some(1),
            duration: Some(p.duration),
            ..TaskSpec::function(format!("noop-{i:05}"), "noop")
        })
        .collect();
    Ok(file(PilotDescription::new(nodes, p.cores_per_node, 0), tasks, seed))
}

/// Round to whole milliseconds so generated files print short decimals.
fn ms(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

pub fn gen_colmena(nodes: u32, p: &ColmenaParams, seed: u64) -> Result<WorkflowFile, WorkflowError> {
    check_common(
        nodes,
        p.cores_per_node,
        &[p.sim_duration, p.pre_duration, p.post_duration],
    )?;
    if !(p.triples_per_node.is_finite() && p.triples_per_node > 0.0) || !(0.0..1.0).contains(&p.jitter) {
        return Err(invalid("triples_per_node must be > 0 and jitter in [0, 1)"));
    }
    let triples = ((p.triples_per_node * f64::from(nodes)).round() as u32).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(3 * triples as usize);
    for i in 0..triples {
        let spread = if p.jitter > 0.0 {
            rng.gen_range(-p.jitter..p.jitter)
        } else {
            0.0
        };
        let (pre, sim, post) = (format!("pre-{i:05}"), format!("sim-{i:05}"), format!("post-{i:05}"));
        tasks.push(TaskSpec {
            args: Some(json!({"index": i})),
            duration: Some(p.pre_duration),
            ..TaskSpec::function(&pre, "colmena_pre")
        });
        tasks.push(TaskSpec {
            ranks: Some(p.cores_per_node),
            cores_per_rank: Some(1),
            duration: Some(ms(p.sim_duration * (1.0 + spread))),
            depends_on: vec![pre],
            ..TaskSpec::executable(&sim, "simulate")
        });
        tasks.push(TaskSpec {
            args: Some(json!({"index": i})),
            duration: Some(p.post_duration),
            depends_on: vec![sim],
            ..TaskSpec::function(post, "colmena_post")
        });
    }
    Ok(file(PilotDescription::new(nodes, p.cores_per_node, 0), tasks, seed))
}

pub fn gen_iwp(nodes: u32, p: &IwpParams, seed: u64) -> Result<WorkflowFile, WorkflowError> {
    check_common(nodes, p.cores_per_node, &[p.duration])?;
    if p.ranks == 0 || p.ranks > nodes * p.cores_per_node || p.gpus_per_task > nodes * p.gpus_per_node {
        return Err(invalid(format!(
            "{}-rank, {}-GPU tasks cannot fit {nodes} nodes of {} cores and {} GPUs",
            p.ranks, p.gpus_per_task, p.cores_per_node, p.gpus_per_node
        )));
    }
    let tasks = (0..p.tasks)
        .map(|i| TaskSpec {
            args: Some(json!({"tiles": p.tiles})),
            ranks: Some(p.ranks),
            cores_per_rank: Some(1),
            gpus: Some(GpuRequest::PerTask(p.gpus_per_task)),
            duration: Some(p.duration),
            ..TaskSpec::function(format!("iwp-{i:05}"), "tile_and_infer")
        })
        .collect();
    Ok(file(
        PilotDescription::new(nodes, p.cores_per_node, p.gpus_per_node),
        tasks,
        seed,
    ))
}
