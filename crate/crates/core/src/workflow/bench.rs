//! Node-count sweeps over a generated workload, repeated and aggregated.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{generate, run_workflow, WorkflowError, WorkloadSpec};
use crate::clock::ClockMode;
use crate::funcpool::PoolOptions;
use crate::functions::FunctionRegistry;
use crate::metrics::RunReport;
use crate::pilot::{CostModel, LauncherModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub workload: WorkloadSpec,
    pub nodes: Vec<u32>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub launcher: LauncherModel,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub pool: PoolOptions,
    #[serde(default)]
    pub exclude_pool_start: bool,
}

fn default_repeats() -> u32 {
    3
}

impl BenchSpec {
    pub fn new(workload: WorkloadSpec, nodes: Vec<u32>) -> Self {
        BenchSpec {
            workload,
            nodes,
            repeats: default_repeats(),
            seed: 0,
            launcher: LauncherModel::Instant,
            costs: CostModel::default(),
            pool: PoolOptions::default(),
            exclude_pool_start: false,
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let mean = xs.iter().sum::<f64>() / n;
        // identical samples give exactly zero rather than rounding noise
        if xs.iter().all(|x| *x == xs[0]) {
            return Stat { mean: xs[0], std: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Stat { mean, std: var.sqrt() }
    }
}

/// One node count of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_nodes: u32,
    pub runs: u32,
    pub n_tasks: u64,
    pub tpt_s: Stat,
    pub ts_per_s: Stat,
    pub ttx_s: Stat,
    pub rt_ovh_s: Stat,
    pub total_ovh_s: Stat,
    /// Fractions of pilot core-time.
    pub running: Stat,
    pub launching: Stat,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// Every individual run, in sweep order.
    pub reports: Vec<RunReport>,
}

fn kind(w: &WorkloadSpec) -> &'static str {
    match w {
        WorkloadSpec::Exp1(_) => "exp1",
        WorkloadSpec::Colmena(_) => "colmena",
        WorkloadSpec::Iwp(_) => "iwp",
    }
}

/// Runs the sweep under the virtual clock. Repeat `r` uses seed `seed + r`.
pub fn bench(spec: &BenchSpec, registry: Arc<FunctionRegistry>) -> Result<BenchResult, WorkflowError> {
    if spec.repeats == 0 || spec.nodes.is_empty() {
        return Err(WorkflowError::Invalid(
            "a sweep needs node counts and repeats ≥ 1".into(),
        ));
    }
    let mut rows = Vec::with_capacity(spec.nodes.len());
    let mut reports = Vec::new();
    for &n in &spec.nodes {
        let mut group = Vec::with_capacity(spec.repeats as usize);
        for r in 0..spec.repeats {
            let seed = spec.seed + u64::from(r);
            let mut file = generate(&spec.workload, n, seed)?;
            file.pilot.launcher = spec.launcher;
            file.costs = spec.costs;
            file.pool = spec.pool;
            file.run.clock = ClockMode::Virtual;
            file.run.exclude_pool_start = spec.exclude_pool_start;
            file.run.run_id = Some(format!("{}-n{n}-r{r}", kind(&spec.workload)));
            let out = run_workflow(&file, registry.clone())?;
            if !out.all_done() {
                let (uid, msg) = out.failures.iter().next().map_or(("?", ""), |(u, m)| (u, m));
                return Err(WorkflowError::Execution(format!("{uid} did not finish: {msg}")));
            }
            group.push(out.report);
        }
        let col = |f: &dyn Fn(&RunReport) -> f64| Stat::of(&group.iter().map(f).collect::<Vec<_>>());
        rows.push(BenchRow {
            n_nodes: n,
            runs: spec.repeats,
            n_tasks: group[0].metrics.n_tasks,
            tpt_s: col(&|r| r.metrics.tpt_s),
            ts_per_s: col(&|r| r.metrics.ts_per_s),
            ttx_s: col(&|r| r.metrics.ttx_s),
            rt_ovh_s: col(&|r| r.metrics.runtime_overhead_s),
            total_ovh_s: col(&|r| r.metrics.total_overhead_s),
            running: col(&|r| r.utilization.fraction(r.utilization.running_core_ms)),
            launching: col(&|r| r.utilization.fraction(r.utilization.launching_core_ms)),
        });
        reports.extend(group);
    }
    Ok(BenchResult { rows, reports })
}

pub const BENCH_COLUMNS: [&str; 17] = [
    "n_nodes",
    "runs",
    "n_tasks",
    "tpt_mean",
    "tpt_std",
    "ts_mean",
    "ts_std",
    "ttx_mean",
    "ttx_std",
    "rt_ovh_mean",
    "rt_ovh_std",
    "total_ovh_mean",
    "total_ovh_std",
    "run_frac_mean",
    "run_frac_std",
    "launch_frac_mean",
    "launch_frac_std",
];

/// Writes one row per node count with mean and standard deviation columns.
pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<(), WorkflowError> {
    let io = |e: &dyn std::fmt::Display| WorkflowError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(&e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(BENCH_COLUMNS).map_err(|e| io(&e))?;
    for r in rows {
        let mut rec = vec![r.n_nodes.to_string(), r.runs.to_string(), r.n_tasks.to_string()];
        for s in [
            r.tpt_s,
            r.ts_per_s,
            r.ttx_s,
            r.rt_ovh_s,
            r.total_ovh_s,
            r.running,
            r.launching,
        ] {
            rec.push(s.mean.to_string());
            rec.push(s.std.to_string());
        }
        w.write_record(&rec).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::{Exp1Params, Scaling};

    #[test]
    fn stat_oracle() {
        let s = Stat::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert!((s.std - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[0.1 + 0.2; 3]).std, 0.0);
    }

    #[test]
    fn small_weak_sweep_gives_one_row_per_size_with_zero_spread() {
        let spec = BenchSpec::new(
            WorkloadSpec::Exp1(Exp1Params {
                tasks: 2,
                scaling: Scaling::Weak,
                ..Exp1Params::default()
            }),
            vec![2, 4],
        );
        let res = bench(&spec, Arc::new(FunctionRegistry::with_builtins())).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert_eq!(res.reports.len(), 6);
        for row in &res.rows {
            assert_eq!(row.tpt_s.std, 0.0);
            assert_eq!(row.runs, 3);
        }
        assert_eq!(res.rows[1].n_tasks, 2 * res.rows[0].n_tasks);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_bench_csv(&res.rows, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), BENCH_COLUMNS.len());
    }
}
