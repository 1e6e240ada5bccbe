use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pilotflow::clock::ClockMode;
use pilotflow::events::read_log;
use pilotflow::functions::FunctionRegistry;
use pilotflow::metrics::{compute_metrics, compute_utilization, emit_report, MetricsOptions, ReportFormat, RunReport};
use pilotflow::pilot::LauncherModel;
use pilotflow::task::TaskState;
use pilotflow::workflow::{
    bench, gen_colmena, gen_exp1, gen_iwp, run_workflow, write_bench_csv, write_outputs, BenchSpec, ColmenaParams,
    Exp1Params, IwpParams, Scaling, WorkflowError, WorkflowFile, COLMENA_TRIPLES_PER_NODE,
};

#[derive(Parser)]
#[command(
    name = "pilotflow",
    version,
    about = "Dataflow workflows on a simulated pilot allocation"
)]
struct Cli {
    /// Directory for outputs given as relative paths.
    #[arg(long, global = true, env = "PILOTFLOW_OUT", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workflow file; exits 0 iff every task finished DONE.
    Run(RunArgs),
    /// Write a synthetic workflow file.
    Gen {
        #[command(subcommand)]
        workload: GenCmd,
    },
    /// Run a node-count sweep described by a JSON file.
    Bench {
        sweep: PathBuf,
        /// Aggregated CSV (default: bench.csv).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compute metrics from an event log.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    #[arg(long, value_enum)]
    clock: Option<Clock>,
    /// Event log path (default: <run_id>.log).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Report path; `.json` selects JSON lines, anything else CSV
    /// (default: report.csv).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    log: PathBuf,
    /// Append a report row here as well as printing it.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "report")]
    run_id: String,
    #[arg(long, value_enum, default_value = "virtual")]
    clock: Clock,
    #[arg(long)]
    exclude_pool_start: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Real,
    Virtual,
}

impl From<Clock> for ClockMode {
    fn from(c: Clock) -> Self {
        match c {
            Clock::Real => ClockMode::Real,
            Clock::Virtual => ClockMode::Virtual,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Launcher {
    Instant,
    Fixed,
    Serialized,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Weak,
    Strong,
}

#[derive(Args)]
struct GenCommon {
    #[arg(long)]
    nodes: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "instant")]
    launcher: Launcher,
    /// Launch latency in seconds for the fixed and serialized launchers.
    #[arg(long = "latency", default_value_t = 0.0)]
    latency: f64,
    #[arg(long, value_enum, default_value = "virtual")]
    clock: Clock,
    /// Pilot walltime in seconds.
    #[arg(long)]
    walltime: Option<f64>,
    /// Output file (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenCmd {
    /// Multi-rank no-op functions, each spanning two nodes.
    Exp1 {
        #[command(flatten)]
        common: GenCommon,
        #[arg(long, value_enum, default_value = "weak")]
        scaling: ScalingArg,
        /// Tasks per node (weak) or in total (strong).
        #[arg(long, default_value_t = 8)]
        tasks: u32,
        #[arg(long, default_value_t = 8)]
        cores_per_node: u32,
        /// Ranks per task (default: two nodes' worth of cores).
        #[arg(long)]
        ranks: Option<u32>,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// pre-process -> whole-node simulation -> post-process triples.
    Colmena {
        #[command(flatten)]
        common: GenCommon,
        #[arg(long, default_value_t = 56)]
        cores_per_node: u32,
        #[arg(long, default_value_t = COLMENA_TRIPLES_PER_NODE)]
        triples_per_node: f64,
        #[arg(long, default_value_t = 1.0)]
        sim_duration: f64,
        #[arg(long, default_value_t = 0.1)]
        pre_duration: f64,
        #[arg(long, default_value_t = 0.1)]
        post_duration: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
    /// Independent tile-and-infer functions on GPU nodes.
    Iwp {
        #[command(flatten)]
        common: GenCommon,
        #[arg(long, default_value_t = 16)]
        tasks: u32,
        #[arg(long, default_value_t = 16)]
        cores_per_node: u32,
        #[arg(long, default_value_t = 4)]
        gpus_per_node: u32,
        #[arg(long, default_value_t = 8)]
        ranks: u32,
        #[arg(long, default_value_t = 2)]
        gpus_per_task: u32,
        #[arg(long, default_value_t = 64)]
        tiles: u32,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
}

fn under(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn registry() -> Arc<FunctionRegistry> {
    Arc::new(FunctionRegistry::with_builtins())
}

fn print_report(r: &RunReport) {
    let m = &r.metrics;
    let u = &r.utilization;
    println!(
        "{}: {} tasks on {} nodes, TPT {:.3} s, TS {:.3} tasks/s, TTX {:.3} s, overhead {:.3} s runtime / {:.3} s total",
        r.run_id, m.n_tasks, m.n_nodes, m.tpt_s, m.ts_per_s, m.ttx_s, m.runtime_overhead_s, m.total_overhead_s
    );
    println!(
        "utilization: scheduled {:.1}% launching {:.1}% running {:.1}% idle {:.1}%",
        100.0 * u.fraction(u.scheduled_core_ms),
        100.0 * u.fraction(u.launching_core_ms),
        100.0 * u.fraction(u.running_core_ms),
        100.0 * u.fraction(u.idle_core_ms)
    );
}

fn cmd_run(out_dir: &Path, a: RunArgs) -> Result<ExitCode, WorkflowError> {
    let mut file = WorkflowFile::load(&a.file)?;
    if let Some(c) = a.clock {
        file.run.clock = c.into();
    }
    if a.run_id.is_some() {
        file.run.run_id = a.run_id;
    }
    let run_id = file.run.run_id();
    let log = a
        .log
        .or_else(|| file.run.log.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{run_id}.log")));
    let report = a
        .report
        .or_else(|| file.run.report.clone())
        .unwrap_or_else(|| PathBuf::from("report.csv"));
    let outcome = run_workflow(&file, registry())?;
    write_outputs(&outcome, &under(out_dir, &log), &under(out_dir, &report))?;
    print_report(&outcome.report);
    let states: Vec<String> = TaskState::ALL
        .iter()
        .filter(|s| s.is_terminal())
        .map(|s| format!("{} {}", outcome.count(*s), s))
        .collect();
    println!("tasks: {}", states.join(", "));
    for (uid, msg) in &outcome.failures {
        eprintln!("{uid}: {msg}");
    }
    Ok(if outcome.all_done() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn launcher(c: &GenCommon) -> LauncherModel {
    match c.launcher {
        Launcher::Instant => LauncherModel::Instant,
        Launcher::Fixed => LauncherModel::FixedLatency { latency: c.latency },
        Launcher::Serialized => LauncherModel::Serialized { latency: c.latency },
    }
}

fn cmd_gen(out_dir: &Path, g: GenCmd) -> Result<ExitCode, WorkflowError> {
    let (mut file, common) = match g {
        GenCmd::Exp1 {
            common,
            scaling,
            tasks,
            cores_per_node,
            ranks,
            duration,
        } => {
            let p = Exp1Params {
                cores_per_node,
                scaling: match scaling {
                    ScalingArg::Weak => Scaling::Weak,
                    ScalingArg::Strong => Scaling::Strong,
                },
                tasks,
                ranks_per_task: ranks,
                duration,
            };
            (gen_exp1(common.nodes, &p, common.seed)?, common)
        }
        GenCmd::Colmena {
            common,
            cores_per_node,
            triples_per_node,
            sim_duration,
            pre_duration,
            post_duration,
            jitter,
        } => {
            let p = ColmenaParams {
                cores_per_node,
                triples_per_node,
                sim_duration,
                pre_duration,
                post_duration,
                jitter,
            };
            (gen_colmena(common.nodes, &p, common.seed)?, common)
        }
        GenCmd::Iwp {
            common,
            tasks,
            cores_per_node,
            gpus_per_node,
            ranks,
            gpus_per_task,
            tiles,
            duration,
        } => {
            let p = IwpParams {
                cores_per_node,
                gpus_per_node,
                tasks,
                ranks,
                gpus_per_task,
                tiles,
                duration,
            };
            (gen_iwp(common.nodes, &p, common.seed)?, common)
        }
    };
    file.pilot.launcher = launcher(&common);
    file.run.clock = common.clock.into();
    if let Some(w) = common.walltime {
        file.pilot.walltime = w;
    }
    if let Err(e) = file.pilot.validate() {
        return Err(WorkflowError::Invalid(e.to_string()));
    }
    match common.output {
        Some(p) => file.save(&under(out_dir, &p))?,
        None => print!("{}", file.to_json()),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(out_dir: &Path, sweep: &Path, output: Option<PathBuf>) -> Result<ExitCode, WorkflowError> {
    let text = std::fs::read_to_string(sweep).map_err(|e| WorkflowError::Io(format!("{}: {e}", sweep.display())))?;
    let spec: BenchSpec = serde_json::from_str(&text).map_err(|e| WorkflowError::Parse(e.to_string()))?;
    let res = bench(&spec, registry())?;
    let path = under(out_dir, &output.unwrap_or_else(|| PathBuf::from("bench.csv")));
    write_bench_csv(&res.rows, &path)?;
    println!("nodes  tasks  TPT s            TS tasks/s       TTX s            running");
    for r in &res.rows {
        println!(
            "{:>5}  {:>5}  {:>7.3} ± {:<6.3}  {:>7.3} ± {:<6.3}  {:>7.3} ± {:<6.3}  {:.1}%",
            r.n_nodes,
            r.n_tasks,
            r.tpt_s.mean,
            r.tpt_s.std,
            r.ts_per_s.mean,
            r.ts_per_s.std,
            r.ttx_s.mean,
            r.ttx_s.std,
            100.0 * r.running.mean
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(out_dir: &Path, a: ReportArgs) -> Result<ExitCode, WorkflowError> {
    let records = read_log(&a.log).map_err(|e| WorkflowError::Parse(e.to_string()))?;
    let opts = MetricsOptions {
        exclude_pool_start: a.exclude_pool_start,
    };
    let input = |e: pilotflow::metrics::MetricsError| WorkflowError::Parse(e.to_string());
    let report = RunReport {
        run_id: a.run_id,
        clock_mode: a.clock.into(),
        metrics: compute_metrics(&records, opts).map_err(input)?,
        utilization: compute_utilization(&records).map_err(input)?,
    };
    print_report(&report);
    if let Some(p) = a.output {
        let p = under(out_dir, &p);
        emit_report(&report, ReportFormat::from_path(&p), &p)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = cli.out_dir;
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(&out, a),
        Cmd::Gen { workload } => cmd_gen(&out, workload),
        Cmd::Bench { sweep, output } => cmd_bench(&out, &sweep, output),
        Cmd::Report(a) => cmd_report(&out, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
