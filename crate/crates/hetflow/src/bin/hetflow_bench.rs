//! Benchmark CLI: runs training experiments over the ablation modes and
//! compares report files.
//!
//! Exit codes: 0 ok, 2 config error, 3 semantic mismatch, 4 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hetflow::bench::{compare, read_summary, run_benchmark, BenchConfig, BenchError};
use hetflow::model::ModelKind;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Rgcn,
    Rgat,
}

#[derive(Parser, Debug)]
#[command(name = "hetflow-bench", version, about = "Heterogeneous GNN training benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train for a number of epochs and emit CSV/JSON reports.
    Run(RunArgs),
    /// Compare two JSON reports (speedup, kernel reduction, host/device ratio).
    Compare {
        /// Reference report (JSON).
        report_a: PathBuf,
        /// Candidate report (JSON).
        report_b: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// `synth:aifb|bgs|mutag|am` (optionally `synth:am/10` to downscale) or a graph file path.
    #[arg(long, default_value = "synth:aifb")]
    dataset: String,
    #[arg(long, value_enum, default_value = "rgcn")]
    model: ModelArg,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Per-layer neighbor fanout, outermost first (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "4,4")]
    fanout: Vec<usize>,
    /// baseline | reorg | reorg+merge | reorg+offload+parallel | full
    #[arg(long, default_value = "baseline")]
    mode: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 2)]
    queue_depth: usize,
    #[arg(long, default_value_t = 1)]
    epochs: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Emulated per-kernel launch overhead.
    #[arg(long, default_value_t = 5)]
    launch_overhead_us: u64,
    /// Train in f64 instead of f32.
    #[arg(long)]
    fp64: bool,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Report basename; writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Kernel trace export path (newline-delimited records).
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

impl From<RunArgs> for BenchConfig {
    fn from(a: RunArgs) -> Self {
        BenchConfig {
            dataset: a.dataset,
            model: match a.model {
                ModelArg::Rgcn => ModelKind::Rgcn,
                ModelArg::Rgat => ModelKind::Rgat,
            },
            layers: a.layers,
            hidden: a.hidden,
            batch_size: a.batch_size,
            fanout: a.fanout,
            mode: a.mode,
            workers: a.workers,
            queue_depth: a.queue_depth,
            epochs: a.epochs,
            seed: a.seed,
            launch_overhead_us: a.launch_overhead_us,
            fp64: a.fp64,
            feature_dim: a.feature_dim,
            num_classes: a.num_classes,
            lr: a.lr,
            out: a.out,
            trace_out: a.trace_out,
        }
    }
}

fn exit_for(err: &BenchError) -> u8 {
    match err {
        BenchError::Config(_) => 2,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run(args) => {
            let cfg: BenchConfig = args.into();
            match run_benchmark(&cfg) {
                Ok(summary) => {
                    println!(
                        "epochs={} batches={} kernels={} mean_loss={:.6} wall_ms={:.3}",
                        summary.rows.len(),
                        summary.rows.iter().map(|r| r.batches).sum::<usize>(),
                        summary.total_kernels,
                        summary.final_loss,
                        summary.total_wall_ms,
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_for(&e))
                }
            }
        }
        Cmd::Compare { report_a, report_b } => {
            let load = |p: &PathBuf| {
                read_summary(p).map_err(|e| {
                    eprintln!("error reading {}: {e}", p.display());
                    ExitCode::from(4)
                })
            };
            let (a, b) = match (load(&report_a), load(&report_b)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(c), _) | (_, Err(c)) => return c,
            };
            match compare(&a, &b) {
                Ok(cmp) => {
                    println!(
                        "speedup={:.3} kernel_reduction={:.3} host_device_ratio_a={:.3} \
                         host_device_ratio_b={:.3} loss_divergence={:.3e}",
                        cmp.speedup,
                        cmp.kernel_reduction,
                        cmp.host_device_ratio_a,
                        cmp.host_device_ratio_b,
                        cmp.loss_divergence,
                    );
                    if cmp.semantically_equal {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("error: semantic mismatch (final losses diverge > 1e-3)");
                        ExitCode::from(3)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(4)
                }
            }
        }
    }
}
