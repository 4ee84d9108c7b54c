//! Benchmark harness behind the `hetflow-bench` binary: dataset presets,
//! run orchestration, CSV/JSON reports, and run comparison.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{KernelTrace, STAGES};
use crate::executor::{run_epoch, EpochReport, ExecError, RunConfig, RunMode};
use crate::features::FeatureStore;
use crate::graph::{generate_synthetic, load_graph, GraphError, HeteroGraph, SyntheticSpec};
use crate::model::{ModelKind, ModelParams, TrainState};
use crate::sampler::NodeLabels;
use crate::{mix_seed, Scalar};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

/// Synthetic presets with the published shapes of the four standard RDF
/// benchmarks: (vertex types, relations, vertices, edges).
const PRESETS: [(&str, usize, usize, usize, usize); 4] = [
    ("aifb", 7, 104, 7_262, 48_810),
    ("bgs", 27, 122, 94_806, 672_884),
    ("mutag", 5, 50, 27_163, 148_100),
    ("am", 7, 108, 1_885_136, 5_668_682),
];

/// Splits `total` vertices over `t` types with a mild taper so type sizes
/// differ, preserving the exact total.
fn split_counts(total: usize, t: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..t).map(|i| 1.0 / (1.0 + 0.5 * i as f64)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| ((total as f64) * w / wsum).max(1.0) as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let last = counts.last_mut().unwrap();
    *last = (*last + total).saturating_sub(assigned).max(1);
    counts
}

/// `synth:NAME[/D]` builds the named preset with vertex and edge totals
/// divided by `D`; anything else is treated as a graph file path.
pub fn load_dataset(spec: &str, feature_dim: usize, seed: u64) -> Result<HeteroGraph, BenchError> {
    let Some(rest) = spec.strip_prefix("synth:") else {
        return Ok(load_graph(std::path::Path::new(spec))?);
    };
    let (name, div) = match rest.split_once('/') {
        Some((n, d)) => (
            n,
            d.parse::<usize>()
                .ok()
                .filter(|&d| d >= 1)
                .ok_or_else(|| BenchError::Config(format!("bad downscale factor in {spec:?}")))?,
        ),
        None => (rest, 1),
    };
    let &(_, t, r, n, e) = PRESETS
        .iter()
        .find(|p| p.0 == name)
        .ok_or_else(|| BenchError::Config(format!("unknown preset {name:?}")))?;
    let g = generate_synthetic(&SyntheticSpec {
        counts: split_counts(n / div, t),
        relations: r,
        edges: e / div,
        feature_dim,
        skew: 0.5,
        seed,
    })?;
    Ok(g)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dataset: String,
    pub model: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub batch_size: usize,
    /// One fanout per layer, outermost first.
    pub fanout: Vec<usize>,
    pub mode: String,
    pub workers: usize,
    pub queue_depth: usize,
    pub epochs: u32,
    pub seed: u64,
    pub launch_overhead_us: u64,
    pub fp64: bool,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dataset: "synth:aifb".into(),
            model: ModelKind::Rgcn,
            layers: 2,
            hidden: 16,
            batch_size: 64,
            fanout: vec![4, 4],
            mode: "baseline".into(),
            workers: 4,
            queue_depth: 2,
            epochs: 1,
            seed: 1,
            launch_overhead_us: 5,
            fp64: false,
            feature_dim: 16,
            num_classes: 4,
            lr: 0.01,
            out: None,
            trace_out: None,
        }
    }
}

/// Caps the configured worker count via the `HETFLOW_THREADS` env var.
pub fn effective_workers(requested: usize) -> usize {
    let cap = std::env::var("HETFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(usize::MAX);
    requested.clamp(1, cap)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub batches: usize,
    pub kernels: usize,
    /// Kernel count per stage, in `STAGES` order.
    pub stage_kernels: Vec<usize>,
    pub mean_loss: f64,
    pub wall_ms: f64,
    pub prepare_ms: f64,
    pub device_overhead_ns: u64,
    pub device_compute_ns: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub rows: Vec<EpochRow>,
    pub total_kernels: usize,
    pub total_wall_ms: f64,
    pub final_loss: f64,
}

impl BenchSummary {
    pub fn device_busy_ns(&self) -> u64 {
        self.rows
            .iter()
            .map(|r| r.device_overhead_ns + r.device_compute_ns)
            .sum()
    }

    pub fn host_prepare_ms(&self) -> f64 {
        self.rows.iter().map(|r| r.prepare_ms).sum()
    }

    /// Host preparation time over device busy time.
    pub fn host_device_ratio(&self) -> f64 {
        let dev_ms = self.device_busy_ns() as f64 / 1e6;
        if dev_ms == 0.0 {
            f64::INFINITY
        } else {
            self.host_prepare_ms() / dev_ms
        }
    }
}

fn epoch_row(report: &EpochReport, trace: &KernelTrace) -> EpochRow {
    let agg = trace.aggregates();
    EpochRow {
        epoch: report.epoch,
        batches: report.batches.len(),
        kernels: report.kernels,
        stage_kernels: agg.count_per_stage.iter().map(|&(_, c)| c).collect(),
        mean_loss: report.mean_loss,
        wall_ms: report.wall_ms,
        prepare_ms: report.prepare_ms,
        device_overhead_ns: agg.total_overhead_ns,
        device_compute_ns: agg.total_compute_ns,
    }
}

fn run_typed<F: Scalar>(cfg: &BenchConfig, mode: RunMode) -> Result<(BenchSummary, KernelTrace), BenchError> {
    if cfg.layers == 0 || cfg.fanout.len() != cfg.layers {
        return Err(BenchError::Config(format!(
            "fanout must list one value per layer ({} layers, {} fanouts)",
            cfg.layers,
            cfg.fanout.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(BenchError::Config("batch-size must be >= 1".into()));
    }
    let g = load_dataset(&cfg.dataset, cfg.feature_dim, mix_seed(&[cfg.seed, 1]))?;
    let labels = NodeLabels::synthetic(&g, cfg.num_classes, mix_seed(&[cfg.seed, 2]));
    let store = {
        let im = FeatureStore::<F>::random_index_major(&g, mix_seed(&[cfg.seed, 3]));
        if mode.reorganized() {
            im.reorganize()
        } else {
            im
        }
    };
    let params = ModelParams::<F>::init(
        &g,
        cfg.model,
        cfg.hidden,
        cfg.layers,
        cfg.num_classes,
        mix_seed(&[cfg.seed, 4]),
    );
    let mut state = TrainState::new(params, cfg.lr);
    let device = crate::device::DeviceQueue::new(Duration::from_micros(cfg.launch_overhead_us));
    let run_cfg = RunConfig {
        mode,
        target_type: 0,
        batch_size: cfg.batch_size,
        fanout: cfg.fanout.clone(),
        workers: effective_workers(cfg.workers),
        queue_depth: cfg.queue_depth,
    };
    let mut rows = Vec::with_capacity(cfg.epochs as usize);
    let mut full_trace = KernelTrace::default();
    for epoch in 0..cfg.epochs {
        let report = run_epoch(&g, &labels, &store, &mut state, &device, &run_cfg, epoch, cfg.seed)?;
        let trace = device.take_trace();
        rows.push(epoch_row(&report, &trace));
        full_trace.extend(trace);
    }
    let summary = BenchSummary {
        config: cfg.clone(),
        total_kernels: rows.iter().map(|r| r.kernels).sum(),
        total_wall_ms: rows.iter().map(|r| r.wall_ms).sum(),
        final_loss: rows.last().map(|r| r.mean_loss).unwrap_or(0.0),
        rows,
    };
    Ok((summary, full_trace))
}

/// Runs the configured benchmark and writes any requested reports.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchSummary, BenchError> {
    let mode = RunMode::parse(&cfg.mode)
        .ok_or_else(|| BenchError::Config(format!("unknown mode {:?}", cfg.mode)))?;
    let (summary, trace) = if cfg.fp64 {
        run_typed::<f64>(cfg, mode)?
    } else {
        run_typed::<f32>(cfg, mode)?
    };
    if let Some(out) = &cfg.out {
        std::fs::write(out.with_extension("csv"), csv_report(&summary))?;
        std::fs::write(
            out.with_extension("json"),
            serde_json::to_string_pretty(&summary)
                .map_err(|e| BenchError::Report(e.to_string()))?,
        )?;
    }
    if let Some(tout) = &cfg.trace_out {
        std::fs::write(tout, trace.export())?;
    }
    Ok(summary)
}

/// One row per epoch. Timing columns carry a `_ms`/`_ns` suffix so
/// downstream determinism checks can drop them.
pub fn csv_report(summary: &BenchSummary) -> String {
    let mut out = String::from("epoch,dataset,model,mode,fp64,seed,batches,kernels");
    for s in STAGES {
        out.push_str(&format!(",kernels_{}", s.label()));
    }
    out.push_str(",mean_loss,wall_ms,prepare_ms,device_overhead_ns,device_compute_ns\n");
    let c = &summary.config;
    let model = match c.model {
        ModelKind::Rgcn => "rgcn",
        ModelKind::Rgat => "rgat",
    };
    for r in &summary.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            r.epoch, c.dataset, model, c.mode, c.fp64, c.seed, r.batches, r.kernels
        ));
        for &k in &r.stage_kernels {
            out.push_str(&format!(",{k}"));
        }
        out.push_str(&format!(
            ",{:.17},{:.3},{:.3},{},{}\n",
            r.mean_loss, r.wall_ms, r.prepare_ms, r.device_overhead_ns, r.device_compute_ns
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    /// wall(a) / wall(b): >1 means b is faster.
    pub speedup: f64,
    /// 1 - kernels(b)/kernels(a).
    pub kernel_reduction: f64,
    pub host_device_ratio_a: f64,
    pub host_device_ratio_b: f64,
    pub loss_divergence: f64,
    /// Final losses agree within 1e-3?
    pub semantically_equal: bool,
}

/// Compares a reference run `a` against a candidate `b`.
pub fn compare(a: &BenchSummary, b: &BenchSummary) -> Result<Comparison, BenchError> {
    if a.rows.len() != b.rows.len() {
        return Err(BenchError::Report(format!(
            "epoch counts differ: {} vs {}",
            a.rows.len(),
            b.rows.len()
        )));
    }
    let loss_divergence = (a.final_loss - b.final_loss).abs();
    Ok(Comparison {
        speedup: a.total_wall_ms / b.total_wall_ms,
        kernel_reduction: 1.0 - b.total_kernels as f64 / a.total_kernels as f64,
        host_device_ratio_a: a.host_device_ratio(),
        host_device_ratio_b: b.host_device_ratio(),
        loss_divergence,
        semantically_equal: loss_divergence <= 1e-3,
    })
}

pub fn read_summary(path: &std::path::Path) -> Result<BenchSummary, BenchError> {
    serde_json::from_slice(&std::fs::read(path)?).map_err(|e| BenchError::Report(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(mode: &str) -> BenchConfig {
        BenchConfig {
            dataset: "synth:aifb/8".into(),
            mode: mode.into(),
            batch_size: 32,
            epochs: 1,
            launch_overhead_us: 0,
            fp64: true,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn presets_match_published_shapes() {
        let g = load_dataset("synth:mutag", 8, 7).unwrap();
        assert_eq!(g.num_types(), 5);
        assert_eq!(g.num_relations(), 50);
        assert_eq!(g.vertex_types.iter().map(|t| t.count).sum::<usize>(), 27_163);
        assert_eq!(g.edge_src.len(), 148_100);
        let g10 = load_dataset("synth:am/10", 8, 7).unwrap();
        assert_eq!(g10.num_types(), 7);
        assert_eq!(g10.num_relations(), 108);
        assert_eq!(g10.edge_src.len(), 566_868);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(matches!(load_dataset("synth:nope", 8, 1), Err(BenchError::Config(_))));
        assert!(matches!(load_dataset("synth:am/0", 8, 1), Err(BenchError::Config(_))));
        let cfg = BenchConfig {
            mode: "turbo".into(),
            ..small_cfg("baseline")
        };
        assert!(matches!(run_benchmark(&cfg), Err(BenchError::Config(_))));
        let cfg = BenchConfig {
            fanout: vec![4],
            ..small_cfg("baseline")
        };
        assert!(matches!(run_benchmark(&cfg), Err(BenchError::Config(_))));
    }

    #[test]
    fn csv_is_deterministic_without_timing_columns() {
        let cfg = small_cfg("full");
        let a = csv_report(&run_benchmark(&cfg).unwrap());
        let b = csv_report(&run_benchmark(&cfg).unwrap());
        let strip = |csv: &str| -> Vec<Vec<String>> {
            let mut lines = csv.lines();
            let header: Vec<&str> = lines.next().unwrap().split(',').collect();
            let keep: Vec<usize> = header
                .iter()
                .enumerate()
                .filter(|(_, h)| !h.ends_with("_ms") && !h.ends_with("_ns"))
                .map(|(i, _)| i)
                .collect();
            lines
                .map(|l| {
                    let f: Vec<&str> = l.split(',').collect();
                    keep.iter().map(|&i| f[i].to_string()).collect()
                })
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn compare_detects_divergence_and_reduction() {
        let base = run_benchmark(&small_cfg("baseline")).unwrap();
        let full = run_benchmark(&small_cfg("full")).unwrap();
        let cmp = compare(&base, &full).unwrap();
        assert!(cmp.semantically_equal, "loss diverged: {}", cmp.loss_divergence);
        assert!(cmp.kernel_reduction > 0.0);
        // CSV totals reconcile with the trace export.
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            out: Some(dir.path().join("run")),
            trace_out: Some(dir.path().join("trace.txt")),
            ..small_cfg("baseline")
        };
        let s = run_benchmark(&cfg).unwrap();
        let trace_lines = std::fs::read_to_string(dir.path().join("trace.txt"))
            .unwrap()
            .lines()
            .count();
        assert_eq!(trace_lines, s.total_kernels);
        let reread = read_summary(&dir.path().join("run.json")).unwrap();
        assert_eq!(reread.total_kernels, s.total_kernels);
    }

    #[test]
    fn workers_env_caps() {
        assert_eq!(effective_workers(0), 1);
        // No env manipulation here (tests run in parallel); just the
        // no-cap path.
        assert_eq!(effective_workers(8).min(8), effective_workers(8));
    }
}
