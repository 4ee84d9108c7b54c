//! Epoch drivers: sequential and pipelined execution over the ablation
//! modes. The pipelined driver overlaps host-side batch preparation
//! (sampling + edge-index selection) with device-side training through a
//! bounded channel; batch rng streams depend only on (epoch seed, batch
//! index), so every driver produces the same parameter trajectory.

use std::sync::mpsc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::device::{DeviceError, DeviceQueue, KernelDesc, Stage};
use crate::features::FeatureStore;
use crate::graph::HeteroGraph;
use crate::model::{ExecPath, ModelError, TrainState};
use crate::sampler::{plan_epoch, sample_batch, NodeLabels, SampleError};
use crate::semantic::{
    select_edge_indices_device, select_edge_indices_parallel, select_edge_indices_serial,
    SelectError, SemanticGraphSet,
};
use crate::{mix_seed, Scalar};

/// How long a pipeline stage waits on its neighbor before declaring the
/// pipeline wedged.
const PIPELINE_STALL: Duration = Duration::from_secs(30);

/// Ablation points between the all-optimizations-off baseline and the
/// fully optimized pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Index-major features, per-relation kernels, device-side selection.
    Baseline,
    /// Baseline plus type-major (reorganized) features.
    Reorg,
    /// Reorg plus merged single-kernel aggregation.
    ReorgMerge,
    /// Reorg plus host-offloaded parallel edge-index selection.
    ReorgParallel,
    /// Everything on, with the prepare/train pipeline.
    Full,
}

impl RunMode {
    pub const ALL: [RunMode; 5] = [
        RunMode::Baseline,
        RunMode::Reorg,
        RunMode::ReorgMerge,
        RunMode::ReorgParallel,
        RunMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Reorg => "reorg",
            RunMode::ReorgMerge => "reorg+merge",
            RunMode::ReorgParallel => "reorg+offload+parallel",
            RunMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<RunMode> {
        RunMode::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Type-major feature layout?
    pub fn reorganized(self) -> bool {
        self != RunMode::Baseline
    }

    pub fn exec_path(self) -> ExecPath {
        match self {
            RunMode::ReorgMerge | RunMode::Full => ExecPath::Merged,
            _ => ExecPath::PerRelation,
        }
    }

    /// Edge-index selection on the host (parallel) instead of the device?
    pub fn host_select(self) -> bool {
        matches!(self, RunMode::ReorgParallel | RunMode::Full)
    }

    pub fn pipelined(self) -> bool {
        self == RunMode::Full
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: RunMode,
    /// Vertex type whose nodes are classified.
    pub target_type: usize,
    pub batch_size: usize,
    /// Outermost layer last, as passed to the sampler.
    pub fanout: Vec<usize>,
    /// Host selection threads (host_select modes).
    pub workers: usize,
    /// Bound on prepared batches in flight (pipelined mode).
    pub queue_depth: usize,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("pipeline: {0}")]
    Pipeline(String),
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BatchReport {
    pub batch: u32,
    pub seeds: usize,
    /// Edges summed over layers of the semantic graph set.
    pub edges: usize,
    pub loss: f64,
    /// Host-side sampling + edge index selection.
    pub prepare_ms: f64,
    /// Transfer + forward + backward + update.
    pub train_ms: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub batches: Vec<BatchReport>,
    pub wall_ms: f64,
    /// Total host-side batch preparation time (overlapped with training
    /// in pipelined mode).
    pub prepare_ms: f64,
    /// Kernels launched during this epoch.
    pub kernels: usize,
    pub mean_loss: f64,
}

fn select<F: Scalar>(
    batch: &crate::sampler::MiniBatch,
    g: &HeteroGraph,
    cfg: &RunConfig,
    device: Option<(&DeviceQueue, u32)>,
    _marker: std::marker::PhantomData<F>,
) -> Result<SemanticGraphSet, SelectError> {
    if cfg.mode.host_select() {
        if cfg.workers > 1 {
            select_edge_indices_parallel(batch, g, cfg.workers)
        } else {
            select_edge_indices_serial(batch, g)
        }
    } else {
        let (dev, id) = device.expect("device-side selection needs the queue");
        select_edge_indices_device(batch, g, dev, Some(id))
    }
}

fn transfer_kernel<F: Scalar>(
    batch: &crate::sampler::MiniBatch,
    store: &FeatureStore<F>,
    device: &DeviceQueue,
    batch_id: u32,
) -> Result<(), DeviceError> {
    // Host-to-device copy of the outermost layer's input rows.
    let bytes: u64 = batch.layers[0]
        .vertex_map
        .iter()
        .enumerate()
        .map(|(t, v)| (v.len() * store.dims()[t] * F::BYTES) as u64)
        .sum();
    device.submit(
        {
            let mut d = KernelDesc::new("h2d_transfer", Stage::Transfer).bytes(bytes, bytes);
            d.batch = Some(batch_id);
            d
        },
        || (),
    )
}

fn edge_total(sgs: &SemanticGraphSet) -> usize {
    (0..sgs.layers.len()).map(|l| sgs.layer_edge_total(l)).sum()
}

/// Runs one training epoch. The `Full` mode prepares batches on a
/// producer thread; every other mode is a straight loop.
pub fn run_epoch<F: Scalar>(
    g: &HeteroGraph,
    labels: &NodeLabels,
    store: &FeatureStore<F>,
    state: &mut TrainState<F>,
    device: &DeviceQueue,
    cfg: &RunConfig,
    epoch: u32,
    base_seed: u64,
) -> Result<EpochReport, ExecError> {
    let epoch_seed = mix_seed(&[base_seed, epoch as u64]);
    let kernels_before = device.kernel_count();
    let start = Instant::now();
    let batches = if cfg.mode.pipelined() {
        run_pipelined(g, labels, store, state, device, cfg, epoch_seed)?
    } else {
        run_sequential(g, labels, store, state, device, cfg, epoch_seed)?
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let mean_loss = if batches.is_empty() {
        0.0
    } else {
        batches.iter().map(|b| b.loss).sum::<f64>() / batches.len() as f64
    };
    let prepare_ms = batches.iter().map(|b| b.prepare_ms).sum();
    Ok(EpochReport {
        epoch,
        batches,
        wall_ms,
        prepare_ms,
        kernels: device.kernel_count() - kernels_before,
        mean_loss,
    })
}

/// Straight-line driver: prepare then train, batch by batch.
pub fn run_sequential<F: Scalar>(
    g: &HeteroGraph,
    labels: &NodeLabels,
    store: &FeatureStore<F>,
    state: &mut TrainState<F>,
    device: &DeviceQueue,
    cfg: &RunConfig,
    epoch_seed: u64,
) -> Result<Vec<BatchReport>, ExecError> {
    let chunks = plan_epoch(g, cfg.target_type, cfg.batch_size, epoch_seed);
    let mut reports = Vec::with_capacity(chunks.len());
    for (i, seeds) in chunks.into_iter().enumerate() {
        let bid = i as u32;
        let prep_start = Instant::now();
        let batch = sample_batch(g, &seeds, &cfg.fanout, labels, mix_seed(&[epoch_seed, i as u64]))?;
        let sgs = select::<F>(&batch, g, cfg, Some((device, bid)), std::marker::PhantomData)?;
        let prepare_ms = prep_start.elapsed().as_secs_f64() * 1e3;
        let train_start = Instant::now();
        transfer_kernel(&batch, store, device, bid)?;
        let loss = state.backward_and_step(&batch, &sgs, store, cfg.mode.exec_path(), device, Some(bid))?;
        reports.push(BatchReport {
            batch: bid,
            seeds: batch.seeds.len(),
            edges: edge_total(&sgs),
            loss,
            prepare_ms,
            train_ms: train_start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(reports)
}

/// Three-role pipeline (producer, transfer, consumer) over bounded channels.
pub fn run_pipelined<F: Scalar>(
    g: &HeteroGraph,
    labels: &NodeLabels,
    store: &FeatureStore<F>,
    state: &mut TrainState<F>,
    device: &DeviceQueue,
    cfg: &RunConfig,
    epoch_seed: u64,
) -> Result<Vec<BatchReport>, ExecError> {
    let chunks = plan_epoch(g, cfg.target_type, cfg.batch_size, epoch_seed);
    let total = chunks.len();
    let depth = cfg.queue_depth.max(1);
    type Envelope = (u32, crate::sampler::MiniBatch, SemanticGraphSet, f64);
    let (prep_tx, prep_rx) = mpsc::sync_channel::<Envelope>(depth);
    let (ready_tx, ready_rx) = mpsc::sync_channel::<Envelope>(depth);
    std::thread::scope(|scope| -> Result<Vec<BatchReport>, ExecError> {
        let producer = scope.spawn(move || -> Result<(), ExecError> {
            for (i, seeds) in chunks.into_iter().enumerate() {
                let prep_start = Instant::now();
                let batch =
                    sample_batch(g, &seeds, &cfg.fanout, labels, mix_seed(&[epoch_seed, i as u64]))?;
                let sgs = select::<F>(&batch, g, cfg, None, std::marker::PhantomData)?;
                let prepare_ms = prep_start.elapsed().as_secs_f64() * 1e3;
                if prep_tx.send((i as u32, batch, sgs, prepare_ms)).is_err() {
                    // Downstream bailed; its error wins.
                    return Ok(());
                }
            }
            Ok(())
        });
        // Transfer role: emulates the dedicated copy stream.
        let transfer = scope.spawn(move || -> Result<(), ExecError> {
            while let Ok(env) = prep_rx.recv_timeout(PIPELINE_STALL) {
                transfer_kernel(&env.1, store, device, env.0)?;
                if ready_tx.send(env).is_err() {
                    return Ok(());
                }
            }
            Ok(())
        });
        let mut reports = Vec::with_capacity(total);
        let consume = (|| -> Result<(), ExecError> {
            for _ in 0..total {
                let (bid, batch, sgs, prepare_ms) = ready_rx
                    .recv_timeout(PIPELINE_STALL)
                    .map_err(|e| ExecError::Pipeline(format!("waiting for prepared batch: {e}")))?;
                let train_start = Instant::now();
                let loss = state.backward_and_step(
                    &batch,
                    &sgs,
                    store,
                    cfg.mode.exec_path(),
                    device,
                    Some(bid),
                )?;
                reports.push(BatchReport {
                    batch: bid,
                    seeds: batch.seeds.len(),
                    edges: edge_total(&sgs),
                    loss,
                    prepare_ms,
                    train_ms: train_start.elapsed().as_secs_f64() * 1e3,
                });
            }
            Ok(())
        })();
        // Unblock upstream stages stuck on full channels before joining.
        drop(ready_rx);
        let moved = transfer
            .join()
            .map_err(|_| ExecError::Pipeline("transfer thread panicked".into()))?;
        let produced = producer
            .join()
            .map_err(|_| ExecError::Pipeline("producer thread panicked".into()))?;
        // Root-cause order: an upstream failure is what starved downstream.
        produced?;
        moved?;
        consume?;
        Ok(reports)
    })
}

/// Overlap demonstrator: `n` items through a produce stage and a consume
/// stage with fixed host-side costs, run back-to-back and pipelined.
/// Returns wall times plus a fold of the consumed values from each run so
/// callers can check the pipeline reordered nothing.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PipelineDemo {
    pub sequential: Duration,
    pub pipelined: Duration,
    pub sequential_checksum: u64,
    pub pipelined_checksum: u64,
}

pub fn pipeline_demo(
    n: usize,
    produce_cost: Duration,
    consume_cost: Duration,
    queue_depth: usize,
) -> Result<PipelineDemo, ExecError> {
    fn produce(i: usize, cost: Duration) -> u64 {
        std::thread::sleep(cost);
        mix_seed(&[i as u64])
    }
    fn consume(acc: u64, item: u64, cost: Duration) -> u64 {
        std::thread::sleep(cost);
        mix_seed(&[acc, item])
    }
    let seq_start = Instant::now();
    let mut seq_acc = 0u64;
    for i in 0..n {
        let item = produce(i, produce_cost);
        seq_acc = consume(seq_acc, item, consume_cost);
    }
    let sequential = seq_start.elapsed();

    let (tx, rx) = mpsc::sync_channel::<u64>(queue_depth.max(1));
    let pipe_start = Instant::now();
    let pipe_acc = std::thread::scope(|scope| -> Result<u64, ExecError> {
        scope.spawn(move || {
            for i in 0..n {
                let item = produce(i, produce_cost);
                if tx.send(item).is_err() {
                    return;
                }
            }
        });
        let mut acc = 0u64;
        for _ in 0..n {
            let item = rx
                .recv_timeout(PIPELINE_STALL)
                .map_err(|e| ExecError::Pipeline(format!("demo pipeline stalled: {e}")))?;
            acc = consume(acc, item, consume_cost);
        }
        Ok(acc)
    })?;
    let pipelined = pipe_start.elapsed();
    Ok(PipelineDemo {
        sequential,
        pipelined,
        sequential_checksum: seq_acc,
        pipelined_checksum: pipe_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticSpec};
    use crate::model::{ModelKind, ModelParams};

    fn setup() -> (HeteroGraph, NodeLabels) {
        let g = generate_synthetic(&SyntheticSpec {
            counts: vec![40, 30, 20],
            relations: 6,
            edges: 600,
            feature_dim: 8,
            skew: 0.3,
            seed: 42,
        })
        .unwrap();
        let labels = NodeLabels::synthetic(&g, 4, 43);
        (g, labels)
    }

    fn store_for(g: &HeteroGraph, mode: RunMode) -> FeatureStore<f64> {
        let im = FeatureStore::<f64>::random_index_major(g, 77);
        if mode.reorganized() {
            im.reorganize()
        } else {
            im
        }
    }

    fn cfg(mode: RunMode) -> RunConfig {
        RunConfig {
            mode,
            target_type: 0,
            batch_size: 8,
            fanout: vec![4, 4],
            workers: 4,
            queue_depth: 2,
        }
    }

    fn run_one(mode: RunMode) -> (Vec<f64>, Vec<f64>, usize) {
        let (g, labels) = setup();
        let store = store_for(&g, mode);
        let params = ModelParams::<f64>::init(&g, ModelKind::Rgcn, 8, 2, 4, 7);
        let mut state = TrainState::new(params, 0.05);
        let device = DeviceQueue::new(Duration::ZERO);
        let report = run_epoch(&g, &labels, &store, &mut state, &device, &cfg(mode), 0, 1234)
            .unwrap();
        let losses = report.batches.iter().map(|b| b.loss).collect();
        (losses, state.params.flatten(), report.kernels)
    }

    #[test]
    fn all_modes_share_one_trajectory() {
        let (base_losses, base_params, _) = run_one(RunMode::Baseline);
        assert_eq!(base_losses.len(), 5); // 40 targets / batch_size 8
        for mode in [RunMode::Reorg, RunMode::ReorgMerge, RunMode::ReorgParallel, RunMode::Full] {
            let (losses, params, _) = run_one(mode);
            for (a, b) in base_losses.iter().zip(&losses) {
                assert!((a - b).abs() < 1e-9, "{}: loss {a} vs {b}", mode.name());
            }
            for (a, b) in base_params.iter().zip(&params) {
                assert!((a - b).abs() < 1e-9, "{}: params diverge", mode.name());
            }
        }
    }

    #[test]
    fn pipelined_matches_sequential_bitwise() {
        // Same mode both times; only the driver differs.
        let (g, labels) = setup();
        let store = store_for(&g, RunMode::Full);
        let run = |pipelined: bool| {
            let params = ModelParams::<f64>::init(&g, ModelKind::Rgcn, 8, 2, 4, 7);
            let mut state = TrainState::new(params, 0.05);
            let device = DeviceQueue::new(Duration::ZERO);
            let c = cfg(RunMode::Full);
            let epoch_seed = mix_seed(&[1234u64, 0]);
            let batches = if pipelined {
                run_pipelined(&g, &labels, &store, &mut state, &device, &c, epoch_seed)
            } else {
                run_sequential(&g, &labels, &store, &mut state, &device, &c, epoch_seed)
            }
            .unwrap();
            (
                batches.iter().map(|b| b.loss).collect::<Vec<_>>(),
                state.params.flatten(),
            )
        };
        let (seq_losses, seq_params) = run(false);
        let (pipe_losses, pipe_params) = run(true);
        assert_eq!(seq_losses.len(), pipe_losses.len());
        for (a, b) in seq_losses.iter().zip(&pipe_losses) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in seq_params.iter().zip(&pipe_params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn merged_mode_launches_fewer_kernels() {
        let (_, _, base) = run_one(RunMode::Baseline);
        let (_, _, full) = run_one(RunMode::Full);
        assert!(full < base, "full {full} >= baseline {base}");
    }

    #[test]
    fn demo_pipeline_overlaps() {
        let d = pipeline_demo(
            30,
            Duration::from_millis(2),
            Duration::from_millis(2),
            2,
        )
        .unwrap();
        assert_eq!(d.sequential_checksum, d.pipelined_checksum);
        assert!(
            d.pipelined.as_secs_f64() < 0.75 * d.sequential.as_secs_f64(),
            "pipelined {:?} vs sequential {:?}",
            d.pipelined,
            d.sequential
        );
    }
}
