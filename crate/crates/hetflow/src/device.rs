//! Emulated device queue and kernel trace.
//!
//! Every kernel submission busy-waits the configured launch overhead and
//! records one `KernelRecord`. The queue serializes accounting even when
//! callers run on different threads, mirroring launch cost on one stream.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Stage {
    SemanticBuild,
    FeatureProjection,
    NeighborAggregation,
    SemanticFusion,
    Transfer,
    Other,
}

pub const STAGES: [Stage; 6] = [
    Stage::SemanticBuild,
    Stage::FeatureProjection,
    Stage::NeighborAggregation,
    Stage::SemanticFusion,
    Stage::Transfer,
    Stage::Other,
];

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::SemanticBuild => "semantic_build",
            Stage::FeatureProjection => "feature_projection",
            Stage::NeighborAggregation => "neighbor_aggregation",
            Stage::SemanticFusion => "semantic_fusion",
            Stage::Transfer => "transfer",
            Stage::Other => "other",
        }
    }
}

/// Row-range metadata recorded by feature gathers, used to witness
/// type-block locality in the type-major layout.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Locality {
    pub min_row: u64,
    pub max_row: u64,
    pub block_start: u64,
    pub block_end: u64,
    pub block_id: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelRecord {
    pub name: &'static str,
    pub stage: Stage,
    pub batch: Option<u32>,
    pub layer: Option<u32>,
    pub relation: Option<u32>,
    pub launch_overhead_ns: u64,
    pub compute_ns: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub locality: Option<Locality>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KernelDesc {
    pub name: &'static str,
    pub stage: Stage,
    pub batch: Option<u32>,
    pub layer: Option<u32>,
    pub relation: Option<u32>,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub locality: Option<Locality>,
}

impl Default for Stage {
    fn default() -> Self {
        Stage::Other
    }
}

impl KernelDesc {
    pub fn new(name: &'static str, stage: Stage) -> Self {
        Self {
            name,
            stage,
            ..Default::default()
        }
    }
    pub fn batch(mut self, b: u32) -> Self {
        self.batch = Some(b);
        self
    }
    pub fn layer(mut self, l: u32) -> Self {
        self.layer = Some(l);
        self
    }
    pub fn relation(mut self, r: u32) -> Self {
        self.relation = Some(r);
        self
    }
    pub fn bytes(mut self, read: u64, written: u64) -> Self {
        self.bytes_read = read;
        self.bytes_written = written;
        self
    }
    pub fn locality(mut self, loc: Locality) -> Self {
        self.locality = Some(loc);
        self
    }
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("kernel submitted after device queue was closed")]
    Closed,
}

pub struct DeviceQueue {
    launch_overhead: Duration,
    open: AtomicBool,
    trace: Mutex<Vec<KernelRecord>>,
}

impl DeviceQueue {
    pub fn new(launch_overhead: Duration) -> Self {
        Self {
            launch_overhead,
            open: AtomicBool::new(true),
            trace: Mutex::new(Vec::new()),
        }
    }

    pub fn launch_overhead(&self) -> Duration {
        self.launch_overhead
    }

    pub fn close(&self) {
        self.open.store(false, Ordering::SeqCst);
    }

    /// Executes `work`, charging the launch overhead (busy-wait, so it is
    /// visible in wall time) and recording one trace entry.
    pub fn submit<T>(
        &self,
        desc: KernelDesc,
        work: impl FnOnce() -> T,
    ) -> Result<T, DeviceError> {
        if !self.open.load(Ordering::SeqCst) {
            return Err(DeviceError::Closed);
        }
        if !self.launch_overhead.is_zero() {
            let start = Instant::now();
            while start.elapsed() < self.launch_overhead {
                std::hint::spin_loop();
            }
        }
        let start = Instant::now();
        let out = work();
        let compute_ns = start.elapsed().as_nanos() as u64;
        let record = KernelRecord {
            name: desc.name,
            stage: desc.stage,
            batch: desc.batch,
            layer: desc.layer,
            relation: desc.relation,
            launch_overhead_ns: self.launch_overhead.as_nanos() as u64,
            compute_ns,
            bytes_read: desc.bytes_read,
            bytes_written: desc.bytes_written,
            locality: desc.locality,
        };
        self.trace.lock().expect("trace lock").push(record);
        Ok(out)
    }

    pub fn kernel_count(&self) -> usize {
        self.trace.lock().expect("trace lock").len()
    }

    /// Drains the accumulated trace.
    pub fn take_trace(&self) -> KernelTrace {
        let mut guard = self.trace.lock().expect("trace lock");
        KernelTrace {
            records: std::mem::take(&mut *guard),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct KernelTrace {
    pub records: Vec<KernelRecord>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TraceAggregates {
    pub total_kernels: usize,
    pub count_per_stage: Vec<(&'static str, usize)>,
    pub total_overhead_ns: u64,
    pub total_compute_ns: u64,
}

impl KernelTrace {
    pub fn extend(&mut self, other: KernelTrace) {
        self.records.extend(other.records);
    }

    pub fn aggregates(&self) -> TraceAggregates {
        let mut per_stage = STAGES.map(|s| (s.label(), 0usize));
        let mut overhead = 0u64;
        let mut compute = 0u64;
        for rec in &self.records {
            let idx = STAGES.iter().position(|s| *s == rec.stage).unwrap();
            per_stage[idx].1 += 1;
            overhead += rec.launch_overhead_ns;
            compute += rec.compute_ns;
        }
        TraceAggregates {
            total_kernels: self.records.len(),
            count_per_stage: per_stage.to_vec(),
            total_overhead_ns: overhead,
            total_compute_ns: compute,
        }
    }

    /// Device busy time under serialized-queue accounting.
    pub fn busy_ns(&self) -> u64 {
        self.records
            .iter()
            .map(|r| r.launch_overhead_ns + r.compute_ns)
            .sum()
    }

    pub fn count_named(&self, name: &str) -> usize {
        self.records.iter().filter(|r| r.name == name).count()
    }

    pub fn count_stage(&self, stage: Stage) -> usize {
        self.records.iter().filter(|r| r.stage == stage).count()
    }

    /// Newline-delimited export: one kernel per line.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                r.name,
                r.stage.label(),
                opt(r.batch),
                opt(r.layer),
                opt(r.relation),
                r.launch_overhead_ns,
                r.compute_ns,
                r.bytes_read + r.bytes_written,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_every_submission_once() {
        let q = DeviceQueue::new(Duration::ZERO);
        for i in 0..5 {
            q.submit(KernelDesc::new("noop", Stage::Other).batch(i), || ())
                .unwrap();
        }
        let trace = q.take_trace();
        assert_eq!(trace.records.len(), 5);
        assert_eq!(trace.aggregates().total_kernels, 5);
        // drained
        assert_eq!(q.take_trace().records.len(), 0);
    }

    #[test]
    fn overhead_accounted_and_waited() {
        let q = DeviceQueue::new(Duration::from_micros(5));
        let start = Instant::now();
        for _ in 0..3 {
            q.submit(KernelDesc::new("noop", Stage::Other), || ()).unwrap();
        }
        assert!(start.elapsed() >= Duration::from_micros(15));
        let trace = q.take_trace();
        assert!(trace.busy_ns() >= 15_000);
    }

    #[test]
    fn zero_overhead_busy_equals_compute() {
        let q = DeviceQueue::new(Duration::ZERO);
        q.submit(KernelDesc::new("noop", Stage::Other), || ()).unwrap();
        let trace = q.take_trace();
        assert_eq!(trace.busy_ns(), trace.records[0].compute_ns);
    }

    #[test]
    fn closed_queue_rejects() {
        let q = DeviceQueue::new(Duration::ZERO);
        q.close();
        assert!(q.submit(KernelDesc::new("noop", Stage::Other), || ()).is_err());
    }
}
