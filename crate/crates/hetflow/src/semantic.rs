//! Edge index selection: partitioning each layer's mixed-relation edge
//! list into per-relation semantic graphs.
//!
//! Three variants produce identical output: a serial host reference, a
//! multi-threaded host variant (one relation per task, dynamically
//! assigned), and a device-emulated baseline that mirrors the per-relation
//! compare + index-select kernel structure.

use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use crate::device::{DeviceError, DeviceQueue, KernelDesc, Stage};
use crate::graph::{HeteroGraph, TypeId};
use crate::sampler::MiniBatch;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("edge id {0} out of range")]
    EdgeIdOutOfRange(u32),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationEdges {
    pub src_index: Vec<u32>,
    pub dst_index: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticGraphSet {
    /// layers[layer][relation]
    pub layers: Vec<Vec<RelationEdges>>,
    /// Per relation (src_type, dst_type), copied from the graph catalog.
    pub rel_types: Vec<(TypeId, TypeId)>,
}

impl SemanticGraphSet {
    pub fn layer_edge_total(&self, layer: usize) -> usize {
        self.layers[layer].iter().map(|r| r.src_index.len()).sum()
    }
}

fn rel_types(g: &HeteroGraph) -> Vec<(TypeId, TypeId)> {
    g.relations.iter().map(|r| (r.src_type, r.dst_type)).collect()
}

fn edge_types_for_layer(
    batch: &MiniBatch,
    g: &HeteroGraph,
    layer: usize,
) -> Result<Vec<u32>, SelectError> {
    batch.layers[layer]
        .edge_id
        .iter()
        .map(|&eid| {
            g.global_edge_type
                .get(eid as usize)
                .copied()
                .ok_or(SelectError::EdgeIdOutOfRange(eid))
        })
        .collect()
}

fn select_one_relation(
    block_edges: &[(u32, u32)],
    edge_types: &[u32],
    rel: u32,
) -> RelationEdges {
    // fused compare + index-select: one pass over the layer's edge types
    let mut out = RelationEdges::default();
    for (k, &ty) in edge_types.iter().enumerate() {
        if ty == rel {
            let (s, d) = block_edges[k];
            out.src_index.push(s);
            out.dst_index.push(d);
        }
    }
    out
}

/// Serial host reference.
pub fn select_edge_indices_serial(
    batch: &MiniBatch,
    g: &HeteroGraph,
) -> Result<SemanticGraphSet, SelectError> {
    let r = g.num_relations();
    let mut layers = Vec::with_capacity(batch.layers.len());
    for layer in 0..batch.layers.len() {
        let edge_types = edge_types_for_layer(batch, g, layer)?;
        let block = &batch.layers[layer];
        let per_rel = (0..r)
            .map(|j| select_one_relation(&block.edge_index, &edge_types, j as u32))
            .collect();
        layers.push(per_rel);
    }
    Ok(SemanticGraphSet {
        layers,
        rel_types: rel_types(g),
    })
}

/// Multi-threaded host variant. Relations are the unit of work, handed to
/// workers dynamically; output is identical to the serial variant for any
/// worker count.
pub fn select_edge_indices_parallel(
    batch: &MiniBatch,
    g: &HeteroGraph,
    workers: usize,
) -> Result<SemanticGraphSet, SelectError> {
    let workers = workers.max(1);
    if workers == 1 {
        return select_edge_indices_serial(batch, g);
    }
    let r = g.num_relations();
    let mut layers = Vec::with_capacity(batch.layers.len());
    for layer in 0..batch.layers.len() {
        let edge_types = edge_types_for_layer(batch, g, layer)?;
        let block = &batch.layers[layer];
        let mut per_rel: Vec<RelationEdges> = vec![RelationEdges::default(); r];
        let next = AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<&mut RelationEdges>> =
            per_rel.iter_mut().map(std::sync::Mutex::new).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(r) {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, Ordering::Relaxed);
                    if j >= r {
                        break;
                    }
                    let out = select_one_relation(&block.edge_index, &edge_types, j as u32);
                    **slots[j].lock().unwrap() = out;
                });
            }
        });
        drop(slots);
        layers.push(per_rel);
    }
    Ok(SemanticGraphSet {
        layers,
        rel_types: rel_types(g),
    })
}

/// Device-emulated baseline: per layer, one gather kernel for the edge
/// type tensor, then one compare + one index-select kernel per relation
/// (empty relations included), matching the unoptimized kernel census of
/// NumLayer * (2R + 1) launches.
pub fn select_edge_indices_device(
    batch: &MiniBatch,
    g: &HeteroGraph,
    device: &DeviceQueue,
    batch_id: Option<u32>,
) -> Result<SemanticGraphSet, SelectError> {
    let r = g.num_relations();
    let mut layers = Vec::with_capacity(batch.layers.len());
    for layer in 0..batch.layers.len() {
        let block = &batch.layers[layer];
        let mut desc = KernelDesc::new("edge_type_gather", Stage::SemanticBuild).layer(layer as u32);
        desc.batch = batch_id;
        let edge_types = device.submit(
            desc.bytes(4 * block.edge_id.len() as u64, 4 * block.edge_id.len() as u64),
            || edge_types_for_layer(batch, g, layer),
        )??;
        let mut per_rel = Vec::with_capacity(r);
        for j in 0..r {
            let mut cmp = KernelDesc::new("compare", Stage::SemanticBuild)
                .layer(layer as u32)
                .relation(j as u32)
                .bytes(4 * edge_types.len() as u64, edge_types.len() as u64);
            cmp.batch = batch_id;
            let mask: Vec<bool> = device.submit(cmp, || {
                edge_types.iter().map(|&t| t == j as u32).collect()
            })?;
            let mut sel = KernelDesc::new("index_select_edges", Stage::SemanticBuild)
                .layer(layer as u32)
                .relation(j as u32)
                .bytes(8 * mask.len() as u64, 0);
            sel.batch = batch_id;
            let edges = device.submit(sel, || {
                let mut out = RelationEdges::default();
                for (k, &m) in mask.iter().enumerate() {
                    if m {
                        let (s, d) = block.edge_index[k];
                        out.src_index.push(s);
                        out.dst_index.push(d);
                    }
                }
                out
            })?;
            per_rel.push(edges);
        }
        layers.push(per_rel);
    }
    Ok(SemanticGraphSet {
        layers,
        rel_types: rel_types(g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, parse_graph, SyntheticSpec};
    use crate::sampler::{sample_batch, NodeLabels, FULL_FANOUT};
    use std::time::Duration;

    /// Brute-force oracle: one scan over the columns.
    pub fn oracle_partition(batch: &MiniBatch, g: &HeteroGraph) -> SemanticGraphSet {
        let r = g.num_relations();
        let layers = batch
            .layers
            .iter()
            .map(|block| {
                let mut per_rel = vec![RelationEdges::default(); r];
                for (k, &eid) in block.edge_id.iter().enumerate() {
                    let rel = g.global_edge_type[eid as usize] as usize;
                    let (s, d) = block.edge_index[k];
                    per_rel[rel].src_index.push(s);
                    per_rel[rel].dst_index.push(d);
                }
                per_rel
            })
            .collect();
        SemanticGraphSet {
            layers,
            rel_types: g.relations.iter().map(|x| (x.src_type, x.dst_type)).collect(),
        }
    }

    fn random_batch(r: usize, edges: usize, seed: u64) -> (HeteroGraph, MiniBatch) {
        let spec = SyntheticSpec {
            counts: vec![40, 30, 20],
            relations: r,
            edges,
            feature_dim: 2,
            skew: 0.4,
            seed,
        };
        let g = generate_synthetic(&spec).unwrap();
        let labels = NodeLabels::synthetic(&g, 3, 0);
        let seeds: Vec<_> = (0..10).map(|i| (0usize, i as u32)).collect();
        let b = sample_batch(&g, &seeds, &[FULL_FANOUT, 5], &labels, seed).unwrap();
        (g, b)
    }

    #[test]
    fn mask_semantics_preserve_column_order() {
        // relations [0,1,0,1] at columns 0..3
        let text = "HGRAPH v1\nVTYPE a 4 1\nREL r0 a a\nREL r1 a a\n\
                    E 0 0 0\nE 1 1 0\nE 0 2 0\nE 1 3 0\n";
        let g = parse_graph(text).unwrap();
        let labels = NodeLabels::synthetic(&g, 2, 0);
        let b = sample_batch(&g, &[(0, 0)], &[FULL_FANOUT], &labels, 0).unwrap();
        let sgs = select_edge_indices_serial(&b, &g).unwrap();
        let r0 = &sgs.layers[0][0];
        let r1 = &sgs.layers[0][1];
        assert_eq!(r0.src_index.len(), 2);
        assert_eq!(r1.src_index.len(), 2);
        // column order within each relation follows the block order
        let block = &b.layers[0];
        let mut seen0 = Vec::new();
        let mut seen1 = Vec::new();
        for (k, &eid) in block.edge_id.iter().enumerate() {
            let rel = g.global_edge_type[eid as usize];
            if rel == 0 {
                seen0.push(block.edge_index[k].0);
            } else {
                seen1.push(block.edge_index[k].0);
            }
        }
        assert_eq!(r0.src_index, seen0);
        assert_eq!(r1.src_index, seen1);
    }

    #[test]
    fn single_relation_graph_gets_whole_block() {
        let (g, b) = {
            let spec = SyntheticSpec {
                counts: vec![20],
                relations: 1,
                edges: 60,
                feature_dim: 1,
                skew: 0.0,
                seed: 2,
            };
            let g = generate_synthetic(&spec).unwrap();
            let labels = NodeLabels::synthetic(&g, 2, 0);
            let seeds: Vec<_> = (0..5).map(|i| (0usize, i as u32)).collect();
            let b = sample_batch(&g, &seeds, &[FULL_FANOUT], &labels, 0).unwrap();
            (g, b)
        };
        let sgs = select_edge_indices_serial(&b, &g).unwrap();
        assert_eq!(sgs.layers[0][0].src_index.len(), b.layers[0].num_edges());
    }

    #[test]
    fn serial_matches_oracle_on_random_block() {
        let (g, b) = random_batch(20, 500, 13);
        let sgs = select_edge_indices_serial(&b, &g).unwrap();
        assert_eq!(sgs, oracle_partition(&b, &g));
        // partition: totals preserved
        for layer in 0..b.layers.len() {
            assert_eq!(sgs.layer_edge_total(layer), b.layers[layer].num_edges());
        }
    }

    #[test]
    fn parallel_matches_serial_for_any_worker_count() {
        let (g, b) = random_batch(24, 800, 5);
        let serial = select_edge_indices_serial(&b, &g).unwrap();
        for workers in [1, 2, 4, 8, 64] {
            let par = select_edge_indices_parallel(&b, &g, workers).unwrap();
            assert_eq!(par, serial, "workers={workers}");
        }
    }

    #[test]
    fn device_path_kernel_census() {
        let (g, b) = random_batch(50, 400, 8);
        assert_eq!(b.layers.len(), 2);
        let device = DeviceQueue::new(Duration::ZERO);
        let sgs = select_edge_indices_device(&b, &g, &device, None).unwrap();
        assert_eq!(sgs, select_edge_indices_serial(&b, &g).unwrap());
        let trace = device.take_trace();
        // 2 layers * (2*50 + 1)
        assert_eq!(trace.records.len(), 2 * (2 * 50 + 1));
        assert_eq!(trace.count_named("edge_type_gather"), 2);
        assert_eq!(trace.count_named("compare"), 100);
        assert_eq!(trace.count_named("index_select_edges"), 100);
    }

    #[test]
    fn device_single_relation_three_launches() {
        let text = "HGRAPH v1\nVTYPE a 3 1\nREL r a a\nE 0 0 0\nE 0 1 0\n";
        let g = parse_graph(text).unwrap();
        let labels = NodeLabels::synthetic(&g, 2, 0);
        let b = sample_batch(&g, &[(0, 0)], &[FULL_FANOUT], &labels, 0).unwrap();
        let device = DeviceQueue::new(Duration::ZERO);
        select_edge_indices_device(&b, &g, &device, None).unwrap();
        assert_eq!(device.take_trace().records.len(), 3);
    }
}
