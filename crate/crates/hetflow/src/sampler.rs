//! Host-side mini-batch neighbor sampling.
//!
//! A mini-batch is a stack of layer blocks, outermost first. Block i's
//! destination vertices are block i+1's source universe (the innermost
//! block's destinations are the seeds), and destinations are stored as a
//! prefix of each block's per-type vertex map so a destination's local id
//! is also valid as a source local id.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{HeteroGraph, TypeId};
use crate::mix_seed;

/// Use as a fanout entry to take every in-neighbor.
pub const FULL_FANOUT: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid seed vertex (type {ty}, id {id})")]
    InvalidSeed { ty: TypeId, id: u32 },
    #[error("fanout length {got} does not match layer count {want}")]
    FanoutLength { got: usize, want: usize },
    #[error("empty seed set")]
    EmptySeeds,
}

#[derive(Debug, Clone)]
pub struct LayerBlock {
    /// (src, dst) pairs in batch-local per-type ids.
    pub edge_index: Vec<(u32, u32)>,
    /// Global edge ids aligned with `edge_index`.
    pub edge_id: Vec<u32>,
    /// Per type: batch-local id -> graph local id. Destination vertices
    /// occupy the first `dst_counts[t]` slots of each type's map.
    pub vertex_map: Vec<Vec<u32>>,
    pub dst_counts: Vec<usize>,
}

impl LayerBlock {
    pub fn num_edges(&self) -> usize {
        self.edge_id.len()
    }
}

#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub seeds: Vec<(TypeId, u32)>,
    /// Outermost first; forward processing order.
    pub layers: Vec<LayerBlock>,
    pub labels: Vec<u32>,
}

/// Per-type class labels used to drive the training loss.
#[derive(Debug, Clone)]
pub struct NodeLabels {
    pub num_classes: usize,
    pub per_type: Vec<Vec<u32>>,
}

impl NodeLabels {
    /// Deterministic pseudorandom labels for every vertex.
    pub fn synthetic(g: &HeteroGraph, num_classes: usize, seed: u64) -> Self {
        let per_type = g
            .vertex_types
            .iter()
            .map(|t| {
                (0..t.count)
                    .map(|v| (mix_seed(&[seed, t.id as u64, v as u64]) % num_classes as u64) as u32)
                    .collect()
            })
            .collect();
        Self {
            num_classes,
            per_type,
        }
    }

    pub fn label(&self, ty: TypeId, id: u32) -> u32 {
        self.per_type[ty][id as usize]
    }
}

/// Samples one multi-layer block around `seeds`. For each (vertex,
/// relation) pair layer i contributes at most `fanout[i]` in-edges chosen
/// uniformly without replacement; vertices with fewer in-neighbors keep
/// all of them.
pub fn sample_batch(
    g: &HeteroGraph,
    seeds: &[(TypeId, u32)],
    fanout: &[usize],
    labels: &NodeLabels,
    rng_seed: u64,
) -> Result<MiniBatch, SampleError> {
    if seeds.is_empty() {
        return Err(SampleError::EmptySeeds);
    }
    for &(ty, id) in seeds {
        if ty >= g.num_types() || id as usize >= g.vertex_types[ty].count {
            return Err(SampleError::InvalidSeed { ty, id });
        }
    }
    let num_layers = fanout.len();
    if num_layers == 0 {
        return Err(SampleError::FanoutLength { got: 0, want: 1 });
    }
    let t = g.num_types();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    // dst set of the block currently being built, per type, ordered.
    let mut dst: Vec<Vec<u32>> = vec![Vec::new(); t];
    for &(ty, id) in seeds {
        dst[ty].push(id);
    }
    let mut layers_rev: Vec<LayerBlock> = Vec::with_capacity(num_layers);
    for layer in (0..num_layers).rev() {
        let cap = fanout[layer];
        let mut vertex_map = dst.clone();
        let mut local: Vec<HashMap<u32, u32>> = vec![HashMap::new(); t];
        for (ty, list) in vertex_map.iter().enumerate() {
            for (i, &gid) in list.iter().enumerate() {
                local[ty].insert(gid, i as u32);
            }
        }
        let dst_counts: Vec<usize> = vertex_map.iter().map(|v| v.len()).collect();
        let mut edge_index = Vec::new();
        let mut edge_id = Vec::new();
        for ty in 0..t {
            for dst_local in 0..dst_counts[ty] {
                let dst_gid = vertex_map[ty][dst_local];
                for rel in &g.relations {
                    if rel.dst_type != ty {
                        continue;
                    }
                    let in_edges = g.in_edges(rel.id, dst_gid);
                    let take = |k: usize,
                                edge_index: &mut Vec<(u32, u32)>,
                                edge_id: &mut Vec<u32>,
                                vertex_map: &mut Vec<Vec<u32>>,
                                local: &mut Vec<HashMap<u32, u32>>,
                                rng: &mut ChaCha8Rng| {
                        let picks: Vec<usize> = if k >= in_edges.len() {
                            (0..in_edges.len()).collect()
                        } else {
                            let mut v = sample_indices(rng, in_edges.len(), k).into_vec();
                            v.sort_unstable();
                            v
                        };
                        for p in picks {
                            let (src_gid, eid) = in_edges[p];
                            let sty = rel.src_type;
                            let src_local = *local[sty].entry(src_gid).or_insert_with(|| {
                                vertex_map[sty].push(src_gid);
                                (vertex_map[sty].len() - 1) as u32
                            });
                            edge_index.push((src_local, dst_local as u32));
                            edge_id.push(eid);
                        }
                    };
                    take(
                        cap,
                        &mut edge_index,
                        &mut edge_id,
                        &mut vertex_map,
                        &mut local,
                        &mut rng,
                    );
                }
            }
        }
        dst = vertex_map.clone();
        layers_rev.push(LayerBlock {
            edge_index,
            edge_id,
            vertex_map,
            dst_counts,
        });
    }
    layers_rev.reverse();
    let labels = seeds.iter().map(|&(ty, id)| labels.label(ty, id)).collect();
    Ok(MiniBatch {
        seeds: seeds.to_vec(),
        layers: layers_rev,
        labels,
    })
}

/// Shuffled seed chunks for one epoch: every target vertex appears in
/// exactly one chunk.
pub fn plan_epoch(
    g: &HeteroGraph,
    target_type: TypeId,
    batch_size: usize,
    epoch_seed: u64,
) -> Vec<Vec<(TypeId, u32)>> {
    assert!(batch_size >= 1);
    let count = g.vertex_types[target_type].count;
    let mut ids: Vec<u32> = (0..count as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    ids.shuffle(&mut rng);
    ids.chunks(batch_size)
        .map(|c| c.iter().map(|&id| (target_type, id)).collect())
        .collect()
}

/// Streams the epoch's mini-batches; each batch's rng stream derives from
/// (epoch_rng, batch index) only.
pub fn batch_iterator<'a>(
    g: &'a HeteroGraph,
    target_type: TypeId,
    batch_size: usize,
    fanout: &'a [usize],
    labels: &'a NodeLabels,
    epoch_seed: u64,
) -> impl Iterator<Item = Result<MiniBatch, SampleError>> + 'a {
    let chunks = plan_epoch(g, target_type, batch_size, epoch_seed);
    chunks.into_iter().enumerate().map(move |(i, seeds)| {
        sample_batch(g, &seeds, fanout, labels, mix_seed(&[epoch_seed, i as u64]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, parse_graph, SyntheticSpec};
    use std::collections::HashSet;

    fn star_graph() -> HeteroGraph {
        // center = vertex 0 with 5 in-neighbors (vertices 1..=5)
        let mut text = String::from("HGRAPH v1\nVTYPE a 6 2\nREL r a a\n");
        for src in 1..=5 {
            text.push_str(&format!("E 0 {src} 0\n"));
        }
        parse_graph(&text).unwrap()
    }

    #[test]
    fn fanout_caps_sampled_edges() {
        let g = star_graph();
        let labels = NodeLabels::synthetic(&g, 2, 0);
        let b = sample_batch(&g, &[(0, 0)], &[2], &labels, 42).unwrap();
        let block = &b.layers[0];
        assert_eq!(block.num_edges(), 2);
        assert!(block.edge_index.iter().all(|&(_, d)| d == 0));
        assert_eq!(block.vertex_map[0][0], 0); // dst prefix holds the seed
    }

    #[test]
    fn full_fanout_matches_brute_force_in_edges() {
        let spec = SyntheticSpec {
            counts: vec![20, 15],
            relations: 4,
            edges: 300,
            feature_dim: 2,
            skew: 0.5,
            seed: 3,
        };
        let g = generate_synthetic(&spec).unwrap();
        let labels = NodeLabels::synthetic(&g, 3, 0);
        let seeds: Vec<(TypeId, u32)> = vec![(0, 1), (0, 5), (1, 2)];
        let b = sample_batch(&g, &seeds, &[FULL_FANOUT], &labels, 9).unwrap();
        let block = &b.layers[0];
        // oracle: every graph edge whose dst is a seed
        let seed_set: HashSet<(TypeId, u32)> = seeds.iter().copied().collect();
        let mut expected: Vec<u32> = Vec::new();
        for rel in &g.relations {
            for (_, dst, eid) in g.relation_edges(rel.id) {
                if seed_set.contains(&(rel.dst_type, dst)) {
                    expected.push(eid);
                }
            }
        }
        let mut got = block.edge_id.clone();
        got.sort_unstable();
        expected.sort_unstable();
        assert_eq!(got, expected);
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = star_graph();
        let labels = NodeLabels::synthetic(&g, 2, 0);
        let a = sample_batch(&g, &[(0, 0)], &[3], &labels, 11).unwrap();
        let b = sample_batch(&g, &[(0, 0)], &[3], &labels, 11).unwrap();
        assert_eq!(a.layers[0].edge_id, b.layers[0].edge_id);
        assert_eq!(a.layers[0].edge_index, b.layers[0].edge_index);
        assert_eq!(a.layers[0].vertex_map, b.layers[0].vertex_map);
    }

    #[test]
    fn invalid_seed_rejected() {
        let g = star_graph();
        let labels = NodeLabels::synthetic(&g, 2, 0);
        assert!(matches!(
            sample_batch(&g, &[(0, 99)], &[1], &labels, 0),
            Err(SampleError::InvalidSeed { .. })
        ));
    }

    #[test]
    fn epoch_partitions_targets() {
        let g = star_graph(); // 6 vertices of type 0
        let chunks = plan_epoch(&g, 0, 4, 7);
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].len(), 4);
        assert_eq!(chunks[1].len(), 2);
        let all: HashSet<u32> = chunks.iter().flatten().map(|&(_, id)| id).collect();
        assert_eq!(all.len(), 6);
        // batch_size >= count -> one batch
        assert_eq!(plan_epoch(&g, 0, 10, 7).len(), 1);
    }

    #[test]
    fn blocks_are_closed_and_edges_exist() {
        let spec = SyntheticSpec {
            counts: vec![30, 20, 10],
            relations: 6,
            edges: 500,
            feature_dim: 2,
            skew: 0.3,
            seed: 5,
        };
        let g = generate_synthetic(&spec).unwrap();
        let labels = NodeLabels::synthetic(&g, 3, 0);
        let seeds: Vec<(TypeId, u32)> = (0..8).map(|i| (0usize, i as u32)).collect();
        let b = sample_batch(&g, &seeds, &[4, 4], &labels, 1).unwrap();
        assert_eq!(b.layers.len(), 2);
        // layer 0 dst set == layer 1 full vertex map
        for ty in 0..g.num_types() {
            assert_eq!(
                b.layers[0].vertex_map[ty][..b.layers[0].dst_counts[ty]],
                b.layers[1].vertex_map[ty][..]
            );
        }
        // no phantom edges: each edge_id's endpoints agree with vertex_map
        for block in &b.layers {
            for (k, &eid) in block.edge_id.iter().enumerate() {
                let rel = g.global_edge_type[eid as usize] as usize;
                let (sl, dl) = block.edge_index[k];
                let sty = g.relations[rel].src_type;
                let dty = g.relations[rel].dst_type;
                assert_eq!(block.vertex_map[sty][sl as usize], g.edge_src[eid as usize]);
                assert_eq!(block.vertex_map[dty][dl as usize], g.edge_dst[eid as usize]);
                assert!((dl as usize) < block.dst_counts[dty]);
            }
        }
    }
}
