//! Property tests for the serialization boundaries and the edge-index
//! selection partition.

use proptest::prelude::*;

use hetflow::features::{FeatureSource, FeatureStore};
use hetflow::graph::{generate_synthetic, parse_graph, SyntheticSpec};
use hetflow::sampler::{sample_batch, NodeLabels};
use hetflow::semantic::select_edge_indices_serial;

fn spec_strategy() -> impl Strategy<Value = SyntheticSpec> {
    (
        proptest::collection::vec(1usize..20, 1..4),
        1usize..8,
        1usize..120,
        1usize..6,
        0.0f64..1.5,
        any::<u64>(),
    )
        .prop_map(|(counts, relations, edges, feature_dim, skew, seed)| SyntheticSpec {
            counts,
            relations,
            edges,
            feature_dim,
            skew,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_text_roundtrip(spec in spec_strategy()) {
        let g = generate_synthetic(&spec).unwrap();
        let h = parse_graph(&g.to_text()).unwrap();
        prop_assert_eq!(&g.edge_src, &h.edge_src);
        prop_assert_eq!(&g.edge_dst, &h.edge_dst);
        prop_assert_eq!(&g.global_edge_type, &h.global_edge_type);
        prop_assert_eq!(g.num_types(), h.num_types());
        prop_assert_eq!(g.num_relations(), h.num_relations());
        prop_assert!(h.validate().is_empty());
    }

    #[test]
    fn feature_binary_roundtrip(spec in spec_strategy()) {
        let g = generate_synthetic(&spec).unwrap();
        let store = FeatureStore::<f32>::random_index_major(&g, spec.seed ^ 1).reorganize();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        store.save_binary(&path).unwrap();
        let loaded = FeatureStore::<f32>::load_binary(&g, &path).unwrap();
        for ty in 0..g.num_types() {
            for id in 0..g.vertex_types[ty].count as u32 {
                let (a, b) = (store.row(ty, id), loaded.row(ty, id));
                prop_assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn selection_is_a_partition(spec in spec_strategy(), batch_seed in any::<u64>()) {
        let g = generate_synthetic(&spec).unwrap();
        let labels = NodeLabels::synthetic(&g, 3, 1);
        let ty = (batch_seed % g.num_types() as u64) as usize;
        let id = (batch_seed % g.vertex_types[ty].count as u64) as u32;
        let batch = sample_batch(&g, &[(ty, id)], &[3, 3], &labels, batch_seed).unwrap();
        let sgs = select_edge_indices_serial(&batch, &g).unwrap();
        for (li, layer) in sgs.layers.iter().enumerate() {
            // Every sampled edge lands in exactly one relation bucket, in
            // the original order.
            let total: usize = layer.iter().map(|r| r.src_index.len()).sum();
            prop_assert_eq!(total, batch.layers[li].edge_index.len());
            let mut seen = vec![0usize; g.num_relations()];
            for (pos, &eid) in batch.layers[li].edge_id.iter().enumerate() {
                let rel = g.global_edge_type[eid as usize] as usize;
                let k = seen[rel];
                prop_assert_eq!(
                    (layer[rel].src_index[k], layer[rel].dst_index[k]),
                    batch.layers[li].edge_index[pos]
                );
                seen[rel] += 1;
            }
        }
    }
}
