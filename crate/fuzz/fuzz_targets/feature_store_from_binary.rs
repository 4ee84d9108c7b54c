#![no_main]

use libfuzzer_sys::fuzz_target;

use hetflow::features::FeatureStore;
use hetflow::graph::{parse_graph, HeteroGraph};
use std::sync::OnceLock;

fn target_graph() -> &'static HeteroGraph {
    static G: OnceLock<HeteroGraph> = OnceLock::new();
    G.get_or_init(|| {
        parse_graph(
            "HGRAPH v1\n\
             VTYPE a 3 2\n\
             VTYPE b 2 4\n\
             REL r0 a b\n\
             REL r1 b a\n\
             E 0 0 0\nE 1 2 0\nE 0 1 1\n",
        )
        .expect("fixed fuzz graph")
    })
}

fuzz_target!(|data: &[u8]| {
    // The binary decoder must reject wrong-sized or garbage blobs
    // without panicking; accepted blobs decode losslessly.
    let g = target_graph();
    let _ = FeatureStore::<f32>::from_binary(g, data);
    let _ = FeatureStore::<f64>::from_binary(g, data);
});
