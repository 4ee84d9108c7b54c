#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The text parser must reject malformed input without panicking.
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = hetflow::graph::parse_graph(text) {
            // Anything the parser accepts must satisfy the graph invariants.
            assert!(g.validate().is_empty());
        }
    }
});
