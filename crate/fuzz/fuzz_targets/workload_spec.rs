#![no_main]

use circtree::bench::workload::WorkloadSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = WorkloadSpec::from_json(s) {
        let again = WorkloadSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again.tree_kind, spec.tree_kind);
        assert_eq!(again.node_bytes, spec.node_bytes);
        assert_eq!(again.key_count, spec.key_count);
        assert_eq!(again.phase, spec.phase);
    }
});
