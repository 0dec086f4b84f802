//! Replays the checked-in fuzz corpora through the same checks the fuzz
//! targets make, so they run on a stable toolchain too.

use std::path::PathBuf;
use std::sync::Arc;

use circtree::bench::workload::WorkloadSpec;
use circtree::kv::parse_ycsb_key;
use circtree::{ArenaConfig, CircTree, NodeHeader, PmArena, SearchMode};

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus {target}");
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn recover_image_seeds() {
    let mut opened = 0;
    for data in corpus("recover_image") {
        let arena = PmArena::from_image(ArenaConfig::with_capacity(1 << 16), &data, data.len() as u64).unwrap();
        let (tree, _) = CircTree::open(Arc::new(arena), SearchMode::Segment, true).unwrap();
        tree.check_structure().unwrap();
        tree.insert(4242, 1).unwrap();
        opened += 1;
    }
    assert_eq!(opened, 3);
}

#[test]
fn node_header_seeds() {
    let decoded: Vec<_> = corpus("node_header").iter().filter_map(|d| NodeHeader::decode(d).ok()).collect();
    assert_eq!(decoded.len(), 2);
    for h in decoded {
        assert_eq!(NodeHeader::decode(&h.encode()).unwrap(), h);
        h.validate(64, 1 << 20).unwrap();
    }
}

#[test]
fn ycsb_key_seeds() {
    let parsed: Vec<_> = corpus("ycsb_key")
        .iter()
        .map(|d| parse_ycsb_key(std::str::from_utf8(d).unwrap()).ok())
        .collect();
    assert_eq!(parsed.iter().flatten().count(), 2);
    for k in parsed.into_iter().flatten() {
        assert_eq!(parse_ycsb_key(&format!("user{k}")).unwrap(), k);
    }
}

#[test]
fn workload_spec_seeds() {
    for d in corpus("workload_spec") {
        let spec = WorkloadSpec::from_json(std::str::from_utf8(&d).unwrap()).unwrap();
        let again = WorkloadSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
    }
}
