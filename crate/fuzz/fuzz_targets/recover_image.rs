#![no_main]

use std::sync::Arc;

use circtree::{ArenaConfig, CircTree, PmArena, SearchMode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let config = ArenaConfig::with_capacity(1 << 16);
    let Ok(arena) = PmArena::from_image(config, data, data.len() as u64) else {
        return;
    };
    let Ok((tree, _)) = CircTree::open(Arc::new(arena), SearchMode::Segment, true) else {
        return;
    };
    let _ = tree.check_structure();
    let _ = tree.contents();
    let _ = tree.get(4242);
    let _ = tree.insert(4242, 1);
    let _ = tree.delete(17);
    let _ = tree.scan(0, u64::MAX);
});
