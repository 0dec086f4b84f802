//! Opening damaged images fails cleanly instead of panicking or hanging.

use std::sync::Arc;

use circtree::tree::{SB_CAP, SB_FLAG, SB_MAGIC, SB_ROOT};
use circtree::{ArenaConfig, CircTree, PmArena, SearchMode, TreeConfig};
use proptest::prelude::*;

const CAP: u64 = 16;

fn config() -> ArenaConfig {
    ArenaConfig::with_capacity(1 << 16)
}

fn healthy_image() -> (Vec<u8>, u64) {
    let arena = Arc::new(PmArena::new(config()).unwrap());
    let tree = CircTree::create(arena.clone(), TreeConfig::new(CAP)).unwrap();
    for k in 1..=400u64 {
        tree.insert(k * 7919 % 10_007, k).unwrap();
    }
    for k in (1..=400u64).step_by(3) {
        tree.delete(k * 7919 % 10_007).unwrap();
    }
    (arena.persistent_snapshot(), arena.alloc_cursor())
}

/// Open and poke at the image; any outcome but a panic is acceptable.
fn exercise(bytes: &[u8], cursor: u64) {
    let Ok(arena) = PmArena::from_image(config(), bytes, cursor) else {
        return;
    };
    let arena = Arc::new(arena);
    let Ok((tree, _)) = CircTree::open(arena, SearchMode::Segment, true) else {
        return;
    };
    let _ = tree.check_structure();
    let _ = tree.contents();
    let _ = tree.get(4242);
    let _ = tree.insert(4242, 1);
    let _ = tree.delete(17);
    let _ = tree.scan(0, u64::MAX);
}

fn put(bytes: &mut [u8], off: u64, v: u64) {
    bytes[off as usize..off as usize + 8].copy_from_slice(&v.to_le_bytes());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn flipped_bytes_never_panic(edits in proptest::collection::vec((0usize..1 << 16, any::<u8>()), 1..24)) {
        let (mut img, cursor) = healthy_image();
        for (off, b) in edits {
            let off = off % cursor as usize;
            img[off] = b;
        }
        exercise(&img, cursor);
    }

    #[test]
    fn overwritten_words_never_panic(edits in proptest::collection::vec((0u64..1 << 13, any::<u64>()), 1..12)) {
        let (mut img, cursor) = healthy_image();
        for (w, v) in edits {
            let off = (w * 8) % cursor;
            // small values are likelier to pass as counts, offsets and keys
            put(&mut img, off, if v % 2 == 0 { v % 512 } else { v });
        }
        exercise(&img, cursor);
    }

    #[test]
    fn random_images_behind_a_valid_superblock_never_panic(
        body in proptest::collection::vec(any::<u8>(), 64..4096),
        root in 0u64..4096,
        flag in any::<bool>(),
    ) {
        let mut img = vec![0u8; 64];
        put(&mut img, 0, SB_MAGIC);
        put(&mut img, SB_ROOT, root);
        img[SB_FLAG as usize] = flag as u8;
        put(&mut img, SB_CAP, CAP);
        img.extend(body);
        let cursor = img.len() as u64;
        exercise(&img, cursor);
    }
}

#[test]
fn truncated_and_empty_images_are_rejected() {
    let (img, cursor) = healthy_image();
    exercise(&[], 0);
    exercise(&img[..40], 40);
    exercise(&img[..cursor as usize / 2], cursor / 2);
    let arena = Arc::new(PmArena::from_image(config(), &[0u8; 64], 64).unwrap());
    assert!(CircTree::open(arena, SearchMode::Segment, true).is_err());
}
