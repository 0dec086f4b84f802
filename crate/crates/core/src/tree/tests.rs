use super::*;
use crate::pmem::{ArenaConfig, CrashPolicy, Event, PersistOrder};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn arena_cfg(capacity: u64) -> ArenaConfig {
    ArenaConfig {
        capacity,
        persist_order: PersistOrder::LineOrdered,
        ..ArenaConfig::default()
    }
}

fn tree(cap: u64) -> CircTree {
    let arena = Arc::new(PmArena::new(arena_cfg(64 << 20)).unwrap());
    CircTree::create(arena, TreeConfig::new(cap)).unwrap()
}

fn reopen(t: &CircTree, policy: CrashPolicy) -> (CircTree, Option<RecoveryReport>) {
    let img = t.arena().crash(policy).unwrap().remove(0);
    let arena = PmArena::from_crash_image(t.arena().config().clone(), &img).unwrap();
    CircTree::open(Arc::new(arena), t.mode(), true).unwrap()
}

fn keys_of(t: &CircTree) -> Vec<u64> {
    t.contents().unwrap().iter().map(|p| p.key).collect()
}

#[test]
fn first_insert_into_empty_tree() {
    let t = tree(8);
    assert_eq!(t.search(5).unwrap(), OpOutcome::NotFound);
    assert_eq!(t.insert(5, 50).unwrap(), OpOutcome::Inserted);
    let shape = t.check_structure().unwrap();
    assert_eq!((shape.height, shape.leaves, shape.keys), (1, 1, 1));
    assert_eq!(t.search(5).unwrap(), OpOutcome::Found(50));
    assert_eq!(t.insert(5, 51), Err(TreeError::Duplicate(5)));
    assert_eq!(t.insert(6, 0), Err(TreeError::NullValue));
}

#[test]
fn ascending_split_point() {
    let t = tree(256);
    for k in 1..=257u64 {
        t.insert(k, k).unwrap();
    }
    assert_eq!(t.splits(), 1);
    assert_eq!(t.arena().stats().shift_count, 0);
    let head = t.chain(t.arena().load(SB_LEAF_HEAD).unwrap()).unwrap();
    let counts: Vec<u64> = head.iter().map(|n| n.bn(t.arena()).unwrap().1).collect();
    assert_eq!(counts, vec![128, 129]);
    t.check_structure().unwrap();
}

#[test]
fn smaller_half_split_keeps_everything() {
    let t = tree(8);
    for k in (10..=80).step_by(10) {
        t.insert(k, k).unwrap();
    }
    assert_eq!(t.insert(15, 15).unwrap(), OpOutcome::SplitPerformed);
    assert_eq!(keys_of(&t), vec![10, 15, 20, 30, 40, 50, 60, 70, 80]);
    let shape = t.check_structure().unwrap();
    assert_eq!((shape.height, shape.leaves), (2, 2));
}

#[test]
fn random_inserts_deletes_match_oracle() {
    for cap in [4u64, 8, 32, 256] {
        let t = tree(cap);
        let mut rng = ChaCha8Rng::seed_from_u64(cap);
        let mut oracle = BTreeMap::new();
        for _ in 0..20_000 {
            let k = rng.random_range(1..5_000u64);
            match rng.random_range(0..3) {
                0 | 1 => {
                    let r = t.insert(k, k + 7);
                    if oracle.insert(k, k + 7).is_some() {
                        assert_eq!(r, Err(TreeError::Duplicate(k)));
                    } else {
                        assert!(r.is_ok());
                    }
                }
                _ => {
                    let r = t.delete(k).unwrap();
                    if oracle.remove(&k).is_some() {
                        assert!(matches!(r, OpOutcome::Deleted | OpOutcome::MergePerformed));
                    } else {
                        assert_eq!(r, OpOutcome::NotFound);
                    }
                }
            }
        }
        let shape = t.check_structure().unwrap();
        assert_eq!(shape.keys, oracle.len());
        assert_eq!(keys_of(&t), oracle.keys().copied().collect::<Vec<_>>());
        for k in 0..5_000 {
            assert_eq!(t.get(k).unwrap(), oracle.get(&k).copied());
        }
        assert!(t.merges() > 0, "cap {cap} never merged");
    }
}

#[test]
fn delete_sole_key_keeps_root_leaf() {
    let t = tree(8);
    t.insert(3, 3).unwrap();
    assert_eq!(t.delete(3).unwrap(), OpOutcome::Deleted);
    let shape = t.check_structure().unwrap();
    assert_eq!((shape.height, shape.leaves, shape.keys), (1, 1, 0));
}

#[test]
fn delete_absent_key_flushes_nothing() {
    let t = tree(8);
    for k in 1..30 {
        t.insert(k * 2, k).unwrap();
    }
    let before = t.arena().stats();
    assert_eq!(t.delete(7).unwrap(), OpOutcome::NotFound);
    assert_eq!(t.arena().stats().flush_count, before.flush_count);
}

#[test]
fn underfull_leaf_merges_into_right_sibling() {
    let t = tree(16);
    for k in 1..=24u64 {
        t.insert(k, k).unwrap();
    }
    let leaves = t.chain(t.arena().load(SB_LEAF_HEAD).unwrap()).unwrap();
    assert_eq!(leaves.len(), 2);
    let (left, right) = (leaves[0], leaves[1]);
    // left holds 1..=8, right 9..=24; drain the right until it has room
    for k in 17..=24 {
        t.delete(k).unwrap();
    }
    let mut merged = false;
    for k in 1..=8 {
        if t.delete(k).unwrap() == OpOutcome::MergePerformed {
            merged = true;
            break;
        }
    }
    assert!(merged);
    assert_eq!(left.bn(t.arena()).unwrap().1, 0);
    assert_eq!(t.arena().load(SB_LEAF_HEAD).unwrap(), right.hdr);
    let shape = t.check_structure().unwrap();
    assert_eq!(shape.leaves, 1);
    assert_eq!(keys_of(&t), (2..=16).collect::<Vec<_>>());
}

#[test]
fn scan_ranges() {
    let t = tree(8);
    let mut ks: Vec<u64> = (1..=200).map(|k| k * 3).collect();
    ks.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    for &k in &ks {
        t.insert(k, k).unwrap();
    }
    assert!(t.scan(10, 5).unwrap().is_empty());
    assert!(t.scan(301, 302).unwrap().is_empty());
    let got: Vec<u64> = t.scan(100, 400).unwrap().iter().map(|p| p.key).collect();
    let want: Vec<u64> = (34..=133).map(|k| k * 3).collect();
    assert_eq!(got, want);
    assert_eq!(t.scan(0, u64::MAX).unwrap(), t.contents().unwrap());
}

#[test]
fn update_in_place() {
    let t = tree(8);
    t.insert(4, 40).unwrap();
    assert_eq!(t.update(4, 41).unwrap(), Some(40));
    assert_eq!(t.update(5, 41).unwrap(), None);
    assert_eq!(t.get(4).unwrap(), Some(41));
}

#[test]
fn open_close_open_skips_recovery() {
    let t = tree(8);
    for k in 1..50 {
        t.insert(k, k).unwrap();
    }
    let cfg = t.arena().config().clone();
    let arena = t.arena().clone();
    t.close().unwrap();
    let (t2, rep) = CircTree::open(arena.clone(), SearchMode::Segment, true).unwrap();
    assert!(rep.is_none());
    assert!(t2.start_flag().unwrap());
    t2.close().unwrap();
    let img = arena.crash(CrashPolicy::AllDropped).unwrap().remove(0);
    let reopened = Arc::new(PmArena::from_crash_image(cfg, &img).unwrap());
    let (t3, rep) = CircTree::open(reopened, SearchMode::Segment, true).unwrap();
    assert!(rep.is_none());
    assert_eq!(keys_of(&t3).len(), 49);
}

#[test]
fn crash_reopen_runs_recovery_with_no_fixes_on_clean_image() {
    let t = tree(8);
    for k in 1..100 {
        t.insert(k, k).unwrap();
    }
    let (t2, rep) = reopen(&t, CrashPolicy::AllDropped);
    assert_eq!(rep.unwrap().fixes, vec![]);
    assert_eq!(keys_of(&t2), (1..100).collect::<Vec<_>>());
    let again = t2.recover().unwrap();
    assert!(again.fixes.is_empty());
}

/// Crash right after event `pick(events)` of one insert and reopen.
fn crash_during_insert(pre: &[u64], k: u64, pick: impl Fn(&[Event]) -> usize) -> (Vec<u64>, RecoveryReport) {
    let t = tree(16);
    for &p in pre {
        t.insert(p, p).unwrap();
    }
    let arena = t.arena();
    arena.begin_capture();
    arena.set_record_events(true);
    arena.take_events();
    t.insert(k, k).unwrap();
    let events = arena.take_events();
    let points = arena.end_capture();
    let idx = pick(&events);
    let point = points
        .iter()
        .rev()
        .find(|p| p.after_event.is_some_and(|e| e <= idx))
        .unwrap();
    let img = point.images(CrashPolicy::AllDropped).unwrap().remove(0);
    let a2 = PmArena::from_crash_image(arena.config().clone(), &img).unwrap();
    let (t2, rep) = CircTree::open(Arc::new(a2), SearchMode::Segment, true).unwrap();
    t2.check_structure().unwrap();
    (keys_of(&t2), rep.unwrap())
}

#[test]
fn crash_before_header_update_commits_insert() {
    let pre = [10, 20, 30, 40, 50];
    // the last flush before the header store belongs to the new pair
    let (keys, rep) = crash_during_insert(&pre, 15, |ev| {
        let header_store = ev
            .iter()
            .rposition(|e| matches!(e, Event::Store { .. }))
            .unwrap();
        header_store - 1
    });
    assert_eq!(keys, vec![10, 15, 20, 30, 40, 50]);
    assert!(rep.cases().contains(&FixCase::InsertCommit), "{rep:?}");
}

#[test]
fn crash_mid_left_shift_undoes_insert() {
    let pre = [10, 20, 30, 40, 50, 60, 70];
    // 35 moves 10, 20, 30 left; stop after the second move's value store
    let (keys, rep) = crash_during_insert(&pre, 35, |ev| {
        ev.iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, Event::Store { .. }))
            .nth(2)
            .unwrap()
            .0
    });
    assert_eq!(keys, pre.to_vec());
    assert!(rep.cases().contains(&FixCase::InsertUndo), "{rep:?}");
}

#[test]
fn recovery_is_idempotent_on_every_crash_point_of_a_split() {
    let t = tree(8);
    for k in 1..=8 {
        t.insert(k * 10, k).unwrap();
    }
    let arena = t.arena();
    arena.begin_capture();
    t.insert(15, 99).unwrap();
    for point in arena.end_capture() {
        let img = point.images(CrashPolicy::AllPersisted).unwrap().remove(0);
        let a2 = Arc::new(PmArena::from_crash_image(arena.config().clone(), &img).unwrap());
        let (t2, _) = CircTree::open(a2.clone(), SearchMode::Segment, true).unwrap();
        let once = a2.persistent_snapshot();
        let again = t2.recover().unwrap();
        assert!(again.fixes.is_empty(), "{again:?}");
        let mut twice = a2.persistent_snapshot();
        twice[SB_FLAG as usize] = once[SB_FLAG as usize];
        assert_eq!(once, twice);
    }
}

#[test]
fn four_threads_disjoint_inserts() {
    let t = Arc::new(tree(32));
    let handles: Vec<_> = (0..4u64)
        .map(|id| {
            let t = t.clone();
            std::thread::spawn(move || {
                let mut ks: Vec<u64> = (0..5_000).map(|i| i * 4 + id + 1).collect();
                ks.shuffle(&mut ChaCha8Rng::seed_from_u64(id));
                for k in ks {
                    t.insert(k, k).unwrap();
                    if k % 7 == 0 {
                        assert_eq!(t.get(k).unwrap(), Some(k));
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let shape = t.check_structure().unwrap();
    assert_eq!(shape.keys, 20_000);
    assert_eq!(keys_of(&t), (1..=20_000).collect::<Vec<_>>());
}

#[derive(Clone, Debug)]
enum Op {
    Insert(u64),
    Delete(u64),
    Search(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (1..300u64).prop_map(Op::Insert),
        2 => (1..300u64).prop_map(Op::Delete),
        1 => (1..300u64).prop_map(Op::Search),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ops_preserve_structure_and_match_oracle(ops in prop::collection::vec(op(), 1..400), cap in prop::sample::select(vec![4u64, 8, 16])) {
        let t = tree(cap);
        let mut oracle = BTreeMap::new();
        for o in ops {
            match o {
                Op::Insert(k) => {
                    let fresh = !oracle.contains_key(&k);
                    prop_assert_eq!(t.insert(k, k * 2).is_ok(), fresh);
                    oracle.insert(k, k * 2);
                }
                Op::Delete(k) => {
                    let r = t.delete(k).unwrap();
                    prop_assert_eq!(r != OpOutcome::NotFound, oracle.remove(&k).is_some());
                }
                Op::Search(k) => prop_assert_eq!(t.get(k).unwrap(), oracle.get(&k).copied()),
            }
        }
        let shape = t.check_structure().unwrap();
        prop_assert_eq!(shape.keys, oracle.len());
        prop_assert_eq!(keys_of(&t), oracle.keys().copied().collect::<Vec<_>>());
    }
}
