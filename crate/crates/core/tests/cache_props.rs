mod common;

use std::collections::BTreeSet;

use pilotsim::cache::{capacity, check_host_consistency, CacheScope, HostCacheStore, PilotCache};
use pilotsim::infra::WorkerId;
use pilotsim::pilot::PilotId;
use pilotsim::workload::Lfn;
use pilotsim::MB;
use proptest::prelude::*;

use common::{replay, Op, NAMES, SIZES_MB};

fn op() -> impl Strategy<Value = Op> {
    let name = 0..NAMES;
    prop_oneof![
        4 => (name.clone(), prop::sample::select(SIZES_MB.to_vec())).prop_map(|(name, size_mb)| Op::Insert { name, size_mb }),
        2 => name.clone().prop_map(|name| Op::Touch { name }),
        1 => name.clone().prop_map(|name| Op::Pin { name }),
        1 => name.prop_map(|name| Op::Unpin { name }),
        2 => (0u8..3).prop_map(|secs| Op::Tick { secs }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn lru_matches_reference(cap_mb in prop::sample::select(vec![1000u64, 2000, 3000]), ops in prop::collection::vec(op(), 1..=100)) {
        if let Err(e) = replay(cap_mb, &ops) {
            prop_assert!(false, "{}", e);
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum HostOp {
    Insert { pilot: usize, name: u8, size_mb: u64 },
    Link { pilot: usize, name: u8 },
    Touch { pilot: usize, name: u8 },
    Shrink { pilot: usize, cap_mb: u64 },
    Clear { pilot: usize },
}

fn host_op() -> impl Strategy<Value = HostOp> {
    let p = 0usize..3;
    let n = 0u8..10;
    prop_oneof![
        3 => (p.clone(), n.clone(), prop::sample::select(vec![300u64, 700, 1200])).prop_map(|(pilot, name, size_mb)| HostOp::Insert { pilot, name, size_mb }),
        3 => (p.clone(), n.clone()).prop_map(|(pilot, name)| HostOp::Link { pilot, name }),
        2 => (p.clone(), n).prop_map(|(pilot, name)| HostOp::Touch { pilot, name }),
        1 => (p.clone(), prop::sample::select(vec![0u64, 700, 1500, 4000])).prop_map(|(pilot, cap_mb)| HostOp::Shrink { pilot, cap_mb }),
        1 => p.prop_map(|pilot| HostOp::Clear { pilot }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Three pilots sharing one node: link counts match holders, the
    /// physical bound holds, and exactly one deletion notice is emitted when
    /// (and only when) a file's last link goes.
    #[test]
    fn shared_store_stays_consistent(ops in prop::collection::vec(host_op(), 1..=100), limit_mb in prop::sample::select(vec![2000u64, 4000, 100_000])) {
        let mut store = HostCacheStore::new(WorkerId(3));
        store.set_physical_limit(Some(limit_mb * MB));
        let mut caches: Vec<PilotCache> = (0..3u32)
            .map(|i| {
                store.open_dir(PilotId(i));
                PilotCache::with_capacity(PilotId(i), 3000 * MB)
            })
            .collect();
        for (t, op) in ops.iter().enumerate() {
            let before: BTreeSet<Lfn> = store.files().map(|(l, _, _)| l.clone()).collect();
            let now = t as f64;
            let notices = match *op {
                HostOp::Insert { pilot, name, size_mb } => {
                    let l = Lfn::new(format!("f{name}"));
                    if store.contains(&l) || caches[pilot].contains(&l) {
                        continue;
                    }
                    caches[pilot].insert(&mut store, &l, size_mb * MB, now).unwrap().notices
                }
                HostOp::Link { pilot, name } => {
                    let l = Lfn::new(format!("f{name}"));
                    if !store.contains(&l) || caches[pilot].contains(&l) {
                        continue;
                    }
                    let out = caches[pilot].link_peer_file(&mut store, &l, now).unwrap();
                    if out.accepted {
                        prop_assert!(store.link_count(&l) >= 2);
                    }
                    out.notices
                }
                HostOp::Touch { pilot, name } => {
                    caches[pilot].touch(&Lfn::new(format!("f{name}")), now);
                    Vec::new()
                }
                HostOp::Shrink { pilot, cap_mb } => caches[pilot].set_capacity(&mut store, cap_mb * MB).notices,
                HostOp::Clear { pilot } => {
                    let n = caches[pilot].clear(&mut store);
                    store.open_dir(PilotId(pilot as u32));
                    n
                }
            };
            let after: BTreeSet<Lfn> = store.files().map(|(l, _, _)| l.clone()).collect();
            let gone: BTreeSet<Lfn> = before.difference(&after).cloned().collect();
            let noticed: Vec<Lfn> = notices.iter().map(|n| n.lfn.clone()).collect();
            let noticed_set: BTreeSet<Lfn> = noticed.iter().cloned().collect();
            prop_assert_eq!(noticed.len(), noticed_set.len(), "duplicate notice at {}", t);
            prop_assert_eq!(&gone, &noticed_set, "notices differ from vanished files at {}", t);
            prop_assert!(store.physical_bytes() <= limit_mb * MB);
            if let Err(e) = check_host_consistency(&store, caches.iter()) {
                prop_assert!(false, "{}", e);
            }
        }
    }

    #[test]
    fn capacity_formula(max in 1u64..1_000_000, min in 0u64..1_000_000, n in 1usize..64) {
        let single = capacity(max, min, n, CacheScope::SinglePilot);
        let shared = capacity(max, min, n, CacheScope::PerHost);
        if max <= min {
            prop_assert!(single.is_err() && shared.is_err());
        } else {
            let (single, shared) = (single.unwrap(), shared.unwrap());
            prop_assert_eq!(single, max - min);
            prop_assert_eq!(shared, max * n as u64 - min);
            prop_assert!(shared >= single);
        }
        prop_assert!(capacity(max, min, 0, CacheScope::PerHost).is_err());
    }
}
