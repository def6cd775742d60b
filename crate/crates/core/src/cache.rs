//! Pilot data caches.
//!
//! Every pilot owns a size-bounded LRU cache. The files themselves live in a
//! per-worker-node [`HostCacheStore`]; a pilot's cache entry is a hard link
//! into that store, so a file shared by several pilots stays on disk until
//! the last link goes away. Whoever removes the last link emits a
//! [`DeletionNotice`] for the task queue.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_param, Result};
use crate::infra::WorkerId;
use crate::pilot::PilotId;
use crate::workload::Lfn;

/// Whether pilots on one worker node share their caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheScope {
    SinglePilot,
    PerHost,
}

/// Cache capacity: `max_space - min_threshold` for a private cache,
/// `max_space * num_pilots_on_host - min_threshold` when shared per host.
pub fn capacity(max_space: u64, min_threshold: u64, num_pilots_on_host: usize, scope: CacheScope) -> Result<u64> {
    if max_space <= min_threshold {
        return Err(invalid_config(format!(
            "max space {max_space} must exceed min threshold {min_threshold}"
        )));
    }
    if num_pilots_on_host == 0 {
        return Err(invalid_param("a host with a pilot has at least one pilot"));
    }
    Ok(match scope {
        CacheScope::SinglePilot => max_space - min_threshold,
        CacheScope::PerHost => max_space * num_pilots_on_host as u64 - min_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheEntry {
    pub lfn: Lfn,
    pub size: u64,
    pub last_access: f64,
    pub pinned: bool,
    #[serde(skip)]
    stamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionNotice {
    pub lfn: Lfn,
    pub worker_node: WorkerId,
    pub reporting_pilot: PilotId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InsertOutcome {
    pub accepted: bool,
    pub evicted: Vec<Lfn>,
    pub notices: Vec<DeletionNotice>,
}

impl InsertOutcome {
    fn rejected() -> Self {
        InsertOutcome::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StoredFile {
    size: u64,
    holders: BTreeSet<PilotId>,
}

/// Files physically present on one worker node, with the set of pilot
/// caches linking each one. The link count is the size of that set.
#[derive(Debug, Clone)]
pub struct HostCacheStore {
    worker_node: WorkerId,
    files: BTreeMap<Lfn, StoredFile>,
    /// Cache directories of pilots currently alive on this node.
    live_dirs: BTreeSet<PilotId>,
    physical_bytes: u64,
    physical_limit: Option<u64>,
}

impl HostCacheStore {
    pub fn new(worker_node: WorkerId) -> Self {
        HostCacheStore {
            worker_node,
            files: BTreeMap::new(),
            live_dirs: BTreeSet::new(),
            physical_bytes: 0,
            physical_limit: None,
        }
    }

    pub fn worker_node(&self) -> WorkerId {
        self.worker_node
    }

    pub fn contains(&self, lfn: &Lfn) -> bool {
        self.files.contains_key(lfn)
    }

    pub fn link_count(&self, lfn: &Lfn) -> usize {
        self.files.get(lfn).map_or(0, |f| f.holders.len())
    }

    pub fn file_size(&self, lfn: &Lfn) -> Option<u64> {
        self.files.get(lfn).map(|f| f.size)
    }

    pub fn holders(&self, lfn: &Lfn) -> impl Iterator<Item = PilotId> + '_ {
        self.files.get(lfn).into_iter().flat_map(|f| f.holders.iter().copied())
    }

    /// Files linked by `pilot`.
    pub fn files_of(&self, pilot: PilotId) -> impl Iterator<Item = &Lfn> + '_ {
        self.files
            .iter()
            .filter(move |(_, f)| f.holders.contains(&pilot))
            .map(|(l, _)| l)
    }

    pub fn files(&self) -> impl Iterator<Item = (&Lfn, u64, usize)> + '_ {
        self.files.iter().map(|(l, f)| (l, f.size, f.holders.len()))
    }

    /// Distinct bytes on disk; shared files count once.
    pub fn physical_bytes(&self) -> u64 {
        self.physical_bytes
    }

    /// Bound on distinct bytes enforced on every insert.
    pub fn set_physical_limit(&mut self, limit: Option<u64>) {
        self.physical_limit = limit;
    }

    pub fn physical_limit(&self) -> Option<u64> {
        self.physical_limit
    }

    pub fn open_dir(&mut self, pilot: PilotId) {
        self.live_dirs.insert(pilot);
    }

    pub fn dir_accessible(&self, pilot: PilotId) -> bool {
        self.live_dirs.contains(&pilot)
    }

    fn link(&mut self, lfn: &Lfn, size: u64, pilot: PilotId) {
        let file = self.files.entry(lfn.clone()).or_insert_with(|| StoredFile {
            size,
            holders: BTreeSet::new(),
        });
        if file.holders.is_empty() {
            self.physical_bytes += size;
        }
        file.holders.insert(pilot);
    }

    fn unlink(&mut self, lfn: &Lfn, pilot: PilotId) -> Option<DeletionNotice> {
        let file = self.files.get_mut(lfn)?;
        file.holders.remove(&pilot);
        if !file.holders.is_empty() {
            return None;
        }
        let size = file.size;
        self.files.remove(lfn);
        self.physical_bytes -= size;
        Some(DeletionNotice {
            lfn: lfn.clone(),
            worker_node: self.worker_node,
            reporting_pilot: pilot,
        })
    }
}

/// Size-bounded LRU cache of one pilot.
#[derive(Debug, Clone)]
pub struct PilotCache {
    owner: PilotId,
    max_space: u64,
    min_threshold: u64,
    capacity: u64,
    used: u64,
    entries: BTreeMap<Lfn, CacheEntry>,
    /// Recency order, least recent first.
    order: BTreeMap<u64, Lfn>,
    next_stamp: u64,
}

impl PilotCache {
    pub fn new(owner: PilotId, max_space: u64, min_threshold: u64, num_pilots_on_host: usize, scope: CacheScope) -> Result<Self> {
        let cap = capacity(max_space, min_threshold, num_pilots_on_host, scope)?;
        Ok(PilotCache {
            owner,
            max_space,
            min_threshold,
            capacity: cap,
            used: 0,
            entries: BTreeMap::new(),
            order: BTreeMap::new(),
            next_stamp: 0,
        })
    }

    /// A cache with an explicit capacity; zero disables caching.
    pub fn with_capacity(owner: PilotId, capacity: u64) -> Self {
        PilotCache {
            owner,
            max_space: capacity,
            min_threshold: 0,
            capacity,
            used: 0,
            entries: BTreeMap::new(),
            order: BTreeMap::new(),
            next_stamp: 0,
        }
    }

    pub fn owner(&self) -> PilotId {
        self.owner
    }

    pub fn max_space(&self) -> u64 {
        self.max_space
    }

    pub fn min_threshold(&self) -> u64 {
        self.min_threshold
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free_space(&self) -> u64 {
        self.capacity.saturating_sub(self.used)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, lfn: &Lfn) -> bool {
        self.entries.contains_key(lfn)
    }

    pub fn entry(&self, lfn: &Lfn) -> Option<&CacheEntry> {
        self.entries.get(lfn)
    }

    pub fn inventory(&self) -> BTreeSet<Lfn> {
        self.entries.keys().cloned().collect()
    }

    /// Entries from least to most recently used.
    pub fn lru_order(&self) -> impl Iterator<Item = &CacheEntry> + '_ {
        self.order.values().map(|l| &self.entries[l])
    }

    fn stamp(&mut self) -> u64 {
        self.next_stamp += 1;
        self.next_stamp
    }

    /// Least-recently-used unpinned entries whose removal satisfies both the
    /// cache's own capacity and the host's physical bound for a new file of
    /// `size` bytes. `None` when pinned entries make that impossible.
    fn plan_eviction(&self, store: &HostCacheStore, lfn: &Lfn, size: u64) -> Option<Vec<Lfn>> {
        let new_physical = if store.contains(lfn) { 0 } else { size };
        let mut used = self.used;
        let mut physical = store.physical_bytes();
        let fits = |used: u64, physical: u64| {
            used + size <= self.capacity
                && store
                    .physical_limit()
                    .is_none_or(|limit| physical + new_physical <= limit)
        };
        let mut victims = Vec::new();
        for victim in self.order.values() {
            if fits(used, physical) {
                break;
            }
            let entry = &self.entries[victim];
            if entry.pinned {
                continue;
            }
            used -= entry.size;
            if store.link_count(victim) == 1 {
                physical -= entry.size;
            }
            victims.push(victim.clone());
        }
        fits(used, physical).then_some(victims)
    }

    fn add(&mut self, store: &mut HostCacheStore, lfn: &Lfn, size: u64, now: f64) -> InsertOutcome {
        if self.contains(lfn) {
            return InsertOutcome::rejected();
        }
        if size > self.capacity {
            return InsertOutcome::rejected();
        }
        let Some(victims) = self.plan_eviction(store, lfn, size) else {
            return InsertOutcome::rejected();
        };
        let mut notices = Vec::new();
        for victim in &victims {
            notices.extend(self.remove(store, victim));
        }
        let stamp = self.stamp();
        self.entries.insert(
            lfn.clone(),
            CacheEntry {
                lfn: lfn.clone(),
                size,
                last_access: now,
                pinned: false,
                stamp,
            },
        );
        self.order.insert(stamp, lfn.clone());
        self.used += size;
        store.link(lfn, size, self.owner);
        InsertOutcome {
            accepted: true,
            evicted: victims,
            notices,
        }
    }

    fn remove(&mut self, store: &mut HostCacheStore, lfn: &Lfn) -> Option<DeletionNotice> {
        let entry = self.entries.remove(lfn)?;
        self.order.remove(&entry.stamp);
        self.used -= entry.size;
        store.unlink(lfn, self.owner)
    }

    /// Adds a newly produced file, evicting least-recently-used unpinned
    /// entries until it fits. All-or-nothing: when the file cannot fit,
    /// nothing is evicted and `accepted` is false.
    pub fn insert(&mut self, store: &mut HostCacheStore, lfn: &Lfn, size: u64, now: f64) -> Result<InsertOutcome> {
        if size == 0 {
            return Err(invalid_param(format!("cannot cache empty file {lfn}")));
        }
        if self.contains(lfn) {
            return Err(invalid_param(format!("{lfn} already cached by {}", self.owner)));
        }
        if let Some(existing) = store.file_size(lfn) {
            if existing != size {
                return Err(invalid_param(format!("{lfn} stored with size {existing}, not {size}")));
            }
        }
        Ok(self.add(store, lfn, size, now))
    }

    /// Hard-links a file another pilot on this node already holds. Charged at
    /// its full size against this cache.
    pub fn link_peer_file(&mut self, store: &mut HostCacheStore, lfn: &Lfn, now: f64) -> Result<InsertOutcome> {
        let size = store
            .file_size(lfn)
            .ok_or_else(|| invalid_param(format!("{lfn} not present on {}", store.worker_node())))?;
        if self.contains(lfn) {
            return Err(invalid_param(format!("{lfn} already cached by {}", self.owner)));
        }
        Ok(self.add(store, lfn, size, now))
    }

    /// Marks `lfn` most recently used.
    pub fn touch(&mut self, lfn: &Lfn, now: f64) -> bool {
        let stamp = self.stamp();
        let Some(entry) = self.entries.get_mut(lfn) else {
            return false;
        };
        self.order.remove(&entry.stamp);
        entry.stamp = stamp;
        entry.last_access = now;
        self.order.insert(stamp, lfn.clone());
        true
    }

    /// Protects entries from eviction. Fails without pinning anything if one
    /// of them is absent.
    pub fn pin(&mut self, lfns: &[Lfn]) -> Result<()> {
        if let Some(missing) = lfns.iter().find(|l| !self.contains(l)) {
            return Err(invalid_param(format!("cannot pin {missing}: not cached by {}", self.owner)));
        }
        for lfn in lfns {
            self.entries.get_mut(lfn).expect("checked").pinned = true;
        }
        Ok(())
    }

    /// Makes entries evictable again; recency is unchanged. Absent entries
    /// are ignored.
    pub fn unpin(&mut self, lfns: &[Lfn]) {
        for lfn in lfns {
            if let Some(e) = self.entries.get_mut(lfn) {
                e.pinned = false;
            }
        }
    }

    /// Changes the capacity, evicting in LRU order if the cache no longer
    /// fits. Pinned entries stay even if that leaves the cache over capacity
    /// until they are unpinned and the next shrink or insert runs.
    pub fn set_capacity(&mut self, store: &mut HostCacheStore, capacity: u64) -> InsertOutcome {
        self.capacity = capacity;
        let mut outcome = InsertOutcome {
            accepted: true,
            ..Default::default()
        };
        while self.used > self.capacity {
            let Some(victim) = self
                .order
                .values()
                .find(|l| !self.entries[*l].pinned)
                .cloned()
            else {
                break;
            };
            outcome.notices.extend(self.remove(store, &victim));
            outcome.evicted.push(victim);
        }
        outcome
    }

    /// Drops every link, as when the pilot's directory is cleaned up.
    pub fn clear(&mut self, store: &mut HostCacheStore) -> Vec<DeletionNotice> {
        let lfns: Vec<Lfn> = self.order.values().cloned().collect();
        let notices = lfns.iter().filter_map(|l| self.remove(store, l)).collect();
        store.live_dirs.remove(&self.owner);
        notices
    }
}

/// Where the file catalog finds an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    LocalHit,
    PeerHit,
    SePath,
}

/// Looks `lfn` up in the pilot's own cache first, then (when caches are
/// shared per host) in files other pilots on the node hold, and falls back
/// to the storage element. A local hit refreshes the entry's recency; for a
/// peer hit the caller refreshes the holders' entries.
pub fn resolve(scope: CacheScope, own: &mut PilotCache, store: &HostCacheStore, lfn: &Lfn, now: f64) -> Resolution {
    if own.touch(lfn, now) {
        return Resolution::LocalHit;
    }
    if scope == CacheScope::PerHost && store.holders(lfn).any(|p| p != own.owner()) {
        return Resolution::PeerHit;
    }
    Resolution::SePath
}

/// Checks that the store's link counts equal the number of caches holding
/// each file, that sizes agree, and that no cache exceeds its capacity.
pub fn check_host_consistency<'a>(store: &HostCacheStore, caches: impl IntoIterator<Item = &'a PilotCache>) -> std::result::Result<(), String> {
    let mut expected: BTreeMap<&Lfn, (u64, BTreeSet<PilotId>)> = BTreeMap::new();
    for cache in caches {
        let sum: u64 = cache.entries.values().map(|e| e.size).sum();
        if sum != cache.used {
            return Err(format!("{}: used {} != sum {}", cache.owner, cache.used, sum));
        }
        if cache.used > cache.capacity && cache.entries.values().any(|e| !e.pinned) {
            return Err(format!("{}: used {} > capacity {}", cache.owner, cache.used, cache.capacity));
        }
        for e in cache.entries.values() {
            let slot = expected.entry(&e.lfn).or_insert((e.size, BTreeSet::new()));
            if slot.0 != e.size {
                return Err(format!("{}: size mismatch between caches", e.lfn));
            }
            slot.1.insert(cache.owner);
        }
    }
    let mut physical = 0;
    for (lfn, f) in &store.files {
        match expected.get(lfn) {
            Some((size, holders)) if *size == f.size && *holders == f.holders => physical += f.size,
            Some((_, holders)) => {
                return Err(format!(
                    "{lfn} on {}: link count {} but held by {}",
                    store.worker_node,
                    f.holders.len(),
                    holders.len()
                ))
            }
            None => return Err(format!("{lfn} on {} has no cache entry", store.worker_node)),
        }
    }
    if expected.len() != store.files.len() {
        return Err(format!("{}: cache entries without a stored file", store.worker_node));
    }
    if physical != store.physical_bytes {
        return Err(format!("{}: physical bytes drifted", store.worker_node));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{GB, MB};

    fn l(s: &str) -> Lfn {
        Lfn::from(s)
    }

    fn setup(cap: u64) -> (PilotCache, HostCacheStore) {
        (PilotCache::with_capacity(PilotId(1), cap), HostCacheStore::new(WorkerId(0)))
    }

    #[test]
    fn capacity_formulas() {
        assert_eq!(capacity(10 * GB, 2 * GB, 1, CacheScope::SinglePilot).unwrap(), 8 * GB);
        assert_eq!(capacity(10 * GB, 2 * GB, 3, CacheScope::PerHost).unwrap(), 28 * GB);
        assert_eq!(capacity(10 * GB, 2 * GB, 1, CacheScope::PerHost).unwrap(), 8 * GB);
        assert!(capacity(2 * GB, 2 * GB, 1, CacheScope::SinglePilot).is_err());
    }

    #[test]
    fn insert_evicts_lru() {
        let (mut c, mut s) = setup(2000 * MB);
        assert!(c.insert(&mut s, &l("A"), 700 * MB, 1.0).unwrap().accepted);
        assert!(c.insert(&mut s, &l("B"), 700 * MB, 2.0).unwrap().accepted);
        let out = c.insert(&mut s, &l("C"), 700 * MB, 3.0).unwrap();
        assert!(out.accepted);
        assert_eq!(out.evicted, vec![l("A")]);
        assert_eq!(out.notices.len(), 1);
        assert_eq!(c.free_space(), 600 * MB);
    }

    #[test]
    fn oversized_insert_rejected() {
        let (mut c, mut s) = setup(1000 * MB);
        let out = c.insert(&mut s, &l("X"), 1200 * MB, 0.0).unwrap();
        assert!(!out.accepted);
        assert!(c.is_empty());
        assert!(!s.contains(&l("X")));
    }

    #[test]
    fn duplicate_insert_is_an_error() {
        let (mut c, mut s) = setup(1000 * MB);
        c.insert(&mut s, &l("X"), 10, 0.0).unwrap();
        assert!(c.insert(&mut s, &l("X"), 10, 0.0).is_err());
        assert!(c.insert(&mut s, &l("Y"), 0, 0.0).is_err());
    }

    #[test]
    fn touch_protects_entry() {
        let (mut c, mut s) = setup(2000 * MB);
        assert!(!c.touch(&l("A"), 0.0));
        c.insert(&mut s, &l("A"), 700 * MB, 1.0).unwrap();
        c.insert(&mut s, &l("B"), 700 * MB, 2.0).unwrap();
        assert!(c.touch(&l("A"), 3.0));
        let out = c.insert(&mut s, &l("C"), 700 * MB, 4.0).unwrap();
        assert_eq!(out.evicted, vec![l("B")]);
        assert!(c.contains(&l("A")));
    }

    #[test]
    fn pinning() {
        let (mut c, mut s) = setup(2000 * MB);
        c.insert(&mut s, &l("A"), 700 * MB, 1.0).unwrap();
        c.insert(&mut s, &l("B"), 700 * MB, 2.0).unwrap();
        c.pin(&[l("A")]).unwrap();
        for (i, name) in ["C", "D", "E"].iter().enumerate() {
            let out = c.insert(&mut s, &l(name), 700 * MB, 3.0 + i as f64).unwrap();
            assert!(out.accepted);
            assert!(!out.evicted.contains(&l("A")));
        }
        c.unpin(&[l("A")]);
        let out = c.insert(&mut s, &l("F"), 700 * MB, 10.0).unwrap();
        assert_eq!(out.evicted, vec![l("A")]);

        assert!(c.pin(&[l("F"), l("nope")]).is_err());
        assert!(!c.entry(&l("F")).unwrap().pinned);

        let all: Vec<Lfn> = c.inventory().into_iter().collect();
        c.pin(&all).unwrap();
        let out = c.insert(&mut s, &l("G"), 700 * MB, 11.0).unwrap();
        assert!(!out.accepted);
        assert!(out.evicted.is_empty());
        assert_eq!(c.inventory().len(), 2);
    }

    #[test]
    fn hard_link_semantics() {
        let mut store = HostCacheStore::new(WorkerId(3));
        let mut p1 = PilotCache::with_capacity(PilotId(1), GB);
        let mut p2 = PilotCache::with_capacity(PilotId(2), GB);
        p1.insert(&mut store, &l("F"), 600 * MB, 0.0).unwrap();
        assert!(p2.link_peer_file(&mut store, &l("F"), 1.0).unwrap().accepted);
        assert_eq!(store.link_count(&l("F")), 2);
        assert!(p1.contains(&l("F")) && p2.contains(&l("F")));

        // Pilot 1 evicts its link: the file stays, no notice.
        let out = p1.insert(&mut store, &l("G"), 600 * MB, 2.0).unwrap();
        assert_eq!(out.evicted, vec![l("F")]);
        assert!(out.notices.is_empty());
        assert_eq!(store.link_count(&l("F")), 1);

        // Pilot 2 drops the last link and reports the deletion.
        let out = p2.insert(&mut store, &l("H"), 600 * MB, 3.0).unwrap();
        assert_eq!(
            out.notices,
            vec![DeletionNotice {
                lfn: l("F"),
                worker_node: WorkerId(3),
                reporting_pilot: PilotId(2)
            }]
        );
        assert!(!store.contains(&l("F")));
        check_host_consistency(&store, [&p1, &p2]).unwrap();

        assert!(p1.link_peer_file(&mut store, &l("F"), 4.0).is_err());
    }

    #[test]
    fn resolution_by_scope() {
        let mut store = HostCacheStore::new(WorkerId(0));
        let mut own = PilotCache::with_capacity(PilotId(1), GB);
        let mut peer = PilotCache::with_capacity(PilotId(2), GB);
        own.insert(&mut store, &l("A"), 10, 0.0).unwrap();
        peer.insert(&mut store, &l("B"), 10, 0.0).unwrap();
        for scope in [CacheScope::SinglePilot, CacheScope::PerHost] {
            assert_eq!(resolve(scope, &mut own, &store, &l("A"), 1.0), Resolution::LocalHit);
            assert_eq!(resolve(scope, &mut own, &store, &l("Z"), 1.0), Resolution::SePath);
        }
        assert_eq!(resolve(CacheScope::SinglePilot, &mut own, &store, &l("B"), 1.0), Resolution::SePath);
        assert_eq!(resolve(CacheScope::PerHost, &mut own, &store, &l("B"), 1.0), Resolution::PeerHit);
    }

    #[test]
    fn physical_limit_counts_shared_files_once() {
        let mut store = HostCacheStore::new(WorkerId(0));
        store.set_physical_limit(Some(1000));
        let mut p1 = PilotCache::with_capacity(PilotId(1), 10_000);
        let mut p2 = PilotCache::with_capacity(PilotId(2), 10_000);
        p1.insert(&mut store, &l("A"), 600, 0.0).unwrap();
        assert!(p2.link_peer_file(&mut store, &l("A"), 1.0).unwrap().accepted);
        assert_eq!(store.physical_bytes(), 600);
        // 600 + 500 > 1000 and p2 cannot free A's physical bytes alone.
        let out = p2.insert(&mut store, &l("B"), 500, 2.0).unwrap();
        assert!(!out.accepted);
        // p1 can: its link to A is not the last one, so it evicts nothing physical
        // either; still rejected.
        assert!(!p1.insert(&mut store, &l("B"), 500, 3.0).unwrap().accepted);
        p1.set_capacity(&mut store, 0);
        assert!(p2.insert(&mut store, &l("B"), 400, 4.0).unwrap().accepted);
        check_host_consistency(&store, [&p1, &p2]).unwrap();
    }

    #[test]
    fn clear_removes_links() {
        let mut store = HostCacheStore::new(WorkerId(0));
        let mut p1 = PilotCache::with_capacity(PilotId(1), 100);
        let mut p2 = PilotCache::with_capacity(PilotId(2), 100);
        store.open_dir(PilotId(1));
        p1.insert(&mut store, &l("A"), 10, 0.0).unwrap();
        p1.insert(&mut store, &l("B"), 10, 0.0).unwrap();
        p2.link_peer_file(&mut store, &l("A"), 0.0).unwrap();
        let notices = p1.clear(&mut store);
        assert_eq!(notices.len(), 1);
        assert_eq!(notices[0].lfn, l("B"));
        assert!(!store.dir_accessible(PilotId(1)));
        assert_eq!(store.link_count(&l("A")), 1);
    }
}
