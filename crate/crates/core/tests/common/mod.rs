//! Brute-force reference LRU and a trace runner that replays one trace on
//! both the reference and `PilotCache`, comparing after every step.

#![allow(dead_code)]

use pilotsim::cache::{check_host_consistency, HostCacheStore, PilotCache};
use pilotsim::infra::WorkerId;
use pilotsim::pilot::PilotId;
use pilotsim::workload::Lfn;
use pilotsim::MB;

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Insert { name: u8, size_mb: u64 },
    Touch { name: u8 },
    Pin { name: u8 },
    Unpin { name: u8 },
    /// Advance the clock by this many seconds (0 makes ties).
    Tick { secs: u8 },
}

#[derive(Debug, Clone)]
struct RefEntry {
    name: String,
    size: u64,
    last: f64,
    seq: u64,
    pinned: bool,
}

/// Quadratic LRU: every eviction scans all entries for the minimum
/// (last access, access sequence).
#[derive(Debug, Default)]
pub struct RefLru {
    cap: u64,
    entries: Vec<RefEntry>,
    seq: u64,
}

impl RefLru {
    pub fn new(cap: u64) -> Self {
        RefLru {
            cap,
            ..Default::default()
        }
    }

    fn next(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn used(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// `None` when rejected; otherwise the evicted names in order.
    pub fn insert(&mut self, name: &str, size: u64, now: f64) -> Option<Vec<String>> {
        if size > self.cap {
            return None;
        }
        let mut chosen: Vec<usize> = Vec::new();
        let mut used = self.used();
        while used + size > self.cap {
            let mut best: Option<usize> = None;
            for (i, e) in self.entries.iter().enumerate() {
                if e.pinned || chosen.contains(&i) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => {
                        let o = &self.entries[b];
                        e.last < o.last || (e.last == o.last && e.seq < o.seq)
                    }
                };
                if better {
                    best = Some(i);
                }
            }
            let b = best?;
            used -= self.entries[b].size;
            chosen.push(b);
        }
        let evicted: Vec<String> = chosen.iter().map(|&i| self.entries[i].name.clone()).collect();
        self.entries.retain(|e| !evicted.contains(&e.name));
        let seq = self.next();
        self.entries.push(RefEntry {
            name: name.to_string(),
            size,
            last: now,
            seq,
            pinned: false,
        });
        Some(evicted)
    }

    pub fn touch(&mut self, name: &str, now: f64) -> bool {
        let seq = self.next();
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => {
                e.last = now;
                e.seq = seq;
                true
            }
            None => false,
        }
    }

    pub fn pin(&mut self, name: &str) -> bool {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => {
                e.pinned = true;
                true
            }
            None => false,
        }
    }

    pub fn unpin(&mut self, name: &str) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.name == name) {
            e.pinned = false;
        }
    }

    /// Names from least to most recently used.
    pub fn order(&self) -> Vec<String> {
        let mut v: Vec<&RefEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.last.partial_cmp(&b.last).unwrap().then(a.seq.cmp(&b.seq)));
        v.into_iter().map(|e| e.name.clone()).collect()
    }
}

fn lfn(name: u8) -> Lfn {
    Lfn::new(format!("f{name}"))
}

/// Replays `ops` on a fresh cache of `cap_mb` and on the reference. Checks
/// outcome, eviction list, deletion notices, LRU order, the capacity bound
/// and store consistency after every operation.
pub fn replay(cap_mb: u64, ops: &[Op]) -> Result<(), String> {
    let owner = PilotId(1);
    let mut store = HostCacheStore::new(WorkerId(0));
    store.open_dir(owner);
    let mut cache = PilotCache::with_capacity(owner, cap_mb * MB);
    let mut reference = RefLru::new(cap_mb * MB);
    let mut now = 0.0;
    for (step, op) in ops.iter().enumerate() {
        let here = |msg: String| format!("step {step} {op:?}: {msg}");
        match *op {
            Op::Insert { name, size_mb } => {
                let l = lfn(name);
                let got = cache.insert(&mut store, &l, size_mb * MB, now);
                if reference.has(l.as_str()) {
                    if got.is_ok() {
                        return Err(here("duplicate insert accepted".into()));
                    }
                    continue;
                }
                let got = got.map_err(|e| here(e.to_string()))?;
                let want = reference.insert(l.as_str(), size_mb * MB, now);
                match want {
                    None if got.accepted || !got.evicted.is_empty() => {
                        return Err(here(format!("expected rejection, got {got:?}")))
                    }
                    Some(ev) => {
                        let got_ev: Vec<String> = got.evicted.iter().map(|l| l.as_str().to_string()).collect();
                        if !got.accepted || got_ev != ev {
                            return Err(here(format!("expected evicted {ev:?}, got {got:?}")));
                        }
                        let noticed: Vec<String> = got.notices.iter().map(|n| n.lfn.as_str().to_string()).collect();
                        if noticed != ev {
                            return Err(here(format!("notices {noticed:?} != evicted {ev:?}")));
                        }
                    }
                    None => {}
                }
            }
            Op::Touch { name } => {
                let l = lfn(name);
                if cache.touch(&l, now) != reference.touch(l.as_str(), now) {
                    return Err(here("touch result differs".into()));
                }
            }
            Op::Pin { name } => {
                let l = lfn(name);
                let ok = cache.pin(std::slice::from_ref(&l)).is_ok();
                if ok != reference.pin(l.as_str()) {
                    return Err(here("pin result differs".into()));
                }
            }
            Op::Unpin { name } => {
                let l = lfn(name);
                cache.unpin(std::slice::from_ref(&l));
                reference.unpin(l.as_str());
            }
            Op::Tick { secs } => now += f64::from(secs),
        }
        let order: Vec<String> = cache.lru_order().map(|e| e.lfn.as_str().to_string()).collect();
        if order != reference.order() {
            return Err(here(format!("order {order:?} != reference {:?}", reference.order())));
        }
        let sum: u64 = cache.lru_order().map(|e| e.size).sum();
        if sum != cache.used() || cache.used() > cache.capacity() {
            return Err(here(format!("capacity bound broken: used {} sum {sum} cap {}", cache.used(), cache.capacity())));
        }
        check_host_consistency(&store, [&cache]).map_err(here)?;
    }
    Ok(())
}

pub const SIZES_MB: [u64; 6] = [100, 300, 500, 700, 1200, 2500];
pub const NAMES: u8 = 8;

/// Pseudo-random trace from any `rand` generator.
pub fn random_trace<R: rand::Rng>(rng: &mut R, len: usize) -> Vec<Op> {
    (0..len)
        .map(|_| {
            let name = rng.random_range(0..NAMES);
            match rng.random_range(0..10) {
                0..=3 => Op::Insert {
                    name,
                    size_mb: SIZES_MB[rng.random_range(0..SIZES_MB.len())],
                },
                4..=5 => Op::Touch { name },
                6 => Op::Pin { name },
                7 => Op::Unpin { name },
                _ => Op::Tick {
                    secs: rng.random_range(0..3),
                },
            }
        })
        .collect()
}
