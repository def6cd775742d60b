//! Pilot agent: environment check, registration, job execution steps,
//! heartbeats and peer polling.
//!
//! The engine drives the agent; every method here is a synchronous step that
//! returns the virtual time it consumed instead of advancing a clock.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};

use crate::cache::{resolve, CacheScope, DeletionNotice, HostCacheStore, PilotCache, Resolution};
use crate::error::{invalid_param, protocol, Result};
use crate::infra::{chunk_sizes, se_read, se_write, AccessKind, SeModel, WorkerId};
use crate::taskqueue::{PeerInfo, TaskQueue};
use crate::workload::{JobId, JobSpec, Lfn, LogicalFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PilotId(pub u32);

impl fmt::Display for PilotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pilot-{:04}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotState {
    Inactive,
    Idle,
    Busy,
    Terminated,
}

impl PilotState {
    pub fn can_transition(self, to: PilotState) -> bool {
        use PilotState::*;
        matches!((self, to), (Inactive, Idle) | (Idle, Busy) | (Busy, Idle) | (Inactive | Idle | Busy, Terminated))
    }
}

/// Payload of a GetJob call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub pilot_id: PilotId,
    pub host: WorkerId,
    pub se_name: String,
    /// Remaining lifetime in seconds; `None` is unbounded.
    pub ttl: Option<f64>,
    pub cached_files: BTreeSet<Lfn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    StageIn,
    StageOut,
}

/// How one input of one attempt was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputAccess {
    pub lfn: Lfn,
    pub size: u64,
    pub resolution: Resolution,
    pub ok: bool,
}

/// Outcome of one attempt, as reported to the task queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub job_id: JobId,
    pub pilot_id: Option<PilotId>,
    pub success: bool,
    pub failure_stage: Option<FailureStage>,
    pub accesses: Vec<InputAccess>,
    pub stage_in: f64,
    pub processing: f64,
    pub stage_out: f64,
    pub se_reads: u32,
    pub se_read_failures: u32,
    pub se_writes: u32,
    pub se_write_failures: u32,
}

impl JobReport {
    pub fn new(job_id: JobId, pilot_id: Option<PilotId>) -> Self {
        JobReport {
            job_id,
            pilot_id,
            success: false,
            failure_stage: None,
            accesses: Vec::new(),
            stage_in: 0.0,
            processing: 0.0,
            stage_out: 0.0,
            se_reads: 0,
            se_read_failures: 0,
            se_writes: 0,
            se_write_failures: 0,
        }
    }
}

/// Cost of reading a cached file: a fraction of the zero-load SE time.
pub fn local_read_time(se: &SeModel, bytes: u64, local_read_fraction: f64) -> f64 {
    se.zero_load_time(bytes) * local_read_fraction
}

/// Random draws for the SE accesses of one job attempt. Each (direction,
/// file) pair gets its own generator keyed by seed, job, attempt and file, so
/// two runs that differ only in which accesses reach the SE still see the
/// same outcome for every access they share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessDraws {
    pub seed: u64,
    pub job: JobId,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

impl AccessDraws {
    pub fn new(seed: u64, job: JobId, attempt: u32) -> Self {
        AccessDraws { seed, job, attempt }
    }

    /// (duration, failure) generators for one file access.
    pub fn for_file(&self, dir: Direction, lfn: &Lfn) -> (ChaCha8Rng, ChaCha8Rng) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.job.as_str().as_bytes());
        h.update([0]);
        h.update(self.attempt.to_le_bytes());
        h.update([dir as u8]);
        h.update(lfn.as_str().as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut d = ChaCha8Rng::from_seed(key);
        d.set_stream(1);
        let mut f = ChaCha8Rng::from_seed(key);
        f.set_stream(2);
        (d, f)
    }
}

/// SE side of a stage-in or stage-out.
pub struct SeContext<'a> {
    pub se: &'a SeModel,
    pub draws: AccessDraws,
    pub read_chunks: u32,
}

/// Reads `lfn` from the SE in `read_chunks` sequential pieces, stopping at
/// the first failed piece. Returns (ok, elapsed, reads, failed reads).
pub fn read_from_se(ctx: &SeContext<'_>, lfn: &Lfn, bytes: u64) -> (bool, f64, u32, u32) {
    let (mut d, mut f) = ctx.draws.for_file(Direction::Read, lfn);
    let mut elapsed = 0.0;
    let mut reads = 0;
    for chunk in chunk_sizes(bytes, ctx.read_chunks) {
        let out = se_read(&mut d, &mut f, chunk, ctx.se);
        elapsed += out.duration;
        reads += 1;
        if out.kind == AccessKind::Failed {
            return (false, elapsed, reads, 1);
        }
    }
    (true, elapsed, reads, 0)
}

/// Writes outputs to the SE one after another, stopping at the first
/// failed write.
pub fn write_outputs(outputs: &[LogicalFile], ctx: &SeContext<'_>, report: &mut JobReport) -> bool {
    for out in outputs {
        let (mut d, mut f) = ctx.draws.for_file(Direction::Write, &out.lfn);
        let w = se_write(&mut d, &mut f, out.size, ctx.se);
        report.stage_out += w.duration;
        report.se_writes += 1;
        if !w.is_ok() {
            report.se_write_failures += 1;
            report.failure_stage = Some(FailureStage::StageOut);
            return false;
        }
    }
    true
}

/// Draws whether the worker node lacks something the job environment needs.
pub fn environment_check<R: Rng + ?Sized>(rng: &mut R, env_fail_prob: f64) -> bool {
    !(rng.random::<f64>() < env_fail_prob)
}

#[derive(Debug, Clone)]
pub struct PilotAgent {
    pub pilot_id: Option<PilotId>,
    pub host: WorkerId,
    pub site: String,
    pub se_name: String,
    pub ttl: Option<f64>,
    pub cache: Option<PilotCache>,
    pub peers: Vec<PeerInfo>,
    pub state: PilotState,
    pub heartbeat_interval: f64,
    pub current_job: Option<JobId>,
    /// Inputs pinned for the running job.
    pinned: Vec<Lfn>,
}

impl PilotAgent {
    pub fn new(host: WorkerId, site: impl Into<String>, se_name: impl Into<String>, ttl: Option<f64>, heartbeat_interval: f64) -> Self {
        PilotAgent {
            pilot_id: None,
            host,
            site: site.into(),
            se_name: se_name.into(),
            ttl,
            cache: None,
            peers: Vec::new(),
            state: PilotState::Inactive,
            heartbeat_interval,
            current_job: None,
            pinned: Vec::new(),
        }
    }

    pub fn id(&self) -> Result<PilotId> {
        self.pilot_id.ok_or_else(|| protocol("pilot is not registered"))
    }

    fn transition(&mut self, to: PilotState) -> Result<()> {
        if !self.state.can_transition(to) {
            return Err(protocol(format!("illegal pilot transition {:?} -> {:?}", self.state, to)));
        }
        self.state = to;
        Ok(())
    }

    pub fn cache(&self) -> Result<&PilotCache> {
        self.cache.as_ref().ok_or_else(|| protocol("pilot has no cache"))
    }

    pub fn cache_mut(&mut self) -> Result<&mut PilotCache> {
        self.cache.as_mut().ok_or_else(|| protocol("pilot has no cache"))
    }

    pub fn inventory(&self) -> BTreeSet<Lfn> {
        self.cache.as_ref().map(|c| c.inventory()).unwrap_or_default()
    }

    /// Registers with the task queue and opens a cache of `cache_capacity`
    /// bytes in `store`. Returns the assigned id and the same-node peers.
    pub fn register(&mut self, tq: &mut TaskQueue, store: &mut HostCacheStore, cache_capacity: u64, now: f64) -> Result<(PilotId, Vec<PeerInfo>)> {
        if self.pilot_id.is_some() {
            return Err(protocol("pilot registered twice"));
        }
        let (id, peers) = tq.register(self.host, &self.site, &self.se_name, now)?;
        self.transition(PilotState::Idle)?;
        self.pilot_id = Some(id);
        self.cache = Some(PilotCache::with_capacity(id, cache_capacity));
        store.open_dir(id);
        self.peers = peers.clone();
        Ok((id, peers))
    }

    pub fn job_request(&self) -> Result<JobRequest> {
        Ok(JobRequest {
            pilot_id: self.id()?,
            host: self.host,
            se_name: self.se_name.clone(),
            ttl: self.ttl,
            cached_files: self.inventory(),
        })
    }

    pub fn start_job(&mut self, job: &JobId) -> Result<()> {
        self.transition(PilotState::Busy)?;
        self.current_job = Some(job.clone());
        Ok(())
    }

    /// Resolves and reads each input in order, stopping at the first failed
    /// SE read. Cached inputs are pinned until [`PilotAgent::end_job`]; peer
    /// files are hard-linked into this pilot's cache first.
    #[allow(clippy::too_many_arguments)]
    pub fn stage_in(
        &mut self,
        job: &JobSpec,
        sizes: &[u64],
        scope: CacheScope,
        store: &mut HostCacheStore,
        ctx: &SeContext<'_>,
        local_read_fraction: f64,
        report: &mut JobReport,
        notices: &mut Vec<DeletionNotice>,
        now: f64,
    ) -> Result<bool> {
        if self.state != PilotState::Busy {
            return Err(protocol("stage-in outside a job"));
        }
        let own_inputs: Vec<Lfn> = {
            let cache = self.cache()?;
            job.inputs.iter().filter(|l| cache.contains(l)).cloned().collect()
        };
        self.cache_mut()?.pin(&own_inputs)?;
        self.pinned = own_inputs;

        for (lfn, &size) in job.inputs.iter().zip(sizes) {
            let cache = self.cache.as_mut().expect("registered pilot has a cache");
            let mut resolution = resolve(scope, cache, store, lfn, now);
            if resolution == Resolution::PeerHit {
                let out = cache.link_peer_file(store, lfn, now)?;
                notices.extend(out.notices);
                if out.accepted {
                    cache.pin(std::slice::from_ref(lfn))?;
                    self.pinned.push(lfn.clone());
                } else {
                    resolution = Resolution::SePath;
                }
            }
            let ok = match resolution {
                Resolution::LocalHit | Resolution::PeerHit => {
                    report.stage_in += local_read_time(ctx.se, size, local_read_fraction);
                    true
                }
                Resolution::SePath => {
                    let (ok, elapsed, reads, failed) = read_from_se(ctx, lfn, size);
                    report.stage_in += elapsed;
                    report.se_reads += reads;
                    report.se_read_failures += failed;
                    ok
                }
            };
            report.accesses.push(InputAccess {
                lfn: lfn.clone(),
                size,
                resolution,
                ok,
            });
            if !ok {
                report.failure_stage = Some(FailureStage::StageIn);
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Writes each output from staging to the SE, stopping at the first
    /// failure.
    pub fn stage_out(&self, outputs: &[LogicalFile], ctx: &SeContext<'_>, report: &mut JobReport) -> bool {
        write_outputs(outputs, ctx, report)
    }

    /// Finishes the running job: on success the outputs move from staging
    /// into the cache. Inputs are unpinned and the pilot becomes idle.
    pub fn end_job(&mut self, outputs: Option<&[LogicalFile]>, store: &mut HostCacheStore, now: f64) -> Result<Vec<DeletionNotice>> {
        if self.state != PilotState::Busy {
            return Err(protocol("no job to end"));
        }
        let mut notices = Vec::new();
        let pinned = std::mem::take(&mut self.pinned);
        let cache = self.cache_mut()?;
        cache.unpin(&pinned);
        for out in outputs.unwrap_or_default() {
            if cache.contains(&out.lfn) || store.file_size(&out.lfn).is_some_and(|s| s != out.size) {
                continue;
            }
            let res = if store.contains(&out.lfn) {
                cache.link_peer_file(store, &out.lfn, now)?
            } else {
                cache.insert(store, &out.lfn, out.size, now)?
            };
            notices.extend(res.notices);
        }
        self.current_job = None;
        self.transition(PilotState::Idle)?;
        Ok(notices)
    }

    /// Exchanges a heartbeat and keeps only peers whose cache directory is
    /// still reachable.
    pub fn heartbeat(&mut self, tq: &mut TaskQueue, store: &HostCacheStore, now: f64) -> Result<Vec<PeerInfo>> {
        if !matches!(self.state, PilotState::Idle | PilotState::Busy) {
            return Err(protocol("only running pilots heartbeat"));
        }
        let peers = tq.heartbeat_update(self.id()?, self.inventory(), now)?;
        self.peers = peers.into_iter().filter(|p| store.dir_accessible(p.pilot_id)).collect();
        Ok(self.peers.clone())
    }

    /// Links every file held by a live peer and missing here. Disabled for
    /// private caches.
    pub fn poll_peers(&mut self, scope: CacheScope, store: &mut HostCacheStore, notices: &mut Vec<DeletionNotice>, now: f64) -> Result<Vec<Lfn>> {
        if scope != CacheScope::PerHost {
            return Ok(Vec::new());
        }
        let cache = self.cache.as_mut().ok_or_else(|| protocol("pilot has no cache"))?;
        let mut wanted = BTreeSet::new();
        for peer in &self.peers {
            if store.dir_accessible(peer.pilot_id) {
                wanted.extend(store.files_of(peer.pilot_id).filter(|l| !cache.contains(l)).cloned());
            }
        }
        let mut linked = Vec::new();
        for lfn in wanted {
            let out = cache.link_peer_file(store, &lfn, now)?;
            notices.extend(out.notices);
            if out.accepted {
                linked.push(lfn);
            }
        }
        Ok(linked)
    }

    /// Terminates the pilot, removing its cache directory.
    pub fn terminate(&mut self, store: &mut HostCacheStore) -> Result<Vec<DeletionNotice>> {
        self.transition(PilotState::Terminated)?;
        self.pinned.clear();
        Ok(match self.cache.as_mut() {
            Some(c) => c.clear(store),
            None => Vec::new(),
        })
    }
}

/// Validates a free-standing probability knob.
pub fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid_param(format!("{name} {p} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskqueue::TaskQueueConfig;
    use crate::MB;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transitions() {
        use PilotState::*;
        assert!(Inactive.can_transition(Idle));
        assert!(Idle.can_transition(Busy));
        assert!(Busy.can_transition(Idle));
        assert!(Busy.can_transition(Terminated));
        assert!(!Inactive.can_transition(Busy));
        assert!(!Terminated.can_transition(Idle));
        assert!(!Idle.can_transition(Inactive));
    }

    #[test]
    fn env_check_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| environment_check(&mut rng, 0.0)));
        assert!((0..1000).all(|_| !environment_check(&mut rng, 1.0)));
        let fails = (0..10_000).filter(|_| !environment_check(&mut rng, 0.2)).count();
        assert!((1900..=2100).contains(&fails), "{fails}");
    }

    fn tq() -> TaskQueue {
        TaskQueue::new(TaskQueueConfig::default())
    }

    #[test]
    fn registration_peers() {
        let mut tq = tq();
        let mut s3 = HostCacheStore::new(WorkerId(3));
        let mut s4 = HostCacheStore::new(WorkerId(4));
        let mut a = PilotAgent::new(WorkerId(3), "S", "se", None, 60.0);
        let mut b = PilotAgent::new(WorkerId(3), "S", "se", None, 60.0);
        let mut c = PilotAgent::new(WorkerId(4), "S", "se", None, 60.0);
        let (ida, pa) = a.register(&mut tq, &mut s3, 100, 0.0).unwrap();
        assert!(pa.is_empty());
        let (_, pb) = b.register(&mut tq, &mut s3, 100, 0.0).unwrap();
        assert_eq!(pb.iter().map(|p| p.pilot_id).collect::<Vec<_>>(), vec![ida]);
        let (_, pc) = c.register(&mut tq, &mut s4, 100, 0.0).unwrap();
        assert!(pc.is_empty());
        assert_eq!(a.state, PilotState::Idle);
        assert!(a.register(&mut tq, &mut s3, 100, 0.0).is_err());
    }

    #[test]
    fn heartbeat_drops_dead_peers() {
        let mut tq = tq();
        let mut store = HostCacheStore::new(WorkerId(0));
        let mut pilots: Vec<PilotAgent> = (0..3).map(|_| PilotAgent::new(WorkerId(0), "S", "se", None, 60.0)).collect();
        for p in &mut pilots {
            p.register(&mut tq, &mut store, 100, 0.0).unwrap();
        }
        assert_eq!(pilots[0].heartbeat(&mut tq, &store, 60.0).unwrap().len(), 2);
        pilots[2].terminate(&mut store).unwrap();
        let peers = pilots[0].heartbeat(&mut tq, &store, 120.0).unwrap();
        assert_eq!(peers.len(), 1);
        assert_eq!(peers[0].pilot_id, pilots[1].pilot_id.unwrap());
    }

    #[test]
    fn poll_links_peer_files() {
        let mut tq = tq();
        let mut store = HostCacheStore::new(WorkerId(0));
        let mut a = PilotAgent::new(WorkerId(0), "S", "se", None, 60.0);
        let mut b = PilotAgent::new(WorkerId(0), "S", "se", None, 60.0);
        a.register(&mut tq, &mut store, GB10, 0.0).unwrap();
        b.register(&mut tq, &mut store, GB10, 0.0).unwrap();
        let f = Lfn::from("F");
        a.cache_mut().unwrap().insert(&mut store, &f, 10 * MB, 0.0).unwrap();
        b.heartbeat(&mut tq, &store, 60.0).unwrap();
        let mut notices = Vec::new();
        assert!(b.poll_peers(CacheScope::SinglePilot, &mut store, &mut notices, 60.0).unwrap().is_empty());
        assert_eq!(b.poll_peers(CacheScope::PerHost, &mut store, &mut notices, 60.0).unwrap(), vec![f.clone()]);
        assert_eq!(store.link_count(&f), 2);
        assert!(notices.is_empty());
    }

    const GB10: u64 = 10_000 * MB;

    #[test]
    fn job_steps_closed_form() {
        let mut tq = tq();
        let mut store = HostCacheStore::new(WorkerId(0));
        let mut a = PilotAgent::new(WorkerId(0), "S", "se", None, 60.0);
        a.register(&mut tq, &mut store, GB10, 0.0).unwrap();
        let se = SeModel {
            delay_factor: 0.5,
            sigma_fraction: 0.0,
            ..SeModel::default()
        };
        let ctx = SeContext {
            se: &se,
            draws: AccessDraws::new(1, JobId::from("j"), 1),
            read_chunks: 1,
        };
        let job = JobSpec {
            job_id: JobId::from("j"),
            step: 1,
            inputs: vec![Lfn::from("A"), Lfn::from("B")],
            outputs: vec![LogicalFile::new("C", 700 * MB)],
            processing_time: 300.0,
            site_requirement: None,
            max_retries: 3,
        };
        a.cache_mut().unwrap().insert(&mut store, &Lfn::from("A"), 700 * MB, 0.0).unwrap();
        a.start_job(&job.job_id).unwrap();
        let mut report = JobReport::new(job.job_id.clone(), a.pilot_id);
        let mut notices = Vec::new();
        let ok = a
            .stage_in(&job, &[700 * MB, 700 * MB], CacheScope::PerHost, &mut store, &ctx, 0.05, &mut report, &mut notices, 1.0)
            .unwrap();
        assert!(ok);
        // Local hit: 0.05 * 7 s; SE read under d=0.5: 7 * 6 = 42 s.
        assert!((report.stage_in - (0.35 + 42.0)).abs() < 1e-9);
        assert_eq!(report.se_reads, 1);
        assert!(a.cache().unwrap().entry(&Lfn::from("A")).unwrap().pinned);
        assert!(a.stage_out(&job.outputs, &ctx, &mut report));
        a.end_job(Some(&job.outputs), &mut store, 400.0).unwrap();
        let cache = a.cache().unwrap();
        assert!(cache.contains(&Lfn::from("C")));
        assert!(!cache.entry(&Lfn::from("A")).unwrap().pinned);
        assert_eq!(a.state, PilotState::Idle);
    }
}
