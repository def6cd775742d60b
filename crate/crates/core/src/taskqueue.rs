//! Central queue of real jobs with cache-aware matchmaking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cache::{CacheScope, DeletionNotice};
use crate::error::{protocol, Result};
use crate::infra::WorkerId;
use crate::pilot::{JobRequest, PilotId};
use crate::workload::{JobId, JobSpec, Lfn, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Queued,
    Assigned(PilotId),
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEntry {
    pub job: JobSpec,
    pub state: TaskState,
    pub enqueue_time: f64,
    pub retries_used: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotStatus {
    Idle,
    Busy,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotRecord {
    pub pilot_id: PilotId,
    pub host: WorkerId,
    pub site: String,
    pub se_name: String,
    pub state: PilotStatus,
    pub inventory: BTreeSet<Lfn>,
    pub last_heartbeat: f64,
    pub current_job: Option<JobId>,
}

impl PilotRecord {
    pub fn cache_location(&self) -> String {
        format!("{}:/pilot-cache/{}", self.host, self.pilot_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub pilot_id: PilotId,
    pub cache_location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchResult {
    Assign(JobId),
    NoWork,
    /// No job assigned because every candidate is waiting for another idle
    /// pilot that holds its data.
    HeldForData(Vec<JobId>),
}

/// One matchmaking decision, for auditing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub time: f64,
    pub pilot_id: PilotId,
    pub job_id: Option<JobId>,
    pub score: usize,
    pub best_score: usize,
    pub held: Vec<JobId>,
    /// Other idle pilots scoring above zero for the assigned job.
    pub idle_positive: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnableCounts {
    pub total: usize,
    pub site_specific: usize,
    pub any_site: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskQueueConfig {
    pub scope: CacheScope,
    pub wait_for_data: bool,
    pub liveness_timeout: f64,
}

impl Default for TaskQueueConfig {
    fn default() -> Self {
        TaskQueueConfig {
            scope: CacheScope::PerHost,
            wait_for_data: true,
            liveness_timeout: 180.0,
        }
    }
}

/// What a completion report changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompletionOutcome {
    pub enqueued: Vec<JobId>,
    pub requeued: bool,
    pub failed_out: bool,
}

type QueueKey = (u64, JobId);

fn queue_key(time: f64, job: &JobId) -> QueueKey {
    (time.max(0.0).to_bits(), job.clone())
}

#[derive(Debug, Clone)]
pub struct TaskQueue {
    config: TaskQueueConfig,
    tasks: BTreeMap<JobId, TaskEntry>,
    queue: BTreeSet<QueueKey>,
    pilots: BTreeMap<PilotId, PilotRecord>,
    held: BTreeSet<JobId>,
    next_pilot: u32,
    degraded: bool,
    log: Vec<MatchRecord>,
}

impl TaskQueue {
    pub fn new(config: TaskQueueConfig) -> Self {
        TaskQueue {
            config,
            tasks: BTreeMap::new(),
            queue: BTreeSet::new(),
            pilots: BTreeMap::new(),
            held: BTreeSet::new(),
            next_pilot: 1,
            degraded: false,
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &TaskQueueConfig {
        &self.config
    }

    pub fn task(&self, job: &JobId) -> Option<&TaskEntry> {
        self.tasks.get(job)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskEntry> + '_ {
        self.tasks.values()
    }

    pub fn pilot(&self, id: PilotId) -> Option<&PilotRecord> {
        self.pilots.get(&id)
    }

    pub fn pilots(&self) -> impl Iterator<Item = &PilotRecord> + '_ {
        self.pilots.values()
    }

    /// Queued job ids in FIFO order.
    pub fn queued(&self) -> impl Iterator<Item = &JobId> + '_ {
        self.queue.iter().map(|(_, j)| j)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_held(&self, job: &JobId) -> bool {
        self.held.contains(job)
    }

    /// True once a job ran out of retries.
    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn match_log(&self) -> &[MatchRecord] {
        &self.log
    }

    pub fn enqueue(&mut self, job: JobSpec, now: f64) -> Result<()> {
        if self.tasks.contains_key(&job.job_id) {
            return Err(protocol(format!("job {} enqueued twice", job.job_id)));
        }
        self.queue.insert(queue_key(now, &job.job_id));
        self.tasks.insert(
            job.job_id.clone(),
            TaskEntry {
                job,
                state: TaskState::Queued,
                enqueue_time: now,
                retries_used: 0,
            },
        );
        Ok(())
    }

    /// Puts a job that was assigned back in the queue. Consumes a retry
    /// when `count_retry`; past `max_retries` the job fails out and the
    /// workflow is degraded. Returns whether the job is queued again.
    pub fn requeue(&mut self, job: &JobId, count_retry: bool, now: f64) -> Result<bool> {
        let entry = self
            .tasks
            .get_mut(job)
            .ok_or_else(|| protocol(format!("requeue of unknown job {job}")))?;
        if !matches!(entry.state, TaskState::Assigned(_)) {
            return Err(protocol(format!("requeue of job {job} in state {:?}", entry.state)));
        }
        if count_retry {
            if entry.retries_used >= entry.job.max_retries {
                entry.state = TaskState::Failed;
                self.degraded = true;
                return Ok(false);
            }
            entry.retries_used += 1;
        }
        entry.state = TaskState::Queued;
        entry.enqueue_time = now;
        self.queue.insert(queue_key(now, job));
        Ok(true)
    }

    pub fn register(&mut self, host: WorkerId, site: &str, se_name: &str, now: f64) -> Result<(PilotId, Vec<PeerInfo>)> {
        let id = PilotId(self.next_pilot);
        self.next_pilot += 1;
        let peers = self.peers_of(host, id);
        self.pilots.insert(
            id,
            PilotRecord {
                pilot_id: id,
                host,
                site: site.to_string(),
                se_name: se_name.to_string(),
                state: PilotStatus::Idle,
                inventory: BTreeSet::new(),
                last_heartbeat: now,
                current_job: None,
            },
        );
        Ok((id, peers))
    }

    fn peers_of(&self, host: WorkerId, me: PilotId) -> Vec<PeerInfo> {
        self.pilots
            .values()
            .filter(|p| p.host == host && p.pilot_id != me && p.state != PilotStatus::Dead)
            .map(|p| PeerInfo {
                pilot_id: p.pilot_id,
                cache_location: p.cache_location(),
            })
            .collect()
    }

    fn live_pilot_mut(&mut self, id: PilotId) -> Result<&mut PilotRecord> {
        match self.pilots.get_mut(&id) {
            Some(p) if p.state != PilotStatus::Dead => Ok(p),
            Some(_) => Err(protocol(format!("{id} is dead"))),
            None => Err(protocol(format!("{id} is not registered"))),
        }
    }

    pub fn update_inventory(&mut self, id: PilotId, inventory: BTreeSet<Lfn>) -> Result<()> {
        self.live_pilot_mut(id)?.inventory = inventory;
        Ok(())
    }

    /// Union of live inventories per host.
    fn host_files(&self) -> BTreeMap<WorkerId, BTreeSet<&Lfn>> {
        let mut out: BTreeMap<WorkerId, BTreeSet<&Lfn>> = BTreeMap::new();
        if self.config.scope == CacheScope::PerHost {
            for p in self.pilots.values().filter(|p| p.state != PilotStatus::Dead) {
                out.entry(p.host).or_default().extend(p.inventory.iter());
            }
        }
        out
    }

    /// Number of `job`'s inputs `pilot` can get from cache.
    pub fn score(&self, job: &JobSpec, pilot: PilotId) -> usize {
        let Some(p) = self.pilots.get(&pilot) else {
            return 0;
        };
        match self.config.scope {
            CacheScope::SinglePilot => job.inputs.iter().filter(|l| p.inventory.contains(*l)).count(),
            CacheScope::PerHost => job
                .inputs
                .iter()
                .filter(|l| {
                    self.pilots
                        .values()
                        .any(|q| q.host == p.host && q.state != PilotStatus::Dead && q.inventory.contains(*l))
                })
                .count(),
        }
    }

    fn site_ok(job: &JobSpec, site: &str) -> bool {
        job.site_requirement.as_deref().is_none_or(|s| s == site)
    }

    /// Pull-based matchmaking for one job request.
    pub fn match_request(&mut self, req: &JobRequest, now: f64) -> Result<MatchResult> {
        let me = self.live_pilot_mut(req.pilot_id)?;
        if me.state != PilotStatus::Idle {
            return Err(protocol(format!("{} requested a job while busy", req.pilot_id)));
        }
        me.inventory = req.cached_files.clone();
        let me = self.pilots[&req.pilot_id].clone();

        let host_files = self.host_files();
        let sees = |p: &PilotRecord, l: &Lfn| match self.config.scope {
            CacheScope::SinglePilot => p.inventory.contains(l),
            CacheScope::PerHost => host_files.get(&p.host).is_some_and(|f| f.contains(l)),
        };

        let mut candidates: Vec<(usize, &QueueKey)> = self
            .queue
            .iter()
            .filter(|(_, j)| Self::site_ok(&self.tasks[j].job, &me.site))
            .map(|k| {
                let job = &self.tasks[&k.1].job;
                (job.inputs.iter().filter(|l| sees(&me, l)).count(), k)
            })
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let best_score = candidates.first().map_or(0, |c| c.0);

        let idle_positive = |job: &JobSpec| {
            self.pilots
                .values()
                .filter(|p| p.pilot_id != me.pilot_id && p.state == PilotStatus::Idle && Self::site_ok(job, &p.site))
                .filter(|p| job.inputs.iter().any(|l| sees(p, l)))
                .count()
        };

        let mut held = Vec::new();
        let mut chosen = None;
        for (score, key) in &candidates {
            let job = &self.tasks[&key.1].job;
            let others = if *score == 0 && !job.inputs.is_empty() {
                idle_positive(job)
            } else {
                0
            };
            if self.config.wait_for_data && others > 0 {
                held.push(key.1.clone());
                continue;
            }
            chosen = Some((*score, (*key).clone(), others));
            break;
        }

        for j in &held {
            self.held.insert(j.clone());
        }
        let record = MatchRecord {
            time: now,
            pilot_id: me.pilot_id,
            job_id: chosen.as_ref().map(|c| c.1 .1.clone()),
            score: chosen.as_ref().map_or(0, |c| c.0),
            best_score,
            held: held.clone(),
            idle_positive: chosen.as_ref().map_or(0, |c| c.2),
        };
        self.log.push(record);

        let Some((_, key, _)) = chosen else {
            return Ok(if held.is_empty() {
                MatchResult::NoWork
            } else {
                MatchResult::HeldForData(held)
            });
        };
        self.queue.remove(&key);
        self.held.remove(&key.1);
        self.tasks.get_mut(&key.1).expect("queued job exists").state = TaskState::Assigned(me.pilot_id);
        let p = self.pilots.get_mut(&me.pilot_id).expect("requester exists");
        p.state = PilotStatus::Busy;
        p.current_job = Some(key.1.clone());
        Ok(MatchResult::Assign(key.1))
    }

    /// Records the end of an attempt. Success feeds the outputs to the
    /// workload and enqueues the jobs that became ready at `now`; failure
    /// requeues the job if retries remain.
    pub fn report_completion(&mut self, job_id: &JobId, pilot: PilotId, success: bool, workload: &mut Workload, now: f64) -> Result<CompletionOutcome> {
        let entry = self
            .tasks
            .get(job_id)
            .ok_or_else(|| protocol(format!("completion for unknown job {job_id}")))?;
        if entry.state != TaskState::Assigned(pilot) {
            return Err(protocol(format!("completion for {job_id} which is not assigned to {pilot}")));
        }
        let outputs: Vec<Lfn> = entry.job.outputs.iter().map(|o| o.lfn.clone()).collect();
        let p = self.live_pilot_mut(pilot)?;
        p.state = PilotStatus::Idle;
        p.current_job = None;

        let mut outcome = CompletionOutcome::default();
        if success {
            self.tasks.get_mut(job_id).expect("checked").state = TaskState::Done;
            for job in workload.on_files_available(&outputs)? {
                outcome.enqueued.push(job.job_id.clone());
                self.enqueue(job, now)?;
            }
        } else if self.requeue(job_id, true, now)? {
            outcome.requeued = true;
        } else {
            outcome.failed_out = true;
        }
        Ok(outcome)
    }

    /// Refreshes a pilot's liveness and inventory, expires silent pilots and
    /// returns the live peers on the same worker node.
    pub fn heartbeat_update(&mut self, pilot: PilotId, inventory: BTreeSet<Lfn>, now: f64) -> Result<Vec<PeerInfo>> {
        let p = self.live_pilot_mut(pilot)?;
        p.last_heartbeat = now;
        p.inventory = inventory;
        let host = p.host;
        self.expire(now)?;
        Ok(self.peers_of(host, pilot))
    }

    /// Marks pilots silent for longer than the liveness timeout as dead and
    /// requeues their jobs without consuming a retry. Returns the expired
    /// pilots with the job each one held.
    pub fn expire(&mut self, now: f64) -> Result<Vec<(PilotId, Option<JobId>)>> {
        let timeout = self.config.liveness_timeout;
        let dead: Vec<PilotId> = self
            .pilots
            .values()
            .filter(|p| p.state != PilotStatus::Dead && now - p.last_heartbeat > timeout)
            .map(|p| p.pilot_id)
            .collect();
        let mut out = Vec::new();
        for id in dead {
            let p = self.pilots.get_mut(&id).expect("listed");
            p.state = PilotStatus::Dead;
            p.inventory.clear();
            let job = p.current_job.take();
            if let Some(j) = &job {
                self.requeue(j, false, now)?;
            }
            out.push((id, job));
        }
        Ok(out)
    }

    /// Drops a physically deleted file from every inventory on its node.
    pub fn handle_deletion(&mut self, notice: &DeletionNotice) {
        for p in self.pilots.values_mut() {
            if p.host == notice.worker_node {
                p.inventory.remove(&notice.lfn);
            }
        }
    }

    /// Queued, not held tasks that may run at `site`.
    pub fn query_runnable(&self, site: &str) -> RunnableCounts {
        let mut counts = RunnableCounts {
            total: 0,
            site_specific: 0,
            any_site: 0,
        };
        for (_, j) in &self.queue {
            if self.held.contains(j) {
                continue;
            }
            match self.tasks[j].job.site_requirement.as_deref() {
                None => counts.any_site += 1,
                Some(s) if s == site => counts.site_specific += 1,
                Some(_) => continue,
            }
            counts.total += 1;
        }
        counts
    }

    /// Jobs neither done nor failed out.
    pub fn unfinished(&self) -> usize {
        self.tasks
            .values()
            .filter(|t| matches!(t.state, TaskState::Queued | TaskState::Assigned(_)))
            .count()
    }
}
