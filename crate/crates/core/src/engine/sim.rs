use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand_distr::{Distribution, Normal};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{hex, ScenarioConfig, SubmissionMode};
use super::event::{Event, EventKind, EventQueue, Runner};
use super::rng::Streams;
use crate::cache::{capacity, check_host_consistency, CacheScope, DeletionNotice, HostCacheStore, Resolution};
use crate::error::{protocol, Result};
use crate::infra::{SeModel, WorkerId};
use crate::metrics::{AttemptRecord, CacheCounters, CellKey, FailureCounts, JobMetrics, MetricsReport, Outcome, PilotCounts, RunInfo, SeOps};
use crate::monitor::{PilotManager, PilotMonitor, SitePilotStats, SiteSnapshot, TickRecord};
use crate::pilot::{environment_check, AccessDraws, read_from_se, write_outputs, FailureStage, InputAccess, JobReport, PilotAgent, PilotState, SeContext};
use crate::taskqueue::{MatchRecord, MatchResult, TaskQueue, TaskQueueConfig, TaskState};
use crate::workload::{JobId, JobSpec, LogicalFile, Workload};

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// NDJSON event records, kept when requested.
    pub event_log: Option<Vec<String>>,
    pub match_log: Vec<MatchRecord>,
    pub monitor_log: Vec<TickRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub keep_event_log: bool,
}

/// Runs one scenario to completion.
pub fn run(config: &ScenarioConfig) -> Result<MetricsReport> {
    Ok(run_with(config, RunOptions::default())?.report)
}

pub fn run_with(config: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput> {
    config.validate()?;
    let mut sim = Sim::new(config, opts)?;
    sim.start()?;
    let (outcome, diagnostic) = sim.event_loop()?;
    Ok(sim.finish(outcome, diagnostic))
}

/// An attempt in progress.
#[derive(Debug, Clone)]
struct Attempt {
    job: JobSpec,
    report: JobReport,
    attempt: u32,
    worker_node: WorkerId,
    enqueue: f64,
    start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DirectState {
    Submitted,
    Running,
    Notifying,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
struct DirectTask {
    job: JobSpec,
    state: DirectState,
    retries_used: u32,
    enqueue: f64,
}

#[derive(Debug, Clone)]
struct DirectRun {
    task: usize,
    attempt: Attempt,
    success: bool,
}

struct EventLog {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    count: u64,
}

impl EventLog {
    fn push(&mut self, line: serde_json::Value) {
        let s = line.to_string();
        self.hasher.update(s.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if let Some(lines) = &mut self.lines {
            lines.push(s);
        }
    }
}

struct Sim<'c> {
    cfg: &'c ScenarioConfig,
    se: SeModel,
    scope: CacheScope,
    now: f64,
    events: EventQueue,
    rng: Streams,
    workload: Workload,
    tq: TaskQueue,
    stores: Vec<HostCacheStore>,
    agents: Vec<PilotAgent>,
    started_at: Vec<Option<f64>>,
    /// Pilots occupying a slot on each worker node.
    pilots_on_host: Vec<usize>,
    waiting_for_slot: VecDeque<usize>,
    attempts: Vec<Option<Attempt>>,
    attempt_counter: BTreeMap<JobId, u32>,
    direct_tasks: Vec<DirectTask>,
    direct_index: BTreeMap<JobId, usize>,
    direct_runs: Vec<DirectRun>,
    direct_running: Vec<usize>,
    direct_waiting: VecDeque<usize>,
    monitor: Option<PilotMonitor>,
    manager: PilotManager,
    ticks: u64,
    log: EventLog,
    // Measurements.
    records: Vec<AttemptRecord>,
    running: u64,
    running_series: Vec<(f64, u64)>,
    busy: u64,
    cache: CacheCounters,
    cache_by_step: BTreeMap<u32, CacheCounters>,
    se_ops: SeOps,
    failures: FailureCounts,
    pilots: PilotCounts,
    last_notification: f64,
    last_progress: f64,
    violations: Vec<String>,
    file_creations: BTreeMap<(WorkerId, String), u64>,
    file_notices: BTreeMap<(WorkerId, String), u64>,
}

impl<'c> Sim<'c> {
    fn new(cfg: &'c ScenarioConfig, opts: RunOptions) -> Result<Self> {
        let spec = cfg.workflow.build(&cfg.jobs.defaults)?;
        let scheme = cfg.cache_scheme;
        let n_workers = cfg.site.n_workers;
        Ok(Sim {
            cfg,
            se: cfg.se_model(),
            scope: scheme.scope(),
            now: 0.0,
            events: EventQueue::new(),
            rng: Streams::new(cfg.seed),
            workload: Workload::new(spec),
            tq: TaskQueue::new(TaskQueueConfig {
                scope: scheme.scope(),
                wait_for_data: scheme.wait_for_data(),
                liveness_timeout: cfg.pilot.liveness_factor * cfg.pilot.heartbeat_interval,
            }),
            stores: (0..n_workers).map(|w| HostCacheStore::new(WorkerId(w as u32))).collect(),
            agents: Vec::new(),
            started_at: Vec::new(),
            pilots_on_host: vec![0; n_workers],
            waiting_for_slot: VecDeque::new(),
            attempts: Vec::new(),
            attempt_counter: BTreeMap::new(),
            direct_tasks: Vec::new(),
            direct_index: BTreeMap::new(),
            direct_runs: Vec::new(),
            direct_running: vec![0; n_workers],
            direct_waiting: VecDeque::new(),
            monitor: None,
            manager: PilotManager {
                queue_delay: cfg.site.pilot_queue_delay,
            },
            ticks: 0,
            log: EventLog {
                hasher: Sha256::new(),
                lines: opts.keep_event_log.then(Vec::new),
                count: 0,
            },
            records: Vec::new(),
            running: 0,
            running_series: vec![(0.0, 0)],
            busy: 0,
            cache: CacheCounters::default(),
            cache_by_step: BTreeMap::new(),
            se_ops: SeOps::default(),
            failures: FailureCounts::default(),
            pilots: PilotCounts::default(),
            last_notification: 0.0,
            last_progress: 0.0,
            violations: Vec::new(),
            file_creations: BTreeMap::new(),
            file_notices: BTreeMap::new(),
        })
    }

    fn violation(&mut self, msg: String) {
        if self.violations.len() < 100 {
            self.violations.push(format!("t={:.3}: {msg}", self.now));
        }
    }

    fn record(&mut self, kind: &str, detail: serde_json::Value) {
        let mut v = json!({"t": self.now, "kind": kind});
        if let (Some(o), serde_json::Value::Object(d)) = (v.as_object_mut(), detail) {
            o.extend(d);
        }
        self.log.push(v);
    }

    fn set_running(&mut self, delta: i64) {
        self.running = (self.running as i64 + delta) as u64;
        match self.running_series.last_mut() {
            Some(last) if last.0 == self.now => last.1 = self.running,
            _ => self.running_series.push((self.now, self.running)),
        }
    }

    // ---- setup ----

    fn start(&mut self) -> Result<()> {
        let ready = self.workload.on_files_available(&[])?;
        match self.cfg.submission_mode {
            SubmissionMode::Direct => {
                for job in ready {
                    self.submit_direct(job, 0.0);
                }
            }
            SubmissionMode::Prerun(n) => {
                self.enqueue_all(ready)?;
                for _ in 0..n {
                    let agent = self.new_agent();
                    self.events.schedule(0.0, EventKind::PilotStart { agent });
                }
            }
            SubmissionMode::OnDemand => {
                self.enqueue_all(ready)?;
                self.monitor = Some(PilotMonitor::new(self.cfg.thresholds));
                self.events.schedule(0.0, EventKind::MonitorTick);
            }
        }
        Ok(())
    }

    fn enqueue_all(&mut self, jobs: Vec<JobSpec>) -> Result<()> {
        for job in jobs {
            self.record("enqueue", json!({"job": job.job_id}));
            self.tq.enqueue(job, self.now)?;
        }
        Ok(())
    }

    fn new_agent(&mut self) -> usize {
        let c = self.cfg;
        self.agents.push(PilotAgent::new(WorkerId(0), c.site.site_name.clone(), c.site.se_name.clone(), c.pilot.ttl, c.pilot.heartbeat_interval));
        self.started_at.push(None);
        self.attempts.push(None);
        self.pilots.submitted += 1;
        self.agents.len() - 1
    }

    fn place(&mut self, agent: usize, wn: WorkerId) {
        self.agents[agent].host = wn;
        self.pilots_on_host[wn.0 as usize] += 1;
        self.started_at[agent] = Some(self.now);
    }

    fn alive_pilots(&self) -> usize {
        self.agents.iter().filter(|a| a.state != PilotState::Terminated).count()
    }

    // ---- main loop ----

    fn finished(&self) -> bool {
        match self.cfg.submission_mode {
            SubmissionMode::Direct => self
                .direct_tasks
                .iter()
                .all(|t| matches!(t.state, DirectState::Done | DirectState::Failed)),
            _ => self.tq.unfinished() == 0,
        }
    }

    fn event_loop(&mut self) -> Result<(Outcome, Option<String>)> {
        loop {
            if self.finished() {
                let done = self.jobs_done();
                let total = self.workload.spec.jobs().len() as u64;
                return Ok(if done == total {
                    (Outcome::Complete, None)
                } else {
                    (Outcome::Incomplete, Some(format!("{} of {total} jobs completed", done)))
                });
            }
            let Some(ev) = self.events.pop() else {
                return Ok((Outcome::Deadlocked, Some("no pending events while jobs remain".into())));
            };
            if ev.time < self.now {
                self.violation(format!("event at {} before clock {}", ev.time, self.now));
            }
            self.now = ev.time;
            if self.now - self.last_progress > self.cfg.stall_timeout {
                return Ok((
                    Outcome::Deadlocked,
                    Some(format!("no job progress for {:.0} s", self.now - self.last_progress)),
                ));
            }
            self.log.push(serde_json::to_value(&ev).expect("event serializes"));
            self.handle(ev)?;
        }
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev.kind {
            EventKind::PilotStart { agent } => self.pilot_start(agent),
            EventKind::Register { agent } => self.register(agent),
            EventKind::JobRequest { agent } | EventKind::PollBackoff { agent } => self.request_job(agent),
            EventKind::StageInDone { runner } => self.stage_in_done(runner),
            EventKind::ProcessingDone { runner } => self.processing_done(runner),
            EventKind::StageOutDone { runner } => self.stage_out_done(runner),
            EventKind::Heartbeat { agent } => self.heartbeat(agent),
            EventKind::MonitorTick => self.monitor_tick(),
            EventKind::DirectJobStart { job } => {
                self.direct_start(job);
                Ok(())
            }
            EventKind::DirectNotifyDone { run } => self.direct_notify(run),
        }
    }

    // ---- pilots ----

    fn free_worker(&self) -> Option<WorkerId> {
        let slots = self.cfg.site.slots_per_worker;
        (0..self.pilots_on_host.len())
            .filter(|&w| self.pilots_on_host[w] < slots)
            .min_by_key(|&w| (self.pilots_on_host[w], w))
            .map(|w| WorkerId(w as u32))
    }

    fn pilot_start(&mut self, agent: usize) -> Result<()> {
        let Some(wn) = self.free_worker() else {
            self.waiting_for_slot.push_back(agent);
            return Ok(());
        };
        self.place(agent, wn);
        if environment_check(&mut self.rng.env_check, self.cfg.pilot.env_fail_prob) {
            self.events.schedule(self.now, EventKind::Register { agent });
        } else {
            self.failures.environment += 1;
            self.pilots.terminated_env += 1;
            self.record("env_fail", json!({"agent": agent, "wn": wn}));
            self.terminate(agent)?;
        }
        Ok(())
    }

    fn host_capacity(&self, wn: WorkerId) -> Result<u64> {
        if !self.cfg.cache_scheme.caching() {
            return Ok(0);
        }
        let n = self.registered_on(wn).len().max(1);
        capacity(self.cfg.cache.max_space, self.cfg.cache.min_threshold, n, self.scope)
    }

    fn registered_on(&self, wn: WorkerId) -> Vec<usize> {
        (0..self.agents.len())
            .filter(|&i| {
                let a = &self.agents[i];
                a.host == wn && a.pilot_id.is_some() && a.state != PilotState::Terminated
            })
            .collect()
    }

    /// Applies the capacity formula after the number of pilots on a node
    /// changed.
    fn refresh_capacity(&mut self, wn: WorkerId) -> Result<()> {
        let cap = self.host_capacity(wn)?;
        let w = wn.0 as usize;
        if self.scope == CacheScope::PerHost && self.cfg.cache_scheme.caching() {
            self.stores[w].set_physical_limit(Some(cap));
        }
        let mut notices = Vec::new();
        for i in self.registered_on(wn) {
            let cache = self.agents[i].cache_mut()?;
            if cache.capacity() != cap {
                notices.extend(cache.set_capacity(&mut self.stores[w], cap).notices);
            }
        }
        self.deliver_notices(notices);
        for i in self.registered_on(wn) {
            self.sync_inventory(i)?;
        }
        self.audit_host(wn);
        Ok(())
    }

    fn register(&mut self, agent: usize) -> Result<()> {
        let wn = self.agents[agent].host;
        let cap = {
            // Count the newcomer before it is registered.
            let n = self.registered_on(wn).len() + 1;
            if self.cfg.cache_scheme.caching() {
                capacity(self.cfg.cache.max_space, self.cfg.cache.min_threshold, n, self.scope)?
            } else {
                0
            }
        };
        let (id, peers) = self.agents[agent].register(&mut self.tq, &mut self.stores[wn.0 as usize], cap, self.now)?;
        self.record("register", json!({"agent": agent, "pilot": id, "wn": wn, "peers": peers.len()}));
        self.refresh_capacity(wn)?;
        let hb = self.cfg.pilot.heartbeat_interval;
        self.events.schedule(self.now, EventKind::JobRequest { agent });
        self.events.schedule(self.now + hb, EventKind::Heartbeat { agent });
        Ok(())
    }

    fn sync_inventory(&mut self, agent: usize) -> Result<()> {
        let a = &self.agents[agent];
        if let (Some(id), PilotState::Idle | PilotState::Busy) = (a.pilot_id, a.state) {
            if self.tq.pilot(id).is_some_and(|p| p.state != crate::taskqueue::PilotStatus::Dead) {
                self.tq.update_inventory(id, a.inventory())?;
            }
        }
        Ok(())
    }

    fn deliver_notices(&mut self, notices: Vec<DeletionNotice>) {
        for n in notices {
            *self.file_notices.entry((n.worker_node, n.lfn.to_string())).or_default() += 1;
            self.record("delete", json!({"lfn": n.lfn, "wn": n.worker_node, "pilot": n.reporting_pilot}));
            self.tq.handle_deletion(&n);
        }
    }

    fn audit_host(&mut self, wn: WorkerId) {
        if !self.cfg.audit {
            return;
        }
        let store = &self.stores[wn.0 as usize];
        let caches = self
            .agents
            .iter()
            .filter(|a| a.host == wn && a.state != PilotState::Terminated)
            .filter_map(|a| a.cache.as_ref());
        let mut found = check_host_consistency(store, caches).err();
        if let Some(limit) = store.physical_limit() {
            if store.physical_bytes() > limit {
                found = Some(format!("{wn}: {} physical bytes above pooled bound {limit}", store.physical_bytes()));
            }
        }
        if let Some(e) = found {
            self.violation(e);
        }
    }

    fn ttl_expired(&self, agent: usize) -> bool {
        let p = &self.cfg.pilot;
        match (p.enforce_ttl, p.ttl, self.started_at[agent]) {
            (true, Some(ttl), Some(t0)) => self.now - t0 >= ttl,
            _ => false,
        }
    }

    fn request_job(&mut self, agent: usize) -> Result<()> {
        if self.agents[agent].state != PilotState::Idle {
            return Ok(());
        }
        if self.ttl_expired(agent) {
            return self.terminate(agent);
        }
        let mut req = self.agents[agent].job_request()?;
        if let (Some(ttl), Some(t0)) = (req.ttl, self.started_at[agent]) {
            req.ttl = Some((ttl - (self.now - t0)).max(0.0));
        }
        let result = self.tq.match_request(&req, self.now)?;
        match result {
            MatchResult::Assign(job) => {
                self.audit_assignment(agent, &job);
                self.start_attempt(agent, job)
            }
            MatchResult::NoWork | MatchResult::HeldForData(_) => {
                if let MatchResult::HeldForData(held) = &result {
                    self.record("held", json!({"pilot": req.pilot_id, "jobs": held}));
                }
                let wait = self.cfg.pilot.idle_backoff.sample(&mut self.rng.backoff).max(1e-3);
                self.events.schedule(self.now + wait, EventKind::PollBackoff { agent });
                Ok(())
            }
        }
    }

    /// Ground-truth files a pilot can read from cache.
    fn visible_truth(&self, agent: usize) -> BTreeSet<String> {
        let a = &self.agents[agent];
        match self.scope {
            CacheScope::SinglePilot => a.inventory().into_iter().map(|l| l.to_string()).collect(),
            CacheScope::PerHost => self.stores[a.host.0 as usize].files().map(|(l, _, _)| l.to_string()).collect(),
        }
    }

    /// Checks the assignment against the actual caches: the task queue's
    /// view must match, and a zero-score job must not go to this pilot while
    /// an idle pilot holding its data exists.
    fn audit_assignment(&mut self, agent: usize, job: &JobId) {
        if !self.cfg.audit {
            return;
        }
        let spec = self.tq.task(job).expect("assigned job").job.clone();
        let score = |files: &BTreeSet<String>| spec.inputs.iter().filter(|l| files.contains(l.as_str())).count();
        let mine = score(&self.visible_truth(agent));
        let rec = self.tq.match_log().last().expect("just matched").clone();
        if rec.score != mine {
            self.violation(format!("{job}: task queue score {} but caches give {mine}", rec.score));
        }
        if rec.score != rec.best_score {
            self.violation(format!("{job}: assigned score {} below best {}", rec.score, rec.best_score));
        }
        if mine == 0 && !spec.inputs.is_empty() && self.cfg.cache_scheme.wait_for_data() {
            let site = &self.agents[agent].site;
            let idle_holders = (0..self.agents.len())
                .filter(|&i| i != agent && self.agents[i].state == PilotState::Idle && self.agents[i].pilot_id.is_some())
                .filter(|_| spec.site_requirement.as_ref().is_none_or(|s| s == site))
                .filter(|&i| score(&self.visible_truth(i)) > 0)
                .count();
            if idle_holders > 0 {
                self.violation(format!("{job}: zero-score assignment while {idle_holders} idle pilots hold its data"));
            }
        }
    }

    fn input_sizes(&self, job: &JobSpec) -> Vec<u64> {
        job.inputs
            .iter()
            .map(|l| self.workload.spec.file_size(l).expect("validated workflow"))
            .collect()
    }

    fn next_attempt_no(&mut self, job: &JobId) -> u32 {
        let n = self.attempt_counter.entry(job.clone()).or_default();
        *n += 1;
        *n
    }

    fn start_attempt(&mut self, agent: usize, job_id: JobId) -> Result<()> {
        let entry = self.tq.task(&job_id).expect("assigned job");
        let (job, enqueue) = (entry.job.clone(), entry.enqueue_time);
        let attempt_no = self.next_attempt_no(&job_id);
        let sizes = self.input_sizes(&job);
        let wn = self.agents[agent].host;
        self.agents[agent].start_job(&job_id)?;
        let pid = self.agents[agent].pilot_id;
        self.record("assign", json!({"job": job_id, "pilot": pid, "wn": wn}));
        self.busy += 1;
        self.pilots.peak_busy = self.pilots.peak_busy.max(self.busy);
        self.set_running(1);
        self.last_progress = self.now;

        let mut report = JobReport::new(job_id.clone(), pid);
        let mut notices = Vec::new();
        {
            let ctx = SeContext {
                se: &self.se,
                draws: AccessDraws::new(self.cfg.seed, job_id.clone(), attempt_no),
                read_chunks: self.cfg.site.read_chunks,
            };
            self.agents[agent].stage_in(
                &job,
                &sizes,
                self.scope,
                &mut self.stores[wn.0 as usize],
                &ctx,
                self.cfg.pilot.local_read_fraction,
                &mut report,
                &mut notices,
                self.now,
            )?;
        }
        self.deliver_notices(notices);
        self.sync_inventory(agent)?;
        self.audit_host(wn);
        let t = self.now + report.stage_in;
        self.attempts[agent] = Some(Attempt {
            job,
            report,
            attempt: attempt_no,
            worker_node: wn,
            enqueue,
            start: self.now,
        });
        self.events.schedule(t, EventKind::StageInDone { runner: Runner::Pilot(agent) });
        Ok(())
    }

    fn attempt_mut(&mut self, runner: Runner) -> Result<&mut Attempt> {
        match runner {
            Runner::Pilot(a) => self.attempts[a].as_mut().ok_or_else(|| protocol("no attempt on pilot")),
            Runner::Direct(r) => Ok(&mut self.direct_runs[r].attempt),
        }
    }

    fn stage_in_done(&mut self, runner: Runner) -> Result<()> {
        if self.attempt_mut(runner)?.report.failure_stage.is_some() {
            return self.attempt_finished(runner, false);
        }
        let jitter = self.cfg.jobs.processing_jitter;
        let att = match runner {
            Runner::Pilot(a) => self.attempts[a].as_mut().expect("checked"),
            Runner::Direct(r) => &mut self.direct_runs[r].attempt,
        };
        let mean = att.job.processing_time;
        let p = if jitter > 0.0 && mean > 0.0 {
            Normal::new(mean, jitter * mean).expect("validated").sample(&mut self.rng.processing).max(0.0)
        } else {
            mean
        };
        att.report.processing = p;
        self.events.schedule(self.now + p, EventKind::ProcessingDone { runner });
        Ok(())
    }

    fn processing_done(&mut self, runner: Runner) -> Result<()> {
        let att = match runner {
            Runner::Pilot(a) => self.attempts[a].as_mut().ok_or_else(|| protocol("no attempt on pilot"))?,
            Runner::Direct(r) => &mut self.direct_runs[r].attempt,
        };
        let ctx = SeContext {
            se: &self.se,
            draws: AccessDraws::new(self.cfg.seed, att.job.job_id.clone(), att.attempt),
            read_chunks: self.cfg.site.read_chunks,
        };
        write_outputs(&att.job.outputs, &ctx, &mut att.report);
        let t = self.now + att.report.stage_out;
        self.events.schedule(t, EventKind::StageOutDone { runner });
        Ok(())
    }

    fn stage_out_done(&mut self, runner: Runner) -> Result<()> {
        let ok = self.attempt_mut(runner)?.report.failure_stage.is_none();
        self.attempt_finished(runner, ok)
    }

    fn account(&mut self, att: &Attempt, success: bool, runner: String) {
        let r = &att.report;
        let mut c = CacheCounters::default();
        for a in &r.accesses {
            match a.resolution {
                Resolution::LocalHit => {
                    c.local_hits += 1;
                    c.hit_bytes += a.size;
                }
                Resolution::PeerHit => {
                    c.peer_hits += 1;
                    c.hit_bytes += a.size;
                }
                Resolution::SePath => {
                    c.se_reads += 1;
                    c.se_bytes += a.size;
                }
            }
        }
        self.cache.add(&c);
        self.cache_by_step.entry(att.job.step).or_default().add(&c);
        self.se_ops.reads += u64::from(r.se_reads);
        self.se_ops.read_failures += u64::from(r.se_read_failures);
        self.se_ops.writes += u64::from(r.se_writes);
        self.se_ops.write_failures += u64::from(r.se_write_failures);
        match r.failure_stage {
            Some(FailureStage::StageIn) => self.failures.stage_in += 1,
            Some(FailureStage::StageOut) => self.failures.stage_out += 1,
            None => {}
        }
        self.records.push(AttemptRecord {
            job_id: att.job.job_id.to_string(),
            step: att.job.step,
            attempt: att.attempt,
            runner,
            worker_node: att.worker_node.0,
            enqueue: att.enqueue,
            start: att.start,
            end: self.now,
            stage_in: r.stage_in,
            processing: r.processing,
            stage_out: r.stage_out,
            success,
            failure_stage: r.failure_stage,
            cache: c,
        });
        self.set_running(-1);
        self.last_progress = self.now;
    }

    fn attempt_finished(&mut self, runner: Runner, success: bool) -> Result<()> {
        match runner {
            Runner::Pilot(agent) => self.pilot_attempt_finished(agent, success),
            Runner::Direct(run) => self.direct_attempt_finished(run, success),
        }
    }

    fn pilot_attempt_finished(&mut self, agent: usize, success: bool) -> Result<()> {
        let att = self.attempts[agent].take().ok_or_else(|| protocol("no attempt on pilot"))?;
        let pid = self.agents[agent].id()?;
        self.account(&att, success, pid.to_string());
        self.busy -= 1;

        let wn = att.worker_node;
        let w = wn.0 as usize;
        let fresh: Vec<&LogicalFile> = att.job.outputs.iter().filter(|o| !self.stores[w].contains(&o.lfn)).collect();
        let fresh: Vec<LogicalFile> = fresh.into_iter().cloned().collect();
        let notices = self.agents[agent].end_job(success.then_some(att.job.outputs.as_slice()), &mut self.stores[w], self.now)?;
        for o in fresh {
            if self.stores[w].contains(&o.lfn) {
                *self.file_creations.entry((wn, o.lfn.to_string())).or_default() += 1;
            }
        }
        self.deliver_notices(notices);
        self.sync_inventory(agent)?;
        self.audit_host(wn);

        let outcome = self.tq.report_completion(&att.job.job_id, pid, success, &mut self.workload, self.now)?;
        self.last_notification = self.now;
        self.record(
            "complete",
            json!({"job": att.job.job_id, "pilot": pid, "success": success, "requeued": outcome.requeued, "failed_out": outcome.failed_out}),
        );
        if outcome.failed_out {
            self.failures.failed_out += 1;
        }
        for j in &outcome.enqueued {
            self.record("enqueue", json!({"job": j}));
        }
        let t = self.now + self.cfg.pilot.request_delay;
        self.events.schedule(t, EventKind::JobRequest { agent });
        Ok(())
    }

    fn heartbeat(&mut self, agent: usize) -> Result<()> {
        if !matches!(self.agents[agent].state, PilotState::Idle | PilotState::Busy) {
            return Ok(());
        }
        for (pid, job) in self.tq.expire(self.now)? {
            self.record("expired", json!({"pilot": pid, "job": job}));
            let alive = self
                .agents
                .iter()
                .any(|a| a.pilot_id == Some(pid) && a.state != PilotState::Terminated);
            if alive {
                self.violation(format!("{pid} declared dead while running"));
            }
            if job.is_some() {
                self.last_progress = self.now;
            }
        }
        let wn = self.agents[agent].host;
        let w = wn.0 as usize;
        self.agents[agent].heartbeat(&mut self.tq, &self.stores[w], self.now)?;
        let mut notices = Vec::new();
        let linked = self.agents[agent].poll_peers(self.scope, &mut self.stores[w], &mut notices, self.now)?;
        if !linked.is_empty() {
            self.record("linked", json!({"agent": agent, "files": linked.len()}));
        }
        self.deliver_notices(notices);
        self.sync_inventory(agent)?;
        self.audit_host(wn);
        let hb = self.cfg.pilot.heartbeat_interval;
        self.events.schedule(self.now + hb, EventKind::Heartbeat { agent });
        Ok(())
    }

    fn terminate(&mut self, agent: usize) -> Result<()> {
        let wn = self.agents[agent].host;
        let w = wn.0 as usize;
        let registered = self.agents[agent].pilot_id;
        let notices = self.agents[agent].terminate(&mut self.stores[w])?;
        self.record("terminate", json!({"agent": agent, "pilot": registered}));
        self.deliver_notices(notices);
        if let Some(id) = registered {
            if self.tq.pilot(id).is_some_and(|p| p.state != crate::taskqueue::PilotStatus::Dead) {
                self.tq.update_inventory(id, BTreeSet::new())?;
            }
        }
        self.pilots_on_host[w] -= 1;
        if registered.is_some() {
            self.refresh_capacity(wn)?;
        }
        if let Some(next) = self.waiting_for_slot.pop_front() {
            self.events.schedule(self.now, EventKind::PilotStart { agent: next });
        }
        Ok(())
    }

    fn monitor_tick(&mut self) -> Result<()> {
        let mut stats = SitePilotStats::default();
        for a in &self.agents {
            match a.state {
                PilotState::Inactive => stats.inactive += 1,
                PilotState::Idle => stats.idle += 1,
                PilotState::Busy => stats.busy += 1,
                PilotState::Terminated => {}
            }
        }
        stats.submitted = stats.inactive + stats.idle + stats.busy;
        let site = self.cfg.site.site_name.clone();
        let runnable = self.tq.query_runnable(&site);
        let monitor = self.monitor.as_mut().expect("on-demand mode");
        let decisions = monitor.tick(&[SiteSnapshot { site, stats, runnable }], self.now);
        let n = decisions.first().map_or(0, |d| d.1);
        self.record("tick", json!({"submitted": stats.submitted, "idle": stats.idle, "runnable": runnable.total, "submit": n}));
        let starts = self.manager.submit_pilots(n, self.now, &mut self.rng.pilot_queue);
        for t in starts {
            let agent = self.new_agent();
            self.events.schedule(t, EventKind::PilotStart { agent });
        }
        let alive = self.alive_pilots() as u64;
        self.pilots.max_submitted = self.pilots.max_submitted.max(alive);
        if self.ticks >= 1 {
            let m = self.pilots.min_submitted_after_first_tick.get_or_insert(alive);
            *m = (*m).min(alive);
        }
        self.ticks += 1;
        let dt = self.cfg.thresholds.tick_interval;
        self.events.schedule(self.now + dt, EventKind::MonitorTick);
        Ok(())
    }

    // ---- direct submission ----

    fn submit_direct(&mut self, job: JobSpec, enqueue: f64) {
        let idx = match self.direct_index.get(&job.job_id) {
            Some(&i) => i,
            None => {
                self.direct_tasks.push(DirectTask {
                    job: job.clone(),
                    state: DirectState::Submitted,
                    retries_used: 0,
                    enqueue,
                });
                self.direct_index.insert(job.job_id.clone(), self.direct_tasks.len() - 1);
                self.direct_tasks.len() - 1
            }
        };
        self.direct_tasks[idx].state = DirectState::Submitted;
        self.direct_tasks[idx].enqueue = enqueue;
        self.record("submit", json!({"job": job.job_id}));
        let delay = self.cfg.site.direct_submit_delay.sample(&mut self.rng.direct_submit);
        self.events.schedule(self.now + delay, EventKind::DirectJobStart { job: idx });
    }

    fn direct_start(&mut self, task: usize) {
        let slots = self.cfg.site.slots_per_worker;
        let free = (0..self.direct_running.len())
            .filter(|&w| self.direct_running[w] < slots)
            .min_by_key(|&w| (self.direct_running[w], w));
        let Some(w) = free else {
            self.direct_waiting.push_back(task);
            return;
        };
        self.direct_running[w] += 1;
        let t = &mut self.direct_tasks[task];
        t.state = DirectState::Running;
        let job = t.job.clone();
        let enqueue = t.enqueue;
        let attempt_no = self.next_attempt_no(&job.job_id);
        let sizes = self.input_sizes(&job);
        self.record("start", json!({"job": job.job_id, "wn": w}));
        self.set_running(1);
        self.last_progress = self.now;

        let mut report = JobReport::new(job.job_id.clone(), None);
        let ctx = SeContext {
            se: &self.se,
            draws: AccessDraws::new(self.cfg.seed, job.job_id.clone(), attempt_no),
            read_chunks: self.cfg.site.read_chunks,
        };
        for (lfn, size) in job.inputs.iter().zip(sizes) {
            let (ok, elapsed, reads, failed) = read_from_se(&ctx, lfn, size);
            report.stage_in += elapsed;
            report.se_reads += reads;
            report.se_read_failures += failed;
            report.accesses.push(InputAccess {
                lfn: lfn.clone(),
                size,
                resolution: Resolution::SePath,
                ok,
            });
            if !ok {
                report.failure_stage = Some(FailureStage::StageIn);
                break;
            }
        }
        let end = self.now + report.stage_in;
        self.direct_runs.push(DirectRun {
            task,
            attempt: Attempt {
                job,
                report,
                attempt: attempt_no,
                worker_node: WorkerId(w as u32),
                enqueue,
                start: self.now,
            },
            success: false,
        });
        let runner = Runner::Direct(self.direct_runs.len() - 1);
        self.events.schedule(end, EventKind::StageInDone { runner });
    }

    fn direct_attempt_finished(&mut self, run: usize, success: bool) -> Result<()> {
        let att = self.direct_runs[run].attempt.clone();
        self.direct_runs[run].success = success;
        self.account(&att, success, format!("direct-{run}"));
        self.direct_running[att.worker_node.0 as usize] -= 1;
        self.direct_tasks[self.direct_runs[run].task].state = DirectState::Notifying;
        let delay = self.cfg.site.completion_notify_delay.sample(&mut self.rng.direct_notify);
        self.events.schedule(self.now + delay, EventKind::DirectNotifyDone { run });
        if let Some(next) = self.direct_waiting.pop_front() {
            self.direct_start(next);
        }
        Ok(())
    }

    fn direct_notify(&mut self, run: usize) -> Result<()> {
        let DirectRun { task, success, .. } = self.direct_runs[run].clone();
        self.last_notification = self.now;
        self.last_progress = self.now;
        let job = self.direct_tasks[task].job.clone();
        self.record("notify", json!({"job": job.job_id, "success": success}));
        if success {
            self.direct_tasks[task].state = DirectState::Done;
            let outputs: Vec<_> = job.outputs.iter().map(|o| o.lfn.clone()).collect();
            for next in self.workload.on_files_available(&outputs)? {
                self.submit_direct(next, self.now);
            }
        } else if self.direct_tasks[task].retries_used < job.max_retries {
            self.direct_tasks[task].retries_used += 1;
            self.submit_direct(job, self.now);
        } else {
            self.direct_tasks[task].state = DirectState::Failed;
            self.failures.failed_out += 1;
        }
        Ok(())
    }

    // ---- results ----

    fn jobs_done(&self) -> u64 {
        match self.cfg.submission_mode {
            SubmissionMode::Direct => self.direct_tasks.iter().filter(|t| t.state == DirectState::Done).count() as u64,
            _ => self.tq.tasks().filter(|t| t.state == TaskState::Done).count() as u64,
        }
    }

    fn final_audit(&mut self) {
        if !self.cfg.audit {
            return;
        }
        for w in 0..self.stores.len() {
            self.audit_host(WorkerId(w as u32));
        }
        let mut keys: BTreeSet<(WorkerId, String)> = self.file_creations.keys().cloned().collect();
        keys.extend(self.file_notices.keys().cloned());
        for key in keys {
            let created = self.file_creations.get(&key).copied().unwrap_or(0);
            let noticed = self.file_notices.get(&key).copied().unwrap_or(0);
            let present = u64::from(self.stores[key.0 .0 as usize].contains(&crate::workload::Lfn::new(key.1.clone())));
            if noticed + present != created {
                self.violation(format!("{} on {}: {created} creations, {noticed} deletion notices", key.1, key.0));
            }
        }
        for rec in self.tq.match_log().iter().filter(|r| r.job_id.is_some()) {
            if rec.score != rec.best_score {
                let msg = format!("match log: {} assigned below best score", rec.pilot_id);
                self.violations.push(msg);
            }
        }
    }

    fn finish(mut self, outcome: Outcome, diagnostic: Option<String>) -> RunOutput {
        self.final_audit();
        let cfg = self.cfg;
        let mut per_job: BTreeMap<String, JobMetrics> = BTreeMap::new();
        for a in &self.records {
            let m = per_job.entry(a.job_id.clone()).or_insert_with(|| JobMetrics {
                job_id: a.job_id.clone(),
                step: a.step,
                queue_wait: 0.0,
                stage_in_total: 0.0,
                processing: 0.0,
                stage_out: 0.0,
                retries: 0,
                done: false,
            });
            m.queue_wait += a.queue_wait();
            m.stage_in_total += a.stage_in;
            m.processing += a.processing;
            m.stage_out += a.stage_out;
            m.done |= a.success;
            if a.attempt > 1 {
                m.retries += 1;
            }
        }
        let jobs_total = self.workload.spec.jobs().len() as u64;
        let jobs_done = self.jobs_done();
        let jobs_failed = self.failures.failed_out;
        let digest = hex(&self.log.hasher.clone().finalize());
        let cell = CellKey {
            workflow: cfg.workflow.label(),
            se_condition: cfg.se_condition.label(),
            scheme: cfg.cache_scheme.label().to_string(),
            mode: cfg.submission_mode.to_string(),
        };
        let config_digest = cfg.digest();
        let run_id = format!(
            "{}_{}_{}_{}_s{}",
            cell.workflow,
            cell.se_condition,
            cell.scheme,
            cell.mode.replace(['(', ')'], ""),
            cfg.seed
        );
        let report = MetricsReport {
            run: RunInfo {
                run_id,
                cell,
                seed: cfg.seed,
                config_digest,
            },
            outcome,
            diagnostic,
            turnaround: self.last_notification,
            end_time: self.now,
            jobs_total,
            jobs_done,
            jobs_failed,
            per_job: per_job.into_values().collect(),
            attempts: self.records,
            running_jobs: self.running_series,
            cache: self.cache,
            cache_by_step: self.cache_by_step,
            se_ops: self.se_ops,
            failures: self.failures,
            pilots: self.pilots,
            audit_violations: self.violations,
            events_processed: self.log.count,
            event_log_digest: digest,
        };
        RunOutput {
            report,
            event_log: self.log.lines,
            match_log: self.tq.match_log().to_vec(),
            monitor_log: self.monitor.map(|m| m.log().to_vec()).unwrap_or_default(),
        }
    }
}
