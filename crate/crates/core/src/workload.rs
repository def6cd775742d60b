//! Workflows, jobs and logical files.
//!
//! A workflow is a DAG of data-driven jobs: a job becomes runnable exactly
//! when every logical file it reads exists. Jobs are grouped in steps; a
//! step-0 job reads files already resident on the storage element, a step-k
//! job reads outputs of step-(k-1) jobs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};
use crate::{GB, MB};

/// Logical file name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lfn(String);

impl Lfn {
    pub fn new(name: impl Into<String>) -> Self {
        Lfn(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Lfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Lfn {
    fn from(s: &str) -> Self {
        Lfn(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(String);

impl JobId {
    pub fn new(id: impl Into<String>) -> Self {
        JobId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for JobId {
    fn from(s: &str) -> Self {
        JobId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalFile {
    pub lfn: Lfn,
    pub size: u64,
}

impl LogicalFile {
    pub fn new(lfn: impl Into<String>, size: u64) -> Self {
        LogicalFile {
            lfn: Lfn::new(lfn),
            size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: JobId,
    pub step: u32,
    pub inputs: Vec<Lfn>,
    pub outputs: Vec<LogicalFile>,
    /// Simulated seconds of CPU work once all inputs are staged in.
    pub processing_time: f64,
    pub site_requirement: Option<String>,
    pub max_retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowKind {
    Chain,
    Split,
    Merge,
    Tier0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileInfo {
    pub size: u64,
    /// Index of the producing job; `None` for files resident on the SE before
    /// the workflow starts.
    pub producer: Option<usize>,
}

/// A validated workflow DAG.
#[derive(Debug, Clone)]
pub struct WorkflowSpec {
    kind: WorkflowKind,
    jobs: Vec<JobSpec>,
    external: Vec<LogicalFile>,
    files: BTreeMap<Lfn, FileInfo>,
    consumers: BTreeMap<Lfn, Vec<usize>>,
    index: BTreeMap<JobId, usize>,
}

impl WorkflowSpec {
    /// Builds a workflow from its jobs and the SE-resident files the first
    /// step reads, checking every structural invariant.
    pub fn new(kind: WorkflowKind, jobs: Vec<JobSpec>, external: Vec<LogicalFile>) -> Result<Self> {
        let mut files = BTreeMap::new();
        for f in &external {
            if f.size == 0 {
                return Err(invalid_param(format!("file {} has zero size", f.lfn)));
            }
            if files
                .insert(f.lfn.clone(), FileInfo { size: f.size, producer: None })
                .is_some()
            {
                return Err(invalid_param(format!("duplicate lfn {}", f.lfn)));
            }
        }
        let mut index = BTreeMap::new();
        for (i, job) in jobs.iter().enumerate() {
            if index.insert(job.job_id.clone(), i).is_some() {
                return Err(invalid_param(format!("duplicate job id {}", job.job_id)));
            }
            if !(job.processing_time >= 0.0 && job.processing_time.is_finite()) {
                return Err(invalid_param(format!("job {} has invalid processing time", job.job_id)));
            }
            for out in &job.outputs {
                if out.size == 0 {
                    return Err(invalid_param(format!("file {} has zero size", out.lfn)));
                }
                if files
                    .insert(out.lfn.clone(), FileInfo { size: out.size, producer: Some(i) })
                    .is_some()
                {
                    return Err(invalid_param(format!("duplicate lfn {}", out.lfn)));
                }
            }
        }

        let mut consumers: BTreeMap<Lfn, Vec<usize>> = BTreeMap::new();
        for (i, job) in jobs.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for input in &job.inputs {
                if !seen.insert(input) {
                    return Err(invalid_param(format!("job {} lists input {} twice", job.job_id, input)));
                }
                if job.outputs.iter().any(|o| &o.lfn == input) {
                    return Err(invalid_param(format!(
                        "job {} lists {} as both input and output",
                        job.job_id, input
                    )));
                }
                let info = files
                    .get(input)
                    .ok_or_else(|| invalid_param(format!("job {} reads unknown file {}", job.job_id, input)))?;
                match (job.step, info.producer) {
                    (0, None) => {}
                    (0, Some(_)) => {
                        return Err(invalid_param(format!(
                            "step-0 job {} reads produced file {}",
                            job.job_id, input
                        )))
                    }
                    (_, None) => {
                        return Err(invalid_param(format!(
                            "job {} in step {} reads SE-resident file {}",
                            job.job_id, job.step, input
                        )))
                    }
                    (k, Some(p)) if jobs[p].step + 1 != k => {
                        return Err(invalid_param(format!(
                            "job {} in step {} reads {} produced in step {}",
                            job.job_id, k, input, jobs[p].step
                        )))
                    }
                    _ => {}
                }
                consumers.entry(input.clone()).or_default().push(i);
            }
        }

        let spec = WorkflowSpec {
            kind,
            jobs,
            external,
            files,
            consumers,
            index,
        };
        if spec.topological_order().is_none() {
            return Err(invalid_param("dependency graph has a cycle"));
        }
        Ok(spec)
    }

    pub fn kind(&self) -> WorkflowKind {
        self.kind
    }

    pub fn jobs(&self) -> &[JobSpec] {
        &self.jobs
    }

    pub fn job(&self, id: &JobId) -> Option<&JobSpec> {
        self.index.get(id).map(|&i| &self.jobs[i])
    }

    pub fn job_index(&self, id: &JobId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn external_files(&self) -> &[LogicalFile] {
        &self.external
    }

    pub fn file(&self, lfn: &Lfn) -> Option<&FileInfo> {
        self.files.get(lfn)
    }

    pub fn file_size(&self, lfn: &Lfn) -> Option<u64> {
        self.files.get(lfn).map(|f| f.size)
    }

    pub fn contains_file(&self, lfn: &Lfn) -> bool {
        self.files.contains_key(lfn)
    }

    /// Jobs reading `lfn`, in workflow order.
    pub fn consumers(&self, lfn: &Lfn) -> &[usize] {
        self.consumers.get(lfn).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Producer-to-consumer job edges, one per (producer, consumer) pair.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for (i, job) in self.jobs.iter().enumerate() {
            for input in &job.inputs {
                if let Some(p) = self.files[input].producer {
                    edges.insert((p, i));
                }
            }
        }
        edges
    }

    /// Kahn's algorithm; `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let edges = self.edges();
        let mut indegree = vec![0usize; self.jobs.len()];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.jobs.len()];
        for &(p, c) in &edges {
            indegree[c] += 1;
            out[p].push(c);
        }
        let mut queue: VecDeque<usize> = (0..self.jobs.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.jobs.len());
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &c in &out[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        (order.len() == self.jobs.len()).then_some(order)
    }

    pub fn num_steps(&self) -> u32 {
        self.jobs.iter().map(|j| j.step + 1).max().unwrap_or(0)
    }

    /// Bytes the workflow needs from the SE before any job runs.
    pub fn total_input_bytes(&self) -> u64 {
        self.external.iter().map(|f| f.size).sum()
    }

    /// Bytes written by all jobs together.
    pub fn total_output_bytes(&self) -> u64 {
        self.jobs.iter().flat_map(|j| &j.outputs).map(|o| o.size).sum()
    }
}

/// Per-job parameters shared by every generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobDefaults {
    /// Seconds of processing per job.
    pub processing_time: f64,
    /// Overrides of `processing_time` by step index.
    pub processing_time_per_step: BTreeMap<u32, f64>,
    /// Size of each SE-resident step-0 input; `None` means the generator's
    /// output file size.
    pub input_size: Option<u64>,
    pub max_retries: u32,
    pub site_requirement: Option<String>,
}

impl Default for JobDefaults {
    fn default() -> Self {
        JobDefaults {
            processing_time: 300.0,
            processing_time_per_step: BTreeMap::new(),
            input_size: None,
            max_retries: 10,
            site_requirement: None,
        }
    }
}

impl JobDefaults {
    pub fn processing_for(&self, step: u32) -> f64 {
        self.processing_time_per_step
            .get(&step)
            .copied()
            .unwrap_or(self.processing_time)
    }
}

/// How a split workflow's step-0 job feeds its step-1 consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitOutputs {
    /// One output file read by every consumer.
    #[default]
    Shared,
    /// One output file per consumer.
    PerConsumer,
}

/// Sizes and counts of the six-level Repacker / PromptReco / AlcaReco DAG.
///
/// Job counts per level are `repacker_jobs`, then divided by each merge
/// fan-in in turn; the processing level after a merge has one job per merged
/// file. Byte totals are split evenly (remainder bytes go to the first files)
/// and each merge output is the sum of the files it merges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tier0Params {
    pub repacker_jobs: usize,
    pub repacker_merge_fanin: usize,
    pub promptreco_merge_fanin: usize,
    pub alcareco_merge_fanin: usize,
    pub raw_input_bytes: u64,
    pub repacker_output_bytes: u64,
    pub promptreco_output_bytes: u64,
    pub alcareco_output_bytes: u64,
}

impl Tier0Params {
    /// 96 + 24 + 24 + 12 + 12 + 4 = 172 jobs, 83.41 GB read from the SE and
    /// 40 + 40 + 12 + 12 + 4 + 4 = 112 GB written.
    pub fn preset() -> Self {
        Tier0Params {
            repacker_jobs: 96,
            repacker_merge_fanin: 4,
            promptreco_merge_fanin: 2,
            alcareco_merge_fanin: 3,
            raw_input_bytes: 83_410 * MB,
            repacker_output_bytes: 40 * GB,
            promptreco_output_bytes: 12 * GB,
            alcareco_output_bytes: 4 * GB,
        }
    }

    /// One job per level, fan-in 1: a six-job chain.
    pub fn minimal() -> Self {
        Tier0Params {
            repacker_jobs: 1,
            repacker_merge_fanin: 1,
            promptreco_merge_fanin: 1,
            alcareco_merge_fanin: 1,
            raw_input_bytes: GB,
            repacker_output_bytes: GB,
            promptreco_output_bytes: 500 * MB,
            alcareco_output_bytes: 100 * MB,
        }
    }
}

/// Splits `total` into `n` integer parts differing by at most one byte.
fn split_bytes(total: u64, n: usize) -> Vec<u64> {
    let n64 = n as u64;
    let (q, r) = (total / n64, total % n64);
    (0..n64).map(|i| if i < r { q + 1 } else { q }).collect()
}

#[derive(Debug, Clone, Default)]
pub struct WorkflowGenerator {
    pub defaults: JobDefaults,
}

impl WorkflowGenerator {
    pub fn new(defaults: JobDefaults) -> Self {
        WorkflowGenerator { defaults }
    }

    fn job(&self, id: String, step: u32, inputs: Vec<Lfn>, outputs: Vec<LogicalFile>) -> JobSpec {
        JobSpec {
            job_id: JobId(id),
            step,
            inputs,
            outputs,
            processing_time: self.defaults.processing_for(step),
            site_requirement: self.defaults.site_requirement.clone(),
            max_retries: self.defaults.max_retries,
        }
    }

    /// `n` step-0 jobs, each read by exactly one step-1 job.
    pub fn chain(&self, n: usize, file_size: u64) -> Result<WorkflowSpec> {
        if n == 0 {
            return Err(invalid_param("chain needs at least one job per step"));
        }
        let mut wf = self.split(n, 1, file_size, SplitOutputs::Shared)?;
        wf.kind = WorkflowKind::Chain;
        Ok(wf)
    }

    /// `n_step0` step-0 jobs; every step-0 job feeds `fanout` step-1 jobs.
    pub fn split(&self, n_step0: usize, fanout: usize, file_size: u64, outputs: SplitOutputs) -> Result<WorkflowSpec> {
        if n_step0 == 0 || fanout == 0 {
            return Err(invalid_param("split needs non-zero job count and fanout"));
        }
        if file_size == 0 {
            return Err(invalid_param("file size must be positive"));
        }
        let (external, mut jobs) = self.step0(n_step0, file_size, |k| match outputs {
            SplitOutputs::Shared => vec![LogicalFile::new(format!("s0-{k:04}.out"), file_size)],
            SplitOutputs::PerConsumer => (0..fanout)
                .map(|i| LogicalFile::new(format!("s0-{k:04}.out{i}"), file_size))
                .collect(),
        });
        for k in 0..n_step0 {
            for i in 0..fanout {
                let input = jobs[k].outputs[match outputs {
                    SplitOutputs::Shared => 0,
                    SplitOutputs::PerConsumer => i,
                }]
                .lfn
                .clone();
                let idx = k * fanout + i;
                jobs.push(self.job(
                    format!("s1-{idx:04}"),
                    1,
                    vec![input],
                    vec![LogicalFile::new(format!("s1-{idx:04}.out"), file_size)],
                ));
            }
        }
        WorkflowSpec::new(WorkflowKind::Split, jobs, external)
    }

    /// `n_step0` step-0 jobs merged `fanin` at a time: step-1 job `k` reads
    /// the outputs of step-0 jobs `fanin*k .. fanin*k + fanin - 1`.
    pub fn merge(&self, n_step0: usize, fanin: usize, file_size: u64) -> Result<WorkflowSpec> {
        if n_step0 == 0 || fanin == 0 {
            return Err(invalid_param("merge needs non-zero job count and fan-in"));
        }
        if n_step0 % fanin != 0 {
            return Err(invalid_param(format!(
                "{n_step0} step-0 jobs cannot be merged {fanin} at a time"
            )));
        }
        if file_size == 0 {
            return Err(invalid_param("file size must be positive"));
        }
        let (external, mut jobs) = self.step0(n_step0, file_size, |k| {
            vec![LogicalFile::new(format!("s0-{k:04}.out"), file_size)]
        });
        for k in 0..n_step0 / fanin {
            let inputs = (fanin * k..fanin * (k + 1))
                .map(|j| jobs[j].outputs[0].lfn.clone())
                .collect();
            jobs.push(self.job(
                format!("s1-{k:04}"),
                1,
                inputs,
                vec![LogicalFile::new(format!("s1-{k:04}.out"), file_size)],
            ));
        }
        WorkflowSpec::new(WorkflowKind::Merge, jobs, external)
    }

    fn step0(
        &self,
        n: usize,
        file_size: u64,
        outputs: impl Fn(usize) -> Vec<LogicalFile>,
    ) -> (Vec<LogicalFile>, Vec<JobSpec>) {
        let input_size = self.defaults.input_size.unwrap_or(file_size);
        let external: Vec<LogicalFile> = (0..n)
            .map(|k| LogicalFile::new(format!("raw-{k:04}"), input_size))
            .collect();
        let jobs = (0..n)
            .map(|k| self.job(format!("s0-{k:04}"), 0, vec![external[k].lfn.clone()], outputs(k)))
            .collect();
        (external, jobs)
    }

    pub fn tier0(&self, p: &Tier0Params) -> Result<WorkflowSpec> {
        let fanins = [p.repacker_merge_fanin, p.promptreco_merge_fanin, p.alcareco_merge_fanin];
        if p.repacker_jobs == 0 || fanins.contains(&0) {
            return Err(invalid_param("tier0 counts and fan-ins must be positive"));
        }
        let mut count = p.repacker_jobs;
        for f in fanins {
            if count % f != 0 {
                return Err(invalid_param(format!("{count} jobs cannot be merged {f} at a time")));
            }
            count /= f;
        }
        let repack = p.repacker_jobs;
        let reco = repack / p.repacker_merge_fanin;
        let alca = reco / p.promptreco_merge_fanin;
        let too_small = [
            (p.raw_input_bytes, repack),
            (p.repacker_output_bytes, repack),
            (p.promptreco_output_bytes, reco),
            (p.alcareco_output_bytes, alca),
        ]
        .iter()
        .any(|&(bytes, n)| bytes < n as u64);
        if too_small {
            return Err(invalid_param("tier0 byte totals too small for the job counts"));
        }

        let external: Vec<LogicalFile> = split_bytes(p.raw_input_bytes, repack)
            .into_iter()
            .enumerate()
            .map(|(k, s)| LogicalFile::new(format!("streamer-{k:04}"), s))
            .collect();
        let mut jobs = Vec::new();
        let mut prev: Vec<LogicalFile> = external.clone();
        let levels = [
            ("repack", Some(p.repacker_output_bytes), 1),
            ("repack-merge", None, p.repacker_merge_fanin),
            ("reco", Some(p.promptreco_output_bytes), 1),
            ("reco-merge", None, p.promptreco_merge_fanin),
            ("alca", Some(p.alcareco_output_bytes), 1),
            ("alca-merge", None, p.alcareco_merge_fanin),
        ];
        for (step, (name, processed_bytes, fanin)) in levels.into_iter().enumerate() {
            let n = prev.len() / fanin;
            let sizes: Vec<u64> = match processed_bytes {
                Some(total) => split_bytes(total, n),
                None => prev.chunks(fanin).map(|g| g.iter().map(|f| f.size).sum()).collect(),
            };
            let mut next = Vec::with_capacity(n);
            for (k, (group, size)) in prev.chunks(fanin).zip(sizes).enumerate() {
                let out = LogicalFile::new(format!("{name}-{k:04}.root"), size);
                jobs.push(self.job(
                    format!("{name}-{k:04}"),
                    step as u32,
                    group.iter().map(|f| f.lfn.clone()).collect(),
                    vec![out.clone()],
                ));
                next.push(out);
            }
            prev = next;
        }
        WorkflowSpec::new(WorkflowKind::Tier0, jobs, external)
    }
}

pub fn generate_chain(n: usize, file_size: u64) -> Result<WorkflowSpec> {
    WorkflowGenerator::default().chain(n, file_size)
}

pub fn generate_split(n_step0: usize, fanout: usize, file_size: u64) -> Result<WorkflowSpec> {
    WorkflowGenerator::default().split(n_step0, fanout, file_size, SplitOutputs::Shared)
}

pub fn generate_merge(n_step0: usize, fanin: usize, file_size: u64) -> Result<WorkflowSpec> {
    WorkflowGenerator::default().merge(n_step0, fanin, file_size)
}

pub fn generate_tier0(params: &Tier0Params) -> Result<WorkflowSpec> {
    WorkflowGenerator::default().tier0(params)
}

/// Data-driven readiness: which jobs have every input available.
#[derive(Debug, Clone, Default)]
pub struct ReadinessTracker {
    completed_files: BTreeSet<Lfn>,
    dispatched: BTreeSet<JobId>,
    primed: bool,
}

impl ReadinessTracker {
    /// SE-resident files of `workflow` count as available from the start.
    pub fn new(workflow: &WorkflowSpec) -> Self {
        ReadinessTracker {
            completed_files: workflow.external.iter().map(|f| f.lfn.clone()).collect(),
            dispatched: BTreeSet::new(),
            primed: false,
        }
    }

    pub fn is_available(&self, lfn: &Lfn) -> bool {
        self.completed_files.contains(lfn)
    }

    pub fn is_dispatched(&self, job: &JobId) -> bool {
        self.dispatched.contains(job)
    }

    pub fn dispatched_count(&self) -> usize {
        self.dispatched.len()
    }

    /// Records `newly_completed` and returns, in workflow order, every job not
    /// yet dispatched whose inputs are now all available, marking them
    /// dispatched. The first call also returns every job whose inputs were
    /// available from the start.
    pub fn ready_jobs<'w>(&mut self, workflow: &'w WorkflowSpec, newly_completed: &[Lfn]) -> Result<Vec<&'w JobSpec>> {
        if let Some(unknown) = newly_completed.iter().find(|l| !workflow.contains_file(l)) {
            return Err(invalid_param(format!("unknown lfn {unknown}")));
        }
        self.completed_files.extend(newly_completed.iter().cloned());

        let candidates: BTreeSet<usize> = if self.primed {
            newly_completed
                .iter()
                .flat_map(|l| workflow.consumers(l).iter().copied())
                .collect()
        } else {
            self.primed = true;
            (0..workflow.jobs.len()).collect()
        };
        let mut ready = Vec::new();
        for i in candidates {
            let job = &workflow.jobs[i];
            if self.dispatched.contains(&job.job_id) {
                continue;
            }
            if job.inputs.iter().all(|l| self.completed_files.contains(l)) {
                self.dispatched.insert(job.job_id.clone());
                ready.push(job);
            }
        }
        Ok(ready)
    }
}

/// A workflow together with its readiness state, as owned by a simulation.
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkflowSpec,
    pub tracker: ReadinessTracker,
}

impl Workload {
    pub fn new(spec: WorkflowSpec) -> Self {
        let tracker = ReadinessTracker::new(&spec);
        Workload { spec, tracker }
    }

    /// Feeds produced files to the tracker and returns owned copies of the
    /// newly runnable jobs.
    pub fn on_files_available(&mut self, lfns: &[Lfn]) -> Result<Vec<JobSpec>> {
        Ok(self
            .tracker
            .ready_jobs(&self.spec, lfns)?
            .into_iter()
            .cloned()
            .collect())
    }
}
