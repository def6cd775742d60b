//! Per-run measurements, ratios, aggregation across seeds, and CSV output.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_param, Result};
use crate::pilot::FailureStage;

/// Coordinates of a run in the experiment matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub workflow: String,
    pub se_condition: String,
    pub scheme: String,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub cell: CellKey,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Every job finished successfully.
    Complete,
    /// Some job ran out of retries.
    Incomplete,
    /// Work remained but nothing could make progress.
    Deadlocked,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub local_hits: u64,
    pub peer_hits: u64,
    pub se_reads: u64,
    pub hit_bytes: u64,
    pub se_bytes: u64,
}

impl CacheCounters {
    pub fn accesses(&self) -> u64 {
        self.local_hits + self.peer_hits + self.se_reads
    }

    pub fn hit_ratio(&self) -> Option<f64> {
        let n = self.accesses();
        (n > 0).then(|| (self.local_hits + self.peer_hits) as f64 / n as f64)
    }

    pub fn byte_ratio(&self) -> Option<f64> {
        let n = self.hit_bytes + self.se_bytes;
        (n > 0).then(|| self.hit_bytes as f64 / n as f64)
    }

    pub fn add(&mut self, other: &CacheCounters) {
        self.local_hits += other.local_hits;
        self.peer_hits += other.peer_hits;
        self.se_reads += other.se_reads;
        self.hit_bytes += other.hit_bytes;
        self.se_bytes += other.se_bytes;
    }
}

/// SE operations; a chunked read counts once per chunk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeOps {
    pub reads: u64,
    pub read_failures: u64,
    pub writes: u64,
    pub write_failures: u64,
}

impl SeOps {
    pub fn failure_rate(&self) -> Option<f64> {
        let n = self.reads + self.writes;
        (n > 0).then(|| (self.read_failures + self.write_failures) as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub stage_in: u64,
    pub stage_out: u64,
    /// Pilots that failed their environment check.
    pub environment: u64,
    /// Jobs that ran out of retries.
    pub failed_out: u64,
}

impl FailureCounts {
    pub fn job_failures(&self) -> u64 {
        self.stage_in + self.stage_out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotCounts {
    pub submitted: u64,
    pub terminated_env: u64,
    pub peak_busy: u64,
    /// Largest number of non-terminated pilots at any time.
    pub max_submitted: u64,
    /// Smallest number of non-terminated pilots seen after every monitor
    /// tick following the first one.
    pub min_submitted_after_first_tick: Option<u64>,
}

/// One execution attempt of a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub job_id: String,
    pub step: u32,
    pub attempt: u32,
    pub runner: String,
    pub worker_node: u32,
    pub enqueue: f64,
    pub start: f64,
    pub end: f64,
    pub stage_in: f64,
    pub processing: f64,
    pub stage_out: f64,
    pub success: bool,
    pub failure_stage: Option<FailureStage>,
    pub cache: CacheCounters,
}

impl AttemptRecord {
    pub fn queue_wait(&self) -> f64 {
        self.start - self.enqueue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub job_id: String,
    pub step: u32,
    pub queue_wait: f64,
    pub stage_in_total: f64,
    pub processing: f64,
    pub stage_out: f64,
    pub retries: u32,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: RunInfo,
    pub outcome: Outcome,
    pub diagnostic: Option<String>,
    /// First enqueue to last completion notification.
    pub turnaround: f64,
    pub end_time: f64,
    pub jobs_total: u64,
    pub jobs_done: u64,
    pub jobs_failed: u64,
    pub per_job: Vec<JobMetrics>,
    pub attempts: Vec<AttemptRecord>,
    /// Change points `(t, running)` of the number of executing attempts.
    pub running_jobs: Vec<(f64, u64)>,
    pub cache: CacheCounters,
    pub cache_by_step: BTreeMap<u32, CacheCounters>,
    pub se_ops: SeOps,
    pub failures: FailureCounts,
    pub pilots: PilotCounts,
    pub audit_violations: Vec<String>,
    pub events_processed: u64,
    pub event_log_digest: String,
}

pub fn cache_hit_ratio(report: &MetricsReport) -> Option<f64> {
    report.cache.hit_ratio()
}

pub fn byte_ratio(report: &MetricsReport) -> Option<f64> {
    report.cache.byte_ratio()
}

/// Hit ratio over the input accesses of jobs of one step.
pub fn step_hit_ratio(report: &MetricsReport, step: u32) -> Option<f64> {
    report.cache_by_step.get(&step).and_then(CacheCounters::hit_ratio)
}

/// Hit ratio over the accesses of every step after the first.
pub fn later_steps_hit_ratio(report: &MetricsReport) -> Option<f64> {
    let mut c = CacheCounters::default();
    for (_, s) in report.cache_by_step.range(1..) {
        c.add(s);
    }
    c.hit_ratio()
}

/// Mean stage-in time over all attempts, optionally of one step only.
pub fn mean_stage_in(report: &MetricsReport, step: Option<u32>) -> Option<f64> {
    let v: Vec<f64> = report
        .attempts
        .iter()
        .filter(|a| step.is_none_or(|s| a.step == s))
        .map(|a| a.stage_in)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Number of attempts executing at time `t`.
pub fn running_at(report: &MetricsReport, t: f64) -> u64 {
    let i = report.running_jobs.partition_point(|(ct, _)| *ct <= t);
    if i == 0 {
        0
    } else {
        report.running_jobs[i - 1].1
    }
}

/// Time-averaged running count per bin of `resolution` seconds, up to the
/// end of the run. Returns `(bin start, mean running)`.
pub fn running_binned(report: &MetricsReport, resolution: f64) -> Result<Vec<(f64, f64)>> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(invalid_param("timeseries resolution must be positive"));
    }
    let end = report.end_time;
    let n_bins = ((end / resolution).ceil() as usize).max(1);
    let mut area = vec![0.0; n_bins];
    let points = &report.running_jobs;
    for (i, &(t0, count)) in points.iter().enumerate() {
        let t1 = points.get(i + 1).map_or(end, |p| p.0).min(end);
        if count == 0 || t1 <= t0 {
            continue;
        }
        let mut t = t0;
        while t < t1 {
            let bin = ((t / resolution) as usize).min(n_bins - 1);
            let bin_end = ((bin + 1) as f64 * resolution).min(t1);
            let stop = if bin_end <= t { t1 } else { bin_end };
            area[bin] += count as f64 * (stop - t);
            t = stop;
        }
    }
    Ok(area.into_iter().enumerate().map(|(i, a)| (i as f64 * resolution, a / resolution)).collect())
}

/// Mean, sample standard deviation and count of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// `None` for a single sample.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub cell: CellKey,
    pub config_digest: String,
    pub n: usize,
    pub metrics: BTreeMap<String, Stat>,
}

/// Scalar metrics of one run, by name. Undefined ratios are left out.
pub fn scalar_metrics(r: &MetricsReport) -> BTreeMap<&'static str, f64> {
    let mut m = BTreeMap::new();
    m.insert("turnaround", r.turnaround);
    if let Some(v) = mean_stage_in(r, None) {
        m.insert("mean_stage_in", v);
    }
    if let Some(v) = cache_hit_ratio(r) {
        m.insert("hit_ratio", v);
    }
    if let Some(v) = byte_ratio(r) {
        m.insert("byte_ratio", v);
    }
    if let Some(v) = later_steps_hit_ratio(r) {
        m.insert("later_steps_hit_ratio", v);
    }
    if let Some(v) = r.se_ops.failure_rate() {
        m.insert("se_failure_rate", v);
    }
    m.insert("job_failures", r.failures.job_failures() as f64);
    m.insert("jobs_done", r.jobs_done as f64);
    m.insert("peak_busy", r.pilots.peak_busy as f64);
    m.insert("pilots_submitted", r.pilots.submitted as f64);
    m
}

/// Aggregates repetitions of one configuration.
pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateStats> {
    let first = reports.first().ok_or_else(|| invalid_param("nothing to aggregate"))?;
    if let Some(other) = reports.iter().find(|r| r.run.config_digest != first.run.config_digest) {
        return Err(invalid_config(format!(
            "cannot aggregate runs of different configurations ({} vs {})",
            first.run.run_id, other.run.run_id
        )));
    }
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in scalar_metrics(r) {
            values.entry(k).or_default().push(v);
        }
    }
    Ok(AggregateStats {
        cell: first.run.cell.clone(),
        config_digest: first.run.config_digest.clone(),
        n: reports.len(),
        metrics: values
            .into_iter()
            .filter_map(|(k, v)| Stat::of(&v).map(|s| (k.to_string(), s)))
            .collect(),
    })
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

pub const RUNS_HEADER: [&str; 24] = [
    "run_id", "workflow", "se_condition", "scheme", "mode", "seed", "config_digest", "outcome", "turnaround", "jobs_done", "jobs_failed",
    "attempts", "mean_stage_in", "local_hits", "peer_hits", "se_reads", "hit_ratio", "byte_ratio", "later_steps_hit_ratio", "se_ops",
    "se_failures", "job_failures", "peak_busy", "event_log_digest",
];

/// One row per run.
pub fn write_runs_csv<W: Write>(w: W, reports: &[MetricsReport]) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RUNS_HEADER).map_err(csv_err)?;
    for r in reports {
        let c = &r.run.cell;
        out.write_record([
            r.run.run_id.clone(),
            c.workflow.clone(),
            c.se_condition.clone(),
            c.scheme.clone(),
            c.mode.clone(),
            r.run.seed.to_string(),
            r.run.config_digest.clone(),
            serde_json::to_value(r.outcome).expect("enum").as_str().unwrap_or_default().to_string(),
            f3(r.turnaround),
            r.jobs_done.to_string(),
            r.jobs_failed.to_string(),
            r.attempts.len().to_string(),
            mean_stage_in(r, None).map(f3).unwrap_or_default(),
            r.cache.local_hits.to_string(),
            r.cache.peer_hits.to_string(),
            r.cache.se_reads.to_string(),
            opt(cache_hit_ratio(r)),
            opt(byte_ratio(r)),
            opt(later_steps_hit_ratio(r)),
            (r.se_ops.reads + r.se_ops.writes).to_string(),
            (r.se_ops.read_failures + r.se_ops.write_failures).to_string(),
            r.failures.job_failures().to_string(),
            r.pilots.peak_busy.to_string(),
            r.event_log_digest.clone(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()
}

/// Wide table: one row per cell, mean/std/n for each metric.
pub fn write_aggregate_csv<W: Write>(w: W, aggs: &[AggregateStats]) -> std::io::Result<()> {
    let names: std::collections::BTreeSet<&String> = aggs.iter().flat_map(|a| a.metrics.keys()).collect();
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["workflow", "se_condition", "scheme", "mode", "config_digest", "n"].map(String::from).to_vec();
    for n in &names {
        header.extend([format!("{n}_mean"), format!("{n}_std"), format!("{n}_n")]);
    }
    out.write_record(&header).map_err(csv_err)?;
    for a in aggs {
        let mut row = vec![
            a.cell.workflow.clone(),
            a.cell.se_condition.clone(),
            a.cell.scheme.clone(),
            a.cell.mode.clone(),
            a.config_digest.clone(),
            a.n.to_string(),
        ];
        for n in &names {
            match a.metrics.get(*n) {
                Some(s) => row.extend([format!("{:.6}", s.mean), opt(s.std), s.n.to_string()]),
                None => row.extend([String::new(), String::new(), "0".into()]),
            }
        }
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()
}

/// Binned running-jobs series of one run.
pub fn write_timeseries_csv<W: Write>(w: W, report: &MetricsReport, resolution: f64) -> std::io::Result<()> {
    let bins = running_binned(report, resolution).map_err(std::io::Error::other)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "running"]).map_err(csv_err)?;
    for (t, v) in bins {
        out.write_record([f3(t), f3(v)]).map_err(csv_err)?;
    }
    out.flush()
}

/// Per-attempt rows of one run.
pub fn write_attempts_csv<W: Write>(w: W, report: &MetricsReport) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "job_id", "step", "attempt", "runner", "worker_node", "enqueue", "start", "end", "queue_wait", "stage_in", "processing", "stage_out", "success",
        "failure_stage", "local_hits", "peer_hits", "se_reads",
    ])
    .map_err(csv_err)?;
    for a in &report.attempts {
        out.write_record([
            a.job_id.clone(),
            a.step.to_string(),
            a.attempt.to_string(),
            a.runner.clone(),
            a.worker_node.to_string(),
            f3(a.enqueue),
            f3(a.start),
            f3(a.end),
            f3(a.queue_wait()),
            f3(a.stage_in),
            f3(a.processing),
            f3(a.stage_out),
            a.success.to_string(),
            match a.failure_stage {
                Some(FailureStage::StageIn) => "stage_in".into(),
                Some(FailureStage::StageOut) => "stage_out".into(),
                None => String::new(),
            },
            a.cache.local_hits.to_string(),
            a.cache.peer_hits.to_string(),
            a.cache.se_reads.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn blank() -> MetricsReport {
        MetricsReport {
            run: RunInfo {
                run_id: "r".into(),
                cell: CellKey {
                    workflow: "W1".into(),
                    se_condition: "d1f1".into(),
                    scheme: "C1".into(),
                    mode: "prerun(1)".into(),
                },
                seed: 1,
                config_digest: "abc".into(),
            },
            outcome: Outcome::Complete,
            diagnostic: None,
            turnaround: 10.0,
            end_time: 10.0,
            jobs_total: 0,
            jobs_done: 0,
            jobs_failed: 0,
            per_job: vec![],
            attempts: vec![],
            running_jobs: vec![(0.0, 0)],
            cache: CacheCounters::default(),
            cache_by_step: BTreeMap::new(),
            se_ops: SeOps::default(),
            failures: FailureCounts::default(),
            pilots: PilotCounts::default(),
            audit_violations: vec![],
            events_processed: 0,
            event_log_digest: String::new(),
        }
    }

    #[test]
    fn ratios() {
        let mut r = blank();
        assert_eq!(cache_hit_ratio(&r), None);
        r.cache = CacheCounters {
            local_hits: 2,
            peer_hits: 1,
            se_reads: 1,
            hit_bytes: 100,
            se_bytes: 300,
        };
        assert_eq!(cache_hit_ratio(&r), Some(0.75));
        assert_eq!(byte_ratio(&r), Some(0.25));
        r.cache = CacheCounters {
            se_reads: 4,
            se_bytes: 10,
            ..Default::default()
        };
        assert_eq!(cache_hit_ratio(&r), Some(0.0));
    }

    #[test]
    fn uniform_sizes_give_equal_ratios() {
        let mut r = blank();
        r.cache = CacheCounters {
            local_hits: 3,
            peer_hits: 2,
            se_reads: 7,
            hit_bytes: 5 * 700,
            se_bytes: 7 * 700,
        };
        assert!((cache_hit_ratio(&r).unwrap() - byte_ratio(&r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aggregation() {
        let single = aggregate(&[blank()]).unwrap();
        assert_eq!(single.metrics["turnaround"].std, None);
        assert_eq!(single.metrics["turnaround"].mean, 10.0);

        let same = aggregate(&vec![blank(); 5]).unwrap();
        assert_eq!(same.metrics["turnaround"].std, Some(0.0));
        assert_eq!(same.n, 5);

        let mut reports: Vec<MetricsReport> = (0..4).map(|_| blank()).collect();
        for (r, t) in reports.iter_mut().zip([1.0, 2.0, 3.0, 4.0]) {
            r.turnaround = t;
        }
        let s = aggregate(&reports).unwrap().metrics["turnaround"];
        assert_eq!(s.mean, 2.5);
        assert!((s.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);

        let mut other = blank();
        other.run.config_digest = "xyz".into();
        assert!(aggregate(&[blank(), other]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn binned_series_preserves_area() {
        let mut r = blank();
        r.end_time = 10.0;
        r.running_jobs = vec![(0.0, 0), (1.5, 2), (4.0, 1), (7.25, 0)];
        let bins = running_binned(&r, 2.0).unwrap();
        assert_eq!(bins.len(), 5);
        let area: f64 = bins.iter().map(|(_, v)| v * 2.0).sum();
        assert!((area - (2.0 * 2.5 + 3.25)).abs() < 1e-9);
        assert_eq!(bins[0].1, 0.5);
        assert_eq!(running_at(&r, 4.0), 1);
        assert_eq!(running_at(&r, 0.5), 0);
        assert!(running_binned(&r, 0.0).is_err());
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_runs_csv(&mut buf, &[blank()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("run_id,workflow"));
        assert_eq!(s.lines().count(), 2);
        let mut buf = Vec::new();
        write_aggregate_csv(&mut buf, &[aggregate(&[blank()]).unwrap()]).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("turnaround_mean"));
    }
}
