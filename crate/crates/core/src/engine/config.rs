use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::CacheScope;
use crate::error::{invalid_config, Error, Result};
use crate::infra::{DelayDist, SeCondition, SeModel, SiteConfig};
use crate::monitor::MonitorThresholds;
use crate::workload::{JobDefaults, SplitOutputs, Tier0Params, WorkflowGenerator, WorkflowSpec};
use crate::{GB, MB};

/// Benchmark workflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkflowPreset {
    /// 80 step-0 jobs each feeding one step-1 job.
    W1,
    /// 40 step-0 jobs, each output read by two step-1 jobs.
    W2,
    /// 80 step-0 jobs merged pairwise by 40 step-1 jobs.
    W3,
    /// Six-level Repacker / PromptReco / AlcaReco DAG of 172 jobs.
    Tier0,
}

impl WorkflowPreset {
    pub fn label(&self) -> &'static str {
        match self {
            WorkflowPreset::W1 => "W1",
            WorkflowPreset::W2 => "W2",
            WorkflowPreset::W3 => "W3",
            WorkflowPreset::Tier0 => "Tier0",
        }
    }
}

/// A preset name or explicit generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorkflowConfig {
    Preset(WorkflowPreset),
    Generated(GeneratorParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorParams {
    Chain {
        n: usize,
        file_size: u64,
    },
    Split {
        n_step0: usize,
        fanout: usize,
        file_size: u64,
        #[serde(default)]
        outputs: SplitOutputs,
    },
    Merge {
        n_step0: usize,
        fanin: usize,
        file_size: u64,
    },
    Tier0(Tier0Params),
}

impl WorkflowConfig {
    pub fn label(&self) -> String {
        match self {
            WorkflowConfig::Preset(p) => p.label().to_string(),
            WorkflowConfig::Generated(g) => match g {
                GeneratorParams::Chain { n, .. } => format!("chain{n}"),
                GeneratorParams::Split { n_step0, fanout, .. } => format!("split{n_step0}x{fanout}"),
                GeneratorParams::Merge { n_step0, fanin, .. } => format!("merge{n_step0}x{fanin}"),
                GeneratorParams::Tier0(p) => format!("tier0-{}", p.repacker_jobs),
            },
        }
    }

    pub fn build(&self, defaults: &JobDefaults) -> Result<WorkflowSpec> {
        let g = WorkflowGenerator::new(defaults.clone());
        let size = 700 * MB;
        match self {
            WorkflowConfig::Preset(WorkflowPreset::W1) => g.chain(80, size),
            WorkflowConfig::Preset(WorkflowPreset::W2) => g.split(40, 2, size, SplitOutputs::Shared),
            WorkflowConfig::Preset(WorkflowPreset::W3) => g.merge(80, 2, size),
            WorkflowConfig::Preset(WorkflowPreset::Tier0) => g.tier0(&Tier0Params::preset()),
            WorkflowConfig::Generated(GeneratorParams::Chain { n, file_size }) => g.chain(*n, *file_size),
            WorkflowConfig::Generated(GeneratorParams::Split {
                n_step0,
                fanout,
                file_size,
                outputs,
            }) => g.split(*n_step0, *fanout, *file_size, *outputs),
            WorkflowConfig::Generated(GeneratorParams::Merge { n_step0, fanin, file_size }) => g.merge(*n_step0, *fanin, *file_size),
            WorkflowConfig::Generated(GeneratorParams::Tier0(p)) => g.tier0(p),
        }
        .map_err(|e| match e {
            Error::InvalidParameter(m) => invalid_config(m),
            other => other,
        })
    }
}

impl FromStr for WorkflowConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| invalid_config(format!("unknown workflow preset {s:?}")))
    }
}

/// Cache sharing and matchmaking policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CacheScheme {
    /// Cache per host with waitForData.
    C1,
    /// Private pilot caches with waitForData.
    C2,
    /// Cache per host without waitForData.
    C3,
    /// Private caches of capacity zero: pilots still pull jobs but every
    /// read goes to the SE.
    #[serde(rename = "nocache")]
    NoCache,
}

impl CacheScheme {
    pub const ALL: [CacheScheme; 4] = [CacheScheme::C1, CacheScheme::C2, CacheScheme::C3, CacheScheme::NoCache];

    pub fn scope(&self) -> CacheScope {
        match self {
            CacheScheme::C1 | CacheScheme::C3 => CacheScope::PerHost,
            CacheScheme::C2 | CacheScheme::NoCache => CacheScope::SinglePilot,
        }
    }

    pub fn wait_for_data(&self) -> bool {
        !matches!(self, CacheScheme::C3)
    }

    pub fn caching(&self) -> bool {
        !matches!(self, CacheScheme::NoCache)
    }

    pub fn label(&self) -> &'static str {
        match self {
            CacheScheme::C1 => "C1",
            CacheScheme::C2 => "C2",
            CacheScheme::C3 => "C3",
            CacheScheme::NoCache => "nocache",
        }
    }
}

impl FromStr for CacheScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CacheScheme::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid_config(format!("unknown cache scheme {s:?}")))
    }
}

/// How pilots (or jobs) reach the worker nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SubmissionMode {
    /// Jobs are submitted to the grid one by one; no pilots.
    Direct,
    /// This many pilots are already registered and idle at time zero.
    Prerun(usize),
    /// The pilot monitor submits pilots as needed.
    OnDemand,
}

impl fmt::Display for SubmissionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubmissionMode::Direct => f.write_str("direct"),
            SubmissionMode::Prerun(n) => write!(f, "prerun({n})"),
            SubmissionMode::OnDemand => f.write_str("on_demand"),
        }
    }
}

impl FromStr for SubmissionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid_config(format!("unknown submission mode {s:?}"));
        match s {
            "direct" => Ok(SubmissionMode::Direct),
            "on_demand" => Ok(SubmissionMode::OnDemand),
            _ => {
                let n = s.strip_prefix("prerun").ok_or_else(bad)?;
                let n = n.strip_prefix('(').and_then(|n| n.strip_suffix(')')).unwrap_or(n);
                n.parse().map(SubmissionMode::Prerun).map_err(|_| bad())
            }
        }
    }
}

impl TryFrom<String> for SubmissionMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SubmissionMode> for String {
    fn from(m: SubmissionMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub max_space: u64,
    pub min_threshold: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            max_space: 10 * GB,
            min_threshold: 2 * GB,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotConfig {
    pub heartbeat_interval: f64,
    /// The task queue declares a pilot dead after this many silent
    /// heartbeat intervals.
    pub liveness_factor: f64,
    /// Wait before re-requesting after a request returned no job.
    pub idle_backoff: DelayDist,
    /// Wait between a completion report and the next job request.
    pub request_delay: f64,
    /// Cost of a cache read as a fraction of the zero-load SE read time.
    pub local_read_fraction: f64,
    pub env_fail_prob: f64,
    /// Pilot lifetime in seconds; `None` runs forever.
    pub ttl: Option<f64>,
    /// Terminate idle pilots whose lifetime is exhausted.
    pub enforce_ttl: bool,
}

impl Default for PilotConfig {
    fn default() -> Self {
        PilotConfig {
            heartbeat_interval: 60.0,
            liveness_factor: 3.0,
            idle_backoff: DelayDist::gaussian(30.0, 3.0),
            request_delay: 5.0,
            local_read_fraction: 0.05,
            env_fail_prob: 0.0,
            ttl: None,
            enforce_ttl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    #[serde(flatten)]
    pub defaults: JobDefaults,
    /// Standard deviation of processing time as a fraction of its mean.
    pub processing_jitter: f64,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            defaults: JobDefaults::default(),
            processing_jitter: 0.0,
        }
    }
}

/// One simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub workflow: WorkflowConfig,
    #[serde(default)]
    pub site: SiteConfig,
    pub se_condition: SeCondition,
    pub cache_scheme: CacheScheme,
    pub submission_mode: SubmissionMode,
    #[serde(default)]
    pub thresholds: MonitorThresholds,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub pilot: PilotConfig,
    #[serde(default)]
    pub jobs: JobConfig,
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: u32,
    /// Virtual seconds without any job state change after which a run is
    /// declared deadlocked.
    #[serde(default = "default_stall")]
    pub stall_timeout: f64,
    /// Check cache and matchmaking invariants while running.
    #[serde(default = "yes")]
    pub audit: bool,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn default_stall() -> f64 {
    21_600.0
}

impl ScenarioConfig {
    /// Defaults for the given cell of the experiment matrix.
    pub fn new(workflow: WorkflowConfig, se_condition: SeCondition, cache_scheme: CacheScheme, submission_mode: SubmissionMode, seed: u64) -> Self {
        ScenarioConfig {
            workflow,
            site: SiteConfig::default(),
            se_condition,
            cache_scheme,
            submission_mode,
            thresholds: MonitorThresholds::default(),
            cache: CacheConfig::default(),
            pilot: PilotConfig::default(),
            jobs: JobConfig::default(),
            seed,
            repetitions: 1,
            stall_timeout: default_stall(),
            audit: true,
        }
    }

    pub fn se_model(&self) -> SeModel {
        self.site.se.with_condition(self.se_condition)
    }

    pub fn validate(&self) -> Result<()> {
        self.site.validate()?;
        self.thresholds.validate()?;
        if self.cache.max_space <= self.cache.min_threshold {
            return Err(invalid_config("cache max_space must exceed min_threshold"));
        }
        let p = &self.pilot;
        if !(p.heartbeat_interval > 0.0 && p.heartbeat_interval.is_finite()) {
            return Err(invalid_config("heartbeat_interval must be positive"));
        }
        if !(p.liveness_factor >= 1.0) {
            return Err(invalid_config("liveness_factor must be at least 1"));
        }
        p.idle_backoff.validate("idle_backoff")?;
        if p.idle_backoff.mean <= 0.0 {
            return Err(invalid_config("idle_backoff mean must be positive"));
        }
        if !(p.request_delay >= 0.0 && p.request_delay.is_finite()) {
            return Err(invalid_config("request_delay must be non-negative"));
        }
        if !(p.local_read_fraction >= 0.0 && p.local_read_fraction.is_finite()) {
            return Err(invalid_config("local_read_fraction must be non-negative"));
        }
        if !(0.0..=1.0).contains(&p.env_fail_prob) {
            return Err(invalid_config("env_fail_prob outside [0, 1]"));
        }
        if p.ttl.is_some_and(|t| !(t > 0.0)) {
            return Err(invalid_config("ttl must be positive"));
        }
        if !(self.jobs.defaults.processing_time >= 0.0 && self.jobs.processing_jitter >= 0.0) {
            return Err(invalid_config("processing time and jitter must be non-negative"));
        }
        if let SubmissionMode::Prerun(n) = self.submission_mode {
            if n == 0 || n > self.site.total_slots() {
                return Err(invalid_config(format!(
                    "prerun({n}) does not fit {} slots",
                    self.site.total_slots()
                )));
            }
        }
        if !(self.stall_timeout > 0.0) {
            return Err(invalid_config("stall_timeout must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the seed.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("seed");
            o.remove("repetitions");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
