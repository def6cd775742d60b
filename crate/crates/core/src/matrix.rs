//! Experiment matrices: axes of workflows, SE conditions, cache schemes
//! and submission modes, expanded into seeded scenario runs.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run, run_with, CacheConfig, CacheScheme, JobConfig, PilotConfig, RunOptions, RunOutput, ScenarioConfig, SubmissionMode, WorkflowConfig};
use crate::error::{invalid_config, invalid_param, Error, Result};
use crate::infra::{SeCondition, SiteConfig};
use crate::metrics::{aggregate, AggregateStats, MetricsReport};
use crate::monitor::MonitorThresholds;

/// A JSON experiment description. Every combination of the four axes is a
/// cell; every cell runs once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workflows: Vec<WorkflowConfig>,
    pub se_conditions: Vec<SeCondition>,
    pub cache_schemes: Vec<CacheScheme>,
    pub submission_modes: Vec<SubmissionMode>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub site: SiteConfig,
    #[serde(default)]
    pub thresholds: MonitorThresholds,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub pilot: PilotConfig,
    #[serde(default)]
    pub jobs: JobConfig,
    #[serde(default)]
    pub stall_timeout: Option<f64>,
    #[serde(default)]
    pub audit: Option<bool>,
}

impl ExperimentConfig {
    /// The full 36-cell matrix (W1..W3 x d1f1..d3f3 x C1..C3, nocache) in
    /// one submission mode.
    pub fn standard(mode: SubmissionMode) -> Self {
        use crate::engine::WorkflowPreset::*;
        ExperimentConfig {
            workflows: [W1, W2, W3].map(WorkflowConfig::Preset).to_vec(),
            se_conditions: (1..=3).map(|i| SeCondition::preset(i, i).expect("table preset")).collect(),
            cache_schemes: CacheScheme::ALL.to_vec(),
            submission_modes: vec![mode],
            seeds: None,
            site: SiteConfig::default(),
            thresholds: MonitorThresholds::default(),
            cache: CacheConfig::default(),
            pilot: PilotConfig::default(),
            jobs: JobConfig::default(),
            stall_timeout: None,
            audit: None,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.workflows.len() * self.se_conditions.len() * self.cache_schemes.len() * self.submission_modes.len()
    }

    /// One config per cell, with seed 0. Ordered workflow-major.
    pub fn cells(&self) -> Result<Vec<ScenarioConfig>> {
        if self.cell_count() == 0 {
            return Err(invalid_config("every matrix axis needs at least one value"));
        }
        let mut out = Vec::with_capacity(self.cell_count());
        for wf in &self.workflows {
            for se in &self.se_conditions {
                for scheme in &self.cache_schemes {
                    for mode in &self.submission_modes {
                        let mut c = ScenarioConfig::new(wf.clone(), *se, *scheme, *mode, 0);
                        c.site = self.site.clone();
                        c.thresholds = self.thresholds;
                        c.cache = self.cache;
                        c.pilot = self.pilot;
                        c.jobs = self.jobs.clone();
                        if let Some(t) = self.stall_timeout {
                            c.stall_timeout = t;
                        }
                        if let Some(a) = self.audit {
                            c.audit = a;
                        }
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Cells times seeds. `seeds` overrides the document's own list.
    pub fn expand(&self, seeds: Option<&[u64]>) -> Result<Vec<ScenarioConfig>> {
        let seeds = seeds
            .or(self.seeds.as_deref())
            .ok_or_else(|| invalid_config("no seeds given"))?;
        if seeds.is_empty() {
            return Err(invalid_config("empty seed list"));
        }
        let mut out = Vec::new();
        for cell in self.cells()? {
            for &s in seeds {
                let mut c = cell.clone();
                c.seed = s;
                c.repetitions = seeds.len() as u32;
                out.push(c);
            }
        }
        Ok(out)
    }
}

impl From<&ScenarioConfig> for ExperimentConfig {
    fn from(c: &ScenarioConfig) -> Self {
        ExperimentConfig {
            workflows: vec![c.workflow.clone()],
            se_conditions: vec![c.se_condition],
            cache_schemes: vec![c.cache_scheme],
            submission_modes: vec![c.submission_mode],
            seeds: Some(vec![c.seed]),
            site: c.site.clone(),
            thresholds: c.thresholds,
            cache: c.cache,
            pilot: c.pilot,
            jobs: c.jobs.clone(),
            stall_timeout: Some(c.stall_timeout),
            audit: Some(c.audit),
        }
    }
}

/// Either a single scenario or a matrix document.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigDocument {
    Scenario(ScenarioConfig),
    Matrix(ExperimentConfig),
}

impl ConfigDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid_config(e.to_string()))?;
        let is_matrix = v.as_object().is_some_and(|o| o.contains_key("workflows"));
        if is_matrix {
            serde_json::from_value(v).map(ConfigDocument::Matrix)
        } else {
            serde_json::from_value(v).map(ConfigDocument::Scenario)
        }
        .map_err(|e| invalid_config(e.to_string()))
    }

    /// Matrix view of the document.
    pub fn experiment(&self) -> ExperimentConfig {
        match self {
            ConfigDocument::Scenario(s) => ExperimentConfig::from(s),
            ConfigDocument::Matrix(m) => m.clone(),
        }
    }
}

/// `--seeds` argument: a count `n` (seeds 1..=n), a comma list, or a
/// range `a..b` / `a..=b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSpec(pub Vec<u64>);

impl FromStr for SeedSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |t: &str| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| invalid_param(format!("bad seed '{t}'")))
        };
        let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..=") {
            (num(a)?..=num(b)?).collect()
        } else if let Some((a, b)) = s.split_once("..") {
            (num(a)?..num(b)?).collect()
        } else if s.contains(',') {
            s.split(',').map(num).collect::<Result<_>>()?
        } else {
            (1..=num(s)?).collect()
        };
        if seeds.is_empty() {
            return Err(invalid_param(format!("seed spec '{s}' selects no seeds")));
        }
        Ok(SeedSpec(seeds))
    }
}

/// Runs every config on the rayon pool. Results keep input order.
pub fn run_matrix(configs: &[ScenarioConfig]) -> Vec<Result<MetricsReport>> {
    configs.par_iter().map(run).collect()
}

pub fn run_matrix_with(configs: &[ScenarioConfig], opts: RunOptions) -> Vec<Result<RunOutput>> {
    configs.par_iter().map(|c| run_with(c, opts)).collect()
}

/// Aggregates reports per config digest, in first-seen order.
pub fn aggregate_cells(reports: &[MetricsReport]) -> Result<Vec<AggregateStats>> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<&str, Vec<MetricsReport>> = BTreeMap::new();
    for r in reports {
        let d = r.run.config_digest.as_str();
        if !groups.contains_key(d) {
            order.push(d);
        }
        groups.entry(d).or_default().push(r.clone());
    }
    order.into_iter().map(|d| aggregate(&groups[d])).collect()
}
