//! Site and storage-element models.
//!
//! SE access latency is Gaussian with mean
//! `bytes / base_throughput * (1 + delay_gain * delay_factor)` and standard
//! deviation `sigma_fraction * mean`, clamped below at a tenth of the mean.
//! Every read or write independently fails with probability `failure_rate`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::MB;

/// Worker node index within a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "wn-{:02}", self.0)
    }
}

/// Delay factor and failure rate of a storage element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SeConditionRepr", into = "SeConditionRepr")]
pub struct SeCondition {
    pub delay_factor: f64,
    pub failure_rate: f64,
}

pub const DELAY_FACTORS: [f64; 3] = [0.01, 0.15, 0.50];
pub const FAILURE_RATES: [f64; 3] = [0.0, 0.03, 0.1];

impl SeCondition {
    pub fn new(delay_factor: f64, failure_rate: f64) -> Result<Self> {
        if !(delay_factor >= 0.0 && delay_factor.is_finite()) {
            return Err(invalid_config(format!("delay factor {delay_factor} must be non-negative")));
        }
        if !(0.0..=1.0).contains(&failure_rate) {
            return Err(invalid_config(format!("failure rate {failure_rate} outside [0, 1]")));
        }
        Ok(SeCondition {
            delay_factor,
            failure_rate,
        })
    }

    /// `d<i>f<j>` with `i, j` in 1..=3.
    pub fn preset(d: usize, f: usize) -> Result<Self> {
        match (DELAY_FACTORS.get(d.wrapping_sub(1)), FAILURE_RATES.get(f.wrapping_sub(1))) {
            (Some(&d), Some(&f)) => Ok(SeCondition {
                delay_factor: d,
                failure_rate: f,
            }),
            _ => Err(invalid_config(format!("no SE preset d{d}f{f}"))),
        }
    }

    /// Preset label if this condition matches one, else a free-form label.
    pub fn label(&self) -> String {
        let d = DELAY_FACTORS.iter().position(|&x| x == self.delay_factor);
        let f = FAILURE_RATES.iter().position(|&x| x == self.failure_rate);
        match (d, f) {
            (Some(d), Some(f)) => format!("d{}f{}", d + 1, f + 1),
            _ => format!("d{}f{}", self.delay_factor, self.failure_rate),
        }
    }
}

impl FromStr for SeCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid_config(format!("unknown SE condition {s:?}"));
        let rest = s.strip_prefix('d').ok_or_else(bad)?;
        let (d, f) = rest.split_once('f').ok_or_else(bad)?;
        let d: usize = d.parse().map_err(|_| bad())?;
        let f: usize = f.parse().map_err(|_| bad())?;
        SeCondition::preset(d, f).map_err(|_| bad())
    }
}

impl fmt::Display for SeCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SeConditionRepr {
    Label(String),
    Values { delay_factor: f64, failure_rate: f64 },
}

impl TryFrom<SeConditionRepr> for SeCondition {
    type Error = Error;

    fn try_from(r: SeConditionRepr) -> Result<Self> {
        match r {
            SeConditionRepr::Label(s) => s.parse(),
            SeConditionRepr::Values {
                delay_factor,
                failure_rate,
            } => SeCondition::new(delay_factor, failure_rate),
        }
    }
}

impl From<SeCondition> for SeConditionRepr {
    fn from(c: SeCondition) -> Self {
        let label = c.label();
        if label.parse::<SeCondition>().is_ok() {
            SeConditionRepr::Label(label)
        } else {
            SeConditionRepr::Values {
                delay_factor: c.delay_factor,
                failure_rate: c.failure_rate,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeModel {
    pub delay_factor: f64,
    pub failure_rate: f64,
    /// Bytes per second at zero load.
    pub base_throughput: f64,
    pub sigma_fraction: f64,
    pub delay_gain: f64,
}

impl Default for SeModel {
    fn default() -> Self {
        SeModel {
            delay_factor: DELAY_FACTORS[0],
            failure_rate: FAILURE_RATES[0],
            base_throughput: 100.0 * MB as f64,
            sigma_fraction: 0.1,
            delay_gain: 10.0,
        }
    }
}

impl SeModel {
    pub fn validate(&self) -> Result<()> {
        SeCondition::new(self.delay_factor, self.failure_rate)?;
        if !(self.base_throughput > 0.0 && self.base_throughput.is_finite()) {
            return Err(invalid_config("SE base throughput must be positive"));
        }
        if !(self.sigma_fraction >= 0.0 && self.delay_gain >= 0.0) {
            return Err(invalid_config("SE sigma fraction and delay gain must be non-negative"));
        }
        Ok(())
    }

    pub fn with_condition(mut self, c: SeCondition) -> Self {
        self.delay_factor = c.delay_factor;
        self.failure_rate = c.failure_rate;
        self
    }

    /// Transfer time with no load and no noise.
    pub fn zero_load_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.base_throughput
    }

    /// Mean of the access-time distribution.
    pub fn mean_access_time(&self, bytes: u64) -> f64 {
        self.zero_load_time(bytes) * (1.0 + self.delay_gain * self.delay_factor)
    }
}

pub fn sample_access_time<R: Rng + ?Sized>(rng: &mut R, bytes: u64, se: &SeModel) -> f64 {
    let mu = se.mean_access_time(bytes);
    let normal = Normal::new(mu, se.sigma_fraction * mu).expect("finite non-negative sigma");
    normal.sample(rng).max(mu / 10.0)
}

pub fn sample_failure<R: Rng + ?Sized>(rng: &mut R, se: &SeModel) -> bool {
    rng.random::<f64>() < se.failure_rate
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccessOutcome {
    pub kind: AccessKind,
    /// Seconds consumed, also when the access fails.
    pub duration: f64,
}

impl AccessOutcome {
    pub fn is_ok(&self) -> bool {
        self.kind == AccessKind::Ok
    }
}

/// One SE operation. Durations and failures come from separate streams so
/// that changing the failure rate never shifts the latency draws.
fn se_access<D: Rng + ?Sized, F: Rng + ?Sized>(durations: &mut D, failures: &mut F, bytes: u64, se: &SeModel) -> AccessOutcome {
    debug_assert!(bytes > 0);
    let duration = sample_access_time(durations, bytes, se);
    let kind = if sample_failure(failures, se) {
        AccessKind::Failed
    } else {
        AccessKind::Ok
    };
    AccessOutcome { kind, duration }
}

pub fn se_read<D: Rng + ?Sized, F: Rng + ?Sized>(durations: &mut D, failures: &mut F, bytes: u64, se: &SeModel) -> AccessOutcome {
    se_access(durations, failures, bytes, se)
}

pub fn se_write<D: Rng + ?Sized, F: Rng + ?Sized>(durations: &mut D, failures: &mut F, bytes: u64, se: &SeModel) -> AccessOutcome {
    se_access(durations, failures, bytes, se)
}

/// Splits a read of `bytes` into `n` chunk sizes that sum to `bytes`.
pub fn chunk_sizes(bytes: u64, n: u32) -> Vec<u64> {
    let n = u64::from(n.max(1)).min(bytes.max(1));
    let (q, r) = (bytes / n, bytes % n);
    (0..n).map(|i| if i < r { q + 1 } else { q }).collect()
}

/// Gaussian delay clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayDist {
    pub mean: f64,
    #[serde(default)]
    pub sigma: f64,
}

impl DelayDist {
    pub const fn fixed(mean: f64) -> Self {
        DelayDist { mean, sigma: 0.0 }
    }

    pub const fn gaussian(mean: f64, sigma: f64) -> Self {
        DelayDist { mean, sigma }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.mean >= 0.0 && self.mean.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid_config(format!("{what}: mean and sigma must be non-negative")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.mean, self.sigma).expect("validated delay");
        normal.sample(rng).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteConfig {
    pub site_name: String,
    pub n_workers: usize,
    pub slots_per_worker: usize,
    pub se_name: String,
    pub se: SeModel,
    /// Time a pilot waits in the local batch queue before it starts.
    pub pilot_queue_delay: DelayDist,
    /// Grid submission latency of a directly submitted job.
    pub direct_submit_delay: DelayDist,
    /// Latency before a direct job's completion becomes visible.
    pub completion_notify_delay: DelayDist,
    /// Sequential chunks per SE read, each with its own failure draw.
    pub read_chunks: u32,
}

impl Default for SiteConfig {
    fn default() -> Self {
        SiteConfig {
            site_name: "T2_SIM".into(),
            n_workers: 10,
            slots_per_worker: 12,
            se_name: "se.sim".into(),
            se: SeModel::default(),
            pilot_queue_delay: DelayDist::gaussian(120.0, 24.0),
            direct_submit_delay: DelayDist::gaussian(300.0, 60.0),
            completion_notify_delay: DelayDist::gaussian(300.0, 60.0),
            read_chunks: 1,
        }
    }
}

impl SiteConfig {
    /// Ten machines with four job slots each.
    pub fn testbed() -> Self {
        SiteConfig {
            slots_per_worker: 4,
            ..SiteConfig::default()
        }
    }

    pub fn total_slots(&self) -> usize {
        self.n_workers * self.slots_per_worker
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 || self.slots_per_worker == 0 {
            return Err(invalid_config("site needs at least one worker node and one slot"));
        }
        if self.read_chunks == 0 {
            return Err(invalid_config("read_chunks must be at least 1"));
        }
        self.se.validate()?;
        self.pilot_queue_delay.validate("pilot_queue_delay")?;
        self.direct_submit_delay.validate("direct_submit_delay")?;
        self.completion_notify_delay.validate("completion_notify_delay")
    }
}
