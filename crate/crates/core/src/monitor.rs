//! Pilot provisioning: how many pilots a site needs, and their submission.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::infra::DelayDist;
use crate::taskqueue::RunnableCounts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorThresholds {
    pub min_pilots: usize,
    pub max_pilots: usize,
    pub min_idle_pilots: usize,
    pub tick_interval: f64,
}

impl Default for MonitorThresholds {
    fn default() -> Self {
        MonitorThresholds {
            min_pilots: 10,
            max_pilots: 120,
            min_idle_pilots: 4,
            tick_interval: 60.0,
        }
    }
}

impl MonitorThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.min_pilots > self.max_pilots {
            return Err(invalid_config("min_pilots exceeds max_pilots"));
        }
        if self.min_idle_pilots > self.max_pilots {
            return Err(invalid_config("min_idle_pilots exceeds max_pilots"));
        }
        if !(self.tick_interval > 0.0 && self.tick_interval.is_finite()) {
            return Err(invalid_config("tick_interval must be positive"));
        }
        Ok(())
    }
}

/// Pilots of one site that have not terminated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitePilotStats {
    pub submitted: usize,
    pub inactive: usize,
    pub idle: usize,
    pub busy: usize,
}

impl SitePilotStats {
    pub fn new(inactive: usize, idle: usize, busy: usize) -> Self {
        SitePilotStats {
            submitted: inactive + idle + busy,
            inactive,
            idle,
            busy,
        }
    }
}

/// Number of new pilots to submit, between 0 and the headroom below
/// `max_pilots`.
pub fn compute_required(stats: &SitePilotStats, runnable: &RunnableCounts, th: &MonitorThresholds) -> usize {
    let available = th.max_pilots.saturating_sub(stats.submitted);
    if available == 0 {
        return 0;
    }
    let covered = runnable.total.min(stats.inactive + stats.idle);
    let uncovered = runnable.total - covered;
    let mut n = available.min(uncovered);
    let projected_idle = n.saturating_sub(uncovered);
    if stats.idle + projected_idle < th.min_idle_pilots {
        n += (available - n).min(th.min_idle_pilots - stats.idle);
    }
    if stats.submitted + n < th.min_pilots {
        n += (available - n).min(th.min_pilots - stats.submitted - n);
    }
    n
}

/// One decision of a monitor tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub time: f64,
    pub site: String,
    pub stats: SitePilotStats,
    pub runnable: RunnableCounts,
    pub submit: usize,
}

/// What the monitor sees of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSnapshot {
    pub site: String,
    pub stats: SitePilotStats,
    pub runnable: RunnableCounts,
}

#[derive(Debug, Clone, Default)]
pub struct PilotMonitor {
    pub thresholds: MonitorThresholds,
    log: Vec<TickRecord>,
}

impl PilotMonitor {
    pub fn new(thresholds: MonitorThresholds) -> Self {
        PilotMonitor {
            thresholds,
            log: Vec::new(),
        }
    }

    /// Decides submissions for every site, in the order given.
    pub fn tick(&mut self, sites: &[SiteSnapshot], now: f64) -> Vec<(String, usize)> {
        sites
            .iter()
            .map(|s| {
                let n = compute_required(&s.stats, &s.runnable, &self.thresholds);
                self.log.push(TickRecord {
                    time: now,
                    site: s.site.clone(),
                    stats: s.stats,
                    runnable: s.runnable,
                    submit: n,
                });
                (s.site.clone(), n)
            })
            .collect()
    }

    pub fn log(&self) -> &[TickRecord] {
        &self.log
    }
}

/// Submits pilots to a site's batch system.
#[derive(Debug, Clone, Copy)]
pub struct PilotManager {
    pub queue_delay: DelayDist,
}

impl PilotManager {
    /// Start times of `n` new pilots, each delayed by a queue-wait draw.
    pub fn submit_pilots<R: Rng + ?Sized>(&self, n: usize, now: f64, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| now + self.queue_delay.sample(rng)).collect()
    }
}
