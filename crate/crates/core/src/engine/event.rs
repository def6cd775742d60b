use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

/// Who executes a job attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Runner {
    Pilot(usize),
    Direct(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    PilotStart { agent: usize },
    Register { agent: usize },
    JobRequest { agent: usize },
    PollBackoff { agent: usize },
    StageInDone { runner: Runner },
    ProcessingDone { runner: Runner },
    StageOutDone { runner: Runner },
    Heartbeat { agent: usize },
    MonitorTick,
    DirectJobStart { job: usize },
    DirectNotifyDone { run: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: the heap pops the earliest event first.
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Future events in (time, sequence) order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        seq
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_then_sequence_order() {
        let mut q = EventQueue::new();
        q.schedule(5.0, EventKind::MonitorTick);
        q.schedule(1.0, EventKind::Heartbeat { agent: 0 });
        q.schedule(1.0, EventKind::Heartbeat { agent: 1 });
        q.schedule(0.0, EventKind::MonitorTick);
        let order: Vec<(f64, u64)> = std::iter::from_fn(|| q.pop()).map(|e| (e.time, e.seq)).collect();
        assert_eq!(order, vec![(0.0, 3), (1.0, 1), (1.0, 2), (5.0, 0)]);
    }
}
