//! Discrete-event replay of the scheduler with known task durations.

use crate::dtree::{Dtree, Policy, TaskRef};
use crate::error::{Error, Result};
use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimTask {
    pub id: u64,
    pub stage: u8,
    pub duration: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub processes: usize,
    pub policy: Policy,
    /// Delay per scheduling message.
    pub message_latency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimEvent {
    pub task: u64,
    pub stage: u8,
    pub process: usize,
    pub assigned: f64,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimTrace {
    pub events: Vec<SimEvent>,
    /// `(stage, start, end)`.
    pub stages: Vec<(u8, f64, f64)>,
    pub makespan: f64,
    pub requests: u64,
    pub messages: u64,
    pub max_messages_per_request: u32,
    pub tree_height: usize,
}

/// Ordered f64 for the event heap; times are always finite.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
struct Time(f64);
impl Eq for Time {}
impl Ord for Time {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// Runs the stages in increasing order. Within a stage, every process asks
/// for work when it becomes free; the earliest free process (lowest id on
/// ties) is served first. A refused process idles until the stage ends.
pub fn simulate(tasks: &[SimTask], cfg: &SimConfig) -> Result<SimTrace> {
    if tasks.iter().any(|t| !(t.duration.is_finite() && t.duration >= 0.0)) {
        return Err(Error::invalid("task durations must be finite and nonnegative"));
    }
    if !(cfg.message_latency.is_finite() && cfg.message_latency >= 0.0) {
        return Err(Error::invalid("message latency must be finite and nonnegative"));
    }
    let mut tree = Dtree::new(cfg.processes, cfg.policy)?;
    let by_id: HashMap<u64, &SimTask> = tasks.iter().map(|t| (t.id, t)).collect();
    if by_id.len() != tasks.len() {
        return Err(Error::invalid("duplicate task id"));
    }
    let stages: BTreeSet<u8> = tasks.iter().map(|t| t.stage).collect();
    let mut trace = SimTrace {
        tree_height: tree.height(),
        ..Default::default()
    };
    let mut now = 0.0;
    for stage in stages {
        let refs: Vec<TaskRef> = tasks
            .iter()
            .filter(|t| t.stage == stage)
            .map(|t| TaskRef { id: t.id, work: t.duration })
            .collect();
        tree.load_stage(&refs)?;
        let start = now;
        let mut end = start;
        let mut free: BinaryHeap<Reverse<(Time, usize)>> = (0..cfg.processes).map(|p| Reverse((Time(start), p))).collect();
        while let Some(Reverse((Time(t), p))) = free.pop() {
            let g = tree.request(p);
            trace.requests += 1;
            trace.messages += g.messages as u64;
            trace.max_messages_per_request = trace.max_messages_per_request.max(g.messages);
            let assigned = t + g.messages as f64 * cfg.message_latency;
            if let Some(id) = g.task {
                let task = by_id[&id];
                let ev = SimEvent {
                    task: id,
                    stage,
                    process: p,
                    assigned,
                    start: assigned,
                    end: assigned + task.duration,
                };
                end = f64::max(end, ev.end);
                trace.events.push(ev);
                free.push(Reverse((Time(ev.end), p)));
            }
        }
        trace.stages.push((stage, start, end));
        now = end;
    }
    trace.makespan = now;
    Ok(trace)
}
