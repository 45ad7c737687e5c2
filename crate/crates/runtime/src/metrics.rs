//! Run trace and accounting.
//!
//! Metrics JSON document (all times in seconds from the run start):
//!
//! ```text
//! {
//!   "processes": [ { "process", "wall_seconds", "task_processing",
//!                    "image_loading", "load_imbalance", "other", "tasks" } ],
//!   "active_pixel_visits", "flops_per_visit", "overhead_factor", "flops_estimate",
//!   "scheduler_requests", "scheduler_messages",
//!   "stages": [ { "stage", "start", "end" } ],
//!   "trace":  [ { "task", "stage", "process", "assigned", "start", "end",
//!                 "processing", "loading_wait", "visits", "newton_iterations",
//!                 "error" } ]
//! }
//! ```

use serde::{Deserialize, Serialize};
use skyvi_core::config::RuntimeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: u64,
    pub stage: u8,
    pub process: usize,
    pub assigned: f64,
    pub start: f64,
    pub end: f64,
    /// Time spent optimizing and writing results.
    pub processing: f64,
    /// Time blocked waiting for this task's images.
    pub loading_wait: f64,
    pub visits: u64,
    pub newton_iterations: u64,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: u8,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub processes: usize,
    pub wall_seconds: f64,
    pub stages: Vec<StageSpan>,
    pub tasks: Vec<TaskRecord>,
    pub scheduler_requests: u64,
    pub scheduler_messages: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessMetrics {
    pub process: usize,
    pub wall_seconds: f64,
    pub task_processing: f64,
    pub image_loading: f64,
    pub load_imbalance: f64,
    pub other: f64,
    pub tasks: usize,
}

impl ProcessMetrics {
    pub fn component_sum(&self) -> f64 {
        self.task_processing + self.image_loading + self.load_imbalance + self.other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub processes: Vec<ProcessMetrics>,
    pub active_pixel_visits: u64,
    pub flops_per_visit: f64,
    pub overhead_factor: f64,
    pub flops_estimate: f64,
    pub scheduler_requests: u64,
    pub scheduler_messages: u64,
    pub stages: Vec<StageSpan>,
    pub trace: Vec<TaskRecord>,
}

impl RunMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

pub fn flops_estimate(visits: u64, cfg: &RuntimeConfig) -> f64 {
    visits as f64 * cfg.flops_per_visit * cfg.flops_overhead
}

/// Per-process time components. Load imbalance is, for every stage, the
/// time from the process's last task end in that stage (the stage start if
/// it ran none) to the stage end. `other` is what remains of the wall time
/// and is negative only if the trace's intervals overlap.
pub fn account(trace: &RunTrace, cfg: &RuntimeConfig) -> RunMetrics {
    let processes = (0..trace.processes)
        .map(|p| {
            let mine: Vec<&TaskRecord> = trace.tasks.iter().filter(|t| t.process == p).collect();
            let task_processing = mine.iter().map(|t| t.processing).sum();
            let image_loading = mine.iter().map(|t| t.loading_wait).sum();
            let load_imbalance = trace
                .stages
                .iter()
                .map(|s| {
                    let last = mine
                        .iter()
                        .filter(|t| t.stage == s.stage)
                        .map(|t| t.end)
                        .fold(s.start, f64::max);
                    (s.end - last).max(0.0)
                })
                .sum();
            let mut m = ProcessMetrics {
                process: p,
                wall_seconds: trace.wall_seconds,
                task_processing,
                image_loading,
                load_imbalance,
                other: 0.0,
                tasks: mine.len(),
            };
            m.other = trace.wall_seconds - m.component_sum();
            m
        })
        .collect();
    let visits = trace.tasks.iter().map(|t| t.visits).sum();
    RunMetrics {
        processes,
        active_pixel_visits: visits,
        flops_per_visit: cfg.flops_per_visit,
        overhead_factor: cfg.flops_overhead,
        flops_estimate: flops_estimate(visits, cfg),
        scheduler_requests: trace.scheduler_requests,
        scheduler_messages: trace.scheduler_messages,
        stages: trace.stages.clone(),
        trace: trace.tasks.clone(),
    }
}
