//! The loop each process runs: claim, load, optimize, write back, report.
//!
//! Right after starting a task the process claims its next one without
//! waiting and loads that task's images on a background thread, so only the
//! first task of each stage waits for a full load. `loading_wait` records
//! how long the process actually blocked on image data.

use crate::error::{Error, Result};
use crate::hub::{Assignment, Claim, Client, TaskReport};
use crate::images::ImageSource;
use skyvi_core::catalog::OutputRow;
use skyvi_core::config::Config;
use skyvi_core::coordinator::{output_rows, run_task};
use skyvi_core::model::{ImagePatch, ParamVec};
use skyvi_core::partition::Task;
use skyvi_core::synth::derive_seed;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessOptions {
    /// Coordinator workers inside this process.
    pub threads: usize,
    /// Run seed; each task's coordinator seed is derived from it and the
    /// task id.
    pub seed: u64,
}

fn task_error(task: u64, e: impl std::fmt::Display) -> Error {
    Error::Task { task, msg: e.to_string() }
}

pub fn load_task_images(images: &dyn ImageSource, task: &Task) -> Result<Vec<ImagePatch>> {
    task.image_ids
        .iter()
        .map(|&i| images.load(i).map_err(|e| task_error(task.id, e)))
        .collect()
}

/// Prefetch of one task's images on its own thread.
pub struct Prefetch {
    handle: JoinHandle<Result<Vec<ImagePatch>>>,
    task: u64,
}

impl Prefetch {
    pub fn spawn(images: Arc<dyn ImageSource>, task: Arc<Task>) -> Self {
        let id = task.id;
        Prefetch {
            handle: std::thread::spawn(move || load_task_images(&*images, &task)),
            task: id,
        }
    }

    pub fn wait(self) -> Result<Vec<ImagePatch>> {
        self.handle
            .join()
            .unwrap_or_else(|_| Err(task_error(self.task, "image loader panicked")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskResult {
    pub visits: u64,
    pub newton_iterations: u64,
    pub rows: Vec<OutputRow>,
}

/// The work done for one task once its images are in memory. Failures of
/// the task itself must be [`Error::Task`]; any other error is treated as a
/// failure of the client and stops the process.
pub trait TaskRunner: Sync {
    fn run(&self, client: &mut dyn Client, a: &Assignment, patches: &[ImagePatch]) -> Result<TaskResult>;
}

/// Optimizes the task's sources with the coordinator, starting from their
/// stage-start values with the neighbors fixed at theirs, then writes them
/// back.
pub struct CoordinatorRunner<'a> {
    pub config: &'a Config,
    pub options: ProcessOptions,
}

impl TaskRunner for CoordinatorRunner<'_> {
    fn run(&self, client: &mut dyn Client, a: &Assignment, patches: &[ImagePatch]) -> Result<TaskResult> {
        let task = &a.task;
        if task.source_ids.is_empty() {
            return Ok(TaskResult::default());
        }
        let cfg = self.config;
        let own: Vec<ParamVec> = task.source_ids.iter().map(|&id| client.get(id)).collect::<Result<_>>()?;
        let fixed: Vec<ParamVec> = a.neighbors.iter().map(|&id| client.get(id)).collect::<Result<_>>()?;
        let seed = derive_seed(self.options.seed, task.id);
        let out = run_task(&task.source_ids, &own, &fixed, patches, cfg, self.options.threads, seed)
            .map_err(|e| task_error(task.id, e))?;
        let rows =
            output_rows(&task.source_ids, &out.params, &fixed, patches, cfg).map_err(|e| task_error(task.id, e))?;
        for (&id, p) in task.source_ids.iter().zip(&out.params) {
            client.put(id, *p)?;
        }
        Ok(TaskResult {
            visits: out.stats.active_pixel_visits,
            newton_iterations: out.stats.newton_iterations,
            rows,
        })
    }
}

/// Processes tasks until the run is done. A failing task is reported with
/// its error and the loop goes on; client errors end the loop.
pub fn process_loop(client: &mut dyn Client, images: Arc<dyn ImageSource>, runner: &dyn TaskRunner) -> Result<()> {
    let mut pending: Option<(Assignment, Prefetch)> = None;
    loop {
        let (a, data, waited) = match pending.take() {
            Some((a, p)) => {
                let t = Instant::now();
                let d = p.wait();
                (a, d, t.elapsed())
            }
            None => match client.claim(true)? {
                Claim::Task(a) => {
                    let t = Instant::now();
                    let d = load_task_images(&*images, &a.task);
                    (a, d, t.elapsed())
                }
                Claim::NotNow => continue,
                Claim::Done => return Ok(()),
            },
        };
        if let Claim::Task(next) = client.claim(false)? {
            let p = Prefetch::spawn(images.clone(), next.task.clone());
            pending = Some((next, p));
        }
        let t = Instant::now();
        let result = data.and_then(|patches| runner.run(client, &a, &patches));
        let processing = t.elapsed().as_secs_f64();
        let mut report = TaskReport {
            task: a.task.id,
            processing,
            loading_wait: waited.as_secs_f64(),
            visits: 0,
            newton_iterations: 0,
            rows: Vec::new(),
            error: None,
        };
        match result {
            Ok(d) => {
                report.visits = d.visits;
                report.newton_iterations = d.newton_iterations;
                report.rows = d.rows;
            }
            Err(e @ Error::Task { .. }) => report.error = Some(e.to_string()),
            Err(e) => return Err(e),
        }
        client.report(report)?;
    }
}
