//! Runs a task list with every process as a thread of this one.

use crate::error::{Error, Result};
use crate::exec::{process_loop, CoordinatorRunner, ProcessOptions, TaskRunner};
use crate::hub::{Hub, LocalClient, RunOutcome};
use crate::images::ImageSource;
use skyvi_core::config::Config;
use skyvi_core::partition::Task;
use std::collections::BTreeSet;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub processes: usize,
    /// Coordinator workers per process.
    pub threads: usize,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            processes: 1,
            threads: 1,
            seed: 0,
        }
    }
}

/// Largest `psf_sigma * pixel_scale` over the images the tasks use.
pub fn psf_reach(tasks: &[Task], images: &dyn ImageSource) -> Result<f64> {
    let ids: BTreeSet<usize> = tasks.iter().flat_map(|t| t.image_ids.iter().copied()).collect();
    let mut reach = 0.0f64;
    for id in ids {
        let m = images.meta(id)?;
        reach = reach.max(m.psf_sigma * m.pixel_scale);
    }
    Ok(reach)
}

pub fn run_inprocess(tasks: Vec<Task>, images: Arc<dyn ImageSource>, cfg: &Config, opts: &RunOptions) -> Result<RunOutcome> {
    if opts.threads == 0 {
        return Err(Error::invalid("need at least one thread per process"));
    }
    let runner = CoordinatorRunner {
        config: cfg,
        options: ProcessOptions {
            threads: opts.threads,
            seed: opts.seed,
        },
    };
    run_inprocess_with(tasks, images, cfg, opts.processes, &runner)
}

/// [`run_inprocess`] with a custom task body.
pub fn run_inprocess_with(
    tasks: Vec<Task>,
    images: Arc<dyn ImageSource>,
    cfg: &Config,
    processes: usize,
    runner: &dyn TaskRunner,
) -> Result<RunOutcome> {
    let reach = psf_reach(&tasks, &*images)?;
    let hub = Hub::new(tasks, reach, processes, cfg)?;
    let errors: Vec<Error> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..processes)
            .map(|process| {
                let hub = &hub;
                let images = images.clone();
                s.spawn(move || {
                    let mut client = LocalClient { hub, process };
                    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                        process_loop(&mut client, images, runner)
                    }))
                    .unwrap_or_else(|_| Err(Error::Protocol("process panicked".into())));
                    if let Err(e) = &r {
                        hub.abort(&format!("process {process}: {e}"));
                    }
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .filter_map(|h| h.join().expect("panics are caught").err())
            .collect()
    });
    // the first failure is the cause; the others saw the abort
    if let Some(e) = errors.into_iter().find(|e| !matches!(e, Error::Aborted(_))) {
        return Err(e);
    }
    hub.finish()
}
