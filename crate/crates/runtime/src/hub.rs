//! Shared state of one run: the scheduling tree, the stage barrier, the
//! parameter store and the trace. Processes talk to it through a
//! [`Client`], either directly or over a socket.

use crate::dtree::{Dtree, Policy, TaskRef};
use crate::error::{Error, Result};
use crate::metrics::{RunTrace, StageSpan, TaskRecord};
use crate::store::ParamStore;
use parking_lot::{Condvar, Mutex};
use skyvi_core::catalog::OutputRow;
use skyvi_core::config::Config;
use skyvi_core::model::{layout, scale_from_param, ParamVec};
use skyvi_core::partition::Task;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct Assignment {
    pub task: Arc<Task>,
    /// Sources outside the task whose footprints may reach its sources;
    /// held fixed while the task runs.
    pub neighbors: Arc<Vec<u64>>,
}

#[derive(Clone, Debug)]
pub enum Claim {
    Task(Assignment),
    /// Nothing available right now (non-blocking claims only).
    NotNow,
    Done,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    pub task: u64,
    pub processing: f64,
    pub loading_wait: f64,
    pub visits: u64,
    pub newton_iterations: u64,
    pub rows: Vec<OutputRow>,
    pub error: Option<String>,
}

/// A process's view of the run.
pub trait Client {
    /// A blocking claim waits at the stage barrier instead of returning
    /// [`Claim::NotNow`].
    fn claim(&mut self, blocking: bool) -> Result<Claim>;
    /// Block as of the current stage's start.
    fn get(&mut self, id: u64) -> Result<ParamVec>;
    fn put(&mut self, id: u64, value: ParamVec) -> Result<u64>;
    fn report(&mut self, report: TaskReport) -> Result<()>;
    fn abort(&mut self, msg: &str);
}

#[derive(Debug)]
struct State {
    dtree: Dtree,
    stages: Vec<(u8, Vec<u64>)>,
    stage_idx: usize,
    outstanding: usize,
    neighbors: HashMap<u64, Arc<Vec<u64>>>,
    assigned: HashMap<u64, (usize, f64)>,
    records: Vec<TaskRecord>,
    spans: Vec<StageSpan>,
    stage_params: Vec<(u8, Vec<(u64, ParamVec)>)>,
    rows: BTreeMap<u64, OutputRow>,
    requests: u64,
    messages: u64,
    finished_at: Option<f64>,
    abort: Option<String>,
}

/// Results of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// One row per source, from the last stage that processed it, by id.
    pub rows: Vec<OutputRow>,
    /// Store contents at the end of each stage.
    pub stage_params: Vec<(u8, Vec<(u64, ParamVec)>)>,
    pub trace: RunTrace,
    /// `(task, error)` for every task that failed.
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug)]
pub struct Hub {
    tasks: HashMap<u64, Arc<Task>>,
    store: ParamStore,
    state: Mutex<State>,
    cv: Condvar,
    clock: Instant,
    processes: usize,
    /// Largest `psf_sigma * pixel_scale` over the run's images.
    psf_reach: f64,
    radius_multiplier: f64,
}

impl Hub {
    /// The store starts from each source's initial value in the earliest
    /// stage that lists it. `psf_reach` is the largest
    /// `psf_sigma * pixel_scale` over the images.
    pub fn new(tasks: Vec<Task>, psf_reach: f64, processes: usize, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let policy = Policy::from(&cfg.runtime);
        let dtree = Dtree::new(processes, policy)?;
        let mut seen_tasks = HashSet::new();
        let mut per_stage: BTreeMap<u8, HashSet<u64>> = BTreeMap::new();
        for t in &tasks {
            if !seen_tasks.insert(t.id) {
                return Err(Error::invalid(format!("task id {} appears twice", t.id)));
            }
            if t.source_ids.len() != t.init.len() {
                return Err(Error::invalid(format!("task {} lists {} sources and {} initial values", t.id, t.source_ids.len(), t.init.len())));
            }
            let owned = per_stage.entry(t.stage).or_default();
            for &s in &t.source_ids {
                if !owned.insert(s) {
                    return Err(Error::invalid(format!("source {s} belongs to two stage-{} tasks", t.stage)));
                }
            }
        }
        let mut ordered: Vec<&Task> = tasks.iter().collect();
        ordered.sort_by_key(|t| t.stage);
        let store = ParamStore::new(
            ordered
                .iter()
                .flat_map(|t| t.source_ids.iter().copied().zip(t.init.iter().copied())),
        );
        let stages: Vec<(u8, Vec<u64>)> = per_stage
            .keys()
            .map(|&s| (s, tasks.iter().filter(|t| t.stage == s).map(|t| t.id).collect()))
            .collect();
        let hub = Hub {
            tasks: tasks.into_iter().map(|t| (t.id, Arc::new(t))).collect(),
            store,
            state: Mutex::new(State {
                dtree,
                stages,
                stage_idx: 0,
                outstanding: 0,
                neighbors: HashMap::new(),
                assigned: HashMap::new(),
                records: Vec::new(),
                spans: Vec::new(),
                stage_params: Vec::new(),
                rows: BTreeMap::new(),
                requests: 0,
                messages: 0,
                finished_at: None,
                abort: None,
            }),
            cv: Condvar::new(),
            clock: Instant::now(),
            processes,
            psf_reach,
            radius_multiplier: cfg.model.radius_multiplier,
        };
        {
            let mut st = hub.state.lock();
            hub.open_stage(&mut st)?;
        }
        Ok(hub)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn task(&self, id: u64) -> Option<&Arc<Task>> {
        self.tasks.get(&id)
    }

    fn now(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    /// Opens the stage at `stage_idx`, skipping empty ones, or finishes the
    /// run when none is left.
    fn open_stage(&self, st: &mut State) -> Result<()> {
        loop {
            let Some((stage, ids)) = st.stages.get(st.stage_idx).cloned() else {
                st.finished_at = Some(self.now());
                return Ok(());
            };
            self.store.begin_stage();
            let staged = self.store.staged_snapshot();
            let max_scale = staged
                .iter()
                .map(|(_, p)| scale_from_param(p[layout::LOGIT_SCALE]))
                .fold(0.0, f64::max);
            let reach = 2.0 * self.radius_multiplier * (self.psf_reach + max_scale);
            for id in &ids {
                let t = &self.tasks[id];
                let own: HashSet<u64> = t.source_ids.iter().copied().collect();
                let zone = t.region.expand(reach);
                let near: Vec<u64> = staged
                    .iter()
                    .filter(|(sid, p)| !own.contains(sid) && zone.contains([p[layout::POS_X], p[layout::POS_Y]]))
                    .map(|(sid, _)| *sid)
                    .collect();
                st.neighbors.insert(*id, Arc::new(near));
            }
            let refs: Vec<TaskRef> = ids
                .iter()
                .map(|id| TaskRef {
                    id: *id,
                    work: self.tasks[id].estimated_work,
                })
                .collect();
            st.dtree.load_stage(&refs)?;
            let now = self.now();
            st.spans.push(StageSpan { stage, start: now, end: now });
            if !ids.is_empty() {
                return Ok(());
            }
            st.stage_params.push((stage, self.store.snapshot()));
            st.stage_idx += 1;
        }
    }

    pub fn claim(&self, process: usize, blocking: bool) -> Result<Claim> {
        if process >= self.processes {
            return Err(Error::Protocol(format!("process {process} out of range (run has {})", self.processes)));
        }
        let mut st = self.state.lock();
        loop {
            if let Some(msg) = &st.abort {
                return Err(Error::Aborted(msg.clone()));
            }
            if st.finished_at.is_some() {
                return Ok(Claim::Done);
            }
            let g = st.dtree.request(process);
            st.requests += 1;
            st.messages += g.messages as u64;
            if let Some(id) = g.task {
                st.outstanding += 1;
                let now = self.now();
                st.assigned.insert(id, (process, now));
                if g.messages > 0 {
                    // surplus may now sit with a waiting ancestor
                    self.cv.notify_all();
                }
                return Ok(Claim::Task(Assignment {
                    task: self.tasks[&id].clone(),
                    neighbors: st.neighbors[&id].clone(),
                }));
            }
            if !blocking {
                return Ok(Claim::NotNow);
            }
            self.cv.wait(&mut st);
        }
    }

    pub fn report(&self, r: TaskReport) -> Result<()> {
        let mut st = self.state.lock();
        let now = self.now();
        let Some((process, assigned)) = st.assigned.remove(&r.task) else {
            return Err(Error::Protocol(format!("task {} reported but not outstanding", r.task)));
        };
        let stage = self.tasks[&r.task].stage;
        if let Some(e) = &r.error {
            log::error!("task {} failed: {e}", r.task);
        }
        for row in &r.rows {
            st.rows.insert(row.id, *row);
        }
        st.records.push(TaskRecord {
            task: r.task,
            stage,
            process,
            assigned,
            start: (now - r.processing).max(assigned),
            end: now,
            processing: r.processing,
            loading_wait: r.loading_wait,
            visits: r.visits,
            newton_iterations: r.newton_iterations,
            error: r.error,
        });
        st.outstanding -= 1;
        if st.outstanding == 0 && st.dtree.remaining() == 0 {
            let stage = st.stages[st.stage_idx].0;
            st.spans.last_mut().expect("open stage").end = now;
            st.stage_params.push((stage, self.store.snapshot()));
            st.stage_idx += 1;
            self.open_stage(&mut st)?;
        }
        self.cv.notify_all();
        Ok(())
    }

    /// Fails every pending and future claim.
    pub fn abort(&self, msg: &str) {
        let mut st = self.state.lock();
        if st.abort.is_none() && st.finished_at.is_none() {
            st.abort = Some(msg.to_string());
        }
        self.cv.notify_all();
    }

    pub fn aborted(&self) -> Option<String> {
        self.state.lock().abort.clone()
    }

    pub fn is_finished(&self) -> bool {
        self.state.lock().finished_at.is_some()
    }

    pub fn finish(self) -> Result<RunOutcome> {
        let st = self.state.into_inner();
        if let Some(msg) = st.abort {
            return Err(Error::Aborted(msg));
        }
        let Some(end) = st.finished_at else {
            return Err(Error::Aborted("run ended before all stages completed".into()));
        };
        let mut records = st.records;
        records.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.task.cmp(&b.task)));
        let failures = records
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| (r.task, e.clone())))
            .collect();
        Ok(RunOutcome {
            rows: st.rows.into_values().collect(),
            stage_params: st.stage_params,
            trace: RunTrace {
                processes: self.processes,
                wall_seconds: end,
                stages: st.spans,
                tasks: records,
                scheduler_requests: st.requests,
                scheduler_messages: st.messages,
            },
            failures,
        })
    }
}

/// In-process client.
pub struct LocalClient<'a> {
    pub hub: &'a Hub,
    pub process: usize,
}

impl Client for LocalClient<'_> {
    fn claim(&mut self, blocking: bool) -> Result<Claim> {
        self.hub.claim(self.process, blocking)
    }

    fn get(&mut self, id: u64) -> Result<ParamVec> {
        Ok(self.hub.store.get_staged(id)?.value)
    }

    fn put(&mut self, id: u64, value: ParamVec) -> Result<u64> {
        Ok(self.hub.store.put(id, value)?)
    }

    fn report(&mut self, report: TaskReport) -> Result<()> {
        self.hub.report(report)
    }

    fn abort(&mut self, msg: &str) {
        self.hub.abort(msg)
    }
}
