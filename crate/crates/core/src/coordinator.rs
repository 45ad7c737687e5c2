//! Conflict-free parallel block coordinate ascent over the sources of one
//! task.
//!
//! Each epoch draws a seeded random order of the sources, cuts it into
//! batches and splits every batch into the connected components of the
//! conflict graph restricted to it. Components of a batch run concurrently;
//! sources inside a component run one after another. Reads of sources
//! outside a component see the values from the start of the batch, so the
//! result does not depend on how many workers run or in which order they
//! pick up components.

use crate::catalog::{linear_response_sds, OutputRow};
use crate::config::Config;
use crate::error::{ensure, Error, Result};
use crate::model::{total_elbo, BlockProblem, Footprint, ImagePatch, ModelConfig, ParamVec, SourceModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinatorConfig {
    /// Stop once no free parameter moved more than this in an epoch.
    pub epoch_tol: f64,
    pub max_epochs: usize,
    /// Sources per batch. Independent of the worker count so that results
    /// are too.
    pub batch_size: usize,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            epoch_tol: 1e-6,
            max_epochs: 10,
            batch_size: 32,
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.epoch_tol >= 0.0, "epoch tolerance must be nonnegative");
        Ok(())
    }
}

/// Undirected graph joining sources whose active pixels overlap in some
/// image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictGraph {
    adjacency: Vec<Vec<usize>>,
}

impl ConflictGraph {
    /// Builds a graph from an edge list; self-loops and duplicates are
    /// dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        ConflictGraph { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.adjacency.iter().enumerate() {
            out.extend(list.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }
}

pub fn build_conflict_graph(sources: &[SourceModel], patches: &[ImagePatch], model: &ModelConfig) -> ConflictGraph {
    let geo: Vec<([f64; 2], f64)> = sources.iter().map(|s| (s.position, s.shape.scale)).collect();
    conflict_graph_from_geometry(&geo, patches, model)
}

fn conflict_graph_from_params(params: &[ParamVec], patches: &[ImagePatch], model: &ModelConfig) -> ConflictGraph {
    let geo: Vec<([f64; 2], f64)> = params
        .iter()
        .map(|p| {
            let m = SourceModel::from_params(p);
            (m.position, m.shape.scale)
        })
        .collect();
    conflict_graph_from_geometry(&geo, patches, model)
}

fn conflict_graph_from_geometry(geo: &[([f64; 2], f64)], patches: &[ImagePatch], model: &ModelConfig) -> ConflictGraph {
    let mut edges = Vec::new();
    for patch in patches {
        let fps: Vec<Footprint> = geo
            .iter()
            .map(|(pos, scale)| Footprint::new(*pos, *scale, &patch.meta, model))
            .collect();
        let mut order: Vec<usize> = (0..fps.len()).filter(|&i| !fps[i].is_empty()).collect();
        order.sort_by_key(|&i| (fps[i].cols.0, i));
        // sweep over columns: only boxes that start before this one ends
        for (k, &i) in order.iter().enumerate() {
            for &j in &order[k + 1..] {
                if fps[j].cols.0 >= fps[i].cols.1 {
                    break;
                }
                if fps[i].intersects(&fps[j]) {
                    edges.push((i.min(j), i.max(j)));
                }
            }
        }
    }
    ConflictGraph::from_edges(geo.len(), &edges)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Each component lists source indices in processing order.
    pub components: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Batch>,
}

pub fn plan_epoch(graph: &ConflictGraph, seed: u64, batch_size: usize) -> EpochPlan {
    let n = graph.len();
    let batch_size = batch_size.max(1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rank = vec![0usize; n];
    for (r, &v) in perm.iter().enumerate() {
        rank[v] = r;
    }
    let mut in_batch = vec![false; n];
    let mut seen = vec![false; n];
    let mut batches = Vec::new();
    for chunk in perm.chunks(batch_size) {
        for &v in chunk {
            in_batch[v] = true;
        }
        let mut components = Vec::new();
        for &start in chunk {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &u in graph.neighbors(v) {
                    if in_batch[u] && !seen[u] {
                        seen[u] = true;
                        comp.push(u);
                        queue.push_back(u);
                    }
                }
            }
            comp.sort_by_key(|&v| rank[v]);
            components.push(comp);
        }
        for &v in chunk {
            in_batch[v] = false;
        }
        batches.push(Batch { components });
    }
    EpochPlan { batches }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub epochs: usize,
    pub newton_iterations: u64,
    pub evaluations: u64,
    pub active_pixel_visits: u64,
    pub wall_seconds: f64,
    /// Task objective before the first epoch and after each epoch.
    pub objective_trace: Vec<f64>,
    /// Newton iterations of each block optimization, in execution order.
    pub block_iterations: Vec<usize>,
    pub unconverged_blocks: usize,
    /// Blocks left unchanged because the objective was not finite near them.
    pub failed_blocks: usize,
}

/// One block optimization as seen by the execution log. `start` and `end`
/// are ticks of a counter shared by all workers of the task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecEvent {
    pub epoch: usize,
    pub batch: usize,
    pub source: usize,
    pub worker: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub params: Vec<ParamVec>,
    pub stats: TaskStats,
    pub log: Vec<ExecEvent>,
    /// Conflict graph used in each epoch.
    pub graphs: Vec<ConflictGraph>,
}

impl TaskOutcome {
    /// Pairs of conflicting sources whose block optimizations overlapped in
    /// time.
    pub fn concurrent_conflicts(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (e, graph) in self.graphs.iter().enumerate() {
            let events: Vec<&ExecEvent> = self.log.iter().filter(|ev| ev.epoch == e).collect();
            for (x, a) in events.iter().enumerate() {
                for b in &events[x + 1..] {
                    let overlap = a.start < b.end && b.start < a.end;
                    if overlap && graph.has_edge(a.source, b.source) {
                        out.push((a.source, b.source));
                    }
                }
            }
        }
        out
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct BlockResult {
    source: usize,
    params: ParamVec,
    iterations: usize,
    evaluations: usize,
    visits: u64,
    converged: bool,
    failed: bool,
}

/// Optimizes the task's sources with `fixed` neighbors held constant.
/// `ids` name the sources in error messages.
pub fn run_task(
    ids: &[u64],
    sources: &[ParamVec],
    fixed: &[ParamVec],
    patches: &[ImagePatch],
    config: &Config,
    workers: usize,
    seed: u64,
) -> Result<TaskOutcome> {
    let started = Instant::now();
    ensure!(ids.len() == sources.len(), "{} ids for {} sources", ids.len(), sources.len());
    ensure!(workers >= 1, "need at least one worker");
    ensure!(!patches.is_empty(), "task has no images");
    config.coordinator.validate()?;
    // a source just off an image edge still lights its pixels
    for (id, p) in ids.iter().zip(sources) {
        let m = SourceModel::from_params(p);
        let covered = patches
            .iter()
            .any(|patch| Footprint::new(m.position, m.shape.scale, &patch.meta, &config.model).pixels().next().is_some());
        if !covered {
            let pos = m.position;
            return Err(Error::Validation(format!("source {id} at ({}, {}) is not covered by any image", pos[0], pos[1])));
        }
    }
    let task_objective = |cur: &[ParamVec]| -> Result<f64> {
        let mut all = cur.to_vec();
        all.extend_from_slice(fixed);
        total_elbo(&all, patches, &config.priors, &config.model)
    };

    let mut current = sources.to_vec();
    let mut stats = TaskStats {
        objective_trace: vec![task_objective(&current)?],
        ..Default::default()
    };
    let mut log = Vec::new();
    let mut graphs = Vec::new();
    let clock = AtomicU64::new(0);

    for epoch in 0..config.coordinator.max_epochs {
        let graph = conflict_graph_from_params(&current, patches, &config.model);
        let plan = plan_epoch(&graph, epoch_seed(seed, epoch), config.coordinator.batch_size);
        graphs.push(graph);
        let before = current.clone();
        for (bi, batch) in plan.batches.iter().enumerate() {
            let snapshot = current.clone();
            let results = run_batch(&batch.components, &snapshot, fixed, patches, config, workers, &clock, epoch, bi, &mut log)?;
            for comp in results {
                for r in comp {
                    current[r.source] = r.params;
                    stats.newton_iterations += r.iterations as u64;
                    stats.evaluations += r.evaluations as u64;
                    stats.active_pixel_visits += r.visits;
                    stats.block_iterations.push(r.iterations);
                    stats.unconverged_blocks += !r.converged as usize;
                    stats.failed_blocks += r.failed as usize;
                }
            }
        }
        stats.epochs += 1;
        stats.objective_trace.push(task_objective(&current)?);
        let change = before
            .iter()
            .zip(&current)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        if change < config.coordinator.epoch_tol {
            break;
        }
    }
    stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TaskOutcome {
        params: current,
        stats,
        log,
        graphs,
    })
}

/// Output rows for a task's sources, with brightness and color sds from
/// the linear response of the objective at `params`. Sources whose
/// curvature block is not negative definite keep the factor sds of q.
pub fn output_rows(
    ids: &[u64],
    params: &[ParamVec],
    fixed: &[ParamVec],
    patches: &[ImagePatch],
    config: &Config,
) -> Result<Vec<OutputRow>> {
    ensure!(ids.len() == params.len(), "{} ids for {} sources", ids.len(), params.len());
    let mut rows = Vec::with_capacity(ids.len());
    for (i, (&id, theta)) in ids.iter().zip(params).enumerate() {
        let m = SourceModel::from_params(theta);
        let row = OutputRow::new(id, &m);
        let others: Vec<ParamVec> = params
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| *p)
            .chain(fixed.iter().copied())
            .collect();
        let problem = BlockProblem::new(&others, patches, &config.priors, &config.model)?;
        let obj = problem.evaluate(theta);
        let row = match linear_response_sds(&obj.hessian, m.map_type().0) {
            Some((l, c)) if obj.is_finite() => row.with_sds(l, c),
            _ => row,
        };
        rows.push(row);
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    components: &[Vec<usize>],
    snapshot: &[ParamVec],
    fixed: &[ParamVec],
    patches: &[ImagePatch],
    config: &Config,
    workers: usize,
    clock: &AtomicU64,
    epoch: usize,
    batch: usize,
    log: &mut Vec<ExecEvent>,
) -> Result<Vec<Vec<BlockResult>>> {
    let slots: Vec<Mutex<Option<Result<(Vec<BlockResult>, Vec<ExecEvent>)>>>> =
        components.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = |worker: usize| loop {
        let c = next.fetch_add(1, Ordering::SeqCst);
        if c >= components.len() {
            break;
        }
        let r = run_component(&components[c], snapshot, fixed, patches, config, clock, epoch, batch, worker);
        *slots[c].lock().expect("slot lock") = Some(r);
    };
    let n_threads = workers.min(components.len());
    if n_threads <= 1 {
        work(0);
    } else {
        std::thread::scope(|s| {
            for w in 0..n_threads {
                let work = &work;
                s.spawn(move || work(w));
            }
        });
    }
    let mut out = Vec::with_capacity(components.len());
    for slot in slots {
        let (res, events) = slot.into_inner().expect("slot lock").expect("every component ran")?;
        log.extend(events);
        out.push(res);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_component(
    comp: &[usize],
    snapshot: &[ParamVec],
    fixed: &[ParamVec],
    patches: &[ImagePatch],
    config: &Config,
    clock: &AtomicU64,
    epoch: usize,
    batch: usize,
    worker: usize,
) -> Result<(Vec<BlockResult>, Vec<ExecEvent>)> {
    let mut working = snapshot.to_vec();
    let mut results = Vec::with_capacity(comp.len());
    let mut events = Vec::with_capacity(comp.len());
    for &i in comp {
        let start = clock.fetch_add(1, Ordering::SeqCst);
        let others: Vec<ParamVec> = working
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| *p)
            .chain(fixed.iter().copied())
            .collect();
        let problem = BlockProblem::new(&others, patches, &config.priors, &config.model)?;
        // a block that cannot leave a non-finite region keeps its values
        let (x, st, failed) = match problem.maximize(&working[i], &config.solver) {
            Ok((x, st)) => (x, st, false),
            Err(Error::NonFinite { radius }) => {
                log::warn!("block {i} stopped at trust radius {radius:e}; keeping its parameters");
                (working[i], Default::default(), true)
            }
            Err(e) => return Err(e),
        };
        working[i] = x;
        let end = clock.fetch_add(1, Ordering::SeqCst);
        events.push(ExecEvent {
            epoch,
            batch,
            source: i,
            worker,
            start,
            end,
        });
        results.push(BlockResult {
            source: i,
            params: x,
            iterations: st.iteration,
            evaluations: st.evaluations,
            visits: st.visits,
            converged: st.converged,
            failed,
        });
    }
    Ok((results, events))
}
