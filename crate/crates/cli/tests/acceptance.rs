//! Acceptance run: one line per criterion, PASS, FAIL or SKIP. With
//! SKYVI_ACCEPTANCE_STRICT set, any FAIL also fails the process.

use nalgebra::{DMatrix, DVector};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyvi_core::catalog::{Catalog, CatalogEntry, OutputRow};
use skyvi_core::config::Config;
use skyvi_core::coordinator::run_task;
use skyvi_core::model::{
    check_gradients, expected_rate, total_elbo, BlockProblem, GalaxyShape, ImagePatch, LightSource, ModelConfig, ParamVec,
    Priors, SourceKind, SourceModel, PARAM_DIM, REFERENCE_BAND,
};
use skyvi_core::partition::{
    estimate_work, make_tasks, partition_sky, shift_partition, SkyRegion, Task, INIT_LABEL_CONFIDENCE,
};
use skyvi_core::score::match_catalogs;
use skyvi_core::synth::{degrade_catalog, generate_catalog, render_images, survey_metas};
use skyvi_core::trust::{solve_tr_subproblem, SolverConfig};
use skyvi_core::verify::{log_evidence, random_instance, tiny_instance};
use skyvi_runtime::audit::{audit, OpKind, OpRecord};
use skyvi_runtime::dtree::Policy;
use skyvi_runtime::driver::{run_inprocess, RunOptions};
use skyvi_runtime::hub::RunOutcome;
use skyvi_runtime::images::MemImages;
use skyvi_runtime::metrics::{account, flops_estimate};
use skyvi_runtime::sim::{simulate, SimConfig, SimTask};
use skyvi_runtime::store::ParamStore;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn judge(passed: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if passed { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn params_of(cat: &Catalog) -> (Vec<u64>, Vec<ParamVec>) {
    cat.entries
        .iter()
        .map(|e| (e.id, SourceModel::from_light_source(&e.source, INIT_LABEL_CONFIDENCE).to_params()))
        .unzip()
}

struct Field {
    init: Catalog,
    patches: Vec<ImagePatch>,
}

fn field(n: usize, size: f64, tile: usize, seed: u64) -> Field {
    let bounds = SkyRegion::new([0.0, 0.0], [size, size]).unwrap();
    let model = ModelConfig::default();
    let truth = generate_catalog(&bounds, n, &Priors::default(), seed).unwrap().catalog;
    let metas = survey_metas(&bounds, tile, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &model, seed + 1).unwrap();
    let init = degrade_catalog(&truth, 0.3, 0.2, 0.0, seed + 2).unwrap();
    Field { init, patches }
}

fn jensen_bound() -> Outcome {
    let t = Instant::now();
    let model = ModelConfig::default();
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..50 {
        let inst = tiny_instance(seed, None);
        let geo: Vec<_> = inst.sources.iter().map(|s| (s.position, s.shape)).collect();
        let params: Vec<ParamVec> = inst.sources.iter().map(|s| s.to_params()).collect();
        let value = total_elbo(&params, &inst.patches, &inst.priors, &model).unwrap();
        let evidence = log_evidence(&geo, &inst.patches[0], &inst.priors, &model, 64).unwrap();
        worst = worst.max(value - evidence);
    }
    let secs = t.elapsed().as_secs_f64();
    judge(
        worst <= 1e-6 && secs < 60.0,
        format!("max ELBO - log evidence {worst:.3e} over 50 instances (limit 1e-6), {secs:.1} s"),
    )
}

fn derivatives() -> Outcome {
    let t = Instant::now();
    let model = ModelConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let inst = random_instance(1000 + seed, 3, 3);
        let r = check_gradients(&inst.sources, &inst.patches, &inst.priors, &model, 0, 1e-5).unwrap();
        worst = worst.max(r.max_error());
    }
    let secs = t.elapsed().as_secs_f64();
    judge(
        worst < 1e-6 && secs < 60.0,
        format!("max relative error {worst:.2e} over 100 configurations (limit 1e-6), {secs:.1} s"),
    )
}

fn model_value(g: &DVector<f64>, h: &DMatrix<f64>, p: &DVector<f64>) -> f64 {
    g.dot(p) + 0.5 * p.dot(&(h * p))
}

/// Maximum of the quadratic model over the sphere of radius `r`: a
/// 1000x1000 angular grid, then pattern search from the best cell.
fn sphere_max(g: &DVector<f64>, h: &DMatrix<f64>, r: f64) -> f64 {
    let at = |th: f64, ph: f64| {
        let p = DVector::from_vec(vec![r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()]);
        model_value(g, h, &p)
    };
    let n = 1000;
    let (mut bt, mut bp, mut best) = (0.0, 0.0, f64::NEG_INFINITY);
    for i in 0..n {
        let th = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let ph = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            let v = at(th, ph);
            if v > best {
                (bt, bp, best) = (th, ph, v);
            }
        }
    }
    let mut step = std::f64::consts::PI / n as f64;
    while step > 1e-12 {
        let mut moved = false;
        for (dt, dp) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let v = at(bt + dt, bp + dp);
            if v > best {
                (bt, bp, best) = (bt + dt, bp + dp, v);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}

fn newton_iterations_on_block_suite() -> (usize, usize) {
    let bounds = SkyRegion::new([0.0, 0.0], [100.0, 100.0]).unwrap();
    let priors = Priors::default();
    let model = ModelConfig::default();
    let truth = generate_catalog(&bounds, 100, &priors, 11).unwrap().catalog;
    let metas = survey_metas(&bounds, 100, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &model, 12).unwrap();
    let init = degrade_catalog(&truth, 0.3, 0.2, 0.1, 13).unwrap();
    let (_, truth_params) = params_of(&truth);
    let cfg = SolverConfig::default();
    let mut iters = Vec::new();
    for (i, e) in init.entries.iter().enumerate() {
        let others: Vec<ParamVec> = truth_params.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| *p).collect();
        let problem = BlockProblem::new(&others, &patches, &priors, &model).unwrap();
        let start = SourceModel::from_light_source(&e.source, INIT_LABEL_CONFIDENCE).to_params();
        let (_, st) = problem.maximize(&start, &cfg).unwrap();
        iters.push(st.iteration);
    }
    iters.sort_unstable();
    (iters[iters.len() / 2], iters.len())
}

fn trust_region() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_gap, mut worst_kkt, mut done) = (0.0f64, 0.0f64, 0);
    while done < 50 {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
        let h = (&a + a.transpose()) * 0.5;
        let eig = h.symmetric_eigenvalues();
        if eig.max() <= 0.05 || eig.min() >= -0.05 {
            continue;
        }
        let g = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let radius = rng.random_range(0.3..1.5);
        let s = solve_tr_subproblem(&g, &h, radius).unwrap();
        let got = model_value(&g, &h, &s.step);
        worst_gap = worst_gap.max((got - sphere_max(&g, &h, radius)).abs());
        let resid = (&h - DMatrix::identity(3, 3) * s.multiplier) * &s.step + &g;
        worst_kkt = worst_kkt.max(resid.norm() / g.norm());
        done += 1;
    }
    let (median, blocks) = newton_iterations_on_block_suite();
    judge(
        worst_gap <= 1e-4 && worst_kkt <= 1e-8 && median <= 40,
        format!(
            "max |model - oracle| {worst_gap:.2e} (limit 1e-4), max KKT residual {worst_kkt:.2e} |g| (limit 1e-8), median Newton iterations {median} over {blocks} blocks (limit 40)"
        ),
    )
}

fn serial_equivalence() -> Outcome {
    let cfg = Config::default();
    let (mut mismatches, mut conflicts, mut runs) = (0, 0, 0);
    for seed in 0..5 {
        let f = field(30, 40.0, 40, 100 + seed * 7);
        let (ids, x0) = params_of(&f.init);
        let base = run_task(&ids, &x0, &[], &f.patches, &cfg, 1, seed).unwrap();
        let bits = |p: &[ParamVec]| -> Vec<u64> { p.iter().flatten().map(|x| x.to_bits()).collect() };
        let want = bits(&base.params);
        conflicts += base.concurrent_conflicts().len();
        for workers in [2, 4, 8] {
            let out = run_task(&ids, &x0, &[], &f.patches, &cfg, workers, seed).unwrap();
            if bits(&out.params) != want {
                mismatches += 1;
            }
            conflicts += out.concurrent_conflicts().len();
            runs += 1;
        }
    }
    judge(
        mismatches == 0 && conflicts == 0,
        format!("{mismatches} of {runs} multi-worker runs differ from 1 worker (5 fields of 30 sources); {conflicts} concurrent conflicts in the logs"),
    )
}

fn epoch_monotonicity() -> Outcome {
    let cfg = Config::default();
    let (mut worst, mut falls) = (f64::NEG_INFINITY, 0);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.random_range(3..12);
        let f = field(n, 24.0, 24, 500 + seed * 3);
        let (ids, x0) = params_of(&f.init);
        let out = run_task(&ids, &x0, &[], &f.patches, &cfg, 2, seed).unwrap();
        for w in out.stats.objective_trace.windows(2) {
            let drop = w[0] - w[1];
            worst = worst.max(drop);
            if drop > 1e-9 {
                falls += 1;
            }
        }
    }
    judge(
        falls == 0,
        format!("largest epoch-to-epoch decrease {worst:.2e} over 20 tasks (slack 1e-9), {falls} violations"),
    )
}

fn partition_balance() -> Outcome {
    let bounds = SkyRegion::new([0.0, 0.0], [1000.0, 1000.0]).unwrap();
    let model = ModelConfig::default();
    let cat = generate_catalog(&bounds, 10_000, &Priors::default(), 3).unwrap().catalog;
    let metas = survey_metas(&bounds, 250, 40.0, 1.2);
    let total = estimate_work(&bounds, &cat, &metas, &model);
    let leaves = partition_sky(&bounds, &cat, &metas, &model, total / 32.0, 1.0).unwrap();
    let works: Vec<f64> = leaves.iter().map(|l| l.work).collect();
    let max = works.iter().cloned().fold(0.0, f64::max);
    let min = works.iter().cloned().fold(f64::INFINITY, f64::min);
    let regions: Vec<SkyRegion> = leaves.iter().map(|l| l.region).collect();
    let tiles = tiles_exactly(&regions, &bounds);
    judge(
        max / min <= 3.0 && tiles,
        format!("{} leaves, work max/min {:.3} (limit 3), exact tiling {}", leaves.len(), max / min, tiles),
    )
}

fn area(r: &SkyRegion) -> f64 {
    (r.max_corner[0] - r.min_corner[0]) * (r.max_corner[1] - r.min_corner[1])
}

fn tiles_exactly(regions: &[SkyRegion], bounds: &SkyRegion) -> bool {
    let inside = regions.iter().all(|r| {
        (0..2).all(|k| r.min_corner[k] >= bounds.min_corner[k] && r.max_corner[k] <= bounds.max_corner[k])
    });
    let sum: f64 = regions.iter().map(area).sum();
    let overlap = |a: &SkyRegion, b: &SkyRegion| {
        (0..2)
            .map(|k| (a.max_corner[k].min(b.max_corner[k]) - a.min_corner[k].max(b.min_corner[k])).max(0.0))
            .product::<f64>()
    };
    let disjoint = (0..regions.len()).all(|i| (i + 1..regions.len()).all(|j| overlap(&regions[i], &regions[j]) == 0.0));
    inside && disjoint && (sum - area(bounds)).abs() <= 1e-9 * area(bounds)
}

fn stage_elbos(out: &RunOutcome, patches: &[ImagePatch], cfg: &Config) -> Vec<(u8, f64)> {
    out.stage_params
        .iter()
        .map(|(s, p)| {
            let v: Vec<ParamVec> = p.iter().map(|(_, x)| *x).collect();
            (*s, total_elbo(&v, patches, &cfg.priors, &cfg.model).unwrap())
        })
        .collect()
}

fn two_stage_tasks(bounds: &SkyRegion, prior: &Catalog, patches: &[ImagePatch], n_tasks: usize) -> (Vec<SkyRegion>, Vec<Task>) {
    let model = ModelConfig::default();
    let metas: Vec<_> = patches.iter().map(|p| p.meta.clone()).collect();
    let total = estimate_work(bounds, prior, &metas, &model);
    let leaves = partition_sky(bounds, prior, &metas, &model, total / n_tasks as f64, 2.0).unwrap();
    let s1: Vec<SkyRegion> = leaves.iter().map(|l| l.region).collect();
    let s2 = shift_partition(&s1, bounds).unwrap();
    let mut tasks = make_tasks(&s1, prior, &metas, &model, 1, 0).unwrap().tasks;
    let next = tasks.len() as u64;
    tasks.extend(make_tasks(&s2, prior, &metas, &model, 2, next).unwrap().tasks);
    (s1, tasks)
}

fn two_stage_improvement() -> Outcome {
    let cfg = Config::default();
    let bounds = SkyRegion::new([0.0, 0.0], [60.0, 30.0]).unwrap();
    let mut truth = generate_catalog(&bounds, 14, &cfg.priors, 41).unwrap().catalog;
    let galaxy = LightSource {
        position: [30.2, 15.3],
        kind: SourceKind::Galaxy,
        flux: [2500.0, 4000.0, 6000.0, 7000.0, 7500.0],
        shape: GalaxyShape {
            profile_mix: 0.3,
            eccentricity: 0.6,
            scale: 3.0,
            angle: 20.0,
        },
    };
    truth.entries.push(CatalogEntry { id: 999, source: galaxy });
    let metas = survey_metas(&bounds, 30, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &cfg.model, 42).unwrap();
    let prior = degrade_catalog(&truth, 0.3, 0.2, 0.0, 43).unwrap();
    let (s1, tasks) = two_stage_tasks(&bounds, &prior, &patches, 2);
    // the galaxy's footprint must cross a stage-1 edge
    let g = prior.get(999).unwrap().source;
    let reach = cfg.model.radius_multiplier * (1.2 + g.shape.scale);
    let straddles = s1.iter().any(|r| {
        let inside = (0..2).all(|k| g.position[k] >= r.min_corner[k] && g.position[k] <= r.max_corner[k]);
        let edge = (0..2)
            .flat_map(|k| [(g.position[k] - r.min_corner[k]).abs(), (r.max_corner[k] - g.position[k]).abs()])
            .zip([bounds.min_corner[0], bounds.max_corner[0], bounds.min_corner[1], bounds.max_corner[1]])
            .enumerate()
            .filter(|(i, _)| {
                let k = i / 2;
                let side = if i % 2 == 0 { r.min_corner[k] } else { r.max_corner[k] };
                side != if i % 2 == 0 { bounds.min_corner[k] } else { bounds.max_corner[k] }
            })
            .map(|(_, (d, _))| d)
            .fold(f64::INFINITY, f64::min);
        inside && edge < reach
    });
    let images = Arc::new(MemImages::new(patches.clone()));
    let opts = RunOptions {
        processes: 2,
        threads: 1,
        seed: 4,
    };
    let out = run_inprocess(tasks, images, &cfg, &opts).unwrap();
    let e = stage_elbos(&out, &patches, &cfg);
    let (e1, e2) = (e[0].1, e[1].1);
    judge(
        straddles && out.failures.is_empty() && e2 >= e1,
        format!("galaxy footprint crosses a stage-1 edge: {straddles}; total ELBO stage 1 {e1:.4}, stage 2 {e2:.4} (gain {:.4})", e2 - e1),
    )
}

fn scheduler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut problems = Vec::new();
    for run in 0..200 {
        let n = rng.random_range(1..200u64);
        let tasks: Vec<SimTask> = (0..n)
            .map(|id| SimTask {
                id,
                stage: if rng.random_bool(0.5) { 1 } else { 2 },
                duration: rng.random_range(0.01..3.0),
            })
            .collect();
        let processes = rng.random_range(1..=16);
        let cfg = SimConfig {
            processes,
            policy: Policy {
                fanout: rng.random_range(1..=6),
                ..Policy::default()
            },
            message_latency: 0.0,
        };
        let tr = simulate(&tasks, &cfg).unwrap();
        let mut seen: HashMap<u64, usize> = HashMap::new();
        for e in &tr.events {
            *seen.entry(e.task).or_default() += 1;
        }
        if seen.len() != tasks.len() || seen.values().any(|&c| c != 1) {
            problems.push(format!("run {run}: not exactly once"));
        }
        let s1_end = tr.events.iter().filter(|e| e.stage == 1).map(|e| e.end).fold(0.0, f64::max);
        if tr.events.iter().any(|e| e.stage == 2 && e.start < s1_end) {
            problems.push(format!("run {run}: stage barrier crossed"));
        }
        for &(stage, start, end) in &tr.stages {
            let d: Vec<f64> = tasks.iter().filter(|t| t.stage == stage).map(|t| t.duration).collect();
            let bound = d.iter().sum::<f64>() / processes as f64 + d.iter().cloned().fold(0.0, f64::max);
            if end - start > bound + 1e-9 {
                problems.push(format!("run {run}: stage {stage} makespan {} > {bound}", end - start));
            }
        }
    }
    judge(
        problems.is_empty(),
        if problems.is_empty() {
            "200 simulated runs: exactly once, stage barrier and makespan bound hold".into()
        } else {
            problems[..problems.len().min(3)].join("; ")
        },
    )
}

fn linearizability() -> Outcome {
    let blocks = 16u64;
    let init: HashMap<u64, ParamVec> = (0..blocks).map(|b| (b, [b as f64; PARAM_DIM])).collect();
    let store = ParamStore::new(init.clone().into_iter());
    let clock = AtomicU64::new(0);
    let log = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for t in 0..8usize {
            let (store, clock, log) = (&store, &clock, &log);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                let mut mine = Vec::new();
                for seq in 0..1250u64 {
                    let block = rng.random_range(0..blocks);
                    let invoked = clock.fetch_add(1, Ordering::SeqCst);
                    let (kind, value, stamp) = if rng.random_bool(0.5) {
                        let v: ParamVec = std::array::from_fn(|k| (t * 100_000) as f64 + seq as f64 + k as f64 * 1e-3);
                        (OpKind::Put, v, store.put(block, v).unwrap())
                    } else {
                        let v = store.get(block).unwrap();
                        (OpKind::Get, v.value, v.stamp)
                    };
                    let returned = clock.fetch_add(1, Ordering::SeqCst);
                    mine.push(OpRecord {
                        thread: t,
                        block,
                        kind,
                        value,
                        stamp,
                        invoked,
                        returned,
                    });
                }
                log.lock().extend(mine);
            });
        }
    });
    let history = log.into_inner();
    let violations = audit(&history, &init);
    judge(
        history.len() == 10_000 && violations.is_empty(),
        format!("{} operations by 8 threads, {} violations (torn reads included)", history.len(), violations.len()),
    )
}

/// An end-to-end run over a synthetic field, shared by the accounting and
/// science checks.
struct ScienceRun {
    truth: Catalog,
    patches: Vec<ImagePatch>,
    rows: Vec<OutputRow>,
    outcome: RunOutcome,
}

fn science_run() -> ScienceRun {
    let cfg = Config::default();
    let bounds = SkyRegion::new([0.0, 0.0], [120.0, 120.0]).unwrap();
    let truth = generate_catalog(&bounds, 135, &cfg.priors, 61).unwrap().catalog;
    let metas = survey_metas(&bounds, 40, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &cfg.model, 62).unwrap();
    let prior = degrade_catalog(&truth, 0.3, 0.2, 0.2, 63).unwrap();
    let (_, tasks) = two_stage_tasks(&bounds, &prior, &patches, 8);
    let opts = RunOptions {
        processes: 2,
        threads: 1,
        seed: 6,
    };
    let outcome = run_inprocess(tasks, Arc::new(MemImages::new(patches.clone())), &cfg, &opts).unwrap();
    ScienceRun {
        truth,
        patches,
        rows: outcome.rows.clone(),
        outcome,
    }
}

fn accounting(run: &ScienceRun) -> Outcome {
    let cfg = Config::default();
    let exact = flops_estimate(1000, &cfg.runtime) == 44_435_875.0;
    let m = account(&run.outcome.trace, &cfg.runtime);
    let formula = m.flops_estimate == m.active_pixel_visits as f64 * 32317.0 * 1.375;
    let mut worst = 0.0f64;
    for p in &m.processes {
        let parts = [p.task_processing, p.image_loading, p.load_imbalance, p.other];
        let neg = parts.iter().map(|x| (-x).max(0.0)).sum::<f64>();
        worst = worst.max(((p.component_sum() - p.wall_seconds).abs() + neg) / p.wall_seconds);
    }
    judge(
        exact && formula && worst <= 0.01,
        format!(
            "1000 visits -> {} flops; run estimate matches visits x 32317 x 1.375: {formula}; components vs wall time off by at most {:.3}%",
            flops_estimate(1000, &cfg.runtime),
            100.0 * worst
        ),
    )
}

fn strong_scaling() -> Outcome {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 8 {
        return Outcome {
            verdict: Verdict::Skip,
            detail: format!("needs a CPU with at least 8 cores, this machine has {cores}"),
        };
    }
    let cfg = Config::default();
    let bounds = SkyRegion::new([0.0, 0.0], [400.0, 400.0]).unwrap();
    let truth = generate_catalog(&bounds, 1000, &cfg.priors, 71).unwrap().catalog;
    let metas = survey_metas(&bounds, 100, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &cfg.model, 72).unwrap();
    let prior = degrade_catalog(&truth, 0.3, 0.2, 0.0, 73).unwrap();
    let total = estimate_work(&bounds, &prior, &metas, &cfg.model);
    let leaves = partition_sky(&bounds, &prior, &metas, &cfg.model, total / 500.0, 1.0).unwrap();
    let regions: Vec<SkyRegion> = leaves.iter().map(|l| l.region).collect();
    let tasks = make_tasks(&regions, &prior, &metas, &cfg.model, 1, 0).unwrap().tasks;
    let images = Arc::new(MemImages::new(patches));
    let mut wall = Vec::new();
    for processes in [1, 8] {
        let opts = RunOptions {
            processes,
            threads: 1,
            seed: 0,
        };
        let t = Instant::now();
        run_inprocess(tasks.clone(), images.clone(), &cfg, &opts).unwrap();
        wall.push(t.elapsed().as_secs_f64());
    }
    let speedup = wall[0] / wall[1];
    judge(
        speedup >= 4.0,
        format!("{} tasks: {:.1} s on 1 process, {:.1} s on 8, speedup {speedup:.2} (limit 4)", tasks.len(), wall[0], wall[1]),
    )
}

fn peak_snr(s: &LightSource, patches: &[ImagePatch], model: &ModelConfig) -> f64 {
    patches
        .iter()
        .filter(|p| p.meta.band == REFERENCE_BAND)
        .filter_map(|p| {
            let (c, r) = p.meta.containing_pixel(s.position)?;
            let peak = expected_rate(&[*s], c as i64, r as i64, &p.meta, model).ok()? - p.meta.background;
            Some(peak / (peak + p.meta.background).sqrt())
        })
        .fold(0.0, f64::max)
}

fn science(run: &ScienceRun) -> Outcome {
    let model = ModelConfig::default();
    let bright = Catalog {
        entries: run
            .truth
            .entries
            .iter()
            .filter(|e| peak_snr(&e.source, &run.patches, &model) >= 20.0)
            .copied()
            .collect(),
    };
    let m = match_catalogs(&bright, &run.rows, 2.0).unwrap();
    let n = m.pairs.len();
    if n == 0 {
        return judge(false, "no high-SNR source was matched".into());
    }
    let (mut dist, mut wrong, mut covered) = (0.0, 0, 0);
    for p in &m.pairs {
        let t = &bright.entries[p.truth].source;
        let r = &run.rows[p.estimate];
        dist += p.distance;
        if (t.kind == SourceKind::Star) != (r.p_star >= 0.5) {
            wrong += 1;
        }
        if (r.logflux_mean - t.flux[REFERENCE_BAND].ln()).abs() <= 2.0 * r.logflux_sd {
            covered += 1;
        }
    }
    let pos = dist / n as f64;
    let miss = wrong as f64 / n as f64;
    let cov = covered as f64 / n as f64;
    judge(
        pos <= 0.5 && miss <= 0.05 && cov >= 0.8,
        format!(
            "{n} of {} high-SNR sources matched ({} with no estimate within 2 px); position error {pos:.3} px (limit 0.5), misclassified {:.1}% (limit 5%), brightness +-2 sd coverage {:.1}% (limit 80%)",
            bright.entries.len(),
            m.unmatched_truth.len(),
            100.0 * miss,
            100.0 * cov
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("criterion {n:>2} {tag} {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
    };
    report(1, "evidence bound", &mut jensen_bound);
    report(2, "derivative exactness", &mut derivatives);
    report(3, "trust-region subproblem", &mut trust_region);
    report(4, "serial equivalence", &mut serial_equivalence);
    report(5, "epoch monotonicity", &mut epoch_monotonicity);
    report(6, "partition balance", &mut partition_balance);
    report(7, "two-stage improvement", &mut two_stage_improvement);
    report(8, "scheduler", &mut scheduler);
    report(9, "store linearizability", &mut linearizability);
    let run = science_run();
    report(10, "work accounting", &mut || accounting(&run));
    report(11, "strong scaling", &mut strong_scaling);
    report(12, "science quality", &mut || science(&run));
    if failed > 0 {
        println!("{failed} criteria failed");
        // strict mode turns a failed criterion into a failed test run
        if std::env::var_os("SKYVI_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
