//! The `skyvi` command line: synthetic surveys, task files, inference runs
//! and catalog scoring. Each subcommand is also callable as a function so
//! the pipeline can be driven from tests.
//!
//! A survey directory as written by `synth` holds `survey.toml`,
//! `truth.csv`, `prior.csv` and `images/`.

pub mod check;
pub mod output;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use output::Outputs;
use serde::{Deserialize, Serialize};
use skyvi_core::catalog::{Catalog, OutputRow};
use skyvi_core::config::Config;
use skyvi_core::io::{
    image_path, read_catalog, read_image, read_image_meta, read_output_catalog, read_tasks, write_catalog, write_image,
    write_output_catalog, write_tasks,
};
use skyvi_core::model::{total_elbo, ImageMeta, ParamVec};
use skyvi_core::partition::{estimate_work, make_tasks, partition_sky, shift_partition, SkyRegion, Task};
use skyvi_core::score::{score_catalogs, ScoreConfig, ScoreReport};
use skyvi_core::synth::{degrade_catalog, derive_seed, generate_catalog, render_images, survey_metas};
use skyvi_runtime::driver::{run_inprocess, RunOptions};
use skyvi_runtime::hub::RunOutcome;
use skyvi_runtime::images::DirImages;
use skyvi_runtime::metrics::{account, RunMetrics};
use skyvi_runtime::net::{run_tcp, run_worker};
use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, Stdio};
use std::sync::Arc;
use std::time::Duration;

pub const SURVEY_FILE: &str = "survey.toml";
pub const TRUTH_FILE: &str = "truth.csv";
pub const PRIOR_FILE: &str = "prior.csv";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Parser)]
#[command(name = "skyvi", version, about = "Variational inference of astronomical catalogs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic survey: ground truth, images and a noisy prior catalog.
    Synth(SynthArgs),
    /// Split a survey into stage-1 and stage-2 tasks and write a task file.
    Partition(PartitionArgs),
    /// Run inference over a task file; writes a catalog CSV and a metrics JSON.
    Infer(InferArgs),
    /// Match an inferred catalog against ground truth and report errors.
    Score(ScoreArgs),
    /// Run the derivative, evidence-bound and determinism self-tests.
    Check(check::CheckArgs),
    /// Worker process of a TCP run.
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Survey directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub sources: usize,
    /// Sky width in pixels.
    #[arg(long, default_value_t = 100.0)]
    pub width: f64,
    /// Sky height in pixels.
    #[arg(long, default_value_t = 100.0)]
    pub height: f64,
    /// Image side in pixels; the sky is tiled by such images in every band.
    #[arg(long, default_value_t = 100)]
    pub tile: usize,
    /// Sky background in counts per pixel.
    #[arg(long, default_value_t = 40.0)]
    pub background: f64,
    /// Point-spread width in pixels.
    #[arg(long, default_value_t = 1.2)]
    pub psf: f64,
    /// Sd of the prior catalog's position error.
    #[arg(long, default_value_t = 0.3)]
    pub position_jitter: f64,
    /// Sd of the prior catalog's log-flux error.
    #[arg(long, default_value_t = 0.2)]
    pub flux_jitter: f64,
    /// Probability that the prior catalog has the wrong type.
    #[arg(long, default_value_t = 0.0)]
    pub flip: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML config supplying priors and model settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PartitionArgs {
    /// Survey directory from `synth`.
    #[arg(long)]
    pub survey: PathBuf,
    /// Catalog to partition and initialize from; defaults to the survey's prior catalog.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Aim for about this many tasks per stage: the work threshold is the total work over this.
    #[arg(long, default_value_t = 8)]
    pub tasks: usize,
    /// Regions are never split below this side length.
    #[arg(long, default_value_t = 2.0)]
    pub min_extent: f64,
    /// 1 for a single stage, 2 to add the shifted second stage.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stages: u8,
    /// Task file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Transport {
    /// Every process is a thread of this one.
    Inprocess,
    /// Worker processes connect over local TCP.
    Tcp,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    /// Directory holding the survey images.
    #[arg(long)]
    pub images: PathBuf,
    /// Output catalog CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub processes: usize,
    /// Coordinator threads per process.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Transport::Inprocess)]
    pub transport: Transport,
    /// Add the total ELBO after every stage to the metrics; loads every image.
    #[arg(long)]
    pub stage_elbo: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// Ground-truth catalog CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// Inferred catalog CSV.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Matching radius in pixels.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Sky units per pixel.
    #[arg(long, default_value_t = 1.0)]
    pub pixel_scale: f64,
    /// Sources with p_star at or above this count as stars.
    #[arg(long, default_value_t = 0.5)]
    pub star_threshold: f64,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WorkerArgs {
    #[arg(long)]
    pub connect: SocketAddr,
    #[arg(long)]
    pub process: u32,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let info = synth(&a)?;
            println!(
                "wrote {} sources and {} images to {}",
                info.sources,
                info.images,
                a.out.display()
            );
        }
        Command::Partition(a) => {
            let s = partition(&a)?;
            for (stage, n) in &s.tasks_per_stage {
                println!("stage {stage}: {n} tasks");
            }
            println!("work threshold {:.4e}, total work {:.4e}", s.threshold, s.total_work);
            if s.skipped > 0 {
                println!("{} catalog entries lie outside the survey and were skipped", s.skipped);
            }
        }
        Command::Infer(a) => {
            let s = infer(&a)?;
            println!("{} sources inferred in {:.2} s", s.rows, s.metrics.run.processes.first().map_or(0.0, |p| p.wall_seconds));
            println!(
                "{} active-pixel visits, about {:.3e} flops",
                s.metrics.run.active_pixel_visits, s.metrics.run.flops_estimate
            );
            for e in &s.metrics.stage_elbo {
                println!("stage {} total ELBO {:.6}", e.stage, e.elbo);
            }
        }
        Command::Score(a) => println!("{}", score(&a)?),
        Command::Check(a) => check::run(&a)?,
        Command::Worker(a) => run_worker(a.connect, a.process)?,
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

/// Contents of `survey.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyInfo {
    pub bounds: SkyRegion,
    pub sources: usize,
    pub images: usize,
    pub tile: usize,
    pub background: f64,
    pub psf: f64,
    pub seed: u64,
}

impl SurveyInfo {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SURVEY_FILE);
        let s = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&s).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn metas(&self, dir: &Path) -> Result<Vec<ImageMeta>> {
        let images = dir.join(IMAGE_DIR);
        (0..self.images)
            .map(|i| Ok(read_image_meta(&image_path(&images, i))?))
            .collect()
    }
}

pub fn synth(a: &SynthArgs) -> Result<SurveyInfo> {
    let cfg = load_config(a.config.as_deref())?;
    if a.tile == 0 {
        bail!("--tile must be positive");
    }
    let bounds = SkyRegion::new([0.0, 0.0], [a.width, a.height])?;
    let truth = generate_catalog(&bounds, a.sources, &cfg.priors, derive_seed(a.seed, 0))?.catalog;
    let metas = survey_metas(&bounds, a.tile, a.background, a.psf);
    let patches = render_images(&truth, &metas, &cfg.model, derive_seed(a.seed, 1))?;
    let prior = degrade_catalog(&truth, a.position_jitter, a.flux_jitter, a.flip, derive_seed(a.seed, 2))?;
    let info = SurveyInfo {
        bounds,
        sources: a.sources,
        images: patches.len(),
        tile: a.tile,
        background: a.background,
        psf: a.psf,
        seed: a.seed,
    };

    let mut out = Outputs::new();
    let images = out.dir(&a.out.join(IMAGE_DIR))?;
    for (i, p) in patches.iter().enumerate() {
        write_image(&image_path(&images, i), p)?;
    }
    write_catalog(&out.file(&a.out.join(TRUTH_FILE))?, &truth)?;
    write_catalog(&out.file(&a.out.join(PRIOR_FILE))?, &prior)?;
    let survey = out.file(&a.out.join(SURVEY_FILE))?;
    std::fs::write(&survey, toml::to_string(&info)?).with_context(|| format!("writing {}", survey.display()))?;
    out.commit()?;
    Ok(info)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSummary {
    pub total_work: f64,
    pub threshold: f64,
    pub tasks_per_stage: Vec<(u8, usize)>,
    pub skipped: usize,
    pub tasks: Vec<Task>,
}

pub fn partition(a: &PartitionArgs) -> Result<PartitionSummary> {
    let cfg = load_config(a.config.as_deref())?;
    if a.tasks == 0 {
        bail!("--tasks must be positive");
    }
    let info = SurveyInfo::load(&a.survey)?;
    let metas = info.metas(&a.survey)?;
    let catalog_path = a.catalog.clone().unwrap_or_else(|| a.survey.join(PRIOR_FILE));
    let catalog = read_catalog(&catalog_path)?;
    let total_work = estimate_work(&info.bounds, &catalog, &metas, &cfg.model);
    let threshold = total_work / a.tasks as f64;
    if !(threshold > 0.0) {
        bail!("{} has no sources inside the survey, nothing to partition", catalog_path.display());
    }
    let leaves = partition_sky(&info.bounds, &catalog, &metas, &cfg.model, threshold, a.min_extent)?;
    let stage1: Vec<SkyRegion> = leaves.iter().map(|l| l.region).collect();
    let first = make_tasks(&stage1, &catalog, &metas, &cfg.model, 1, 0)?;
    let skipped = first.skipped;
    let mut tasks = first.tasks;
    let mut per_stage = vec![(1, tasks.len())];
    if a.stages == 2 {
        let stage2 = shift_partition(&stage1, &info.bounds)?;
        let second = make_tasks(&stage2, &catalog, &metas, &cfg.model, 2, tasks.len() as u64)?;
        per_stage.push((2, second.tasks.len()));
        tasks.extend(second.tasks);
    }
    let mut out = Outputs::new();
    write_tasks(&out.file(&a.out)?, &tasks)?;
    out.commit()?;
    Ok(PartitionSummary {
        total_work,
        threshold,
        tasks_per_stage: per_stage,
        skipped,
        tasks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageElbo {
    pub stage: u8,
    pub elbo: f64,
}

/// The metrics JSON written by `infer`: the run metrics plus, on request,
/// the total ELBO after each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    #[serde(flatten)]
    pub run: RunMetrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_elbo: Vec<StageElbo>,
}

#[derive(Clone, Debug)]
pub struct InferSummary {
    pub rows: usize,
    pub metrics: MetricsDoc,
}

pub fn infer(a: &InferArgs) -> Result<InferSummary> {
    let cfg = load_config(a.config.as_deref())?;
    if a.processes == 0 || a.threads == 0 {
        bail!("--processes and --threads must be positive");
    }
    let tasks = read_tasks(&a.tasks)?;
    if !a.images.is_dir() {
        bail!("{}: not a directory", a.images.display());
    }
    let opts = RunOptions {
        processes: a.processes,
        threads: a.threads,
        seed: a.seed,
    };
    let image_ids: BTreeSet<usize> = tasks.iter().flat_map(|t| t.image_ids.iter().copied()).collect();
    let outcome = match a.transport {
        Transport::Inprocess => {
            let images = Arc::new(DirImages {
                dir: a.images.clone(),
            });
            run_inprocess(tasks, images, &cfg, &opts)?
        }
        Transport::Tcp => infer_tcp(tasks, a, &cfg, &opts)?,
    };
    if !outcome.failures.is_empty() {
        let list: Vec<String> = outcome.failures.iter().map(|(_, m)| m.clone()).collect();
        bail!("{} task(s) failed: {}", list.len(), list.join("; "));
    }
    let stage_elbo = if a.stage_elbo {
        stage_elbos(&outcome, &a.images, &image_ids, &cfg)?
    } else {
        Vec::new()
    };
    let doc = MetricsDoc {
        run: account(&outcome.trace, &cfg.runtime),
        stage_elbo,
    };
    let mut out = Outputs::new();
    write_output_catalog(&out.file(&a.out)?, &outcome.rows)?;
    let metrics = out.file(&a.metrics)?;
    std::fs::write(&metrics, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", metrics.display()))?;
    out.commit()?;
    Ok(InferSummary {
        rows: outcome.rows.len(),
        metrics: doc,
    })
}

struct Children(Vec<Child>);

impl Drop for Children {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn infer_tcp(tasks: Vec<Task>, a: &InferArgs, cfg: &Config, opts: &RunOptions) -> Result<RunOutcome> {
    let exe = std::env::current_exe().context("locating the skyvi executable")?;
    let mut children = Children(Vec::new());
    let outcome = run_tcp(
        tasks,
        &a.tasks,
        &a.images,
        cfg,
        opts,
        Duration::from_secs(60),
        &mut |addr, p| {
            let child = Process::new(&exe)
                .args(["worker", "--connect", &addr.to_string(), "--process", &p.to_string()])
                .stdin(Stdio::null())
                .spawn()
                .map_err(|e| skyvi_runtime::Error::Protocol(format!("starting worker {p}: {e}")))?;
            children.0.push(child);
            Ok(())
        },
    )?;
    for (p, c) in children.0.iter_mut().enumerate() {
        let status = c.wait()?;
        if !status.success() {
            bail!("worker {p} exited with {status}");
        }
    }
    children.0.clear();
    Ok(outcome)
}

fn stage_elbos(outcome: &RunOutcome, dir: &Path, ids: &BTreeSet<usize>, cfg: &Config) -> Result<Vec<StageElbo>> {
    let patches = ids
        .iter()
        .map(|&i| Ok(read_image(&image_path(dir, i))?))
        .collect::<Result<Vec<_>>>()?;
    outcome
        .stage_params
        .iter()
        .map(|(stage, params)| {
            let p: Vec<ParamVec> = params.iter().map(|(_, v)| *v).collect();
            Ok(StageElbo {
                stage: *stage,
                elbo: total_elbo(&p, &patches, &cfg.priors, &cfg.model)?,
            })
        })
        .collect()
}

pub fn score(a: &ScoreArgs) -> Result<ScoreReport> {
    let truth: Catalog = read_catalog(&a.truth)?;
    let estimate: Vec<OutputRow> = read_output_catalog(&a.estimate)?;
    let cfg = ScoreConfig {
        radius: a.radius,
        pixel_scale: a.pixel_scale,
        star_threshold: a.star_threshold,
    };
    let report = score_catalogs(&truth, &estimate, &cfg)?;
    if let Some(path) = &a.out {
        let mut out = Outputs::new();
        let tmp = out.file(path)?;
        std::fs::write(&tmp, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        out.commit()?;
    }
    Ok(report)
}
