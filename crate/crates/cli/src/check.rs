//! `skyvi check`: quick self-tests of the objective's derivatives, the
//! evidence bound and the coordinator's determinism.

use anyhow::{bail, Result};
use clap::Args;
use skyvi_core::config::Config;
use skyvi_core::coordinator::run_task;
use skyvi_core::model::{check_gradients, total_elbo, ModelConfig, ParamVec, SourceModel};
use skyvi_core::partition::{SkyRegion, INIT_LABEL_CONFIDENCE};
use skyvi_core::synth::{degrade_catalog, generate_catalog, render_images, survey_metas};
use skyvi_core::verify::{log_evidence, random_instance, tiny_instance};

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 10)]
    pub cases: u64,
    /// First instance seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn gradients(cases: u64, seed: u64) -> Result<CheckResult> {
    let model = ModelConfig::default();
    let mut worst = 0.0f64;
    for s in seed..seed + cases {
        let inst = random_instance(s, 3, 3);
        let r = check_gradients(&inst.sources, &inst.patches, &inst.priors, &model, 0, 1e-5)?;
        worst = worst.max(r.max_error());
    }
    Ok(CheckResult {
        name: "derivatives",
        passed: worst < 1e-6,
        detail: format!("worst relative error {worst:.2e} over {cases} instances (limit 1e-6)"),
    })
}

pub fn evidence_bound(cases: u64, seed: u64) -> Result<CheckResult> {
    let model = ModelConfig::default();
    let mut worst = f64::NEG_INFINITY;
    for s in seed..seed + cases {
        let inst = tiny_instance(s, None);
        let geo: Vec<_> = inst.sources.iter().map(|q| (q.position, q.shape)).collect();
        let params: Vec<ParamVec> = inst.sources.iter().map(|q| q.to_params()).collect();
        let value = total_elbo(&params, &inst.patches, &inst.priors, &model)?;
        let evidence = log_evidence(&geo, &inst.patches[0], &inst.priors, &model, 64)?;
        worst = worst.max(value - evidence);
    }
    Ok(CheckResult {
        name: "evidence bound",
        passed: worst <= 1e-6,
        detail: format!("largest ELBO minus log evidence {worst:.3e} over {cases} instances"),
    })
}

/// One small blended field optimized with 1, 2 and 4 workers.
pub fn determinism(seed: u64) -> Result<CheckResult> {
    let cfg = Config::default();
    let bounds = SkyRegion::new([0.0, 0.0], [24.0, 24.0])?;
    let truth = generate_catalog(&bounds, 12, &cfg.priors, seed)?.catalog;
    let metas = survey_metas(&bounds, 24, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &cfg.model, seed + 1)?;
    let init = degrade_catalog(&truth, 0.3, 0.2, 0.0, seed + 2)?;
    let ids: Vec<u64> = init.entries.iter().map(|e| e.id).collect();
    let start: Vec<ParamVec> = init
        .entries
        .iter()
        .map(|e| SourceModel::from_light_source(&e.source, INIT_LABEL_CONFIDENCE).to_params())
        .collect();
    let bits = |p: &[ParamVec]| -> Vec<u64> { p.iter().flatten().map(|x| x.to_bits()).collect() };
    let base = bits(&run_task(&ids, &start, &[], &patches, &cfg, 1, seed)?.params);
    let mut differing = Vec::new();
    for workers in [2, 4] {
        if bits(&run_task(&ids, &start, &[], &patches, &cfg, workers, seed)?.params) != base {
            differing.push(workers);
        }
    }
    Ok(CheckResult {
        name: "determinism",
        passed: differing.is_empty(),
        detail: if differing.is_empty() {
            "identical parameters with 1, 2 and 4 workers".into()
        } else {
            format!("results differ from 1 worker with {differing:?} workers")
        },
    })
}

pub fn run(a: &CheckArgs) -> Result<()> {
    let results = [gradients(a.cases, a.seed)?, evidence_bound(a.cases, a.seed)?, determinism(a.seed)?];
    for r in &results {
        println!("{:<16} {}  {}", r.name, if r.passed { "ok  " } else { "FAIL" }, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} self-test(s) failed");
    }
    Ok(())
}
