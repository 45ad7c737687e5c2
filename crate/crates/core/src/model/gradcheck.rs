use super::elbo::BlockProblem;
use super::{ImagePatch, ModelConfig, ParamVec, Priors, SourceModel, PARAM_DIM};
use crate::error::{ensure, Result};

/// Largest relative discrepancies `|analytic - numeric| / (1 + |analytic|)`
/// between exact derivatives and central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_gradient_error: f64,
    pub worst_gradient_index: usize,
    pub max_hessian_error: f64,
    /// (row, column) of the worst Hessian entry.
    pub worst_hessian_index: (usize, usize),
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_gradient_error.max(self.max_hessian_error)
    }
}

/// Compares the analytic gradient against central differences of the
/// objective value, and each Hessian column against central differences of
/// the analytic gradient.
pub fn check_gradients(
    sources: &[SourceModel],
    patches: &[ImagePatch],
    priors: &Priors,
    model: &ModelConfig,
    active: usize,
    step: f64,
) -> Result<GradCheckReport> {
    ensure!(step > 0.0 && step.is_finite(), "step must be positive, got {step}");
    ensure!(active < sources.len(), "active index {active} out of range");
    let others: Vec<ParamVec> = sources
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != active)
        .map(|(_, s)| s.to_params())
        .collect();
    let problem = BlockProblem::new(&others, patches, priors, model)?;
    let theta = sources[active].to_params();
    let obj = problem.evaluate(&theta);

    let mut report = GradCheckReport {
        max_gradient_error: 0.0,
        worst_gradient_index: 0,
        max_hessian_error: 0.0,
        worst_hessian_index: (0, 0),
    };
    for j in 0..PARAM_DIM {
        let mut tp = theta;
        let mut tm = theta;
        tp[j] += step;
        tm[j] -= step;
        let numeric = value_difference(&problem, &tp, &tm) / (tp[j] - tm[j]);
        let analytic = obj.gradient[j];
        let err = (analytic - numeric).abs() / (1.0 + analytic.abs());
        if err > report.max_gradient_error || err.is_nan() {
            report.max_gradient_error = err;
            report.worst_gradient_index = j;
        }

        let gp = problem.evaluate(&tp).gradient;
        let gm = problem.evaluate(&tm).gradient;
        for i in 0..PARAM_DIM {
            let numeric = (gp[i] - gm[i]) / (tp[j] - tm[j]);
            let analytic = obj.hessian[(i, j)];
            let err = (analytic - numeric).abs() / (1.0 + analytic.abs());
            if err > report.max_hessian_error || err.is_nan() {
                report.max_hessian_error = err;
                report.worst_hessian_index = (i, j);
            }
        }
    }
    Ok(report)
}

/// Objective difference between two nearby points, accumulated pixel by
/// pixel so the large shared terms cancel before summation.
fn value_difference(problem: &BlockProblem, a: &ParamVec, b: &ParamVec) -> f64 {
    let (ta, kla) = problem.pixel_states(a);
    let (tb, klb) = problem.pixel_states(b);
    let mut sum = Neumaier::default();
    for (k, sa) in &ta {
        sum.add(match tb.get(k) {
            Some(sb) => sa.delta_from(sb),
            None => sa.delta(),
        });
    }
    for (k, sb) in &tb {
        if !ta.contains_key(k) {
            sum.add(-sb.delta());
        }
    }
    sum.add(klb - kla);
    sum.total()
}

#[derive(Default)]
struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.c
    }
}
