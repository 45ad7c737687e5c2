//! Newton's method with an exact trust-region subproblem, for maximizing
//! one source block at a time.

use crate::error::{ensure, Error, Result};
use crate::model::Objective;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub initial_radius: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub shrink_factor: f64,
    pub grow_factor: f64,
    pub accept_rho: f64,
    pub grow_rho: f64,
    /// Convergence when the largest gradient entry is below this.
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            initial_radius: 1.0,
            radius_min: 1e-10,
            radius_max: 100.0,
            shrink_factor: 0.25,
            grow_factor: 2.0,
            accept_rho: 0.1,
            grow_rho: 0.75,
            grad_tol: 1e-8,
            max_iters: 200,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.radius_min > 0.0 && self.radius_min <= self.initial_radius && self.initial_radius <= self.radius_max,
            "need 0 < radius_min <= initial_radius <= radius_max"
        );
        ensure!(
            0.0 < self.shrink_factor && self.shrink_factor < 1.0 && self.grow_factor > 1.0,
            "need 0 < shrink_factor < 1 < grow_factor"
        );
        ensure!(
            0.0 < self.accept_rho && self.accept_rho < self.grow_rho && self.grow_rho < 1.0,
            "need 0 < accept_rho < grow_rho < 1"
        );
        ensure!(self.grad_tol > 0.0, "grad_tol must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrustRegionState {
    pub radius: f64,
    pub iteration: usize,
    pub converged: bool,
    pub last_rho: f64,
    pub accepted_steps: usize,
    pub evaluations: usize,
    /// Active-pixel visits summed over all objective evaluations.
    pub visits: u64,
    /// Objective at the start and after each accepted step.
    pub values: Vec<f64>,
}

/// Maximizer of `g'p + p'Hp/2` over `|p| <= radius`.
#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub step: DVector<f64>,
    /// `lambda >= max(0, lambda_max(H))` with `(H - lambda I) p = -g`.
    pub multiplier: f64,
    pub on_boundary: bool,
    pub hard_case: bool,
    /// Model increase `g'p + p'Hp/2`.
    pub model_gain: f64,
}

/// Gradient components along the top eigenvector below this fraction of
/// the gradient norm count as zero (the hard case).
const HARD_CASE_TOL: f64 = 1e-10;

pub fn solve_tr_subproblem(g: &DVector<f64>, h: &DMatrix<f64>, radius: f64) -> Result<SubproblemSolution> {
    let n = g.len();
    ensure!(radius > 0.0 && radius.is_finite(), "radius must be positive, got {radius}");
    ensure!(h.nrows() == n && h.ncols() == n, "hessian is {}x{}, gradient has {n} entries", h.nrows(), h.ncols());
    ensure!(
        g.iter().all(|x| x.is_finite()) && h.iter().all(|x| x.is_finite()),
        "gradient and hessian must be finite"
    );
    let scale = h.amax().max(1.0);
    for i in 0..n {
        for j in 0..i {
            ensure!(
                (h[(i, j)] - h[(j, i)]).abs() <= 1e-12 * scale,
                "hessian is not symmetric at ({i}, {j})"
            );
        }
    }
    if n == 0 {
        return Ok(SubproblemSolution {
            step: DVector::zeros(0),
            multiplier: 0.0,
            on_boundary: false,
            hard_case: false,
            model_gain: 0.0,
        });
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let mu = &eig.eigenvalues;
    let q = &eig.eigenvectors;
    let gamma = q.transpose() * g;
    let gnorm = g.norm();
    let top = (0..n).fold(0, |b, i| if mu[i] > mu[b] { i } else { b });
    let mu_max = mu[top];

    // step for multiplier lambda, in the eigenbasis
    let coeffs = |lambda: f64| DVector::from_fn(n, |i, _| gamma[i] / (lambda - mu[i]));
    let finish = |coef: DVector<f64>, lambda: f64, on_boundary: bool, hard_case: bool| {
        let step = q * coef;
        let model_gain = g.dot(&step) + 0.5 * step.dot(&(&sym * &step));
        SubproblemSolution {
            step,
            multiplier: lambda,
            on_boundary,
            hard_case,
            model_gain,
        }
    };

    if mu_max < 0.0 {
        let c = coeffs(0.0);
        if c.norm() <= radius {
            return Ok(finish(c, 0.0, false, false));
        }
    }

    let lo = mu_max.max(0.0);
    let deg_tol = 1e-12 * mu.amax().max(1.0);
    let degenerate: Vec<usize> = (0..n).filter(|&i| mu[i] >= mu_max - deg_tol).collect();
    let deg_weight = degenerate.iter().map(|&i| gamma[i] * gamma[i]).sum::<f64>().sqrt();
    if mu_max >= 0.0 && deg_weight <= HARD_CASE_TOL * gnorm {
        // The gradient has no component along the top eigenspace, so the
        // secular equation may have no root above lambda_max.
        let mut c = DVector::from_fn(n, |i, _| {
            if degenerate.contains(&i) {
                0.0
            } else {
                gamma[i] / (lo - mu[i])
            }
        });
        let rest = c.norm();
        if rest <= radius {
            let tau = (radius * radius - rest * rest).max(0.0).sqrt();
            c[top] = tau;
            return Ok(finish(c, lo, true, true));
        }
    }

    // Solve 1/|p(lambda)| = 1/radius on (lo, hi] by safeguarded Newton.
    let norm_at = |lambda: f64| coeffs(lambda).norm();
    let mut a = lo;
    let mut b = lo + gnorm / radius;
    while norm_at(b) > radius {
        b = lo + 2.0 * (b - lo).max(f64::MIN_POSITIVE);
    }
    let mut lambda = b;
    for _ in 0..200 {
        let c = coeffs(lambda);
        let pn = c.norm();
        let phi = 1.0 / pn - 1.0 / radius;
        if (pn - radius).abs() <= 1e-14 * radius {
            break;
        }
        if phi < 0.0 {
            a = lambda;
        } else {
            b = lambda;
        }
        let d3: f64 = (0..n).map(|i| gamma[i] * gamma[i] / (lambda - mu[i]).powi(3)).sum();
        let dphi = d3 / (pn * pn * pn);
        let mut next = lambda - phi / dphi;
        if !(next > a && next < b) || !next.is_finite() {
            next = 0.5 * (a + b);
        }
        if next == lambda || b - a <= 4.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        lambda = next;
    }
    let mut c = coeffs(lambda);
    let pn = c.norm();
    if pn > radius {
        c *= radius / pn;
    }
    Ok(finish(c, lambda, true, false))
}

/// Maximizes `objective` from `x0` by trust-region Newton iterations.
///
/// Steps whose predicted gain is at the rounding level of the objective are
/// judged by the gradient instead: they are accepted when the value does
/// not drop beyond that level.
pub fn maximize_block<F>(mut objective: F, x0: DVector<f64>, config: &SolverConfig) -> Result<(DVector<f64>, TrustRegionState)>
where
    F: FnMut(&DVector<f64>) -> Result<Objective>,
{
    config.validate()?;
    ensure!(x0.iter().all(|x| x.is_finite()), "starting point must be finite");
    let mut x = x0;
    let mut cur = objective(&x)?;
    let mut state = TrustRegionState {
        radius: config.initial_radius,
        iteration: 0,
        converged: false,
        last_rho: f64::NAN,
        accepted_steps: 0,
        evaluations: 1,
        visits: cur.visits,
        values: vec![cur.value],
    };
    ensure!(cur.is_finite(), "objective is not finite at the starting point");

    loop {
        if cur.gradient.amax() < config.grad_tol {
            state.converged = true;
            break;
        }
        if state.iteration >= config.max_iters {
            break;
        }
        state.iteration += 1;
        let sub = solve_tr_subproblem(&cur.gradient, &cur.hessian, state.radius)?;
        let step_norm = sub.step.norm();
        let trial_x = &x + &sub.step;
        let trial = objective(&trial_x)?;
        state.evaluations += 1;
        state.visits += trial.visits;

        if !trial.is_finite() {
            state.last_rho = f64::NEG_INFINITY;
            state.radius = config.shrink_factor * state.radius.min(step_norm);
            if state.radius < config.radius_min {
                return Err(Error::NonFinite { radius: state.radius });
            }
            continue;
        }

        let noise = 64.0 * f64::EPSILON * cur.value.abs().max(1.0);
        let actual = trial.value - cur.value;
        let predicted = sub.model_gain;
        let (accept, rho) = if predicted <= noise {
            let ok = actual >= 0.0 || (actual >= -noise && trial.gradient.amax() < cur.gradient.amax());
            (ok, if ok { 1.0 } else { 0.0 })
        } else {
            let rho = actual / predicted;
            (rho >= config.accept_rho, rho)
        };
        state.last_rho = rho;
        if rho < config.accept_rho {
            state.radius = (config.shrink_factor * state.radius.min(step_norm)).max(config.radius_min);
        } else if rho > config.grow_rho && predicted > noise {
            state.radius = (config.grow_factor * state.radius).min(config.radius_max);
        }
        if accept {
            x = trial_x;
            cur = trial;
            state.accepted_steps += 1;
            state.values.push(cur.value);
        } else if state.radius <= config.radius_min {
            break;
        }
    }
    Ok((x, state))
}
