use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyvi_core::catalog::Catalog;
use skyvi_core::model::*;
use skyvi_core::partition::SkyRegion;
use skyvi_core::synth::{degrade_catalog, generate_catalog, render_images, survey_metas};
use skyvi_core::trust::{maximize_block, solve_tr_subproblem, SolverConfig};
use skyvi_core::Result;

fn quadratic(h: DMatrix<f64>, b: DVector<f64>) -> impl FnMut(&DVector<f64>) -> Result<Objective> {
    move |x: &DVector<f64>| {
        let hx = &h * x;
        Ok(Objective {
            value: b.dot(x) + 0.5 * x.dot(&hx),
            gradient: &b + hx,
            hessian: h.clone(),
            visits: 0,
        })
    }
}

fn neg_rosenbrock(x: &DVector<f64>) -> Result<Objective> {
    let (a, b) = (x[0], x[1]);
    let r = b - a * a;
    Ok(Objective {
        value: -((1.0 - a).powi(2) + 100.0 * r * r),
        gradient: DVector::from_vec(vec![2.0 * (1.0 - a) + 400.0 * a * r, -200.0 * r]),
        hessian: DMatrix::from_row_slice(2, 2, &[-2.0 + 400.0 * r - 800.0 * a * a, 400.0 * a, 400.0 * a, -200.0]),
        visits: 0,
    })
}

/// Bounded-above quartic `-sum x^4 / 4 + x'Ax/2 + b'x` with `A` indefinite.
fn quartic(a: DMatrix<f64>, b: DVector<f64>) -> impl FnMut(&DVector<f64>) -> Result<Objective> {
    move |x: &DVector<f64>| {
        let ax = &a * x;
        let mut h = a.clone();
        for i in 0..x.len() {
            h[(i, i)] -= 3.0 * x[i] * x[i];
        }
        Ok(Objective {
            value: -x.iter().map(|v| v.powi(4)).sum::<f64>() / 4.0 + 0.5 * x.dot(&ax) + b.dot(x),
            gradient: DVector::from_fn(x.len(), |i, _| ax[i] + b[i] - x[i].powi(3)),
            hessian: h,
            visits: 0,
        })
    }
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-scale..scale));
    (&m + m.transpose()) * 0.5
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

fn model_value(g: &DVector<f64>, h: &DMatrix<f64>, p: &DVector<f64>) -> f64 {
    g.dot(p) + 0.5 * p.dot(&(h * p))
}

#[test]
fn negative_identity_inside_region_gives_gradient() {
    let g = DVector::from_vec(vec![0.2, -0.5, 0.1, 0.4]);
    let h = -DMatrix::<f64>::identity(4, 4);
    let s = solve_tr_subproblem(&g, &h, 1.0).unwrap();
    assert!((&s.step - &g).amax() < 1e-15);
    assert_eq!(s.multiplier, 0.0);
}

#[test]
fn negative_identity_outside_region_gives_scaled_gradient() {
    let g = DVector::from_vec(vec![1.0, 2.0, -2.0]);
    let h = -DMatrix::<f64>::identity(3, 3);
    let s = solve_tr_subproblem(&g, &h, 0.6).unwrap();
    let expect = &g * (0.6 / 3.0);
    assert!((&s.step - expect).amax() < 1e-12);
    assert!(s.on_boundary);
}

#[test]
fn subproblem_rejects_bad_input() {
    let g = DVector::from_vec(vec![1.0, 0.0]);
    let asym = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -1.0]);
    assert!(solve_tr_subproblem(&g, &asym, 1.0).is_err());
    let nan = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, -1.0]);
    assert!(solve_tr_subproblem(&g, &nan, 1.0).is_err());
    let h = -DMatrix::<f64>::identity(2, 2);
    assert!(solve_tr_subproblem(&g, &h, 0.0).is_err());
}

/// Maximum of the model over the unit sphere on a 1000 x 1000 grid in
/// polar and azimuthal angle. With an indefinite Hessian the maximizer over
/// the ball lies on the sphere.
fn sphere_grid_max(g: &DVector<f64>, h: &DMatrix<f64>) -> f64 {
    let n = 1000;
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        let theta = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
        let (st, ct) = theta.sin_cos();
        for j in 0..n {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            let (sp, cp) = phi.sin_cos();
            let p = [st * cp, st * sp, ct];
            let mut v = 0.0;
            for a in 0..3 {
                v += g[a] * p[a];
                for b in 0..3 {
                    v += 0.5 * p[a] * h[(a, b)] * p[b];
                }
            }
            best = best.max(v);
        }
    }
    best
}

#[test]
fn indefinite_subproblem_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut done = 0;
    while done < 5 {
        let h = random_symmetric(&mut rng, 3, 2.0);
        let eig = h.symmetric_eigenvalues();
        if eig.max() <= 0.05 || eig.min() >= -0.05 {
            continue;
        }
        let g = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let s = solve_tr_subproblem(&g, &h, 1.0).unwrap();
        let got = model_value(&g, &h, &s.step);
        let oracle = sphere_grid_max(&g, &h);
        assert!((got - oracle).abs() < 1e-4, "solver {got} grid {oracle}");
        assert!(got >= oracle - 1e-12);
        done += 1;
    }
}

#[test]
fn concave_quadratic_converges_in_one_step() {
    let h = DMatrix::from_row_slice(3, 3, &[-4.0, 1.0, 0.0, 1.0, -3.0, 0.5, 0.0, 0.5, -2.0]);
    let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let cfg = SolverConfig {
        initial_radius: 50.0,
        ..SolverConfig::default()
    };
    let (x, st) = maximize_block(quadratic(h.clone(), b.clone()), DVector::zeros(3), &cfg).unwrap();
    let exact = -h.clone().lu().solve(&b).unwrap();
    assert!((x - exact).amax() < 1e-12);
    assert_eq!(st.accepted_steps, 1);
    assert!(st.converged);
}

#[test]
fn negated_rosenbrock_reaches_optimum() {
    let x0 = DVector::from_vec(vec![-1.2, 1.0]);
    let (x, st) = maximize_block(neg_rosenbrock, x0, &SolverConfig::default()).unwrap();
    assert!(st.converged);
    assert!(st.iteration <= 50, "{} iterations", st.iteration);
    assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8, "{x}");
    assert!(neg_rosenbrock(&x).unwrap().gradient.amax() < 1e-8);
}

#[test]
fn stationary_start_returns_immediately() {
    let x0 = DVector::from_vec(vec![1.0, 1.0]);
    let (x, st) = maximize_block(neg_rosenbrock, x0.clone(), &SolverConfig::default()).unwrap();
    assert_eq!(x, x0);
    assert_eq!(st.accepted_steps, 0);
    assert_eq!(st.iteration, 0);
    assert!(st.converged);
}

#[test]
fn non_finite_start_is_rejected() {
    let f = |_: &DVector<f64>| -> Result<Objective> {
        Ok(Objective {
            value: f64::NAN,
            gradient: DVector::zeros(1),
            hessian: DMatrix::zeros(1, 1),
            visits: 0,
        })
    };
    assert!(maximize_block(f, DVector::zeros(1), &SolverConfig::default()).is_err());
}

#[test]
fn non_finite_trial_shrinks_radius() {
    // log barrier at x = 2: a unit step from 1.5 lands outside the domain
    let f = |x: &DVector<f64>| -> Result<Objective> {
        let t = x[0];
        let (value, g, h) = if t < 2.0 {
            let d = 2.0 - t;
            (d.ln() - 0.1 * t * t + t, -1.0 / d - 0.2 * t + 1.0, -1.0 / (d * d) - 0.2)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        Ok(Objective {
            value,
            gradient: DVector::from_element(1, g),
            hessian: DMatrix::from_element(1, 1, h),
            visits: 0,
        })
    };
    let cfg = SolverConfig {
        initial_radius: 10.0,
        ..SolverConfig::default()
    };
    let (x, st) = maximize_block(f, DVector::from_element(1, 1.5), &cfg).unwrap();
    assert!(st.converged);
    assert!(x[0] < 2.0);
}

#[test]
fn config_validation() {
    assert!(SolverConfig::default().validate().is_ok());
    let bad = SolverConfig {
        shrink_factor: 1.5,
        ..SolverConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = SolverConfig {
        accept_rho: 0.8,
        ..SolverConfig::default()
    };
    assert!(bad.validate().is_err());
}

/// Each source of a 100-source synthetic field is optimized with its
/// neighbors held at the truth, starting from a perturbed catalog.
#[test]
fn block_iterations_are_tens() {
    let bounds = SkyRegion::new([0.0, 0.0], [100.0, 100.0]).unwrap();
    let priors = Priors::default();
    let model = ModelConfig::default();
    let truth = generate_catalog(&bounds, 100, &priors, 11).unwrap().catalog;
    let metas = survey_metas(&bounds, 100, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &model, 12).unwrap();
    let init: Catalog = degrade_catalog(&truth, 0.3, 0.2, 0.1, 13).unwrap();
    let truth_params: Vec<ParamVec> = truth
        .entries
        .iter()
        .map(|e| SourceModel::from_light_source(&e.source, 0.99).to_params())
        .collect();
    let cfg = SolverConfig::default();
    let mut iters = Vec::new();
    for (i, e) in init.entries.iter().enumerate() {
        let others: Vec<ParamVec> = truth_params
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| *p)
            .collect();
        let problem = BlockProblem::new(&others, &patches, &priors, &model).unwrap();
        let start = SourceModel::from_light_source(&e.source, 0.99).to_params();
        let (_, st) = problem.maximize(&start, &cfg).unwrap();
        assert!(st.values.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)));
        iters.push(st.iteration);
    }
    iters.sort_unstable();
    let median = iters[iters.len() / 2];
    assert!(median <= 40, "median {median} iterations, sorted {iters:?}");
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let q = random_orthogonal(rng, n);
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.5..5.0)));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

proptest! {
    #[test]
    fn step_within_radius_and_kkt(seed in any::<u64>(), n in 1usize..8, radius in 1e-3f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_symmetric(&mut rng, n, 3.0);
        let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let s = solve_tr_subproblem(&g, &h, radius).unwrap();
        prop_assert!(s.step.norm() <= radius * (1.0 + 1e-10));
        let lmax = h.symmetric_eigenvalues().max();
        prop_assert!(s.multiplier >= lmax.max(0.0) - 1e-12 * h.amax().max(1.0));
        let resid = (&h - DMatrix::identity(n, n) * s.multiplier) * &s.step + &g;
        prop_assert!(resid.norm() <= 1e-8 * g.norm(), "residual {}", resid.norm());
        // the step is never worse than the scaled gradient or staying put
        let cauchy = &g * (radius / g.norm());
        prop_assert!(s.model_gain >= model_value(&g, &h, &cauchy).min(0.0) - 1e-12);
        prop_assert!(s.model_gain >= -1e-14);
    }

    #[test]
    fn concave_newton_step_recovered(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = -spd(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let newton = -h.clone().lu().solve(&g).unwrap();
        let radius = 2.0 * newton.norm() + 1.0;
        let s = solve_tr_subproblem(&g, &h, radius).unwrap();
        prop_assert!(!s.on_boundary);
        prop_assert!((&s.step - &newton).norm() <= 1e-10 * newton.norm().max(1.0));
        let cfg = SolverConfig { initial_radius: radius, radius_max: radius.max(100.0), ..SolverConfig::default() };
        let (x, st) = maximize_block(quadratic(h.clone(), g.clone()), DVector::zeros(n), &cfg).unwrap();
        prop_assert_eq!(st.accepted_steps, 1);
        prop_assert!((x - &newton).norm() <= 1e-10 * newton.norm().max(1.0));
    }

    #[test]
    fn accepted_values_nondecreasing(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_symmetric(&mut rng, n, 3.0);
        let b = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let cfg = SolverConfig::default();
        let (x, st) = maximize_block(quartic(a.clone(), b.clone()), x0, &cfg).unwrap();
        prop_assert_eq!(st.values.len(), st.accepted_steps + 1);
        for w in st.values.windows(2) {
            prop_assert!(w[1] >= w[0] - 64.0 * f64::EPSILON * w[0].abs().max(1.0));
        }
        prop_assert!(st.values.last().unwrap() >= &st.values[0]);
        let grad = quartic(a, b)(&x).unwrap().gradient.amax();
        prop_assert_eq!(st.converged, grad < cfg.grad_tol);
        prop_assert!(st.iteration <= cfg.max_iters);
        prop_assert!(st.radius >= cfg.radius_min && st.radius <= cfg.radius_max);
    }
}
