//! Independent numerical references for the variational objective: exact
//! log-evidence of tiny single-band scenes by quadrature, and random
//! problem instances for derivative checks.

use crate::error::{ensure, Result};
use crate::model::{
    render_rates, GalaxyShape, ImageMeta, ImagePatch, LightSource, ModelConfig, Priors,
    SourceKind, SourceModel, SourceProfile, TypeParams, COLOR_COEFFS, NUM_BANDS, NUM_COLORS,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Nodes and weights of the `n`-point Gauss-Hermite rule for the weight
/// `exp(-z^2)`, from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log marginal likelihood `ln p(x)` of a single-band image given the
/// positions and shapes of up to three sources, integrating over each
/// source's type and brightness under the prior.
///
/// For every type assignment the brightness integral is done with a
/// Gauss-Hermite rule centered on the posterior mode and scaled by the
/// posterior curvature there.
pub fn log_evidence(
    geometry: &[([f64; 2], GalaxyShape)],
    patch: &ImagePatch,
    priors: &Priors,
    model: &ModelConfig,
    nodes: usize,
) -> Result<f64> {
    priors.validate()?;
    let n = geometry.len();
    ensure!((1..=3).contains(&n), "quadrature supports one to three sources, got {n}");
    let meta = &patch.meta;
    let band = meta.band;
    let a = COLOR_COEFFS[band];
    let cov = priors.color_cov_matrix();
    let mut m0 = priors.log_flux_mean;
    for k in 0..NUM_COLORS {
        m0 += a[k] * priors.color_mean[k];
    }
    let av = nalgebra::Vector4::from_row_slice(&a);
    let v0 = priors.log_flux_sd.powi(2) + (av.transpose() * cov * av)[0];

    // profile values over the pixels any source touches
    let profiles: Vec<SourceProfile> = geometry
        .iter()
        .map(|(p, s)| SourceProfile::new(*p, s, meta, model))
        .collect();
    let mut pix: Vec<(f64, [[f64; 2]; 3])> = Vec::new();
    let mut outside_ll = 0.0;
    for row in 0..meta.height {
        for col in 0..meta.width {
            let x = patch.pixels[row * meta.width + col] as f64;
            let mut g = [[0.0; 2]; 3];
            let mut any = false;
            for (s, prof) in profiles.iter().enumerate() {
                let (gs, gg) = prof.at(col, row);
                g[s] = [gs, gg];
                any |= gs != 0.0 || gg != 0.0;
            }
            let lf = libm::lgamma(x + 1.0);
            if any {
                pix.push((x, g));
                outside_ll -= lf;
            } else {
                outside_ll += x * meta.background.ln() - meta.background - lf;
            }
        }
    }
    let bg = meta.background;
    let (z, w) = gauss_hermite(nodes);

    let mut terms = Vec::new();
    for types in 0..(1usize << n) {
        let kind = |s: usize| (types >> s) & 1; // 0 star, 1 galaxy
        let mut log_type = 0.0;
        for s in 0..n {
            log_type += if kind(s) == 0 {
                priors.star_prob.ln()
            } else {
                (1.0 - priors.star_prob).ln()
            };
        }
        // log integrand and its derivatives in the band log-fluxes
        let phi = |l: &[f64]| -> (f64, DVector<f64>, DMatrix<f64>) {
            let mut f = 0.0;
            let mut gr = DVector::zeros(n);
            let mut h = DMatrix::zeros(n, n);
            for s in 0..n {
                let d = l[s] - m0;
                f += -0.5 * d * d / v0 - 0.5 * (2.0 * std::f64::consts::PI * v0).ln();
                gr[s] -= d / v0;
                h[(s, s)] -= 1.0 / v0;
            }
            for (x, g) in &pix {
                let mut rate = bg;
                let mut c = [0.0; 3];
                for s in 0..n {
                    c[s] = l[s].exp() * g[s][kind(s)];
                    rate += c[s];
                }
                f += x * rate.ln() - rate;
                let r = x / rate - 1.0;
                for s in 0..n {
                    gr[s] += r * c[s];
                    h[(s, s)] += r * c[s];
                    for t in 0..n {
                        h[(s, t)] -= x * c[s] * c[t] / (rate * rate);
                    }
                }
            }
            (f, gr, h)
        };
        // damped Newton for the mode
        let mut l = vec![m0; n];
        let mut cur = phi(&l);
        for _ in 0..200 {
            let neg_h = -&cur.2;
            let step = match neg_h.clone().cholesky() {
                Some(ch) => ch.solve(&cur.1),
                None => cur.1.clone() * 0.1,
            };
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let cand: Vec<f64> = (0..n).map(|s| l[s] + t * step[s]).collect();
                let next = phi(&cand);
                if next.0 >= cur.0 {
                    l = cand;
                    cur = next;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || step.amax() < 1e-12 {
                break;
            }
        }
        let neg_h = -&cur.2;
        let cov_post = neg_h
            .try_inverse()
            .ok_or_else(|| crate::Error::Validation("singular posterior curvature".into()))?;
        let chol = cov_post
            .cholesky()
            .ok_or_else(|| crate::Error::Validation("posterior curvature not negative definite".into()))?;
        let lmat = chol.l();
        let log_jac = lmat.diagonal().iter().map(|d| d.ln()).sum::<f64>() + 0.5 * n as f64 * 2f64.ln();

        let mut vals = Vec::with_capacity(nodes.pow(n as u32));
        let mut idx = vec![0usize; n];
        loop {
            let zz = DVector::from_fn(n, |s, _| z[idx[s]]);
            let off = &lmat * &zz * 2f64.sqrt();
            let lpt: Vec<f64> = (0..n).map(|s| l[s] + off[s]).collect();
            let mut lw = 0.0;
            for s in 0..n {
                lw += w[idx[s]].ln() + z[idx[s]] * z[idx[s]];
            }
            vals.push(lw + phi_value(&lpt, &pix, bg, m0, v0, &kind));
            let mut d = 0;
            while d < n {
                idx[d] += 1;
                if idx[d] < nodes {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == n {
                break;
            }
        }
        terms.push(log_type + log_jac + log_sum_exp(&vals));
    }
    Ok(outside_ll + log_sum_exp(&terms))
}

fn phi_value(l: &[f64], pix: &[(f64, [[f64; 2]; 3])], bg: f64, m0: f64, v0: f64, kind: &dyn Fn(usize) -> usize) -> f64 {
    let mut f = 0.0;
    for ls in l {
        let d = ls - m0;
        f += -0.5 * d * d / v0 - 0.5 * (2.0 * std::f64::consts::PI * v0).ln();
    }
    for (x, g) in pix {
        let mut rate = bg;
        for (s, ls) in l.iter().enumerate() {
            rate += ls.exp() * g[s][kind(s)];
        }
        f += x * rate.ln() - rate;
    }
    f
}

/// A small scene: variational factors for each source and the images.
#[derive(Clone, Debug)]
pub struct Instance {
    pub sources: Vec<SourceModel>,
    pub patches: Vec<ImagePatch>,
    pub priors: Priors,
}

/// Random overlapping sources on a few small images in random bands, with
/// Poisson pixel counts rendered from a random ground truth near the
/// variational means.
pub fn random_instance(seed: u64, max_sources: usize, max_patches: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.random_range(14..26usize);
    let n_sources = rng.random_range(1..=max_sources);
    let n_patches = rng.random_range(1..=max_patches);
    build_instance(&mut rng, size, n_sources, n_patches, None)
}

/// One or two sources on a single image of at most 7x7 pixels. With
/// `point_mass_sd` set, every variational sd is that value.
pub fn tiny_instance(seed: u64, point_mass_sd: Option<f64>) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.random_range(5..=7usize);
    let n_sources = rng.random_range(1..=2);
    build_instance(&mut rng, size, n_sources, 1, point_mass_sd)
}

fn build_instance(
    rng: &mut ChaCha8Rng,
    size: usize,
    n_sources: usize,
    n_patches: usize,
    point_mass_sd: Option<f64>,
) -> Instance {
    let priors = Priors::default();
    let model = ModelConfig::default();
    let span = size as f64 - 1.0;
    let unit = Normal::new(0.0, 1.0).unwrap();

    let mut sources = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..n_sources {
        let position = [rng.random_range(0.25 * span..0.75 * span), rng.random_range(0.25 * span..0.75 * span)];
        let shape = GalaxyShape {
            profile_mix: rng.random_range(0.05..0.95),
            eccentricity: rng.random_range(0.3..0.95),
            scale: rng.random_range(0.8..2.5),
            angle: rng.random_range(0.0..180.0),
        };
        let mut tp = || TypeParams {
            logflux_mean: rng.random_range(4.0..7.0),
            logflux_sd: rng.random_range(0.05..0.5),
            color_mean: std::array::from_fn(|_| rng.random_range(-0.3..0.8)),
            color_sd: std::array::from_fn(|_| rng.random_range(0.05..0.4)),
        };
        let (mut star, mut galaxy) = (tp(), tp());
        if let Some(sd) = point_mass_sd {
            for t in [&mut star, &mut galaxy] {
                t.logflux_sd = sd;
                t.color_sd = [sd; NUM_COLORS];
            }
        }
        let q_star = rng.random_range(0.05..0.95);
        let kind = if rng.random_bool(q_star) {
            SourceKind::Star
        } else {
            SourceKind::Galaxy
        };
        let t = if kind == SourceKind::Star { &star } else { &galaxy };
        let lr = t.logflux_mean + 0.1 * unit.sample(rng);
        let colors: [f64; NUM_COLORS] = std::array::from_fn(|k| t.color_mean[k] + 0.1 * unit.sample(rng));
        let flux: [f64; NUM_BANDS] = std::array::from_fn(|b| crate::model::band_log_flux(lr, &colors, b).exp());
        truth.push(LightSource {
            position,
            kind,
            flux,
            shape,
        });
        sources.push(SourceModel {
            position: [position[0] + 0.2 * unit.sample(rng), position[1] + 0.2 * unit.sample(rng)],
            shape,
            q_star,
            star,
            galaxy,
        });
    }
    let patches = (0..n_patches)
        .map(|_| {
            let meta = ImageMeta {
                band: rng.random_range(0..NUM_BANDS),
                background: rng.random_range(5.0..60.0),
                psf_sigma: rng.random_range(0.8..1.6),
                origin: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                pixel_scale: 1.0,
                width: size,
                height: size,
            };
            let pixels = render_rates(&truth, &meta, &model)
                .into_iter()
                .map(|r| Poisson::new(r).unwrap().sample(rng) as u32)
                .collect();
            ImagePatch::new(meta, pixels).expect("valid synthetic patch")
        })
        .collect();
    Instance {
        sources,
        patches,
        priors,
    }
}
