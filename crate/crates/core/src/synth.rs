//! Synthetic skies: ground-truth catalogs drawn from the priors, Poisson
//! images rendered from the forward model, and degraded prior catalogs.

use crate::catalog::{Catalog, CatalogEntry, GroundTruth, PriorCatalog};
use crate::error::{ensure, Error, Result};
use crate::model::{
    band_log_flux, render_rates, GalaxyShape, ImageMeta, ImagePatch, LightSource, ModelConfig, Priors, SourceKind,
    NUM_BANDS, NUM_COLORS,
};
use crate::partition::SkyRegion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

/// Shape ranges for synthetic sources. Scale is in sky units, which equal
/// pixels at unit pixel scale.
pub const ECCENTRICITY_RANGE: (f64, f64) = (0.3, 1.0);
pub const SCALE_RANGE: (f64, f64) = (1.0, 5.0);

/// Derives an independent stream seed from a base seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn random_shape<R: Rng>(rng: &mut R) -> GalaxyShape {
    // (0.3, 1]: draw from [0.3, 1) and reflect
    let e = ECCENTRICITY_RANGE.1 - rng.random::<f64>() * (ECCENTRICITY_RANGE.1 - ECCENTRICITY_RANGE.0);
    let mut scale = rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1);
    if scale <= SCALE_RANGE.0 {
        scale = (SCALE_RANGE.0 + SCALE_RANGE.1) / 2.0;
    }
    GalaxyShape {
        profile_mix: rng.random::<f64>(),
        eccentricity: e,
        scale,
        angle: rng.random_range(0.0..180.0),
    }
}

/// Draws a source from the priors at the given position.
pub fn sample_source<R: Rng>(position: [f64; 2], priors: &Priors, rng: &mut R) -> LightSource {
    let kind = if rng.random::<f64>() < priors.star_prob {
        SourceKind::Star
    } else {
        SourceKind::Galaxy
    };
    let z: f64 = rng.sample(StandardNormal);
    let ref_log_flux = priors.log_flux_mean + priors.log_flux_sd * z;
    let chol = priors
        .color_cov_matrix()
        .cholesky()
        .expect("validated priors have a positive definite color covariance")
        .l();
    let w = nalgebra::Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let d = chol * w;
    let colors: [f64; NUM_COLORS] = std::array::from_fn(|k| priors.color_mean[k] + d[k]);
    let flux = std::array::from_fn(|b| band_log_flux(ref_log_flux, &colors, b).exp());
    LightSource {
        position,
        kind,
        flux,
        shape: random_shape(rng),
    }
}

pub fn generate_catalog(bounds: &SkyRegion, n_sources: usize, priors: &Priors, seed: u64) -> Result<GroundTruth> {
    priors.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_sources);
    for id in 0..n_sources as u64 {
        let position = [
            rng.random_range(bounds.min_corner[0]..bounds.max_corner[0]),
            rng.random_range(bounds.min_corner[1]..bounds.max_corner[1]),
        ];
        entries.push(CatalogEntry {
            id,
            source: sample_source(position, priors, &mut rng),
        });
    }
    Ok(GroundTruth {
        catalog: Catalog { entries },
        seed,
    })
}

/// Samples Poisson counts around the truth's expected rates. Image `i` uses
/// its own stream derived from `seed` and `i`.
pub fn render_images(truth: &Catalog, metas: &[ImageMeta], model: &ModelConfig, seed: u64) -> Result<Vec<ImagePatch>> {
    let sources: Vec<LightSource> = truth.entries.iter().map(|e| e.source).collect();
    metas
        .iter()
        .enumerate()
        .map(|(i, meta)| {
            meta.validate()?;
            let rates = render_rates(&sources, meta, model);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut pixels = Vec::with_capacity(rates.len());
            for &r in &rates {
                if !r.is_finite() || r > u32::MAX as f64 / 2.0 {
                    return Err(Error::Validation(format!("image {i}: expected rate {r} cannot be sampled")));
                }
                let x: f64 = Poisson::new(r).expect("positive finite rate").sample(&mut rng);
                pixels.push(x as u32);
            }
            ImagePatch::new(meta.clone(), pixels)
        })
        .collect()
}

/// Perturbs a catalog the way an older survey would disagree with the truth:
/// positions and log-fluxes get Gaussian noise (the same shift in every
/// band, so colors are kept) and labels flip with probability `flip_prob`.
pub fn degrade_catalog(
    truth: &Catalog,
    position_jitter: f64,
    flux_jitter: f64,
    flip_prob: f64,
    seed: u64,
) -> Result<PriorCatalog> {
    ensure!(position_jitter >= 0.0 && flux_jitter >= 0.0, "jitter must be nonnegative");
    ensure!((0.0..=0.5).contains(&flip_prob), "flip probability {flip_prob} outside [0, 0.5]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let entries = truth
        .entries
        .iter()
        .map(|e| {
            let mut s = e.source;
            let (dx, dy, df): (f64, f64, f64) = (std.sample(&mut rng), std.sample(&mut rng), std.sample(&mut rng));
            let flip = rng.random::<f64>() < flip_prob;
            if position_jitter > 0.0 {
                s.position = [s.position[0] + position_jitter * dx, s.position[1] + position_jitter * dy];
            }
            if flux_jitter > 0.0 {
                let factor = (flux_jitter * df).exp();
                for b in 0..NUM_BANDS {
                    s.flux[b] *= factor;
                }
            }
            if flip {
                s.kind = match s.kind {
                    SourceKind::Star => SourceKind::Galaxy,
                    SourceKind::Galaxy => SourceKind::Star,
                };
            }
            CatalogEntry { id: e.id, source: s }
        })
        .collect();
    Ok(Catalog { entries })
}

/// Images tiling `bounds` in every band, each `tile` pixels square at unit
/// pixel scale. Tiles are listed band-major.
pub fn survey_metas(bounds: &SkyRegion, tile: usize, background: f64, psf_sigma: f64) -> Vec<ImageMeta> {
    let w = bounds.max_corner[0] - bounds.min_corner[0];
    let h = bounds.max_corner[1] - bounds.min_corner[1];
    let nx = (w / tile as f64).ceil().max(1.0) as usize;
    let ny = (h / tile as f64).ceil().max(1.0) as usize;
    let mut metas = Vec::with_capacity(NUM_BANDS * nx * ny);
    for band in 0..NUM_BANDS {
        for ty in 0..ny {
            for tx in 0..nx {
                let x0 = bounds.min_corner[0] + (tx * tile) as f64;
                let y0 = bounds.min_corner[1] + (ty * tile) as f64;
                let width = tile.min((bounds.max_corner[0] - x0).ceil() as usize).max(1);
                let height = tile.min((bounds.max_corner[1] - y0).ceil() as usize).max(1);
                metas.push(ImageMeta {
                    band,
                    background,
                    psf_sigma,
                    origin: [x0 + 0.5, y0 + 0.5],
                    pixel_scale: 1.0,
                    width,
                    height,
                });
            }
        }
    }
    metas
}
