//! Probabilistic sky model: source parameterization, image geometry,
//! expected photon rates and the variational objective.

mod elbo;
mod gradcheck;
mod profile;

pub use elbo::{block_objective, elbo, total_elbo, BlockProblem, Objective};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use profile::{taper, Footprint, Mixture, SourceProfile, DEV_MIXTURE, EXP_MIXTURE, TAPER_START};

use crate::error::{ensure, Error, Result};
use crate::jet::{logit, sigmoid};
use serde::{Deserialize, Serialize};

pub const NUM_BANDS: usize = 5;
pub const NUM_COLORS: usize = NUM_BANDS - 1;
/// Band whose log-flux is parameterized directly; other bands are reached
/// through adjacent-band log ratios.
pub const REFERENCE_BAND: usize = 2;
pub const BAND_NAMES: [&str; NUM_BANDS] = ["u", "g", "r", "i", "z"];

/// Number of free (unconstrained) parameters per source.
pub const PARAM_DIM: usize = 27;

pub type ParamVec = [f64; PARAM_DIM];

/// Index layout of a [`ParamVec`].
pub mod layout {
    /// Logit of the star probability.
    pub const LOGIT_STAR: usize = 0;
    pub const STAR: TypeBlock = TypeBlock {
        flux_mean: 1,
        flux_log_sd: 2,
        color_mean: 5,
        color_log_sd: 9,
    };
    pub const GALAXY: TypeBlock = TypeBlock {
        flux_mean: 3,
        flux_log_sd: 4,
        color_mean: 13,
        color_log_sd: 17,
    };
    pub const POS_X: usize = 21;
    pub const POS_Y: usize = 22;
    /// Logit of the de Vaucouleurs weight in the galaxy profile.
    pub const LOGIT_PROFILE: usize = 23;
    pub const LOGIT_ECCENTRICITY: usize = 24;
    /// Logit of `(scale - SCALE_MIN) / (SCALE_MAX - SCALE_MIN)`.
    pub const LOGIT_SCALE: usize = 25;
    /// Radians, unwrapped.
    pub const ANGLE: usize = 26;
    /// First of the six geometry parameters (position, profile, shape).
    pub const GEOMETRY: usize = POS_X;
    pub const NUM_GEOMETRY: usize = 6;

    #[derive(Clone, Copy, Debug)]
    pub struct TypeBlock {
        pub flux_mean: usize,
        pub flux_log_sd: usize,
        pub color_mean: usize,
        pub color_log_sd: usize,
    }

    pub const TYPES: [TypeBlock; 2] = [STAR, GALAXY];
}

/// Coefficients of the colors in each band's log-flux, relative to the
/// reference band. Color `k` is `ln(flux[k + 1] / flux[k])`.
pub const COLOR_COEFFS: [[f64; NUM_COLORS]; NUM_BANDS] = [
    [-1.0, -1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0, 1.0],
];

pub fn band_log_flux(ref_log_flux: f64, colors: &[f64; NUM_COLORS], band: usize) -> f64 {
    let mut l = ref_log_flux;
    for (a, c) in COLOR_COEFFS[band].iter().zip(colors) {
        l += a * c;
    }
    l
}

/// Bounds on the half-light radius, in sky units.
pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 12.0;

/// Half-light radius for the unconstrained scale parameter.
pub fn scale_from_param(t: f64) -> f64 {
    SCALE_MIN + (SCALE_MAX - SCALE_MIN) * sigmoid(t)
}

pub fn scale_to_param(scale: f64) -> f64 {
    logit(((scale - SCALE_MIN) / (SCALE_MAX - SCALE_MIN)).clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Probabilities are kept this far from 0 and 1 when mapped to logits.
const PROB_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub star_prob: f64,
    pub log_flux_mean: f64,
    pub log_flux_sd: f64,
    pub color_mean: [f64; NUM_COLORS],
    pub color_cov: [[f64; NUM_COLORS]; NUM_COLORS],
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            star_prob: 0.3,
            log_flux_mean: 7.5,
            log_flux_sd: 1.0,
            color_mean: [0.8, 0.4, 0.2, 0.1],
            color_cov: [
                [0.05, 0.01, 0.0, 0.0],
                [0.01, 0.05, 0.01, 0.0],
                [0.0, 0.01, 0.05, 0.01],
                [0.0, 0.0, 0.01, 0.05],
            ],
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.star_prob > 0.0 && self.star_prob < 1.0,
            "prior star probability {} must lie strictly between 0 and 1",
            self.star_prob
        );
        ensure!(
            self.log_flux_mean.is_finite() && self.log_flux_sd.is_finite() && self.log_flux_sd > 0.0,
            "prior log-flux distribution must have finite mean and positive sd"
        );
        ensure!(
            self.color_mean.iter().all(|c| c.is_finite()),
            "prior color mean must be finite"
        );
        let m = self.color_cov_matrix();
        ensure!(
            (0..NUM_COLORS).all(|i| (0..NUM_COLORS).all(|j| m[(i, j)] == m[(j, i)])),
            "prior color covariance must be symmetric"
        );
        ensure!(
            m.iter().all(|x| x.is_finite()) && m.cholesky().is_some(),
            "prior color covariance is not positive definite"
        );
        Ok(())
    }

    pub fn color_cov_matrix(&self) -> nalgebra::Matrix4<f64> {
        nalgebra::Matrix4::from_fn(|i, j| self.color_cov[i][j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Active radius is `radius_multiplier * (psf_sigma + scale)` in pixels.
    pub radius_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            radius_multiplier: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.radius_multiplier.is_finite() && self.radius_multiplier > 0.0,
            "radius multiplier must be positive, got {}",
            self.radius_multiplier
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub band: usize,
    pub background: f64,
    /// Point-spread width in pixels.
    pub psf_sigma: f64,
    /// Sky coordinates of the center of pixel (0, 0).
    pub origin: [f64; 2],
    /// Sky units per pixel.
    pub pixel_scale: f64,
    pub width: usize,
    pub height: usize,
}

impl ImageMeta {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.band < NUM_BANDS, "band index {} out of range", self.band);
        ensure!(
            self.background.is_finite() && self.background > 0.0,
            "background must be positive, got {}",
            self.background
        );
        ensure!(
            self.psf_sigma.is_finite() && self.psf_sigma > 0.0,
            "psf sigma must be positive, got {}",
            self.psf_sigma
        );
        ensure!(
            self.pixel_scale.is_finite() && self.pixel_scale > 0.0,
            "pixel scale must be positive, got {}",
            self.pixel_scale
        );
        ensure!(
            self.origin.iter().all(|o| o.is_finite()),
            "image origin must be finite"
        );
        Ok(())
    }

    pub fn to_pixel(&self, sky: [f64; 2]) -> [f64; 2] {
        [
            (sky[0] - self.origin[0]) / self.pixel_scale,
            (sky[1] - self.origin[1]) / self.pixel_scale,
        ]
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.origin[0] + col as f64 * self.pixel_scale,
            self.origin[1] + row as f64 * self.pixel_scale,
        ]
    }

    /// Sky-coordinate extent `[x0, y0, x1, y1]` of the pixel area.
    pub fn sky_bounds(&self) -> [f64; 4] {
        let h = 0.5 * self.pixel_scale;
        [
            self.origin[0] - h,
            self.origin[1] - h,
            self.origin[0] + (self.width as f64 - 0.5) * self.pixel_scale,
            self.origin[1] + (self.height as f64 - 0.5) * self.pixel_scale,
        ]
    }

    /// Pixel whose area contains the sky point, if any.
    pub fn containing_pixel(&self, sky: [f64; 2]) -> Option<(usize, usize)> {
        let p = self.to_pixel(sky);
        let c = (p[0] + 0.5).floor();
        let r = (p[1] + 0.5).floor();
        (c >= 0.0 && r >= 0.0 && c < self.width as f64 && r < self.height as f64)
            .then_some((c as usize, r as usize))
    }
}

/// A rectangular image in one band with integer photon counts, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub meta: ImageMeta,
    pub pixels: Vec<u32>,
}

impl ImagePatch {
    pub fn new(meta: ImageMeta, pixels: Vec<u32>) -> Result<Self> {
        meta.validate()?;
        ensure!(
            pixels.len() == meta.width * meta.height,
            "pixel buffer has {} entries, expected {}x{}",
            pixels.len(),
            meta.width,
            meta.height
        );
        Ok(ImagePatch { meta, pixels })
    }

    pub fn get(&self, col: i64, row: i64) -> Result<u32> {
        let (w, h) = (self.meta.width, self.meta.height);
        if col < 0 || row < 0 || col as usize >= w || row as usize >= h {
            return Err(Error::OutOfBounds {
                col,
                row,
                width: w,
                height: h,
            });
        }
        Ok(self.pixels[row as usize * w + col as usize])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalaxyShape {
    /// Weight of the de Vaucouleurs profile; the remainder is exponential.
    pub profile_mix: f64,
    /// Minor-to-major axis ratio.
    pub eccentricity: f64,
    /// Half-light radius in sky units.
    pub scale: f64,
    /// Major-axis angle in degrees, counter-clockwise from the x axis.
    pub angle: f64,
}

impl Default for GalaxyShape {
    fn default() -> Self {
        GalaxyShape {
            profile_mix: 0.5,
            eccentricity: 0.8,
            scale: 2.0,
            angle: 0.0,
        }
    }
}

impl GalaxyShape {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.profile_mix),
            "profile mix {} outside [0, 1]",
            self.profile_mix
        );
        ensure!(
            self.eccentricity > 0.0 && self.eccentricity <= 1.0,
            "eccentricity {} outside (0, 1]",
            self.eccentricity
        );
        ensure!(
            self.scale > SCALE_MIN && self.scale < SCALE_MAX,
            "scale {} outside ({SCALE_MIN}, {SCALE_MAX})",
            self.scale
        );
        ensure!(self.angle.is_finite(), "angle must be finite");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    Star,
    Galaxy,
}

/// A fully specified source: the type and per-band fluxes are fixed values
/// rather than distributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightSource {
    pub position: [f64; 2],
    pub kind: SourceKind,
    pub flux: [f64; NUM_BANDS],
    pub shape: GalaxyShape,
}

impl LightSource {
    pub fn log_flux_and_colors(&self) -> (f64, [f64; NUM_COLORS]) {
        let mut colors = [0.0; NUM_COLORS];
        for (k, c) in colors.iter_mut().enumerate() {
            *c = (self.flux[k + 1] / self.flux[k]).ln();
        }
        (self.flux[REFERENCE_BAND].ln(), colors)
    }
}

/// Variational factors for one source type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeParams {
    pub logflux_mean: f64,
    pub logflux_sd: f64,
    pub color_mean: [f64; NUM_COLORS],
    pub color_sd: [f64; NUM_COLORS],
}

impl TypeParams {
    fn validate(&self, what: &str) -> Result<()> {
        ensure!(
            self.logflux_mean.is_finite() && self.color_mean.iter().all(|c| c.is_finite()),
            "{what} means must be finite"
        );
        ensure!(
            self.logflux_sd > 0.0
                && self.logflux_sd.is_finite()
                && self.color_sd.iter().all(|s| *s > 0.0 && s.is_finite()),
            "{what} standard deviations must be positive"
        );
        Ok(())
    }
}

/// Variational posterior for one source. Position and shape are point
/// estimates shared by both types.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub position: [f64; 2],
    pub shape: GalaxyShape,
    pub q_star: f64,
    pub star: TypeParams,
    pub galaxy: TypeParams,
}

impl SourceModel {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.position.iter().all(|p| p.is_finite()),
            "source position must be finite"
        );
        ensure!(
            (0.0..=1.0).contains(&self.q_star),
            "star probability {} outside [0, 1]",
            self.q_star
        );
        self.shape.validate()?;
        self.star.validate("star")?;
        self.galaxy.validate("galaxy")
    }

    /// Variational factors of the more probable type.
    pub fn map_type(&self) -> (SourceKind, &TypeParams) {
        if self.q_star >= 0.5 {
            (SourceKind::Star, &self.star)
        } else {
            (SourceKind::Galaxy, &self.galaxy)
        }
    }

    /// Maps to the unconstrained parameterization. Probabilities are
    /// clamped away from 0 and 1 first.
    pub fn to_params(&self) -> ParamVec {
        use layout::*;
        let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let mut v = [0.0; PARAM_DIM];
        v[LOGIT_STAR] = logit(clamp(self.q_star));
        for (t, tp) in TYPES.iter().zip([&self.star, &self.galaxy]) {
            v[t.flux_mean] = tp.logflux_mean;
            v[t.flux_log_sd] = tp.logflux_sd.ln();
            for k in 0..NUM_COLORS {
                v[t.color_mean + k] = tp.color_mean[k];
                v[t.color_log_sd + k] = tp.color_sd[k].ln();
            }
        }
        v[POS_X] = self.position[0];
        v[POS_Y] = self.position[1];
        v[LOGIT_PROFILE] = logit(clamp(self.shape.profile_mix));
        v[LOGIT_ECCENTRICITY] = logit(clamp(self.shape.eccentricity));
        v[LOGIT_SCALE] = scale_to_param(self.shape.scale);
        v[ANGLE] = self.shape.angle.to_radians();
        v
    }

    pub fn from_params(v: &ParamVec) -> SourceModel {
        use layout::*;
        let tp = |t: TypeBlock| TypeParams {
            logflux_mean: v[t.flux_mean],
            logflux_sd: v[t.flux_log_sd].exp(),
            color_mean: std::array::from_fn(|k| v[t.color_mean + k]),
            color_sd: std::array::from_fn(|k| v[t.color_log_sd + k].exp()),
        };
        SourceModel {
            position: [v[POS_X], v[POS_Y]],
            shape: GalaxyShape {
                profile_mix: sigmoid(v[LOGIT_PROFILE]),
                eccentricity: sigmoid(v[LOGIT_ECCENTRICITY]),
                scale: scale_from_param(v[LOGIT_SCALE]),
                angle: v[ANGLE].to_degrees().rem_euclid(180.0),
            },
            q_star: sigmoid(v[LOGIT_STAR]),
            star: tp(STAR),
            galaxy: tp(GALAXY),
        }
    }

    /// Initial factors centered on a catalog entry: both types share its
    /// brightness and colors, and the labeled type gets probability
    /// `label_confidence`.
    pub fn from_light_source(src: &LightSource, label_confidence: f64) -> SourceModel {
        let (l, c) = src.log_flux_and_colors();
        let tp = TypeParams {
            logflux_mean: l,
            logflux_sd: INIT_LOGFLUX_SD,
            color_mean: c,
            color_sd: [INIT_COLOR_SD; NUM_COLORS],
        };
        SourceModel {
            position: src.position,
            shape: src.shape,
            q_star: match src.kind {
                SourceKind::Star => label_confidence,
                SourceKind::Galaxy => 1.0 - label_confidence,
            },
            star: tp,
            galaxy: tp,
        }
    }
}

const INIT_LOGFLUX_SD: f64 = 0.1;
const INIT_COLOR_SD: f64 = 0.1;

/// Pixels whose expected rate depends on this source, row-major.
pub fn active_pixels(
    source: &SourceModel,
    patch: &ImagePatch,
    model: &ModelConfig,
) -> Vec<(usize, usize)> {
    let fp = Footprint::new(source.position, source.shape.scale, &patch.meta, model);
    fp.pixels().collect()
}

/// Expected photon count at one pixel for fully specified sources.
pub fn expected_rate(
    sources: &[LightSource],
    col: i64,
    row: i64,
    meta: &ImageMeta,
    model: &ModelConfig,
) -> Result<f64> {
    if col < 0 || row < 0 || col as usize >= meta.width || row as usize >= meta.height {
        return Err(Error::OutOfBounds {
            col,
            row,
            width: meta.width,
            height: meta.height,
        });
    }
    let (col, row) = (col as usize, row as usize);
    let mut rate = meta.background;
    for s in sources {
        let prof = SourceProfile::new(s.position, &s.shape, meta, model);
        let (star, gal) = prof.at(col, row);
        let g = match s.kind {
            SourceKind::Star => star,
            SourceKind::Galaxy => gal,
        };
        rate += s.flux[meta.band] * g;
    }
    Ok(rate)
}

/// Expected rates for every pixel of an image, row-major.
pub fn render_rates(sources: &[LightSource], meta: &ImageMeta, model: &ModelConfig) -> Vec<f64> {
    let mut rates = vec![meta.background; meta.width * meta.height];
    for s in sources {
        let prof = SourceProfile::new(s.position, &s.shape, meta, model);
        for (col, row) in prof.footprint.pixels() {
            let (star, gal) = prof.at(col, row);
            let g = match s.kind {
                SourceKind::Star => star,
                SourceKind::Galaxy => gal,
            };
            rates[row * meta.width + col] += s.flux[meta.band] * g;
        }
    }
    rates
}
