//! Spatial profiles: point-spread function, galaxy light profiles as
//! Gaussian mixtures, and the compact taper that bounds each source's
//! footprint.

use super::{layout, scale_from_param, GalaxyShape, ImageMeta, ModelConfig, ParamVec, SCALE_MAX, SCALE_MIN};
use crate::jet::Jet;
use std::f64::consts::PI;

pub(crate) type Jet6 = Jet<{ layout::NUM_GEOMETRY }>;

// Local indices of the geometry parameters inside a `Jet6`.
const G_X: usize = 0;
const G_Y: usize = 1;
const G_PROFILE: usize = 2;
const G_ECC: usize = 3;
const G_SCALE: usize = 4;
const G_ANGLE: usize = 5;

/// Three-component circular Gaussian approximation to a unit-flux radial
/// profile with unit half-light radius. Widths are standard deviations.
#[derive(Clone, Copy, Debug)]
pub struct Mixture {
    pub weights: [f64; 3],
    pub widths: [f64; 3],
}

/// Exponential disk, fitted on r in [0, 8] half-light radii.
pub const EXP_MIXTURE: Mixture = Mixture {
    weights: [0.004022619046758486, 0.09573640931346897, 0.9002409716397726],
    widths: [0.10218760973851346, 0.32506527984752365, 0.9207753807673369],
};

/// de Vaucouleurs r^(1/4) profile, fitted on r in [0, 8] half-light radii.
pub const DEV_MIXTURE: Mixture = Mixture {
    weights: [0.032547387272678356, 0.2111572517009983, 0.7562953610263233],
    widths: [0.047521903973339594, 0.23295458484933673, 1.0991453680347283],
};

/// Fraction of the active radius at which the taper starts to fall off.
pub const TAPER_START: f64 = 0.8;

/// Quintic taper of the normalized distance `t = d / R`: 1 below
/// [`TAPER_START`], 0 from 1 on, twice continuously differentiable.
/// Returns the value and first two derivatives.
pub fn taper(t: f64) -> (f64, f64, f64) {
    if t <= TAPER_START {
        return (1.0, 0.0, 0.0);
    }
    if t >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let w = 1.0 - TAPER_START;
    let s = (t - TAPER_START) / w;
    let s2 = s * s;
    let v = s2 * s * (10.0 - 15.0 * s + 6.0 * s2);
    let d1 = 30.0 * s2 * (1.0 - s) * (1.0 - s);
    let d2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s);
    (1.0 - v, -d1 / w, -d2 / (w * w))
}

/// Pixels of one image that a source can illuminate: those whose centers
/// lie strictly within the active radius, plus the pixel containing the
/// source center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    /// Source center in pixel coordinates.
    pub center: [f64; 2],
    /// Active radius in pixels.
    pub radius: f64,
    /// Half-open column range of the bounding box.
    pub cols: (usize, usize),
    /// Half-open row range of the bounding box.
    pub rows: (usize, usize),
    pub center_pixel: Option<(usize, usize)>,
}

impl Footprint {
    pub fn new(position: [f64; 2], scale: f64, meta: &ImageMeta, model: &ModelConfig) -> Self {
        let center = meta.to_pixel(position);
        let radius = active_radius(meta, model, scale / meta.pixel_scale);
        let center_pixel = meta.containing_pixel(position);
        let range = |c: f64, n: usize| {
            let lo = ((c - radius).floor() + 1.0).clamp(0.0, n as f64) as usize;
            let hi = (c + radius).ceil().clamp(0.0, n as f64) as usize;
            (lo, hi.max(lo))
        };
        let mut cols = range(center[0], meta.width);
        let mut rows = range(center[1], meta.height);
        if let Some((c, r)) = center_pixel {
            if cols.0 >= cols.1 {
                cols = (c, c + 1);
            }
            if rows.0 >= rows.1 {
                rows = (r, r + 1);
            }
            cols = (cols.0.min(c), cols.1.max(c + 1));
            rows = (rows.0.min(r), rows.1.max(r + 1));
        }
        Footprint {
            center,
            radius,
            cols,
            rows,
            center_pixel,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cols.0 >= self.cols.1 || self.rows.0 >= self.rows.1
    }

    #[inline]
    pub fn contains(&self, col: usize, row: usize) -> bool {
        if col < self.cols.0 || col >= self.cols.1 || row < self.rows.0 || row >= self.rows.1 {
            return false;
        }
        let a = col as f64 - self.center[0];
        let b = row as f64 - self.center[1];
        a * a + b * b < self.radius * self.radius || self.center_pixel == Some((col, row))
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.rows.0..self.rows.1).flat_map(move |row| {
            (self.cols.0..self.cols.1)
                .filter(move |&col| self.contains(col, row))
                .map(move |col| (col, row))
        })
    }

    pub fn bbox_overlaps(&self, o: &Footprint) -> bool {
        !self.is_empty()
            && !o.is_empty()
            && self.cols.0 < o.cols.1
            && o.cols.0 < self.cols.1
            && self.rows.0 < o.rows.1
            && o.rows.0 < self.rows.1
    }

    /// Whether the two pixel sets share a pixel (both in the same image).
    pub fn intersects(&self, o: &Footprint) -> bool {
        if !self.bbox_overlaps(o) {
            return false;
        }
        let area = |f: &Footprint| (f.cols.1 - f.cols.0) * (f.rows.1 - f.rows.0);
        let (small, big) = if area(self) <= area(o) {
            (self, o)
        } else {
            (o, self)
        };
        small.pixels().any(|(c, r)| big.contains(c, r))
    }
}

fn active_radius(meta: &ImageMeta, model: &ModelConfig, scale_px: f64) -> f64 {
    model.radius_multiplier * (meta.psf_sigma + scale_px)
}

#[derive(Clone, Copy, Debug)]
struct Gauss {
    p: f64,
    q: f64,
    r: f64,
    norm: f64,
}

impl Gauss {
    fn from_cov(sxx: f64, sxy: f64, syy: f64) -> Self {
        let det = sxx * syy - sxy * sxy;
        Gauss {
            p: syy / det,
            q: -sxy / det,
            r: sxx / det,
            norm: 1.0 / (2.0 * PI * det.sqrt()),
        }
    }

    #[inline]
    fn at(&self, a: f64, b: f64) -> f64 {
        self.norm * (-0.5 * (self.p * a * a + 2.0 * self.q * a * b + self.r * b * b)).exp()
    }
}

/// Covariance of a galaxy component of relative width `c`, in pixels,
/// including the point-spread function.
fn component_cov(shape: &GalaxyShape, meta: &ImageMeta, c: f64) -> (f64, f64, f64) {
    let s = c * shape.scale / meta.pixel_scale;
    let big = s * s;
    let e2 = shape.eccentricity * shape.eccentricity;
    let (sn, cs) = shape.angle.to_radians().sin_cos();
    let psf = meta.psf_sigma * meta.psf_sigma;
    (
        big * (cs * cs + e2 * sn * sn) + psf,
        big * (1.0 - e2) * sn * cs,
        big * (sn * sn + e2 * cs * cs) + psf,
    )
}

/// Spatial profiles of one source in one image, evaluated as plain values.
/// Profiles integrate to one over the plane before tapering.
#[derive(Clone, Debug)]
pub struct SourceProfile {
    pub footprint: Footprint,
    star: Gauss,
    comps: [Gauss; 6],
    weights: [f64; 6],
}

impl SourceProfile {
    pub fn new(position: [f64; 2], shape: &GalaxyShape, meta: &ImageMeta, model: &ModelConfig) -> Self {
        let footprint = Footprint::new(position, shape.scale, meta, model);
        let psf = meta.psf_sigma * meta.psf_sigma;
        let mut comps = [Gauss::from_cov(1.0, 0.0, 1.0); 6];
        let mut weights = [0.0; 6];
        let dev = shape.profile_mix;
        for (j, (mix, pw)) in [(EXP_MIXTURE, 1.0 - dev), (DEV_MIXTURE, dev)].iter().enumerate() {
            for i in 0..3 {
                let (sxx, sxy, syy) = component_cov(shape, meta, mix.widths[i]);
                comps[3 * j + i] = Gauss::from_cov(sxx, sxy, syy);
                weights[3 * j + i] = pw * mix.weights[i];
            }
        }
        SourceProfile {
            footprint,
            star: Gauss::from_cov(psf, 0.0, psf),
            comps,
            weights,
        }
    }

    /// Star and galaxy profile values at a pixel; zero outside the footprint.
    #[inline]
    pub fn at(&self, col: usize, row: usize) -> (f64, f64) {
        if !self.footprint.contains(col, row) {
            return (0.0, 0.0);
        }
        let a = col as f64 - self.footprint.center[0];
        let b = row as f64 - self.footprint.center[1];
        let (t, _, _) = taper((a * a + b * b).sqrt() / self.footprint.radius);
        if t == 0.0 {
            return (0.0, 0.0);
        }
        let star = self.star.at(a, b);
        let mut gal = 0.0;
        for (c, w) in self.comps.iter().zip(&self.weights) {
            gal += w * c.at(a, b);
        }
        (t * star, t * gal)
    }
}

#[derive(Clone, Copy)]
struct GaussJet {
    p: Jet6,
    q: Jet6,
    r: Jet6,
    lognorm: Jet6,
}

impl GaussJet {
    fn from_cov(sxx: Jet6, sxy: Jet6, syy: Jet6) -> Self {
        let det = sxx * syy - sxy * sxy;
        let inv = det.recip();
        GaussJet {
            p: syy * inv,
            q: -(sxy * inv),
            r: sxx * inv,
            lognorm: (det.ln() * 0.5 + (2.0 * PI).ln()).scale(-1.0),
        }
    }

    /// Density at pixel offset `(a, b)` from the center. The center moves
    /// with the position parameters at rate `kappa` per sky unit, so the
    /// offsets move at `-kappa`.
    #[inline]
    fn at(&self, a: f64, b: f64, kappa: f64) -> Jet6 {
        let (p, q, r) = (&self.p, &self.q, &self.r);
        let mut e = Jet6::constant(self.lognorm.v - 0.5 * (p.v * a * a + 2.0 * q.v * a * b + r.v * b * b));
        let (aa, ab, bb) = (a * a, a * b, b * b);
        e.g[G_X] = kappa * (p.v * a + q.v * b);
        e.g[G_Y] = kappa * (q.v * a + r.v * b);
        let k2 = kappa * kappa;
        e.h[G_X][G_X] = -k2 * p.v;
        e.h[G_X][G_Y] = -k2 * q.v;
        e.h[G_Y][G_Y] = -k2 * r.v;
        for j in G_PROFILE..6 {
            e.g[j] = self.lognorm.g[j] - 0.5 * (aa * p.g[j] + 2.0 * ab * q.g[j] + bb * r.g[j]);
            e.h[G_X][j] = kappa * (a * p.g[j] + b * q.g[j]);
            e.h[G_Y][j] = kappa * (a * q.g[j] + b * r.g[j]);
            for k in j..6 {
                e.h[j][k] = self.lognorm.h[j][k]
                    - 0.5 * (aa * p.h[j][k] + 2.0 * ab * q.h[j][k] + bb * r.h[j][k]);
            }
        }
        let v = e.v.exp();
        let mut out = Jet6::constant(v);
        for i in 0..6 {
            out.g[i] = v * e.g[i];
        }
        for i in 0..6 {
            for k in i..6 {
                let x = v * (e.h[i][k] + e.g[i] * e.g[k]);
                out.h[i][k] = x;
                out.h[k][i] = x;
            }
        }
        out
    }
}

/// Spatial profiles of the source being optimized, with derivatives in its
/// six geometry parameters.
pub(crate) struct ProfileJets {
    pub footprint: Footprint,
    /// d(pixel offset)/d(sky position) is `-kappa`, here `kappa = 1 / pixel_scale`.
    kappa: f64,
    star: GaussJet,
    comps: [GaussJet; 6],
    pi_exp: Jet6,
    pi_dev: Jet6,
    radius: Jet6,
}

impl ProfileJets {
    pub fn new(theta: &ParamVec, meta: &ImageMeta, model: &ModelConfig) -> Self {
        let geo = |i: usize| Jet6::var(theta[layout::GEOMETRY + i], i);
        let scale = scale_from_param(theta[layout::LOGIT_SCALE]);
        let footprint = Footprint::new([theta[layout::POS_X], theta[layout::POS_Y]], scale, meta, model);

        let ps = meta.pixel_scale;
        let s_px = geo(G_SCALE).sigmoid().scale((SCALE_MAX - SCALE_MIN) / ps) + SCALE_MIN / ps;
        let s2 = s_px.square();
        let e = geo(G_ECC).sigmoid();
        let e2 = e.square();
        let ang = geo(G_ANGLE);
        let (sn, cs) = (ang.sin(), ang.cos());
        let (sn2, cs2, sc) = (sn.square(), cs.square(), sn * cs);
        let base_xx = cs2 + e2 * sn2;
        let base_yy = sn2 + e2 * cs2;
        let base_xy = (Jet6::constant(1.0) - e2) * sc;
        let psf = meta.psf_sigma * meta.psf_sigma;

        let mut comps = [GaussJet::from_cov(Jet6::constant(1.0), Jet6::constant(0.0), Jet6::constant(1.0)); 6];
        for (j, mix) in [EXP_MIXTURE, DEV_MIXTURE].iter().enumerate() {
            for i in 0..3 {
                let big = s2.scale(mix.widths[i] * mix.widths[i]);
                comps[3 * j + i] =
                    GaussJet::from_cov(big * base_xx + psf, big * base_xy, big * base_yy + psf);
            }
        }
        let pi_dev = geo(G_PROFILE).sigmoid();
        let pi_exp = Jet6::constant(1.0) - pi_dev;
        let radius = (s_px + meta.psf_sigma).scale(model.radius_multiplier);
        ProfileJets {
            footprint,
            kappa: 1.0 / ps,
            star: GaussJet::from_cov(Jet6::constant(psf), Jet6::constant(0.0), Jet6::constant(psf)),
            comps,
            pi_exp,
            pi_dev,
            radius,
        }
    }

    /// Star and galaxy profile jets at a pixel inside the footprint.
    pub fn at(&self, col: usize, row: usize) -> (Jet6, Jet6) {
        let a = col as f64 - self.footprint.center[0];
        let b = row as f64 - self.footprint.center[1];
        let d = (a * a + b * b).sqrt();
        let t = d / self.radius.v;
        if t >= 1.0 {
            return (Jet6::constant(0.0), Jet6::constant(0.0));
        }
        let kappa = self.kappa;
        let star = self.star.at(a, b, kappa);
        let mut s_exp = Jet6::constant(0.0);
        let mut s_dev = Jet6::constant(0.0);
        for i in 0..3 {
            s_exp.add_scaled(&self.comps[i].at(a, b, kappa), EXP_MIXTURE.weights[i]);
            s_dev.add_scaled(&self.comps[3 + i].at(a, b, kappa), DEV_MIXTURE.weights[i]);
        }
        let gal = s_exp * self.pi_exp + s_dev * self.pi_dev;
        if t <= TAPER_START {
            return (star, gal);
        }
        // distance to the center as a function of position
        let mut dj = Jet6::constant(d);
        let d3 = d * d * d;
        dj.g[G_X] = -kappa * a / d;
        dj.g[G_Y] = -kappa * b / d;
        dj.h[G_X][G_X] = kappa * kappa * b * b / d3;
        dj.h[G_Y][G_Y] = kappa * kappa * a * a / d3;
        dj.h[G_X][G_Y] = -kappa * kappa * a * b / d3;
        dj.h[G_Y][G_X] = dj.h[G_X][G_Y];
        let tj = dj * self.radius.recip();
        let (f0, f1, f2) = taper(tj.v);
        let tp = tj.chain(f0, f1, f2);
        (star * tp, gal * tp)
    }
}

#[cfg(test)]
mod tests {
    use super::super::SourceModel;
    use super::*;

    fn meta() -> ImageMeta {
        ImageMeta {
            band: 2,
            background: 10.0,
            psf_sigma: 1.1,
            origin: [0.0, 0.0],
            pixel_scale: 0.8,
            width: 60,
            height: 50,
        }
    }

    /// Cumulative light fraction within radius `r` of a circular mixture.
    fn enclosed(m: &Mixture, r: f64) -> f64 {
        m.weights
            .iter()
            .zip(&m.widths)
            .map(|(w, c)| w * (1.0 - (-r * r / (2.0 * c * c)).exp()))
            .sum()
    }

    #[test]
    fn mixtures_have_unit_flux_and_half_light_radius() {
        for m in [EXP_MIXTURE, DEV_MIXTURE] {
            assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!((enclosed(&m, 1.0) - 0.5).abs() < 1e-12);
        }
        // the de Vaucouleurs profile is the more centrally concentrated one
        assert!(enclosed(&DEV_MIXTURE, 0.2) > enclosed(&EXP_MIXTURE, 0.2));
    }

    #[test]
    fn taper_is_c2() {
        let h = 1e-6;
        for &t in &[0.81, 0.85, 0.9, 0.95, 0.99] {
            let (_, d1, d2) = taper(t);
            let fd1 = (taper(t + h).0 - taper(t - h).0) / (2.0 * h);
            let fd2 = (taper(t + h).1 - taper(t - h).1) / (2.0 * h);
            assert!((fd1 - d1).abs() < 1e-6);
            assert!((fd2 - d2).abs() < 1e-4);
        }
        for &t in &[TAPER_START, 1.0] {
            let (_, d1, d2) = taper(t);
            assert_eq!((d1, d2), (0.0, 0.0));
        }
        assert_eq!(taper(1.0).0, 0.0);
        assert_eq!(taper(TAPER_START).0, 1.0);
    }

    #[test]
    fn footprint_pixels_within_radius() {
        let m = meta();
        let model = ModelConfig::default();
        let fp = Footprint::new([20.3, 15.7], 1.5, &m, &model);
        let c = fp.center;
        let mut n = 0;
        for row in 0..m.height {
            for col in 0..m.width {
                let d = ((col as f64 - c[0]).powi(2) + (row as f64 - c[1]).powi(2)).sqrt();
                let inside = d < fp.radius || Some((col, row)) == fp.center_pixel;
                assert_eq!(fp.contains(col, row), inside);
                n += inside as usize;
            }
        }
        assert_eq!(fp.pixels().count(), n);
    }

    #[test]
    fn zero_multiplier_keeps_center_pixel() {
        let m = meta();
        let model = ModelConfig { radius_multiplier: 0.0 };
        let fp = Footprint::new([8.0, 8.0], 1.0, &m, &model);
        assert_eq!(fp.pixels().collect::<Vec<_>>(), vec![(10, 10)]);
    }

    #[test]
    fn jets_agree_with_values() {
        let m = meta();
        let model = ModelConfig::default();
        let mut src = SourceModel::from_params(&[0.3; 27]);
        src.position = [22.0, 17.5];
        src.shape = GalaxyShape {
            profile_mix: 0.3,
            eccentricity: 0.5,
            scale: 2.0,
            angle: 40.0,
        };
        let theta = src.to_params();
        let vals = SourceProfile::new(src.position, &src.shape, &m, &model);
        let jets = ProfileJets::new(&theta, &m, &model);
        assert_eq!(vals.footprint, jets.footprint);
        for (col, row) in vals.footprint.pixels() {
            let (s, g) = vals.at(col, row);
            let (sj, gj) = jets.at(col, row);
            // the two paths round differently in the exponent, so compare
            // against the profile's overall scale
            assert!((s - sj.v).abs() <= 1e-12 * (s.abs() + 1e-6), "{s} {}", sj.v);
            assert!((g - gj.v).abs() <= 1e-12 * (g.abs() + 1e-6), "{g} {}", gj.v);
        }
    }

    #[test]
    fn jet_derivatives_match_finite_differences() {
        let m = meta();
        let model = ModelConfig::default();
        let mut theta = [0.0; 27];
        theta[layout::POS_X] = 20.0;
        theta[layout::POS_Y] = 18.0;
        theta[layout::LOGIT_PROFILE] = -0.4;
        theta[layout::LOGIT_ECCENTRICITY] = 0.7;
        theta[layout::LOGIT_SCALE] = -1.2;
        theta[layout::ANGLE] = 0.9;
        let jets = ProfileJets::new(&theta, &m, &model);
        let h = 1e-6;
        let pixels: Vec<_> = jets.footprint.pixels().step_by(7).collect();
        for &(col, row) in &pixels {
            let (s0, g0) = jets.at(col, row);
            for i in 0..6 {
                let mut tp = theta;
                let mut tm = theta;
                tp[layout::GEOMETRY + i] += h;
                tm[layout::GEOMETRY + i] -= h;
                let (sp, gp) = ProfileJets::new(&tp, &m, &model).at(col, row);
                let (sm, gm) = ProfileJets::new(&tm, &m, &model).at(col, row);
                for (name, j0, p, q) in [("star", s0, sp, sm), ("gal", g0, gp, gm)] {
                    let fd = (p.v - q.v) / (2.0 * h);
                    assert!((fd - j0.g[i]).abs() < 1e-7 * (1.0 + j0.g[i].abs()), "{name} grad {i}");
                    for k in 0..6 {
                        let fd = (p.g[k] - q.g[k]) / (2.0 * h);
                        assert!(
                            (fd - j0.h[i][k]).abs() < 1e-6 * (1.0 + j0.h[i][k].abs()),
                            "{name} hess {i} {k}: {fd} vs {}",
                            j0.h[i][k]
                        );
                    }
                }
            }
        }
    }
}
