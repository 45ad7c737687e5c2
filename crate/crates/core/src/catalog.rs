//! Catalog entries shared by the synthetic truth, the prior catalog used for
//! task generation, and the scorer.

use crate::model::{layout, GalaxyShape, LightSource, SourceKind, SourceModel, NUM_BANDS, NUM_COLORS};
use nalgebra::DMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CatalogEntry {
    pub id: u64,
    pub source: LightSource,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Ground truth drawn by [`crate::synth::generate_catalog`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub catalog: Catalog,
    pub seed: u64,
}

/// Existing catalog used for work estimation and initialization.
pub type PriorCatalog = Catalog;

/// One flat CSV row of a truth or prior catalog.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CatalogRow {
    pub id: u64,
    /// `star` or `galaxy`.
    pub kind: RowKind,
    pub x: f64,
    pub y: f64,
    pub flux_u: f64,
    pub flux_g: f64,
    pub flux_r: f64,
    pub flux_i: f64,
    pub flux_z: f64,
    pub profile: f64,
    pub eccentricity: f64,
    pub scale: f64,
    pub angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Star,
    Galaxy,
}

impl From<&CatalogEntry> for CatalogRow {
    fn from(e: &CatalogEntry) -> Self {
        let s = &e.source;
        let f = s.flux;
        CatalogRow {
            id: e.id,
            kind: match s.kind {
                SourceKind::Star => RowKind::Star,
                SourceKind::Galaxy => RowKind::Galaxy,
            },
            x: s.position[0],
            y: s.position[1],
            flux_u: f[0],
            flux_g: f[1],
            flux_r: f[2],
            flux_i: f[3],
            flux_z: f[4],
            profile: s.shape.profile_mix,
            eccentricity: s.shape.eccentricity,
            scale: s.shape.scale,
            angle: s.shape.angle,
        }
    }
}

impl From<&CatalogRow> for CatalogEntry {
    fn from(r: &CatalogRow) -> Self {
        let flux: [f64; NUM_BANDS] = [r.flux_u, r.flux_g, r.flux_r, r.flux_i, r.flux_z];
        CatalogEntry {
            id: r.id,
            source: LightSource {
                position: [r.x, r.y],
                kind: match r.kind {
                    RowKind::Star => SourceKind::Star,
                    RowKind::Galaxy => SourceKind::Galaxy,
                },
                flux,
                shape: GalaxyShape {
                    profile_mix: r.profile,
                    eccentricity: r.eccentricity,
                    scale: r.scale,
                    angle: r.angle,
                },
            },
        }
    }
}

/// One row of an inferred catalog. Brightness and colors are the factors of
/// the more probable type.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OutputRow {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub p_star: f64,
    pub logflux_mean: f64,
    pub logflux_sd: f64,
    pub color1_mean: f64,
    pub color1_sd: f64,
    pub color2_mean: f64,
    pub color2_sd: f64,
    pub color3_mean: f64,
    pub color3_sd: f64,
    pub color4_mean: f64,
    pub color4_sd: f64,
    pub profile: f64,
    pub eccentricity: f64,
    pub scale: f64,
    pub angle: f64,
}

impl OutputRow {
    pub fn new(id: u64, m: &SourceModel) -> Self {
        let (_, t) = m.map_type();
        OutputRow {
            id,
            x: m.position[0],
            y: m.position[1],
            p_star: m.q_star,
            logflux_mean: t.logflux_mean,
            logflux_sd: t.logflux_sd,
            color1_mean: t.color_mean[0],
            color1_sd: t.color_sd[0],
            color2_mean: t.color_mean[1],
            color2_sd: t.color_sd[1],
            color3_mean: t.color_mean[2],
            color3_sd: t.color_sd[2],
            color4_mean: t.color_mean[3],
            color4_sd: t.color_sd[3],
            profile: m.shape.profile_mix,
            eccentricity: m.shape.eccentricity,
            scale: m.shape.scale,
            angle: m.shape.angle,
        }
    }

    /// Replaces the brightness and color standard deviations.
    pub fn with_sds(mut self, logflux_sd: f64, color_sd: [f64; NUM_COLORS]) -> Self {
        self.logflux_sd = logflux_sd;
        self.color1_sd = color_sd[0];
        self.color2_sd = color_sd[1];
        self.color3_sd = color_sd[2];
        self.color4_sd = color_sd[3];
        self
    }

    pub fn color_means(&self) -> [f64; NUM_COLORS] {
        [self.color1_mean, self.color2_mean, self.color3_mean, self.color4_mean]
    }

    pub fn is_star(&self) -> bool {
        self.p_star >= 0.5
    }

}

/// Linear-response standard deviations of the brightness and colors of one
/// type: square roots of the diagonal of the inverse negative Hessian of the
/// objective restricted to that type's five means. Unlike the factor sds of
/// q these account for the correlation between brightness and colors. `None`
/// when that block is not negative definite.
pub fn linear_response_sds(hessian: &DMatrix<f64>, kind: SourceKind) -> Option<(f64, [f64; NUM_COLORS])> {
    let b = match kind {
        SourceKind::Star => layout::STAR,
        SourceKind::Galaxy => layout::GALAXY,
    };
    let idx = [b.flux_mean, b.color_mean, b.color_mean + 1, b.color_mean + 2, b.color_mean + 3];
    let neg = DMatrix::from_fn(5, 5, |i, j| -hessian[(idx[i], idx[j])]);
    let cov = neg.cholesky()?.inverse();
    let sd = |i: usize| cov[(i, i)].sqrt();
    Some((sd(0), [sd(1), sd(2), sd(3), sd(4)]))
}
