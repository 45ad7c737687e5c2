//! Work-balanced rectangular tasks over the sky.
//!
//! Work is the predicted number of active pixels, counted from a prior
//! catalog. The first stage bisects the sky recursively at work medians.
//! The second stage moves every cut of the first stage into the interior of
//! its neighboring leaves so sources near a stage-1 border end up away from
//! any stage-2 border.

use crate::catalog::PriorCatalog;
use crate::error::{ensure, Error, Result};
use crate::model::{Footprint, ImageMeta, LightSource, ModelConfig, ParamVec, SourceModel};
use serde::{Deserialize, Serialize};

/// Label confidence used when initializing from a catalog entry.
pub const INIT_LABEL_CONFIDENCE: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkyRegion {
    pub min_corner: [f64; 2],
    pub max_corner: [f64; 2],
}

impl SkyRegion {
    pub fn new(min_corner: [f64; 2], max_corner: [f64; 2]) -> Result<Self> {
        let r = SkyRegion { min_corner, max_corner };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.min_corner.iter().chain(&self.max_corner).all(|v| v.is_finite()),
            "region corners must be finite"
        );
        ensure!(
            self.min_corner[0] < self.max_corner[0] && self.min_corner[1] < self.max_corner[1],
            "region min corner {:?} must be below max corner {:?}",
            self.min_corner,
            self.max_corner
        );
        Ok(())
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.max_corner[0] - self.min_corner[0], self.max_corner[1] - self.min_corner[1]]
    }

    pub fn area(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1]
    }

    /// Closed containment.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|a| self.min_corner[a] <= p[a] && p[a] <= self.max_corner[a])
    }

    /// Whether the interiors overlap.
    pub fn overlaps(&self, o: &SkyRegion) -> bool {
        (0..2).all(|a| self.min_corner[a] < o.max_corner[a] && o.min_corner[a] < self.max_corner[a])
    }

    pub fn expand(&self, margin: f64) -> SkyRegion {
        SkyRegion {
            min_corner: [self.min_corner[0] - margin, self.min_corner[1] - margin],
            max_corner: [self.max_corner[0] + margin, self.max_corner[1] + margin],
        }
    }

    pub fn from_bounds(b: [f64; 4]) -> SkyRegion {
        SkyRegion {
            min_corner: [b[0], b[1]],
            max_corner: [b[2], b[3]],
        }
    }
}

/// Region owning point `p`: among the regions whose closure contains it,
/// the one with the lexicographically smallest min corner.
pub fn assign_region(p: [f64; 2], regions: &[SkyRegion]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in regions.iter().enumerate() {
        if r.contains(p) {
            let better = match best {
                None => true,
                Some(b) => {
                    let (m, n) = (r.min_corner, regions[b].min_corner);
                    m[0] < n[0] || (m[0] == n[0] && m[1] < n[1])
                }
            };
            if better {
                best = Some(i);
            }
        }
    }
    best
}

/// Active pixels of one catalog entry summed over all images.
pub fn entry_work(source: &LightSource, metas: &[ImageMeta], model: &ModelConfig) -> f64 {
    metas
        .iter()
        .map(|m| {
            let fp = Footprint::new(source.position, source.shape.scale, m, model);
            if fp.is_empty() {
                0
            } else {
                fp.pixels().count()
            }
        })
        .sum::<usize>() as f64
}

/// Predicted active pixels of the entries centered in `region`.
pub fn estimate_work(region: &SkyRegion, catalog: &PriorCatalog, metas: &[ImageMeta], model: &ModelConfig) -> f64 {
    catalog
        .entries
        .iter()
        .filter(|e| region.contains(e.source.position))
        .map(|e| entry_work(&e.source, metas, model))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub region: SkyRegion,
    pub work: f64,
    /// Set when the leaf is over the threshold but too small to split.
    pub at_min_extent: bool,
}

/// Recursive work-median bisection of `bounds`. Entries outside `bounds`
/// are ignored.
pub fn partition_sky(
    bounds: &SkyRegion,
    catalog: &PriorCatalog,
    metas: &[ImageMeta],
    model: &ModelConfig,
    work_threshold: f64,
    min_extent: f64,
) -> Result<Vec<Leaf>> {
    bounds.validate()?;
    ensure!(work_threshold > 0.0, "work threshold must be positive, got {work_threshold}");
    ensure!(min_extent > 0.0, "minimum extent must be positive, got {min_extent}");
    let items: Vec<([f64; 2], f64)> = catalog
        .entries
        .iter()
        .filter(|e| bounds.contains(e.source.position))
        .map(|e| (e.source.position, entry_work(&e.source, metas, model)))
        .collect();
    let mut leaves = Vec::new();
    bisect(*bounds, items, work_threshold, min_extent, &mut leaves);
    let flagged = leaves.iter().filter(|l| l.at_min_extent).count();
    if flagged > 0 {
        log::warn!("{flagged} leaves exceed the work threshold at minimum extent");
    }
    Ok(leaves)
}

fn bisect(region: SkyRegion, mut items: Vec<([f64; 2], f64)>, threshold: f64, min_extent: f64, out: &mut Vec<Leaf>) {
    let work: f64 = items.iter().map(|i| i.1).sum();
    let ext = region.extent();
    if work <= threshold || ext[0].max(ext[1]) <= min_extent {
        out.push(Leaf {
            region,
            work,
            at_min_extent: work > threshold,
        });
        return;
    }
    let axis = if ext[0] >= ext[1] { 0 } else { 1 };
    items.sort_by(|a, b| a.0[axis].total_cmp(&b.0[axis]));
    let mut cut = None;
    let mut best = f64::INFINITY;
    let mut left = 0.0;
    for j in 0..items.len().saturating_sub(1) {
        left += items[j].1;
        let (a, b) = (items[j].0[axis], items[j + 1].0[axis]);
        if a < b && (left - work / 2.0).abs() < best {
            best = (left - work / 2.0).abs();
            cut = Some(0.5 * (a + b));
        }
    }
    // every entry shares the coordinate: halve the region instead
    let cut = cut.unwrap_or(0.5 * (region.min_corner[axis] + region.max_corner[axis]));
    let (lo_items, hi_items): (Vec<_>, Vec<_>) = items.into_iter().partition(|i| i.0[axis] <= cut);
    let (mut lo, mut hi) = (region, region);
    lo.max_corner[axis] = cut;
    hi.min_corner[axis] = cut;
    bisect(lo, lo_items, threshold, min_extent, out);
    bisect(hi, hi_items, threshold, min_extent, out);
}

enum Cuts {
    Leaf,
    Cut {
        axis: usize,
        at: f64,
        /// Half the smallest extent, along `axis`, of the leaves touching
        /// the cut from above.
        shift: f64,
        lo: Box<Cuts>,
        hi: Box<Cuts>,
    },
}

/// Recovers a guillotine cut tree from leaves tiling `bbox`.
fn cut_tree(regions: Vec<SkyRegion>, bbox: SkyRegion) -> Result<Cuts> {
    if regions.len() == 1 {
        ensure!(regions[0] == bbox, "regions do not tile the bounds");
        return Ok(Cuts::Leaf);
    }
    let ext = bbox.extent();
    let axes = if ext[0] >= ext[1] { [0, 1] } else { [1, 0] };
    for axis in axes {
        let mid = 0.5 * (bbox.min_corner[axis] + bbox.max_corner[axis]);
        let mut cands: Vec<f64> = regions
            .iter()
            .map(|r| r.min_corner[axis])
            .filter(|&v| v > bbox.min_corner[axis])
            .collect();
        cands.sort_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()).then(a.total_cmp(b)));
        cands.dedup();
        for at in cands {
            let valid = regions
                .iter()
                .all(|r| r.max_corner[axis] <= at || r.min_corner[axis] >= at);
            if !valid {
                continue;
            }
            let (lo_r, hi_r): (Vec<SkyRegion>, Vec<SkyRegion>) =
                regions.iter().partition(|r| r.max_corner[axis] <= at);
            let shift = 0.5
                * hi_r
                    .iter()
                    .filter(|r| r.min_corner[axis] == at)
                    .map(|r| r.extent()[axis])
                    .fold(f64::INFINITY, f64::min);
            let (mut lo_b, mut hi_b) = (bbox, bbox);
            lo_b.max_corner[axis] = at;
            hi_b.min_corner[axis] = at;
            return Ok(Cuts::Cut {
                axis,
                at,
                shift,
                lo: Box::new(cut_tree(lo_r, lo_b)?),
                hi: Box::new(cut_tree(hi_r, hi_b)?),
            });
        }
    }
    Err(Error::Validation(
        "regions do not form a guillotine tiling of the bounds".into(),
    ))
}

fn shifted_leaves(node: &Cuts, region: SkyRegion, out: &mut Vec<SkyRegion>) {
    match node {
        Cuts::Leaf => out.push(region),
        Cuts::Cut { axis, at, shift, lo, hi } => {
            let c = at + shift;
            let (mut l, mut h) = (region, region);
            l.max_corner[*axis] = c;
            h.min_corner[*axis] = c;
            shifted_leaves(lo, l, out);
            shifted_leaves(hi, h, out);
        }
    }
}

/// Second-stage tiling: every stage-1 cut moves up by half the extent of
/// the leaves adjacent to it from above, so each stage-2 leaf is roughly its
/// stage-1 leaf translated by half its own size, with the regions at the low
/// edges of `bounds` absorbing the slack.
pub fn shift_partition(stage1: &[SkyRegion], bounds: &SkyRegion) -> Result<Vec<SkyRegion>> {
    ensure!(!stage1.is_empty(), "no regions to shift");
    let tree = cut_tree(stage1.to_vec(), *bounds)?;
    let mut out = Vec::with_capacity(stage1.len());
    shifted_leaves(&tree, *bounds, &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: u64,
    /// 1 or 2.
    pub stage: u8,
    pub region: SkyRegion,
    pub source_ids: Vec<u64>,
    pub init: Vec<ParamVec>,
    /// Indices into the survey's image list.
    pub image_ids: Vec<usize>,
    pub estimated_work: f64,
}

/// Largest active radius, in sky units, of any catalog entry in any image.
pub fn max_active_radius(catalog: &PriorCatalog, metas: &[ImageMeta], model: &ModelConfig) -> f64 {
    let max_scale = catalog.entries.iter().map(|e| e.source.shape.scale).fold(0.0, f64::max);
    metas
        .iter()
        .map(|m| model.radius_multiplier * (m.psf_sigma * m.pixel_scale + max_scale))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
    /// Entries outside every region.
    pub skipped: usize,
}

/// Builds one task per region. Task ids are `first_id, first_id + 1, ...`
/// in region order.
pub fn make_tasks(
    regions: &[SkyRegion],
    catalog: &PriorCatalog,
    metas: &[ImageMeta],
    model: &ModelConfig,
    stage: u8,
    first_id: u64,
) -> Result<TaskSet> {
    ensure!(stage == 1 || stage == 2, "stage must be 1 or 2, got {stage}");
    let margin = max_active_radius(catalog, metas, model);
    let mut tasks: Vec<Task> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let grown = r.expand(margin);
            Task {
                id: first_id + i as u64,
                stage,
                region: *r,
                source_ids: Vec::new(),
                init: Vec::new(),
                image_ids: (0..metas.len())
                    .filter(|&m| SkyRegion::from_bounds(metas[m].sky_bounds()).overlaps(&grown))
                    .collect(),
                estimated_work: 0.0,
            }
        })
        .collect();
    let mut skipped = 0;
    for e in &catalog.entries {
        match assign_region(e.source.position, regions) {
            Some(i) => {
                let t = &mut tasks[i];
                t.source_ids.push(e.id);
                t.init
                    .push(SourceModel::from_light_source(&e.source, INIT_LABEL_CONFIDENCE).to_params());
                t.estimated_work += entry_work(&e.source, metas, model);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} catalog entries lie outside every region and were skipped");
    }
    Ok(TaskSet { tasks, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(x0: f64, y0: f64, x1: f64, y1: f64) -> SkyRegion {
        SkyRegion::new([x0, y0], [x1, y1]).unwrap()
    }

    #[test]
    fn degenerate_region_rejected() {
        assert!(SkyRegion::new([0.0, 0.0], [0.0, 1.0]).is_err());
    }

    #[test]
    fn single_region_is_unchanged() {
        let b = region(0.0, 0.0, 10.0, 5.0);
        assert_eq!(shift_partition(&[b], &b).unwrap(), vec![b]);
    }

    #[test]
    fn grid_cuts_move_to_cell_centers() {
        let b = region(0.0, 0.0, 4.0, 4.0);
        let cells = vec![
            region(0.0, 0.0, 2.0, 2.0),
            region(2.0, 0.0, 4.0, 2.0),
            region(0.0, 2.0, 2.0, 4.0),
            region(2.0, 2.0, 4.0, 4.0),
        ];
        let mut s2 = shift_partition(&cells, &b).unwrap();
        s2.sort_by(|a, b| a.min_corner.partial_cmp(&b.min_corner).unwrap());
        assert_eq!(
            s2,
            vec![
                region(0.0, 0.0, 3.0, 3.0),
                region(0.0, 3.0, 3.0, 4.0),
                region(3.0, 0.0, 4.0, 3.0),
                region(3.0, 3.0, 4.0, 4.0),
            ]
        );
    }

    #[test]
    fn non_guillotine_rejected() {
        // pinwheel
        let b = region(0.0, 0.0, 3.0, 3.0);
        let cells = vec![
            region(0.0, 0.0, 2.0, 1.0),
            region(2.0, 0.0, 3.0, 2.0),
            region(1.0, 2.0, 3.0, 3.0),
            region(0.0, 1.0, 1.0, 3.0),
            region(1.0, 1.0, 2.0, 2.0),
        ];
        assert!(shift_partition(&cells, &b).is_err());
    }

    #[test]
    fn shared_edge_goes_to_lower_corner() {
        let regions = [region(1.0, 0.0, 2.0, 1.0), region(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(assign_region([1.0, 0.5], &regions), Some(1));
        assert_eq!(assign_region([3.0, 0.5], &regions), None);
    }
}
