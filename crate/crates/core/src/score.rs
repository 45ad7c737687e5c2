//! Cross-matching an inferred catalog against the truth and summarizing the
//! errors.

use crate::catalog::{Catalog, OutputRow};
use crate::error::{ensure, Result};
use crate::model::{SourceKind, NUM_COLORS};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair {
    /// Index into the truth list.
    pub truth: usize,
    /// Index into the estimate list.
    pub estimate: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_truth: Vec<usize>,
    pub unmatched_estimate: Vec<usize>,
}

/// Greedy nearest-neighbor matching: candidate pairs within `radius` are
/// taken in order of distance, then truth id, then estimate id, skipping
/// entries already used.
pub fn match_points(truth: &[(u64, [f64; 2])], estimate: &[(u64, [f64; 2])], radius: f64) -> Result<Matching> {
    ensure!(radius > 0.0 && radius.is_finite(), "match radius must be positive, got {radius}");
    let cell = |p: [f64; 2]| ((p[0] / radius).floor() as i64, (p[1] / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, (_, p)) in estimate.iter().enumerate() {
        grid.entry(cell(*p)).or_default().push(j);
    }
    let mut cands = Vec::new();
    for (i, (_, p)) in truth.iter().enumerate() {
        let (cx, cy) = cell(*p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &j in grid.get(&(cx + dx, cy + dy)).map(Vec::as_slice).unwrap_or(&[]) {
                    let q = estimate[j].1;
                    let d = (p[0] - q[0]).hypot(p[1] - q[1]);
                    if d <= radius {
                        cands.push(MatchedPair {
                            truth: i,
                            estimate: j,
                            distance: d,
                        });
                    }
                }
            }
        }
    }
    cands.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(truth[a.truth].0.cmp(&truth[b.truth].0))
            .then(estimate[a.estimate].0.cmp(&estimate[b.estimate].0))
    });
    let mut used_t = vec![false; truth.len()];
    let mut used_e = vec![false; estimate.len()];
    let mut pairs = Vec::new();
    for c in cands {
        if !used_t[c.truth] && !used_e[c.estimate] {
            used_t[c.truth] = true;
            used_e[c.estimate] = true;
            pairs.push(c);
        }
    }
    Ok(Matching {
        pairs,
        unmatched_truth: (0..truth.len()).filter(|&i| !used_t[i]).collect(),
        unmatched_estimate: (0..estimate.len()).filter(|&j| !used_e[j]).collect(),
    })
}

pub fn match_catalogs(truth: &Catalog, estimate: &[OutputRow], radius: f64) -> Result<Matching> {
    let t: Vec<_> = truth.entries.iter().map(|e| (e.id, e.source.position)).collect();
    let e: Vec<_> = estimate.iter().map(|r| (r.id, [r.x, r.y])).collect();
    match_points(&t, &e, radius)
}

/// Mean with its standard error (sample sd over root n).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub count: usize,
}

impl Metric {
    pub fn from_values(v: &[f64]) -> Metric {
        let n = v.len();
        if n == 0 {
            return Metric {
                mean: None,
                se: None,
                count: 0,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = (n > 1).then(|| {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Metric {
            mean: Some(mean),
            se,
            count: n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Matching radius in pixels.
    pub radius: f64,
    /// Sky units per pixel, for reporting distances in pixels.
    pub pixel_scale: f64,
    /// Sources with `p_star` at or above this are called stars.
    pub star_threshold: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            radius: 1.0,
            pixel_scale: 1.0,
            star_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Center distance in pixels.
    pub position: Metric,
    /// Share of true galaxies called stars.
    pub missed_gals: Metric,
    /// Share of true stars called galaxies.
    pub missed_stars: Metric,
    /// Absolute error of the reference-band log flux.
    pub brightness: Metric,
    pub colors: [Metric; NUM_COLORS],
    /// Shape errors, over true galaxies only.
    pub profile: Metric,
    pub eccentricity: Metric,
    /// Half-light radius error in pixels.
    pub scale: Metric,
    /// Orientation error in degrees, folded into [0, 90].
    pub angle: Metric,
    /// Share of matches whose true reference-band log flux lies within two
    /// posterior sds of the estimate.
    pub brightness_coverage: Metric,
    pub matched: usize,
    pub unmatched_truth: usize,
    pub unmatched_estimate: usize,
}

pub fn angle_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

pub fn score(truth: &Catalog, estimate: &[OutputRow], matching: &Matching, cfg: &ScoreConfig) -> Result<ScoreReport> {
    ensure!(!matching.pairs.is_empty(), "no matched sources to score");
    let ps = cfg.pixel_scale;
    let mut position = Vec::new();
    let (mut missed_gals, mut missed_stars) = (Vec::new(), Vec::new());
    let mut brightness = Vec::new();
    let mut coverage = Vec::new();
    let mut colors: [Vec<f64>; NUM_COLORS] = Default::default();
    let (mut profile, mut ecc, mut scale, mut angle) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in &matching.pairs {
        let t = &truth.entries[p.truth].source;
        let e = &estimate[p.estimate];
        let called_star = e.p_star >= cfg.star_threshold;
        position.push(p.distance / ps);
        let (l, c) = t.log_flux_and_colors();
        let dl = (l - e.logflux_mean).abs();
        brightness.push(dl);
        coverage.push(f64::from(u8::from(dl <= 2.0 * e.logflux_sd)));
        for (k, ec) in e.color_means().iter().enumerate() {
            colors[k].push((c[k] - ec).abs());
        }
        match t.kind {
            SourceKind::Star => missed_stars.push(f64::from(u8::from(!called_star))),
            SourceKind::Galaxy => {
                missed_gals.push(f64::from(u8::from(called_star)));
                profile.push((t.shape.profile_mix - e.profile).abs());
                ecc.push((t.shape.eccentricity - e.eccentricity).abs());
                scale.push((t.shape.scale - e.scale).abs() / ps);
                angle.push(angle_error(t.shape.angle, e.angle));
            }
        }
    }
    Ok(ScoreReport {
        position: Metric::from_values(&position),
        missed_gals: Metric::from_values(&missed_gals),
        missed_stars: Metric::from_values(&missed_stars),
        brightness: Metric::from_values(&brightness),
        colors: std::array::from_fn(|k| Metric::from_values(&colors[k])),
        profile: Metric::from_values(&profile),
        eccentricity: Metric::from_values(&ecc),
        scale: Metric::from_values(&scale),
        angle: Metric::from_values(&angle),
        brightness_coverage: Metric::from_values(&coverage),
        matched: matching.pairs.len(),
        unmatched_truth: matching.unmatched_truth.len(),
        unmatched_estimate: matching.unmatched_estimate.len(),
    })
}

/// Matches then scores.
pub fn score_catalogs(truth: &Catalog, estimate: &[OutputRow], cfg: &ScoreConfig) -> Result<ScoreReport> {
    let m = match_catalogs(truth, estimate, cfg.radius * cfg.pixel_scale)?;
    score(truth, estimate, &m, cfg)
}

#[derive(Serialize)]
struct ReportRow<'a> {
    metric: &'a str,
    mean: Option<f64>,
    se: Option<f64>,
    count: usize,
}

impl ScoreReport {
    pub fn metrics(&self) -> Vec<(&'static str, Metric)> {
        let mut v = vec![
            ("position", self.position),
            ("missed_gals", self.missed_gals),
            ("missed_stars", self.missed_stars),
            ("brightness", self.brightness),
        ];
        for (name, m) in ["color_ug", "color_gr", "color_ri", "color_iz"].into_iter().zip(self.colors) {
            v.push((name, m));
        }
        v.extend([
            ("profile", self.profile),
            ("eccentricity", self.eccentricity),
            ("scale", self.scale),
            ("angle", self.angle),
            ("brightness_coverage", self.brightness_coverage),
        ]);
        v
    }

    /// Columns `metric,mean,se,count`; absent values are empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (metric, m) in self.metrics() {
            w.serialize(ReportRow {
                metric,
                mean: m.mean,
                se: m.se,
                count: m.count,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>12} {:>12} {:>7}", "metric", "mean", "se", "n")?;
        let num = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for (name, m) in self.metrics() {
            writeln!(f, "{:<20} {:>12} {:>12} {:>7}", name, num(m.mean), num(m.se), m.count)?;
        }
        write!(
            f,
            "matched {}, unmatched truth {}, unmatched estimate {}",
            self.matched, self.unmatched_truth, self.unmatched_estimate
        )
    }
}
