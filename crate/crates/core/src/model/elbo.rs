//! Variational objective for one source block and for a whole catalog.
//!
//! Per pixel the objective uses `x (ln E - V / 2E^2) - E - ln x!`, where `E`
//! and `V` are the mean and variance of the expected rate under the
//! variational distribution. Each source adds `pi_t A_t g_t` to the mean
//! and `pi_t B_t g_t^2 - (sum_t pi_t A_t g_t)^2` to the variance, with
//! `A_t = E[flux]`, `B_t = E[flux^2]` under the log-normal band flux and
//! `g_t` the spatial profile of type `t`.

use super::profile::{Jet6, ProfileJets, SourceProfile};
use super::{
    layout, ImagePatch, ModelConfig, ParamVec, Priors, SourceModel, COLOR_COEFFS, NUM_BANDS,
    NUM_COLORS, PARAM_DIM,
};
use crate::error::{ensure, Result};
use crate::jet::Jet;
use nalgebra::{DMatrix, DVector, SMatrix};
use std::collections::BTreeMap;

type Jet27 = Jet<PARAM_DIM>;
const NG: usize = layout::NUM_GEOMETRY;
const GEO: usize = layout::GEOMETRY;
/// Parameters that the rate factors and KL terms depend on.
const NON_GEO: usize = GEO;

/// Value, gradient and Hessian of an objective to be maximized.
#[derive(Clone, Debug)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// Active pixels touched while evaluating.
    pub visits: u64,
}

impl Objective {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|x| x.is_finite())
            && self.hessian.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PriorTerms {
    ln_phi: f64,
    ln_1m_phi: f64,
    flux_mean: f64,
    flux_sd: f64,
    color_mean: [f64; NUM_COLORS],
    precision: [[f64; NUM_COLORS]; NUM_COLORS],
    logdet: f64,
}

impl PriorTerms {
    pub(crate) fn new(p: &Priors) -> Result<Self> {
        p.validate()?;
        let cov = p.color_cov_matrix();
        let chol = cov.cholesky().expect("validated positive definite");
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv = chol.inverse();
        Ok(PriorTerms {
            ln_phi: p.star_prob.ln(),
            ln_1m_phi: (-p.star_prob).ln_1p(),
            flux_mean: p.log_flux_mean,
            flux_sd: p.log_flux_sd,
            color_mean: p.color_mean,
            precision: std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (inv[(i, j)] + inv[(j, i)]))),
            logdet,
        })
    }
}

/// Parameter `i` as a jet: a variable when `N` spans the full parameter
/// vector, a constant when `N == 0`.
#[inline]
fn lift<const N: usize>(theta: &ParamVec, i: usize) -> Jet<N> {
    if i < N {
        Jet::var(theta[i], i)
    } else {
        Jet::constant(theta[i])
    }
}

/// Type probabilities (star, galaxy).
fn type_weights<const N: usize>(theta: &ParamVec) -> [Jet<N>; 2] {
    let u = lift::<N>(theta, layout::LOGIT_STAR);
    [u.sigmoid(), (-u).sigmoid()]
}

/// Per-type factors `P_t = pi_t E[flux_b]` and `Q_t = pi_t E[flux_b^2]`.
fn rate_factors<const N: usize>(theta: &ParamVec, band: usize, w: &[Jet<N>; 2]) -> [(Jet<N>, Jet<N>); 2] {
    std::array::from_fn(|ti| {
        let t = layout::TYPES[ti];
        let mut mean = lift::<N>(theta, t.flux_mean);
        let mut var = lift::<N>(theta, t.flux_log_sd).scale(2.0).exp();
        for (k, &a) in COLOR_COEFFS[band].iter().enumerate() {
            if a != 0.0 {
                mean.add_scaled(&lift::<N>(theta, t.color_mean + k), a);
                var.add_scaled(&lift::<N>(theta, t.color_log_sd + k).scale(2.0).exp(), a * a);
            }
        }
        let first = (mean + var.scale(0.5)).exp();
        let second = (mean + var).scale(2.0).exp();
        (w[ti] * first, w[ti] * second)
    })
}

/// KL divergence from the prior to the variational factors of one source.
fn kl<const N: usize>(theta: &ParamVec, prior: &PriorTerms, w: &[Jet<N>; 2]) -> Jet<N> {
    let u = lift::<N>(theta, layout::LOGIT_STAR);
    let ln_q = -((-u).softplus());
    let ln_1mq = -(u.softplus());
    let mut total = w[0] * (ln_q - prior.ln_phi) + w[1] * (ln_1mq - prior.ln_1m_phi);
    let s0 = prior.flux_sd;
    for (ti, t) in layout::TYPES.iter().enumerate() {
        let m = lift::<N>(theta, t.flux_mean);
        let l = lift::<N>(theta, t.flux_log_sd);
        let dm = m - prior.flux_mean;
        let flux = (l.scale(2.0).exp() + dm.square()).scale(0.5 / (s0 * s0)) - l + (s0.ln() - 0.5);

        let d: [Jet<N>; NUM_COLORS] =
            std::array::from_fn(|k| lift::<N>(theta, t.color_mean + k) - prior.color_mean[k]);
        let mut color = Jet::<N>::constant(prior.logdet - NUM_COLORS as f64);
        for k in 0..NUM_COLORS {
            let lk = lift::<N>(theta, t.color_log_sd + k);
            color.add_scaled(&lk.scale(2.0).exp(), prior.precision[k][k]);
            color.add_scaled(&lk, -2.0);
            color.add_scaled(&d[k].square(), prior.precision[k][k]);
            for j in k + 1..NUM_COLORS {
                if prior.precision[k][j] != 0.0 {
                    color.add_scaled(&(d[k] * d[j]), 2.0 * prior.precision[k][j]);
                }
            }
        }
        total += w[ti] * (flux + color.scale(0.5));
    }
    total
}

pub(crate) fn kl_value(theta: &ParamVec, prior: &PriorTerms) -> f64 {
    kl::<0>(theta, prior, &type_weights::<0>(theta)).v
}

/// Moments at one pixel: fixed part `(ce, cv)` and the active source's
/// contributions `y1 = sum_t P_t g_t`, `y2 = sum_t Q_t g_t^2`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelState {
    pub x: f64,
    pub ce: f64,
    pub cv: f64,
    pub y1: f64,
    pub y2: f64,
}

impl PixelState {
    fn moments(&self) -> (f64, f64) {
        (self.ce + self.y1, self.cv + self.y2 - self.y1 * self.y1)
    }

    /// `f_p(with) - f_p(without)`.
    pub fn delta(&self) -> f64 {
        let (e, v) = self.moments();
        pixel_term(self.x, e, v) - pixel_term(self.x, self.ce, self.cv)
    }

    /// `f_p(self) - f_p(other)` for two states sharing the fixed part,
    /// arranged so the shared terms cancel exactly.
    pub fn delta_from(&self, other: &PixelState) -> f64 {
        let (ea, va) = self.moments();
        let (eb, vb) = other.moments();
        let dy = self.y1 - other.y1;
        let mut d = -dy;
        if self.x != 0.0 {
            d += self.x * ((dy / eb).ln_1p() - (va / (2.0 * ea * ea) - vb / (2.0 * eb * eb)));
        }
        d
    }
}

/// Per-pixel objective without the `ln x!` term.
#[inline]
fn pixel_term(x: f64, e: f64, v: f64) -> f64 {
    if x == 0.0 {
        -e
    } else {
        x * (e.ln() - v / (2.0 * e * e)) - e
    }
}

fn ln_factorial(x: u32) -> f64 {
    libm::lgamma(x as f64 + 1.0)
}

/// A fixed source as seen from one image.
struct Neighbor {
    profile: SourceProfile,
    rate: [f64; 2],
    rate2: [f64; 2],
}

impl Neighbor {
    #[inline]
    fn add_moments(&self, col: usize, row: usize, e: &mut f64, v: &mut f64) {
        let (gs, gg) = self.profile.at(col, row);
        if gs == 0.0 && gg == 0.0 {
            return;
        }
        let m = self.rate[0] * gs + self.rate[1] * gg;
        *e += m;
        *v += self.rate2[0] * gs * gs + self.rate2[1] * gg * gg - m * m;
    }
}

fn source_profile(theta: &ParamVec, patch: &ImagePatch, model: &ModelConfig) -> (SourceProfile, [f64; 2], [f64; 2]) {
    let src = SourceModel::from_params(theta);
    let profile = SourceProfile::new(src.position, &src.shape, &patch.meta, model);
    let f = rate_factors::<0>(theta, patch.meta.band, &type_weights::<0>(theta));
    (profile, [f[0].0.v, f[1].0.v], [f[0].1.v, f[1].1.v])
}

/// Objective for one source with every other source held fixed.
///
/// The value is the change in the catalog objective caused by the source,
/// `sum_p [f_p(with) - f_p(without)] - KL`, which differs from the full
/// objective by a constant. Because each profile is tapered to zero at the
/// active radius this is smooth in all parameters, including those that
/// move the footprint.
pub struct BlockProblem<'a> {
    patches: &'a [ImagePatch],
    model: &'a ModelConfig,
    prior: PriorTerms,
    neighbors: Vec<Vec<Neighbor>>,
}

#[derive(Default)]
struct BandSums {
    s0: [f64; 2],
    s1: [[f64; NG]; 2],
    s2: [[[f64; NG]; NG]; 2],
    t0: [f64; 2],
    t1: [[f64; NG]; 2],
    t2: [[[f64; NG]; NG]; 2],
    m11: [[f64; 2 * (NG + 1)]; 2 * (NG + 1)],
    m12: [[f64; 2 * (NG + 1)]; 2 * (NG + 1)],
}

struct Eval {
    value: f64,
    baseline: f64,
    grad: [f64; PARAM_DIM],
    hess: Box<[[f64; PARAM_DIM]; PARAM_DIM]>,
    visits: u64,
}

impl<'a> BlockProblem<'a> {
    pub fn new(
        others: &[ParamVec],
        patches: &'a [ImagePatch],
        priors: &Priors,
        model: &'a ModelConfig,
    ) -> Result<Self> {
        ensure!(!patches.is_empty(), "no image patches supplied");
        model.validate()?;
        let prior = PriorTerms::new(priors)?;
        for p in patches {
            p.meta.validate()?;
        }
        let neighbors = patches
            .iter()
            .map(|patch| {
                others
                    .iter()
                    .filter_map(|theta| {
                        let (profile, rate, rate2) = source_profile(theta, patch, model);
                        (!profile.footprint.is_empty()).then_some(Neighbor {
                            profile,
                            rate,
                            rate2,
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(BlockProblem {
            patches,
            model,
            prior,
            neighbors,
        })
    }

    /// Objective with exact gradient and Hessian.
    pub fn evaluate(&self, theta: &ParamVec) -> Objective {
        let ev = self.run(theta, true, false);
        let mut h = DMatrix::zeros(PARAM_DIM, PARAM_DIM);
        for i in 0..PARAM_DIM {
            for k in 0..PARAM_DIM {
                h[(i, k)] = 0.5 * (ev.hess[i][k] + ev.hess[k][i]);
            }
        }
        Objective {
            value: ev.value,
            gradient: DVector::from_row_slice(&ev.grad),
            hessian: h,
            visits: ev.visits,
        }
    }

    /// Maximizes over the source's parameters from `theta`.
    pub fn maximize(
        &self,
        theta: &ParamVec,
        config: &crate::trust::SolverConfig,
    ) -> Result<(ParamVec, crate::trust::TrustRegionState)> {
        let to_arr = |x: &DVector<f64>| -> ParamVec { std::array::from_fn(|i| x[i]) };
        let (x, state) = crate::trust::maximize_block(
            |x| Ok(self.evaluate(&to_arr(x))),
            DVector::from_row_slice(theta),
            config,
        )?;
        Ok((to_arr(&x), state))
    }

    /// Objective value only.
    pub fn value(&self, theta: &ParamVec) -> f64 {
        self.run(theta, false, false).value
    }

    /// Sum of `f_p(with)` over the active pixels, including `-ln x!`, minus
    /// the KL term.
    pub fn local_value(&self, theta: &ParamVec) -> f64 {
        let ev = self.run(theta, false, true);
        ev.value + ev.baseline
    }

    /// Per-pixel rate moments keyed by (patch, pixel index), and the KL
    /// term, computed through the plain profile evaluation rather than the
    /// jets.
    pub(crate) fn pixel_states(&self, theta: &ParamVec) -> (BTreeMap<(usize, usize), PixelState>, f64) {
        let mut out = BTreeMap::new();
        for (pi, patch) in self.patches.iter().enumerate() {
            let (profile, rate, rate2) = source_profile(theta, patch, self.model);
            let w = patch.meta.width;
            for (col, row) in profile.footprint.pixels() {
                let (ce, cv) = self.fixed_moments(pi, col, row, &profile.footprint);
                let (gs, gg) = profile.at(col, row);
                let y1 = rate[0] * gs + rate[1] * gg;
                let y2 = rate2[0] * gs * gs + rate2[1] * gg * gg;
                let x = patch.pixels[row * w + col] as f64;
                out.insert((pi, row * w + col), PixelState { x, ce, cv, y1, y2 });
            }
        }
        (out, kl_value(theta, &self.prior))
    }

    #[inline]
    fn fixed_moments(&self, pi: usize, col: usize, row: usize, fp: &super::Footprint) -> (f64, f64) {
        let mut e = self.patches[pi].meta.background;
        let mut v = 0.0;
        for n in &self.neighbors[pi] {
            if n.profile.footprint.bbox_overlaps(fp) {
                n.add_moments(col, row, &mut e, &mut v);
            }
        }
        (e, v)
    }

    fn run(&self, theta: &ParamVec, derivs: bool, baseline: bool) -> Eval {
        let w27 = type_weights::<PARAM_DIM>(theta);
        let mut band_cache: [Option<[(Jet27, Jet27); 2]>; NUM_BANDS] = Default::default();
        let mut ev = Eval {
            value: 0.0,
            baseline: 0.0,
            grad: [0.0; PARAM_DIM],
            hess: Box::new([[0.0; PARAM_DIM]; PARAM_DIM]),
            visits: 0,
        };
        for (pi, patch) in self.patches.iter().enumerate() {
            let meta = &patch.meta;
            let jets = ProfileJets::new(theta, meta, self.model);
            let fp = jets.footprint;
            if fp.is_empty() {
                continue;
            }
            let nbrs: Vec<&Neighbor> = self.neighbors[pi]
                .iter()
                .filter(|n| n.profile.footprint.bbox_overlaps(&fp))
                .collect();
            let factors = *band_cache[meta.band].get_or_insert_with(|| rate_factors(theta, meta.band, &w27));
            let p = [factors[0].0.v, factors[1].0.v];
            let q = [factors[0].1.v, factors[1].1.v];
            let mut sums = derivs.then(|| Box::<BandSums>::default());
            let w = meta.width;
            for (col, row) in fp.pixels() {
                ev.visits += 1;
                let mut ce = meta.background;
                let mut cv = 0.0;
                for n in &nbrs {
                    n.add_moments(col, row, &mut ce, &mut cv);
                }
                let xi = patch.pixels[row * w + col];
                let x = xi as f64;
                if baseline {
                    ev.baseline += pixel_term(x, ce, cv) - ln_factorial(xi);
                }
                let (gs, gg) = jets.at(col, row);
                let y1 = p[0] * gs.v + p[1] * gg.v;
                let y2 = q[0] * gs.v * gs.v + q[1] * gg.v * gg.v;
                let e = ce + y1;
                let v = cv + y2 - y1 * y1;
                ev.value += pixel_term(x, e, v) - pixel_term(x, ce, cv);
                if let Some(s) = sums.as_deref_mut() {
                    accumulate(s, x, e, v, y1, [&gs, &gg]);
                }
            }
            if let Some(s) = sums {
                assemble(&mut ev, &s, &factors);
            }
        }
        if derivs {
            let k = kl::<PARAM_DIM>(theta, &self.prior, &w27);
            ev.value -= k.v;
            for i in 0..NON_GEO {
                ev.grad[i] -= k.g[i];
                for j in 0..NON_GEO {
                    ev.hess[i][j] -= k.h[i][j];
                }
            }
        } else {
            ev.value -= kl_value(theta, &self.prior);
        }
        ev
    }
}

#[inline]
fn accumulate(s: &mut BandSums, x: f64, e: f64, v: f64, y1: f64, g: [&Jet6; 2]) {
    // derivatives of the pixel term in (E, V), then in (y1, y2) with
    // E = c + y1 and V = c' + y2 - y1^2
    let ie = 1.0 / e;
    let ie2 = ie * ie;
    let f_e = x * (ie + v * ie2 * ie) - 1.0;
    let f_v = -0.5 * x * ie2;
    let f_ee = -x * ie2 * (1.0 + 3.0 * v * ie2);
    let f_ev = x * ie2 * ie;
    let f1 = f_e - 2.0 * y1 * f_v;
    let f2 = f_v;
    let f11 = f_ee - 4.0 * y1 * f_ev - 2.0 * f_v;
    let f12 = f_ev;

    const H: usize = NG + 1;
    let mut h1 = [0.0; 2 * H];
    let mut h2 = [0.0; 2 * H];
    for t in 0..2 {
        let gt = g[t];
        let gv = gt.v;
        s.s0[t] += f1 * gv;
        s.t0[t] += f2 * gv * gv;
        h1[t * H] = gv;
        h2[t * H] = gv * gv;
        for j in 0..NG {
            s.s1[t][j] += f1 * gt.g[j];
            let dg2 = 2.0 * gv * gt.g[j];
            s.t1[t][j] += f2 * dg2;
            h1[t * H + 1 + j] = gt.g[j];
            h2[t * H + 1 + j] = dg2;
            for k in j..NG {
                s.s2[t][j][k] += f1 * gt.h[j][k];
                s.t2[t][j][k] += f2 * 2.0 * (gt.g[j] * gt.g[k] + gv * gt.h[j][k]);
            }
        }
    }
    for i in 0..2 * H {
        let a = f11 * h1[i];
        let b = f12 * h1[i];
        for k in i..2 * H {
            s.m11[i][k] += a * h1[k];
        }
        for k in 0..2 * H {
            s.m12[i][k] += b * h2[k];
        }
    }
}

fn assemble(ev: &mut Eval, s: &BandSums, f: &[(Jet27, Jet27); 2]) {
    const H: usize = NG + 1;
    for t in 0..2 {
        let (p, q) = (&f[t].0, &f[t].1);
        for i in 0..NON_GEO {
            ev.grad[i] += p.g[i] * s.s0[t] + q.g[i] * s.t0[t];
            for k in 0..NON_GEO {
                ev.hess[i][k] += p.h[i][k] * s.s0[t] + q.h[i][k] * s.t0[t];
            }
            for j in 0..NG {
                let x = p.g[i] * s.s1[t][j] + q.g[i] * s.t1[t][j];
                ev.hess[i][GEO + j] += x;
                ev.hess[GEO + j][i] += x;
            }
        }
        for j in 0..NG {
            ev.grad[GEO + j] += p.v * s.s1[t][j] + q.v * s.t1[t][j];
            for k in j..NG {
                let x = p.v * s.s2[t][j][k] + q.v * s.t2[t][j][k];
                ev.hess[GEO + j][GEO + k] += x;
                if k != j {
                    ev.hess[GEO + k][GEO + j] += x;
                }
            }
        }
    }
    // Jacobians of (y1, y2) with respect to the stacked profile features
    let mut c1 = SMatrix::<f64, PARAM_DIM, { 2 * H }>::zeros();
    let mut c2 = SMatrix::<f64, PARAM_DIM, { 2 * H }>::zeros();
    for t in 0..2 {
        for i in 0..NON_GEO {
            c1[(i, t * H)] = f[t].0.g[i];
            c2[(i, t * H)] = f[t].1.g[i];
        }
        for j in 0..NG {
            c1[(GEO + j, t * H + 1 + j)] = f[t].0.v;
            c2[(GEO + j, t * H + 1 + j)] = f[t].1.v;
        }
    }
    let m11 = SMatrix::<f64, { 2 * H }, { 2 * H }>::from_fn(|i, k| {
        if i <= k {
            s.m11[i][k]
        } else {
            s.m11[k][i]
        }
    });
    let m12 = SMatrix::<f64, { 2 * H }, { 2 * H }>::from_fn(|i, k| s.m12[i][k]);
    let a = c1 * m11 * c1.transpose();
    let b = c1 * m12 * c2.transpose();
    for i in 0..PARAM_DIM {
        for k in 0..PARAM_DIM {
            ev.hess[i][k] += a[(i, k)] + b[(i, k)] + b[(k, i)];
        }
    }
}

/// Objective for `sources[active]` with all other sources fixed, in the
/// form `sum over active pixels of f_p - KL`. The gradient and Hessian are
/// with respect to the active source's free parameters.
pub fn elbo(
    sources: &[SourceModel],
    patches: &[ImagePatch],
    priors: &Priors,
    model: &ModelConfig,
    active: usize,
) -> Result<Objective> {
    let (problem, theta) = block_setup(sources, patches, priors, model, active)?;
    let mut obj = problem.evaluate(&theta);
    obj.value = problem.local_value(&theta);
    Ok(obj)
}

/// Like [`elbo`] but with the value in difference form (see
/// [`BlockProblem`]).
pub fn block_objective(
    sources: &[SourceModel],
    patches: &[ImagePatch],
    priors: &Priors,
    model: &ModelConfig,
    active: usize,
) -> Result<Objective> {
    let (problem, theta) = block_setup(sources, patches, priors, model, active)?;
    Ok(problem.evaluate(&theta))
}

fn block_setup<'a>(
    sources: &[SourceModel],
    patches: &'a [ImagePatch],
    priors: &Priors,
    model: &'a ModelConfig,
    active: usize,
) -> Result<(BlockProblem<'a>, ParamVec)> {
    ensure!(
        active < sources.len(),
        "active index {active} out of range for {} sources",
        sources.len()
    );
    for s in sources {
        s.validate()?;
    }
    let others: Vec<ParamVec> = sources
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != active)
        .map(|(_, s)| s.to_params())
        .collect();
    let problem = BlockProblem::new(&others, patches, priors, model)?;
    Ok((problem, sources[active].to_params()))
}

/// Objective of a whole catalog over every pixel of every patch.
pub fn total_elbo(
    sources: &[ParamVec],
    patches: &[ImagePatch],
    priors: &Priors,
    model: &ModelConfig,
) -> Result<f64> {
    ensure!(!patches.is_empty(), "no image patches supplied");
    let prior = PriorTerms::new(priors)?;
    let mut total = 0.0;
    for patch in patches {
        patch.meta.validate()?;
        let w = patch.meta.width;
        let mut e = vec![patch.meta.background; patch.pixels.len()];
        let mut v = vec![0.0; patch.pixels.len()];
        for theta in sources {
            let n = {
                let (profile, rate, rate2) = source_profile(theta, patch, model);
                Neighbor { profile, rate, rate2 }
            };
            for (col, row) in n.profile.footprint.pixels() {
                let i = row * w + col;
                n.add_moments(col, row, &mut e[i], &mut v[i]);
            }
        }
        for (i, &x) in patch.pixels.iter().enumerate() {
            total += pixel_term(x as f64, e[i], v[i]) - ln_factorial(x);
        }
    }
    for theta in sources {
        total -= kl_value(theta, &prior);
    }
    Ok(total)
}
