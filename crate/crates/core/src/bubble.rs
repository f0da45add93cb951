//! Energy-concentration analysis of a degenerating family: atom detection,
//! renormalization scales, blow-up regimes and rescaled bubble families.
//!
//! All disc energies are adaptive chart cubatures (see [`crate::quad`]);
//! discs around a point `p` live in the isometric chart centred at `p`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::holo::{self, chordal, ChartPoint, HoloError, HoloMap, MapFamily, SectionTuple};
use crate::quad;
use crate::sphere::CenteredChart;

type C = Complex64;

/// Minimal energy of a nonconstant rational map under `E = deg`.
pub const B0: f64 = 1.0;

#[derive(Debug, Error)]
pub enum BubbleError {
    #[error("atoms {0:?} and {1:?} are closer than twice the capture radius {2:.3e}; lower eps0")]
    Resolution(ChartPoint, ChartPoint, f64),
    #[error("hemisphere constant C₀ = {0} must lie in (0, B₀/2)")]
    HemisphereConstant(f64),
    #[error("scale inversion failed: {0}")]
    Scale(String),
    #[error("regime fit needs at least 6 schedule points, got {0}")]
    ShortSchedule(usize),
    #[error("rescaled domains do not grow (t(s) bounded): radii {0:?}")]
    DegenerateRescaling(Vec<f64>),
    #[error("bubble limit does not converge: {0}")]
    NonConvergence(String),
    #[error("theory violation: {0}")]
    Theory(String),
    #[error(transparent)]
    Holo(#[from] HoloError),
}

pub type Result<T> = std::result::Result<T, BubbleError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleConfig {
    /// Capture-radius constant: `ε_s = eps0·s^{−1/2}`.
    pub eps0: f64,
    /// Hemisphere constant.
    pub c0: f64,
    /// Disc energy above which a disc is "bad".
    pub threshold: f64,
    /// Side of the coarsest detection squares.
    pub rho0: f64,
    /// Deepest quadtree level.
    pub m_levels: usize,
    /// Number of trailing schedule points an atom must persist over.
    pub persistence: usize,
    /// Absolute cubature tolerance for masses and profiles.
    pub tol: f64,
}

impl Default for BubbleConfig {
    fn default() -> Self {
        BubbleConfig { eps0: 2.0, c0: 0.25, threshold: 0.3, rho0: 0.5, m_levels: 30, persistence: 3, tol: 1e-11 }
    }
}

impl BubbleConfig {
    pub fn eps(&self, s: f64) -> f64 {
        self.eps0 / s.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyAtom {
    pub point: ChartPoint,
    /// Location before snapping to the limit divisor.
    pub raw_point: ChartPoint,
    pub mass: f64,
    pub capture_radius: f64,
    /// Disc masses `a(ε_s, s)` along the schedule tail used for detection.
    pub disc_masses: Vec<f64>,
    /// Deepest bad quadtree level per persistence sample.
    pub levels: Vec<usize>,
}

impl EnergyAtom {
    pub fn site(&self) -> holo::AtomSite {
        holo::AtomSite { point: self.point, mass: self.mass }
    }
    pub fn chart(&self) -> CenteredChart {
        CenteredChart::at(&self.point.to_sphere())
    }
}

/// `|e(f_s) − e(f₀)|` in the chart centred at `chart`.
pub struct DeltaDensity {
    fs: SectionTuple,
    f0: SectionTuple,
}

impl DeltaDensity {
    pub fn new(fs: &SectionTuple, f0: &SectionTuple, chart: &CenteredChart) -> Self {
        DeltaDensity { fs: fs.recentered(chart), f0: f0.recentered(chart) }
    }
    pub fn eval(&self, w: C) -> f64 {
        (self.fs.chart_density(w) - self.f0.chart_density(w)).abs()
    }
    pub fn member_density(&self, w: C) -> f64 {
        self.fs.chart_density(w)
    }
}

#[derive(Debug, Clone, Copy)]
struct Leaf {
    center: C,
    side: f64,
    level: usize,
}

/// Energy of `f` in the chart disc `|z − c| < r`, as the flux
/// `(1/4π)∮∂ₙ log Σ|f_i|²`; exact for maps without common zeros and
/// insensitive to how sharply the density peaks inside the disc.
fn flux_mass(f: &SectionTuple, derivs: &[holo::Poly], c: C, r: f64) -> f64 {
    let radial = |z: C| {
        let (mut num, mut den) = (C::new(0.0, 0.0), 0.0);
        for (p, dp) in f.components.iter().zip(derivs) {
            let v = p.eval(z);
            num += dp.eval(z) * v.conj();
            den += v.norm_sqr();
        }
        ((z - c) / r * num / den).re
    };
    r * quad::circle_mean(&radial, c, r, 1e-12)
}

fn bad_leaves(f: &SectionTuple, cfg: &BubbleConfig) -> Vec<Leaf> {
    let n = (2.0 / cfg.rho0).ceil() as usize;
    let side = 2.0 / n as f64;
    let roots: Vec<C> = (0..n * n)
        .map(|k| C::new(-1.0 + side * ((k % n) as f64 + 0.5), -1.0 + side * ((k / n) as f64 + 0.5)))
        .collect();
    let derivs: Vec<holo::Poly> = f.components.iter().map(|p| p.derivative()).collect();
    let mass = |c: C, r: f64| flux_mass(f, &derivs, c, r);
    fn descend(m: &(dyn Fn(C, f64) -> f64 + Sync), c: C, side: f64, level: usize, cfg: &BubbleConfig, out: &mut Vec<Leaf>) {
        let bad_children: Vec<(C, f64)> = if level >= cfg.m_levels {
            vec![]
        } else {
            let h = 0.25 * side;
            [C::new(-h, -h), C::new(h, -h), C::new(-h, h), C::new(h, h)]
                .iter()
                .map(|o| c + o)
                .filter(|cc| m(*cc, 0.5 * side) >= cfg.threshold)
                .map(|cc| (cc, 0.5 * side))
                .collect()
        };
        if bad_children.is_empty() {
            out.push(Leaf { center: c, side, level });
        } else {
            for (cc, sd) in bad_children {
                descend(m, cc, sd, level + 1, cfg, out);
            }
        }
    }
    roots
        .par_iter()
        .map(|&c| {
            let mut out = Vec::new();
            if mass(c, side) >= cfg.threshold {
                descend(&mass, c, side, 0, cfg, &mut out);
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Cluster {
    point: Option<C>,
    level: usize,
}

/// Group leaves of one chart; `to_sphere` maps chart coordinates to the
/// standard chart (`None` = ∞).
fn clusters(leaves: &[Leaf], to_std: impl Fn(C) -> Option<C>) -> Vec<Cluster> {
    let n = leaves.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (leaves[i].center - leaves[j].center).norm();
            if d <= 3.0 * leaves[i].side.max(leaves[j].side) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut ids: Vec<usize> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        match ids.iter().position(|&x| x == r) {
            Some(k) => groups[k].push(i),
            None => {
                ids.push(r);
                groups.push(vec![i]);
            }
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let level = g.iter().map(|&i| leaves[i].level).max().unwrap_or(0);
            let deep: Vec<C> = g.iter().filter(|&&i| leaves[i].level == level).map(|&i| leaves[i].center).collect();
            let c = deep.iter().sum::<C>() / deep.len() as f64;
            Cluster { point: to_std(c), level }
        })
        .collect()
}

/// Concentration clusters of one map over both hemispherical charts.
fn concentration_clusters(f: &SectionTuple, cfg: &BubbleConfig, merge: f64) -> Vec<Cluster> {
    let rev = f.at_infinity();
    let mut all = clusters(&bad_leaves(f, cfg), Some);
    all.extend(clusters(&bad_leaves(&rev, cfg), |w| if w.norm() == 0.0 { None } else { Some(w.inv()) }));
    let mut out: Vec<Cluster> = Vec::new();
    for c in all {
        match out.iter_mut().find(|o| chordal(o.point, c.point) < merge) {
            Some(o) => {
                if c.level > o.level {
                    *o = c;
                }
            }
            None => out.push(c),
        }
    }
    out
}

/// Energy-weighted centre of `density` on a disc.
fn centre_of_mass(density: &(dyn Fn(C) -> f64 + Sync), c: C, r: f64, tol: f64) -> Option<C> {
    let m = quad::disc(density, c, r, tol).value;
    if m <= 0.0 {
        return None;
    }
    let mx = quad::disc(&|z: C| (z - c).re * density(z), c, r, tol).value;
    let my = quad::disc(&|z: C| (z - c).im * density(z), c, r, tol).value;
    Some(c + C::new(mx / m, my / m))
}

/// Two-point Richardson mass with a tail error `∝ ε⁻²`.
pub fn richardson_mass(a_eps: f64, a_half: f64) -> f64 {
    (4.0 * a_eps - a_half) / 3.0
}

/// Limit map of the family (coefficient limit with common zeros removed).
pub fn limit_map(fam: &MapFamily) -> Result<(SectionTuple, HoloMap)> {
    let (tuple, err) = fam.coefficient_limit()?;
    let (_, reduced) = holo::strip_gcd(&tuple, holo::limit_tolerance(err))?;
    Ok((tuple, reduced))
}

/// Detect energy atoms of a family. The limit density `e(f₀)` entering the
/// masses is that of the coefficient limit with its common zeros removed.
pub fn detect_atoms(fam: &MapFamily, cfg: &BubbleConfig) -> Result<Vec<EnergyAtom>> {
    let n = fam.len();
    let k = cfg.persistence.min(n).max(1);
    let (limit_tuple, err) = fam.coefficient_limit()?;
    let (zeros, f0) = holo::strip_gcd(&limit_tuple, holo::limit_tolerance(err))?;
    let tail: Vec<usize> = (n - k..n).collect();
    let per_member: Vec<Vec<Cluster>> = tail
        .par_iter()
        .map(|&i| concentration_clusters(&fam.members[i], cfg, cfg.eps(fam.schedule[i])))
        .collect();
    let s_last = fam.schedule[n - 1];
    let eps = cfg.eps(s_last);
    let mut atoms = Vec::new();
    for c in &per_member[k - 1] {
        let mut levels = Vec::with_capacity(k);
        for (j, &i) in tail.iter().enumerate() {
            let r = cfg.eps(fam.schedule[i]);
            if let Some(m) = per_member[j].iter().find(|m| chordal(m.point, c.point) < r) {
                levels.push(m.level);
            }
        }
        let persistent = levels.len() == k && (k == 1 || levels[k - 1] > levels[0]);
        if !persistent {
            continue;
        }
        // refine by the centre of mass of e(f_s) in the chart centred at the cluster
        let chart = CenteredChart::at(&ChartPoint::from_opt(c.point).to_sphere());
        let g = fam.last().recentered(&chart);
        let dens = |w: C| g.chart_density(w);
        let side = cfg.rho0 * 0.5f64.powi(c.level as i32);
        let shift = centre_of_mass(&dens, C::new(0.0, 0.0), (4.0 * side).min(eps), 1e-3 * cfg.tol.max(1e-12))
            .unwrap_or(C::new(0.0, 0.0));
        let raw = chart.inverse_point(shift);
        let raw_point = ChartPoint::from_sphere(&raw);
        // snap to the divisor of the limit tuple when it is unambiguous
        let snapped = zeros
            .points
            .iter()
            .map(|(p, _)| *p)
            .min_by(|a, b| chordal(a.value(), raw_point.value()).total_cmp(&chordal(b.value(), raw_point.value())))
            .filter(|p| chordal(p.value(), raw_point.value()) < 0.5 * eps);
        let point = snapped.unwrap_or(raw_point);
        let chart = CenteredChart::at(&point.to_sphere());
        let disc_masses: Vec<f64> = tail
            .iter()
            .map(|&i| {
                let dd = DeltaDensity::new(&fam.members[i], &f0, &chart);
                quad::disc(&|w| dd.eval(w), C::new(0.0, 0.0), cfg.eps(fam.schedule[i]), cfg.tol).value
            })
            .collect();
        let dd = DeltaDensity::new(fam.last(), &f0, &chart);
        let half = quad::disc(&|w| dd.eval(w), C::new(0.0, 0.0), 0.5 * eps, cfg.tol).value;
        let mass = richardson_mass(disc_masses[k - 1], half);
        atoms.push(EnergyAtom { point, raw_point, mass, capture_radius: eps, disc_masses, levels });
    }
    atoms.sort_by(|a, b| {
        let (pa, pb) = (a.point.value(), b.point.value());
        match (pa, pb) {
            (Some(x), Some(y)) => x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
    });
    for (i, a) in atoms.iter().enumerate() {
        for b in &atoms[i + 1..] {
            // chordal distance of the centred-chart disc radius ε is ≈ 2ε
            if chordal(a.point.value(), b.point.value()) <= 4.0 * eps {
                return Err(BubbleError::Resolution(a.point, b.point, eps));
            }
        }
        if a.mass < B0 - 0.05 {
            return Err(BubbleError::Theory(format!(
                "atom at {:?} carries mass {:.4} below the energy quantum",
                a.point, a.mass
            )));
        }
    }
    Ok(atoms)
}

impl ChartPoint {
    pub fn from_opt(z: Option<C>) -> Self {
        match z {
            Some(z) => ChartPoint::finite(z),
            None => ChartPoint::Infinity,
        }
    }
}

/// Monotone bisection for `F(t) = target` with `F` decreasing in `t`,
/// searched in `log t` over `[lo, hi]`.
pub fn invert_profile(f: &dyn Fn(f64) -> f64, target: f64, lo: f64, hi: f64) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if !(flo >= target && fhi <= target) {
        return Err(BubbleError::Scale(format!(
            "target {target:.6} outside the profile range [{fhi:.6}, {flo:.6}]"
        )));
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(m.exp()) >= target {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-13 {
            break;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormScale {
    pub c0: f64,
    pub schedule: Vec<f64>,
    pub eps: Vec<f64>,
    /// Energy centre `b(s)` in the chart centred at the atom.
    pub centers: Vec<[f64; 2]>,
    /// `a(ε_s, s)` on the disc around `b(s)`.
    pub disc_mass: Vec<f64>,
    pub t: Vec<f64>,
    /// Fixed point of `t = exp((a − C₀ − C)/K)` with `K = t·F′(t)`.
    pub closed_form: Vec<f64>,
    /// Level crossings of the sampled profile (more than one = ambiguous).
    pub crossings: Vec<usize>,
}

fn profile_mass(dd: &DeltaDensity, b: C, radius: f64, tol: f64) -> f64 {
    quad::disc(&|w| dd.eval(w), b, radius, tol).value
}

/// Renormalization scale along the schedule for one atom.
pub fn compute_scale(fam: &MapFamily, f0: &HoloMap, atom: &EnergyAtom, cfg: &BubbleConfig) -> Result<RenormScale> {
    if !(cfg.c0 > 0.0 && cfg.c0 < 0.5 * B0) {
        return Err(BubbleError::HemisphereConstant(cfg.c0));
    }
    let chart = atom.chart();
    let per_s: Vec<Result<(f64, C, f64, f64, f64, usize)>> = fam
        .schedule
        .par_iter()
        .zip(fam.members.par_iter())
        .map(|(&s, f)| {
            let eps = cfg.eps(s);
            let dd = DeltaDensity::new(f, f0, &chart);
            let zero = C::new(0.0, 0.0);
            let b = centre_of_mass(&|w| dd.eval(w), zero, eps, cfg.tol).unwrap_or(zero);
            let a = profile_mass(&dd, b, eps, cfg.tol);
            let target = a - cfg.c0;
            let prof = |t: f64| profile_mass(&dd, b, 1.0 / t, cfg.tol);
            let t = invert_profile(&prof, target, 1.0 / eps, 1e15)?;
            // the sampled profile is monotone; count crossings as a guard
            let samples: Vec<f64> = (0..=40).map(|k| prof((1.0 / eps) * 10f64.powf(k as f64 * 0.25))).collect();
            let crossings = samples.windows(2).filter(|w| (w[0] - target) * (w[1] - target) < 0.0).count();
            let closed = closed_form_scale(&dd, b, a, cfg.c0, 1.0 / eps, cfg.tol);
            Ok((eps, b, a, t, closed, crossings))
        })
        .collect();
    let mut out = RenormScale {
        c0: cfg.c0,
        schedule: fam.schedule.clone(),
        eps: vec![],
        centers: vec![],
        disc_mass: vec![],
        t: vec![],
        closed_form: vec![],
        crossings: vec![],
    };
    for r in per_s {
        let (eps, b, a, t, closed, crossings) = r?;
        out.eps.push(eps);
        out.centers.push([b.re, b.im]);
        out.disc_mass.push(a);
        out.t.push(t);
        out.closed_form.push(closed);
        out.crossings.push(crossings);
    }
    Ok(out)
}

/// Iterate the closed form `t = exp((a − C₀ − C)/K)`, re-anchoring the
/// constant `C = F(t) − K·log t` and `K = t·F′(t) = −t⁻²∮e(1/t,θ)dθ` at the
/// current iterate.
fn closed_form_scale(dd: &DeltaDensity, b: C, a: f64, c0: f64, t0: f64, tol: f64) -> f64 {
    let mut t = t0;
    for _ in 0..100 {
        let r = 1.0 / t;
        let f = profile_mass(dd, b, r, tol);
        let ring = 2.0 * PI * quad::circle_mean(&|w| dd.eval(w), b, r, 1e-12);
        let k = -(r * r) * ring;
        if k >= 0.0 || !k.is_finite() {
            t *= 2.0;
            continue;
        }
        let c = f - k * t.ln();
        let next = ((a - c0 - c) / k).clamp(t.ln() - 2.0, t.ln() + 2.0);
        let done = (next - t.ln()).abs() < 1e-12;
        t = next.exp();
        if done {
            break;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Fast { slope: f64, excluded_by_theory: bool },
    Slow { slope: f64 },
    Moderate { slope: f64, lambda: f64, lambda_error: f64 },
    Unclassified { reason: String },
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Fast { .. } => "fast",
            Regime::Slow { .. } => "slow",
            Regime::Moderate { .. } => "moderate",
            Regime::Unclassified { .. } => "unclassified",
        }
    }
    pub fn lambda(&self) -> Option<f64> {
        match self {
            Regime::Moderate { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }
}

/// Trichotomy of `lim s/t(s)` from the log–log slope of `s/t` against `s`.
pub fn classify_regime(t: &[f64], schedule: &[f64]) -> Result<Regime> {
    let n = t.len();
    if n < 6 || schedule.len() != n {
        return Err(BubbleError::ShortSchedule(n));
    }
    let xs: Vec<f64> = schedule.iter().map(|s| s.ln()).collect();
    let ratio: Vec<f64> = schedule.iter().zip(t).map(|(s, t)| s / t).collect();
    let ys: Vec<f64> = ratio.iter().map(|q| q.ln()).collect();
    // slope over the upper half of the schedule
    let h = n / 2;
    let (slope, _) = quad::linear_fit(&xs[h..], &ys[h..]);
    let monotone = ys[h..].windows(2).all(|w| w[1] >= w[0]) || ys[h..].windows(2).all(|w| w[1] <= w[0]);
    if slope.abs() < 0.1 {
        let m = n.min(h + 4).max(4);
        let hs: Vec<f64> = schedule[n - m.min(n)..].iter().map(|s| 1.0 / s).collect();
        let vs: Vec<C> = ratio[n - m.min(n)..].iter().map(|q| C::new(*q, 0.0)).collect();
        let take = hs.len().min(4);
        let (lambda, err) = quad::extrapolate_to_zero(&hs[hs.len() - take..], &vs[vs.len() - take..]);
        let spread = ratio[n - 3..].iter().fold(0.0f64, |m, q| m.max((q - ratio[n - 1]).abs())) / ratio[n - 1];
        if spread > 0.05 && !monotone {
            return Ok(Regime::Unclassified { reason: format!("ratio s/t oscillates (spread {spread:.3})") });
        }
        return Ok(Regime::Moderate { slope, lambda: lambda.re, lambda_error: err });
    }
    if !monotone {
        return Ok(Regime::Unclassified { reason: format!("non-monotone ratio with slope {slope:.3}") });
    }
    if slope > 0.0 {
        Ok(Regime::Slow { slope })
    } else {
        Ok(Regime::Fast { slope, excluded_by_theory: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyPair {
    pub rescaled: f64,
    pub parent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledFamily {
    pub atom: EnergyAtom,
    /// Normalized bubble scale `t̂ = λ·t` (moderate regime) or `t`.
    pub t_hat: Vec<f64>,
    pub centers: Vec<[f64; 2]>,
    pub family: MapFamily,
    /// Radius `t̂·ε_s` of the rescaled disc.
    pub domain_radius: Vec<f64>,
    pub energy_check: Vec<EnergyPair>,
    /// `∫|Δe|` over `1/t < |w − b| < ε` at the raw scale `t`.
    pub hemisphere_mass: Vec<f64>,
}

/// Rescale the family around an atom: `y ↦ w = b(s) + y/t̂(s)` in the chart
/// centred at the atom.
pub fn renormalize_family(
    fam: &MapFamily,
    f0: &HoloMap,
    atom: &EnergyAtom,
    scale: &RenormScale,
    regime: &Regime,
    cfg: &BubbleConfig,
) -> Result<RescaledFamily> {
    let lambda = regime.lambda().unwrap_or(1.0);
    let t_hat: Vec<f64> = scale.t.iter().map(|t| lambda * t).collect();
    let domain_radius: Vec<f64> = t_hat.iter().zip(&scale.eps).map(|(t, e)| t * e).collect();
    let n = domain_radius.len();
    if n >= 2 && domain_radius[n - 1] < 2.0 * domain_radius[0] {
        return Err(BubbleError::DegenerateRescaling(domain_radius));
    }
    let chart = atom.chart();
    let rows: Vec<Result<(HoloMap, EnergyPair, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let b = C::new(scale.centers[i][0], scale.centers[i][1]);
            let g = fam.members[i].recentered(&chart);
            let rescaled = HoloMap::from_sections(g.rescaled(b, t_hat[i]))?;
            let parent = quad::disc(&|w| g.chart_density(w), b, scale.eps[i], cfg.tol).value;
            let inner = quad::disc(&|y| rescaled.chart_density(y), C::new(0.0, 0.0), domain_radius[i], cfg.tol).value;
            let dd = DeltaDensity::new(&fam.members[i], f0, &chart);
            let hemi = quad::annulus(&|w| dd.eval(w), b, 1.0 / scale.t[i], scale.eps[i], cfg.tol).value;
            Ok((rescaled, EnergyPair { rescaled: inner, parent }, hemi))
        })
        .collect();
    let mut members = Vec::with_capacity(n);
    let mut energy_check = Vec::with_capacity(n);
    let mut hemisphere_mass = Vec::with_capacity(n);
    for r in rows {
        let (m, e, h) = r?;
        members.push(m);
        energy_check.push(e);
        hemisphere_mass.push(h);
    }
    let mut family = MapFamily::from_members(&fam.schedule, members)?;
    family.params = t_hat.iter().map(|t| 1.0 / t).collect();
    Ok(RescaledFamily {
        atom: atom.clone(),
        t_hat,
        centers: scale.centers.clone(),
        family,
        domain_radius,
        energy_check,
        hemisphere_mass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleLimit {
    pub limit_tuple: SectionTuple,
    pub limit: HoloMap,
    pub energy: f64,
    pub new_atoms: Vec<EnergyAtom>,
    pub tau: f64,
    pub extrapolation_error: f64,
}

/// Coefficient-wise limit of the rescaled family, new atoms inside the
/// bubble (the attachment point `y = ∞` excluded) and the tube-energy
/// estimate `τ = a_j − E(limit) − Σ new masses`.
pub fn bubble_limit(rf: &RescaledFamily, cfg: &BubbleConfig) -> Result<BubbleLimit> {
    let (limit_tuple, err) = rf.family.coefficient_limit()?;
    let scale = limit_tuple.coefficient_vector().iter().fold(0.0f64, |m, c| m.max(c.norm()));
    if !(err <= 1e-6 * scale.max(1.0)) {
        return Err(BubbleError::NonConvergence(format!("coefficient extrapolation error {err:.3e}")));
    }
    let (zeros, limit) = holo::strip_gcd(&limit_tuple, holo::limit_tolerance(err))?;
    let energy = holo::total_energy(&limit);
    let has_finite = zeros.points.iter().any(|(p, _)| p.value().is_some());
    let new_atoms: Vec<EnergyAtom> = if has_finite {
        detect_atoms(&rf.family, cfg)?
            .into_iter()
            .filter(|a| match a.point.value() {
                Some(y) => y.norm() < 0.5 * rf.domain_radius.last().copied().unwrap_or(f64::INFINITY),
                None => false,
            })
            .collect()
    } else {
        vec![]
    };
    let tau = rf.atom.mass - energy - new_atoms.iter().map(|a| a.mass).sum::<f64>();
    Ok(BubbleLimit { limit_tuple, limit, energy, new_atoms, tau, extrapolation_error: err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::holo::{projective_distance, ComponentSpec, FamilySpec, Poly};

    fn schedule() -> Vec<f64> {
        (0..8).map(|k| 16.0 * 2f64.powi(k)).collect()
    }

    fn single() -> MapFamily {
        let spec = FamilySpec {
            delta: "1/s".into(),
            base_point: [1.0, 0.0],
            components: vec![
                ComponentSpec { roots: vec!["delta".into()], fiber: "1-delta".into() },
                ComponentSpec { roots: vec!["-delta".into()], fiber: "1+delta".into() },
            ],
        };
        MapFamily::from_spec(&spec, &schedule()).unwrap()
    }

    #[test]
    fn single_bubble_pipeline() {
        let cfg = BubbleConfig::default();
        let fam = single();
        let atoms = detect_atoms(&fam, &cfg).unwrap();
        assert_eq!(atoms.len(), 1, "{atoms:?}");
        let a = &atoms[0];
        assert!(a.point.value().unwrap().norm() < 1e-12);
        assert!((a.mass - 1.0).abs() < 1e-3, "{}", a.mass);
        let (_, f0) = limit_map(&fam).unwrap();
        let sc = compute_scale(&fam, &f0, a, &cfg).unwrap();
        let c0 = cfg.c0;
        for (i, s) in sc.schedule.iter().enumerate() {
            // exact inversion of ε²/(ε²+δ²) − C₀ = 1/(1+δ²t²)
            let d = 1.0 / s;
            let e = sc.eps[i];
            let target = e * e / (e * e + d * d) - c0;
            let exact = (1.0 / target - 1.0).sqrt() / d;
            assert!((sc.t[i] / exact - 1.0).abs() < 1e-6, "s={s}: {} vs {exact}", sc.t[i]);
            assert!((sc.closed_form[i] / sc.t[i] - 1.0).abs() < 0.05);
            assert_eq!(sc.crossings[i], 1);
        }
        let regime = classify_regime(&sc.t, &sc.schedule).unwrap();
        let lambda = regime.lambda().unwrap();
        assert!((lambda - 3f64.sqrt()).abs() < 1e-6, "{regime:?}");
        let rf = renormalize_family(&fam, &f0, a, &sc, &regime, &cfg).unwrap();
        for (e, h) in rf.energy_check.iter().zip(&rf.hemisphere_mass) {
            assert!((e.rescaled - e.parent).abs() < 1e-6 * e.parent);
            assert!((h - c0).abs() < 1e-6, "{h}");
        }
        let bl = bubble_limit(&rf, &cfg).unwrap();
        let target = [C::new(-1.0, 0.0), C::new(1.0, 0.0), C::new(1.0, 0.0), C::new(1.0, 0.0)];
        assert!(projective_distance(&bl.limit.coefficient_vector(), &target) < 1e-6);
        assert!(bl.new_atoms.is_empty());
        assert!(bl.tau.abs() < 1e-2);
    }

    #[test]
    fn two_peak_atoms() {
        let spec = FamilySpec {
            delta: "1/s".into(),
            base_point: [2.0, 0.0],
            components: vec![
                ComponentSpec { roots: vec!["1".into(), "-1".into()], fiber: "3".into() },
                ComponentSpec { roots: vec!["inf".into(), "inf".into()], fiber: "delta".into() },
            ],
        };
        let fam = MapFamily::from_spec(&spec, &schedule()).unwrap();
        let atoms = detect_atoms(&fam, &BubbleConfig::default()).unwrap();
        assert_eq!(atoms.len(), 2);
        assert!((atoms[0].point.value().unwrap() + 1.0).norm() < 1e-12);
        assert!((atoms[1].point.value().unwrap() - 1.0).norm() < 1e-12);
        for a in &atoms {
            assert!((a.mass - 1.0).abs() < 1e-3, "{}", a.mass);
        }
    }

    #[test]
    fn nondegenerate_family_has_no_atoms() {
        let f = HoloMap::new(vec![Poly::from_real(&[0.3, 1.0, 0.2]), Poly::from_real(&[1.0, -0.5])], 2).unwrap();
        let fam = MapFamily::constant(&schedule(), f).unwrap();
        assert!(detect_atoms(&fam, &BubbleConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn hemisphere_constant_bounds() {
        let fam = single();
        let cfg = BubbleConfig { c0: 0.5, ..BubbleConfig::default() };
        let atoms = detect_atoms(&fam, &BubbleConfig::default()).unwrap();
        let (_, f0) = limit_map(&fam).unwrap();
        assert!(matches!(compute_scale(&fam, &f0, &atoms[0], &cfg), Err(BubbleError::HemisphereConstant(_))));
        // the raw profile inversion with C₀ = 1/2 on the full bubble gives t = 1/δ
        let delta = 1e-3;
        let t = invert_profile(&|t: f64| 1.0 / (1.0 + delta * delta * t * t), 0.5, 1.0, 1e12).unwrap();
        assert!((t * delta - 1.0).abs() < 1e-10);
    }

    #[test]
    fn regime_examples() {
        let s = schedule();
        let log_t: Vec<f64> = s.iter().map(|s| s.ln()).collect();
        assert_eq!(classify_regime(&log_t, &s).unwrap().label(), "slow");
        let sq: Vec<f64> = s.iter().map(|s| s * s).collect();
        match classify_regime(&sq, &s).unwrap() {
            Regime::Fast { excluded_by_theory, .. } => assert!(excluded_by_theory),
            other => panic!("{other:?}"),
        }
        let lin: Vec<f64> = s.iter().map(|s| s / 3f64.sqrt()).collect();
        let r = classify_regime(&lin, &s).unwrap();
        assert!((r.lambda().unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert!(matches!(classify_regime(&lin[..5], &s[..5]), Err(BubbleError::ShortSchedule(5))));
    }
}
