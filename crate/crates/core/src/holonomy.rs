//! U(1) holonomy on shrinking loops, condition H / H_β classification,
//! the decaying gauge and decay-rate fits.
//!
//! Connections are sampled on a polar grid `(ρ_i, θ_j)`, `θ_j = 2πj/n`, of a
//! punctured disc. A unitary connection has imaginary components; the
//! decaying gauge produces complex ones, hence the `Complex64` storage.
//! Parallel transport is `v′ + A_θ v = 0`, so `g(R) = exp(−∮A_θ dθ)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::holo::{common_zeros, ChartPoint, SectionTuple};
use crate::quad;
use crate::sphere::{CenteredChart, ConicWeight, ScalarField, SpherePoint};

type C = Complex64;

#[derive(Debug, Error)]
pub enum HolonomyError {
    #[error("common zero at radius {0:.3e} inside the sampled annulus")]
    InvalidRegion(f64),
    #[error("radius {0} outside the sampled annulus [{1}, {2}]")]
    OutOfRange(f64, f64, f64),
    #[error("angular resolution too coarse: trapezoid halves differ by {0:.3e}")]
    Accuracy(f64),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("decay data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, HolonomyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSample {
    /// Increasing radii.
    pub radii: Vec<f64>,
    pub n_theta: usize,
    /// Row-major `[radius][angle]`.
    pub a_rho: Vec<C>,
    pub a_theta: Vec<C>,
}

impl ConnectionSample {
    pub fn theta(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / self.n_theta as f64
    }

    pub fn from_fn(radii: &[f64], n_theta: usize, a: impl Fn(f64, f64) -> (C, C) + Sync) -> Self {
        let mut radii = radii.to_vec();
        radii.sort_by(f64::total_cmp);
        let rows: Vec<(Vec<C>, Vec<C>)> = radii
            .par_iter()
            .map(|&r| {
                (0..n_theta)
                    .map(|j| a(r, 2.0 * PI * j as f64 / n_theta as f64))
                    .unzip()
            })
            .collect();
        let (mut a_rho, mut a_theta) = (Vec::new(), Vec::new());
        for (ar, at) in rows {
            a_rho.extend(ar);
            a_theta.extend(at);
        }
        ConnectionSample { radii, n_theta, a_rho, a_theta }
    }

    pub fn theta_row(&self, i: usize) -> &[C] {
        &self.a_theta[i * self.n_theta..(i + 1) * self.n_theta]
    }

    /// `sup_θ |A_θ(ρ_i, ·)|`.
    pub fn angular_sup(&self) -> Vec<f64> {
        (0..self.radii.len())
            .map(|i| self.theta_row(i).iter().fold(0.0f64, |m, a| m.max(a.norm())))
            .collect()
    }

    /// Apply a single-valued gauge `e^{iχ}`: `A ↦ A + i dχ`, with `dχ`
    /// given as `(∂_ρχ, ∂_θχ)`.
    pub fn gauge_transform(&self, dchi: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut out = self.clone();
        for (i, &r) in self.radii.iter().enumerate() {
            for j in 0..self.n_theta {
                let (cr, ct) = dchi(r, self.theta(j));
                out.a_rho[i * self.n_theta + j] += C::new(0.0, cr);
                out.a_theta[i * self.n_theta + j] += C::new(0.0, ct);
            }
        }
        out
    }
}

/// Chern connection of `H*(ξ) = |ξ|^{2m}/Σ|f_i(ξ)|²` in the chart centred
/// at `point`, written in the unitary frame: `A = ½(∂ − ∂̄) log H*`.
pub fn connection_from_map(
    f: &SectionTuple,
    point: ChartPoint,
    frame_exponent: i32,
    radii: &[f64],
    n_theta: usize,
) -> Result<ConnectionSample> {
    let chart = CenteredChart::at(&point.to_sphere());
    let g = f.recentered(&chart);
    let (lo, hi) = radii.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    for (p, _) in &common_zeros(&g).points {
        if let Some(z) = p.value() {
            let r = z.norm();
            if r >= lo * (1.0 - 1e-9) && r <= hi * (1.0 + 1e-9) {
                return Err(HolonomyError::InvalidRegion(r));
            }
        }
    }
    let derivs: Vec<_> = g.components.iter().map(|p| p.derivative()).collect();
    let m = frame_exponent as f64;
    Ok(ConnectionSample::from_fn(radii, n_theta, |r, th| {
        let z = C::from_polar(r, th);
        let (mut num, mut den) = (C::new(0.0, 0.0), 0.0);
        for (p, dp) in g.components.iter().zip(&derivs) {
            let v = p.eval(z);
            num += dp.eval(z) * v.conj();
            den += v.norm_sqr();
        }
        // z∂_z log H* = m − z·Σf′f̄/Σ|f|²
        let q = C::new(m, 0.0) - z * num / den;
        (C::new(0.0, q.im / r), C::new(0.0, q.re))
    }))
}

/// Same construction for a sampled log-weight `w` on the sphere:
/// `H* = |ξ|^{2m}·e^{w}`, derivatives by central differences of the
/// spectral interpolant.
pub fn connection_from_field(
    w: &ScalarField,
    center: &SpherePoint,
    frame_exponent: i32,
    radii: &[f64],
    n_theta: usize,
) -> ConnectionSample {
    let spec = w.spectrum();
    let chart = CenteredChart::at(center);
    let eval = |r: f64, th: f64| spec.eval(&chart.inverse_point(C::from_polar(r, th)));
    let m = frame_exponent as f64;
    ConnectionSample::from_fn(radii, n_theta, |r, th| {
        let (hr, ht) = (1e-5 * r, 1e-5);
        let dr = (eval(r + hr, th) - eval(r - hr, th)) / (2.0 * hr);
        let dt = (eval(r, th + ht) - eval(r, th - ht)) / (2.0 * ht);
        (C::new(0.0, -0.5 * dt / r), C::new(0.0, m + 0.5 * r * dr))
    })
}

fn loop_integral_row(row: &[C]) -> Result<C> {
    let n = row.len();
    let full: C = row.iter().sum::<C>() * (2.0 * PI / n as f64);
    if n >= 8 && n.is_multiple_of(2) {
        let half: C = row.iter().step_by(2).sum::<C>() * (4.0 * PI / n as f64);
        let diff = (full - half).norm();
        if diff > 1e-10 * (1.0 + full.norm()) {
            return Err(HolonomyError::Accuracy(diff));
        }
    }
    Ok(full)
}

/// `∮_{|ξ|=R} A_θ dθ`, linearly interpolated in `log ρ` between samples.
pub fn loop_integral(c: &ConnectionSample, r: f64) -> Result<C> {
    let (lo, hi) = (c.radii[0], *c.radii.last().expect("radii"));
    if !(r >= lo * (1.0 - 1e-12) && r <= hi * (1.0 + 1e-12)) {
        return Err(HolonomyError::OutOfRange(r, lo, hi));
    }
    let k = c.radii.partition_point(|&x| x < r);
    if k < c.radii.len() && (c.radii[k] - r).abs() <= 1e-12 * r {
        return loop_integral_row(c.theta_row(k));
    }
    let k = k.clamp(1, c.radii.len() - 1);
    let (a, b) = (c.radii[k - 1].ln(), c.radii[k].ln());
    let s = (r.ln() - a) / (b - a);
    Ok(loop_integral_row(c.theta_row(k - 1))? * (1.0 - s) + loop_integral_row(c.theta_row(k))? * s)
}

pub fn holonomy(c: &ConnectionSample, r: f64) -> Result<C> {
    Ok((-loop_integral(c, r)?).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolonomyProfile {
    /// Decreasing radii.
    pub radii: Vec<f64>,
    pub g: Vec<C>,
    pub loop_integrals: Vec<C>,
}

pub fn holonomy_profile(c: &ConnectionSample, radii: &[f64]) -> Result<HolonomyProfile> {
    let mut radii = radii.to_vec();
    radii.sort_by(|a, b| b.total_cmp(a));
    let ints: Vec<Result<C>> = radii.par_iter().map(|&r| loop_integral(c, r)).collect();
    let loop_integrals = ints.into_iter().collect::<Result<Vec<_>>>()?;
    let g = loop_integrals.iter().map(|i| (-i).exp()).collect();
    Ok(HolonomyProfile { radii, g, loop_integrals })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    H,
    HBeta { beta: f64 },
    Unclassified { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HBetaCheck {
    pub beta: f64,
    /// `sup_θ|ρ^{2β−2}(A_θ − iβ₀)|` per radius (increasing radii).
    pub weighted_sup: Vec<f64>,
    pub slope: f64,
    pub satisfied: bool,
}

/// `ρ^{2β−2}·(A_θ − i·offset) → 0` as `ρ → 0` on the sampled radii.
pub fn hbeta_criterion(c: &ConnectionSample, beta: f64, offset: f64) -> HBetaCheck {
    let weighted_sup: Vec<f64> = c
        .radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let s = c.theta_row(i).iter().fold(0.0f64, |m, a| m.max((*a - C::new(0.0, offset)).norm()));
            r.powf(2.0 * beta - 2.0) * s
        })
        .collect();
    let negligible = weighted_sup.iter().all(|v| *v <= 1e-10);
    let pos: Vec<(f64, f64)> = c
        .radii
        .iter()
        .zip(&weighted_sup)
        .filter(|(_, v)| **v > 0.0)
        .map(|(r, v)| (r.ln(), v.ln()))
        .collect();
    let slope = if pos.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = pos.into_iter().unzip();
        quad::linear_fit(&x, &y).0
    } else {
        f64::INFINITY
    };
    HBetaCheck { beta, weighted_sup, slope, satisfied: negligible || slope > 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub classification: Condition,
    pub beta_hat: Option<f64>,
    /// `g(R→0)` by extrapolation of the loop integrals.
    pub g_limit: C,
    /// `β̂` at the three smallest radii.
    pub beta_small_radii: Vec<f64>,
    /// Fitted exponent of `sup_θ|A_θ − iβ̂|` against `ρ`.
    pub decay_exponent: f64,
    pub criterion: Option<HBetaCheck>,
    /// Hypotheses of the smooth (conic) extension numerically satisfied.
    pub extension_eligible: bool,
}

fn beta_of(g: C) -> f64 {
    (-g.arg() / (2.0 * PI)).rem_euclid(1.0)
}

fn near_integer(x: f64, tol: f64) -> bool {
    (x - x.round()).abs() <= tol
}

pub fn classify_condition(p: &HolonomyProfile, c: &ConnectionSample) -> ConditionReport {
    let n = p.radii.len();
    let span = if n > 0 { p.radii[0] / p.radii[n - 1] } else { 1.0 };
    let mut report = ConditionReport {
        classification: Condition::Unclassified { reason: String::new() },
        beta_hat: None,
        g_limit: C::new(f64::NAN, f64::NAN),
        beta_small_radii: vec![],
        decay_exponent: f64::NAN,
        criterion: None,
        extension_eligible: false,
    };
    if n < 5 || span < 10.0 * (1.0 - 1e-9) {
        report.classification = Condition::Unclassified { reason: format!("need ≥5 radii over a decade, got {n} spanning {span:.2}") };
        return report;
    }
    let k = n.min(4);
    let (hs, ys) = (&p.radii[n - k..], &p.loop_integrals[n - k..]);
    let (i0, _) = quad::extrapolate_to_zero(hs, ys);
    let g0 = (-i0).exp();
    report.g_limit = g0;
    report.beta_small_radii = p.g[n - 3..].iter().map(|g| beta_of(*g)).collect();
    let beta = beta_of(g0);
    let offset = i0.im / (2.0 * PI);
    let remainder: Vec<f64> = c
        .radii
        .iter()
        .enumerate()
        .map(|(i, _)| c.theta_row(i).iter().fold(0.0f64, |m, a| m.max((*a - C::new(0.0, offset)).norm())))
        .collect();
    let pts: Vec<(f64, f64)> = c.radii.iter().zip(&remainder).filter(|(_, v)| **v > 1e-14).map(|(r, v)| (r.ln(), v.ln())).collect();
    report.decay_exponent = if pts.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        quad::linear_fit(&x, &y).0
    } else {
        f64::INFINITY
    };
    if (g0 - 1.0).norm() <= 1e-3 || near_integer(beta, 1e-3) {
        report.classification = Condition::H;
        report.beta_hat = Some(0.0);
        report.extension_eligible = report.decay_exponent > 0.0;
        return report;
    }
    let bs = &report.beta_small_radii;
    let spread = bs.iter().fold(0.0f64, |m, b| m.max((b - bs[bs.len() - 1]).abs()));
    if spread > 0.05 {
        report.classification = Condition::Unclassified { reason: format!("β̂ unstable over the smallest radii (spread {spread:.3})") };
        return report;
    }
    let check = hbeta_criterion(c, beta, offset);
    report.beta_hat = Some(beta);
    if check.satisfied {
        report.classification = Condition::HBeta { beta };
        report.extension_eligible = true;
    } else {
        report.classification = Condition::Unclassified { reason: "weighted remainder does not decay".into() };
    }
    report.criterion = Some(check);
    report
}

/// Holonomy diagnostic of a map at a point with the frame `ξ^m`, `m` the
/// vanishing order of the tuple there, on radii `1e−3 … 1e−1`.
pub fn point_condition(f: &SectionTuple, point: ChartPoint) -> Result<ConditionReport> {
    let g = f.recentered(&CenteredChart::at(&point.to_sphere()));
    let m = g.components.iter().map(|p| p.coeffs.iter().position(|c| c.norm() > 0.0).unwrap_or(usize::MAX)).min().unwrap_or(0);
    let radii: Vec<f64> = (0..7).map(|k| 1e-3 * 10f64.powf(k as f64 / 3.0)).collect();
    let c = connection_from_map(f, point, m.min(i32::MAX as usize) as i32, &radii, 64)?;
    let p = holonomy_profile(&c, &radii)?;
    Ok(classify_condition(&p, &c))
}

/// Replace the connection on the end `ρ → ∞` of the affine chart by the
/// gauge-equivalent decaying form `A^γ = i|z|^{−α}dz`, i.e.
/// `A^γ_ρ = i e^{iθ} ρ^{−α}`, `A^γ_θ = −e^{iθ} ρ^{1−α}`.
pub fn decaying_gauge(c: &ConnectionSample, alpha: f64, beta: f64) -> Result<ConnectionSample> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(HolonomyError::Precondition(format!("β = {beta} must lie in (0,1)")));
    }
    if !(alpha > 3.0 - 2.0 * beta) {
        return Err(HolonomyError::Precondition(format!("α = {alpha} must exceed 3 − 2β = {}", 3.0 - 2.0 * beta)));
    }
    Ok(ConnectionSample::from_fn(&c.radii, c.n_theta, |r, th| {
        let e = C::from_polar(1.0, th);
        (C::new(0.0, 1.0) * e * r.powf(-alpha), -e * r.powf(1.0 - alpha))
    }))
}

/// Pull a connection on the end `ρ → ∞` back through `ξ = 1/z` to a
/// punctured disc around `ξ = 0`.
pub fn pullback_inversion(c: &ConnectionSample) -> ConnectionSample {
    let n = c.n_theta;
    let m = c.radii.len();
    let radii: Vec<f64> = c.radii.iter().rev().map(|r| 1.0 / r).collect();
    let mut a_rho = Vec::with_capacity(m * n);
    let mut a_theta = Vec::with_capacity(m * n);
    for (k, rx) in radii.iter().enumerate() {
        let i = m - 1 - k;
        for j in 0..n {
            let src = i * n + (n - j) % n;
            a_rho.push(-c.a_rho[src] / (rx * rx));
            a_theta.push(-c.a_theta[src]);
        }
    }
    ConnectionSample { radii, n_theta: n, a_rho, a_theta }
}

/// Radial exponent of `sup_θ|A_θ|`.
pub fn angular_exponent(c: &ConnectionSample) -> f64 {
    let x: Vec<f64> = c.radii.iter().map(|r| r.ln()).collect();
    let y: Vec<f64> = c.angular_sup().iter().map(|v| v.ln()).collect();
    quad::linear_fit(&x, &y).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    /// `slope ≤ −3.5`: decay at least like `ρ^{−4+ε}` with margin.
    pub bound_satisfied: bool,
}

/// Log–log slope of an energy density tail sampled at `ρ ≥ 1`.
pub fn decay_fit(samples: &[(f64, f64)]) -> Result<DecayFit> {
    if samples.iter().any(|(r, e)| !(*e > 0.0) || !(*r >= 1.0)) {
        return Err(HolonomyError::Data("samples need ρ ≥ 1 and positive density".into()));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, 0.0f64), |(a, b), (r, _)| (a.min(*r), b.max(*r)));
    if hi < 10.0 * lo * (1.0 - 1e-12) {
        return Err(HolonomyError::Data(format!("radii span {lo}..{hi}, less than a decade")));
    }
    let x: Vec<f64> = samples.iter().map(|(r, _)| r.ln()).collect();
    let y: Vec<f64> = samples.iter().map(|(_, e)| e.ln()).collect();
    let (slope, intercept) = quad::linear_fit(&x, &y);
    Ok(DecayFit { slope, intercept, bound_satisfied: slope <= -3.5 })
}

/// Conic-weighted integral of a radial tail `ρ^{−ε}` near the cone point.
pub fn conic_tail_integral(beta: f64, eps: f64) -> Result<crate::sphere::ConicIntegral> {
    let w = ConicWeight::new(beta, SpherePoint::from_chart(C::new(0.0, 0.0)))
        .map_err(|e| HolonomyError::Precondition(e.to_string()))?;
    Ok(w.integrate_fn(&|xi: C| xi.norm().powf(-eps), &[]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::holo::Poly;

    fn radii() -> Vec<f64> {
        (0..9).map(|k| 1e-3 * 10f64.powf(k as f64 * 0.25)).collect()
    }

    #[test]
    fn conic_model_and_constant_maps() {
        let flat = ConnectionSample::from_fn(&radii(), 32, |_, _| (C::new(0.0, 0.0), C::new(0.0, 0.0)));
        for r in radii() {
            assert_eq!(holonomy(&flat, r).unwrap(), C::new(1.0, 0.0));
        }
        let conic = ConnectionSample::from_fn(&radii(), 32, |_, _| (C::new(0.0, 0.0), C::new(0.0, 0.5)));
        let gs: Vec<C> = radii().iter().map(|r| holonomy(&conic, *r).unwrap()).collect();
        for g in &gs {
            assert!((g - C::new(-1.0, 0.0)).norm() < 1e-10);
            assert!((g.norm() - 1.0).abs() < 1e-10);
        }
        let p = holonomy_profile(&conic, &radii()).unwrap();
        let rep = classify_condition(&p, &conic);
        match rep.classification {
            Condition::HBeta { beta } => assert!((beta - 0.5).abs() < 1e-3),
            other => panic!("{other:?}"),
        }
        let f = SectionTuple::new(vec![Poly::constant(C::new(2.0, 1.0)), Poly::constant(C::new(0.5, 0.0))], 0).unwrap();
        let c = connection_from_map(&f, ChartPoint::finite(C::new(0.3, 0.0)), 0, &radii(), 16).unwrap();
        assert!(c.a_theta.iter().chain(&c.a_rho).all(|a| a.norm() == 0.0));
    }

    #[test]
    fn degree_one_frame_at_infinity() {
        // [z : 1] around ∞ with the frame ξ: A_θ = i/(1+ρ²), A_ρ = 0
        let f = SectionTuple::new(vec![Poly::monomial(C::new(1.0, 0.0), 1), Poly::constant(C::new(1.0, 0.0))], 1).unwrap();
        let c = connection_from_map(&f, ChartPoint::Infinity, 1, &radii(), 32).unwrap();
        for (i, r) in c.radii.iter().enumerate() {
            for a in c.theta_row(i) {
                assert!((a - C::new(0.0, 1.0 / (1.0 + r * r))).norm() < 1e-13);
            }
        }
        assert!(c.a_rho.iter().all(|a| a.norm() < 1e-13));
        let rep = classify_condition(&holonomy_profile(&c, &radii()).unwrap(), &c);
        assert_eq!(rep.classification, Condition::H);
        assert!(point_condition(&f, ChartPoint::Infinity).unwrap().classification == Condition::H);
    }

    #[test]
    fn common_zero_in_annulus_is_rejected() {
        let f = SectionTuple::new(vec![Poly::from_roots(&[C::new(0.01, 0.0)], C::new(1.0, 0.0)), Poly::from_roots(&[C::new(0.01, 0.0)], C::new(1.0, 0.0))], 1).unwrap();
        let err = connection_from_map(&f, ChartPoint::finite(C::new(0.0, 0.0)), 0, &radii(), 16).unwrap_err();
        assert!(matches!(err, HolonomyError::InvalidRegion(_)));
    }

    #[test]
    fn perturbed_conic_and_smooth_connections() {
        let beta = 0.3;
        let c = ConnectionSample::from_fn(&radii(), 32, |r, _| (C::new(0.0, 0.0), C::new(0.0, beta * (1.0 + r))));
        for r in radii() {
            // ∮ = 2πiβ(1+R)
            let exact = C::new(0.0, -2.0 * PI * beta * (1.0 + r)).exp();
            assert!((holonomy(&c, r).unwrap() - exact).norm() < 1e-12);
        }
        let rep = classify_condition(&holonomy_profile(&c, &radii()).unwrap(), &c);
        assert!((rep.beta_hat.unwrap() - beta).abs() < 1e-6);
        // the remainder iβρ weighted by ρ^{2β−2} grows when β < 1/2
        assert!(matches!(rep.classification, Condition::Unclassified { .. }), "{rep:?}");
        let c = ConnectionSample::from_fn(&radii(), 32, |r, _| (C::new(0.0, 0.0), C::new(0.0, 0.7 * (1.0 + r))));
        let rep = classify_condition(&holonomy_profile(&c, &radii()).unwrap(), &c);
        assert!(matches!(rep.classification, Condition::HBeta { beta: b } if (b - 0.7).abs() < 1e-6), "{rep:?}");

        let smooth = ConnectionSample::from_fn(&radii(), 32, |r, _| (C::new(0.0, 0.0), C::new(0.0, r)));
        let rep = classify_condition(&holonomy_profile(&smooth, &radii()).unwrap(), &smooth);
        assert_eq!(rep.classification, Condition::H);
    }

    #[test]
    fn unstable_beta_is_unclassified() {
        // A_θ = i(0.3 + 0.3·log₁₀(ρ/ρ_min)/…) drifts across the smallest radii
        let c = ConnectionSample::from_fn(&radii(), 32, |r, _| (C::new(0.0, 0.0), C::new(0.0, 0.3 + 0.2 * r.log10())));
        let rep = classify_condition(&holonomy_profile(&c, &radii()).unwrap(), &c);
        assert!(matches!(rep.classification, Condition::Unclassified { .. }), "{rep:?}");
    }

    #[test]
    fn gauge_invariance() {
        let c = ConnectionSample::from_fn(&radii(), 64, |r, th| (C::new(0.0, r * th.cos()), C::new(0.0, 0.2 + r * r * th.sin())));
        // χ = ρ²·cos 2θ + ρ sin θ
        let d = c.gauge_transform(|r, th| (2.0 * r * (2.0 * th).cos() + th.sin(), -2.0 * r * r * (2.0 * th).sin() + r * th.cos()));
        for r in radii() {
            assert!((holonomy(&c, r).unwrap() - holonomy(&d, r).unwrap()).norm() < 1e-9);
        }
    }

    #[test]
    fn coarse_angles_are_rejected() {
        let c = ConnectionSample::from_fn(&radii(), 8, |_, th| (C::new(0.0, 0.0), C::new(0.0, (4.0 * th).cos())));
        assert!(matches!(holonomy(&c, radii()[0]), Err(HolonomyError::Accuracy(_))));
    }

    #[test]
    fn decaying_gauge_exponents() {
        let far: Vec<f64> = (0..9).map(|k| 10f64.powf(1.0 + k as f64 * 0.25)).collect();
        let zero = ConnectionSample::from_fn(&far, 32, |_, _| (C::new(0.0, 0.0), C::new(0.0, 0.0)));
        let g = decaying_gauge(&zero, 2.5, 0.4).unwrap();
        for (i, r) in g.radii.iter().enumerate() {
            for j in 0..g.n_theta {
                // i|z|^{−α}dz in polar components
                let e = C::from_polar(1.0, g.theta(j));
                let k = i * g.n_theta + j;
                assert!((g.a_rho[k] - C::new(0.0, 1.0) * e * r.powf(-2.5)).norm() < 1e-15);
                assert!((g.a_theta[k] + e * r.powf(-1.5)).norm() < 1e-15);
            }
        }
        for (alpha, beta) in [(2.3, 0.4), (2.5, 0.4), (2.9, 0.1)] {
            let pulled = pullback_inversion(&decaying_gauge(&zero, alpha, beta).unwrap());
            assert!((angular_exponent(&pulled) - (alpha - 1.0)).abs() < 0.05);
            assert!(hbeta_criterion(&pulled, beta, 0.0).satisfied);
        }
        assert!(matches!(decaying_gauge(&zero, 1.5, 0.4), Err(HolonomyError::Precondition(_))));
    }

    #[test]
    fn decay_fits() {
        let rs: Vec<f64> = (0..21).map(|k| 10f64.powf(1.0 + k as f64 * 0.1)).collect();
        // [y−1 : y+1] chart density 1/(π(1+ρ²)²)
        let tail: Vec<(f64, f64)> = rs.iter().map(|r| (*r, 1.0 / (PI * (1.0 + r * r).powi(2)))).collect();
        let fit = decay_fit(&tail).unwrap();
        assert!((fit.slope + 4.0).abs() < 0.1 && fit.bound_satisfied);
        let fit = decay_fit(&rs.iter().map(|r| (*r, r.powf(-3.0))).collect::<Vec<_>>()).unwrap();
        assert!((fit.slope + 3.0).abs() < 1e-12 && !fit.bound_satisfied);
        let fit = decay_fit(&rs.iter().map(|r| (*r, r.powf(-4.2))).collect::<Vec<_>>()).unwrap();
        assert!((fit.slope + 4.2).abs() < 1e-12 && fit.bound_satisfied);
        assert!(decay_fit(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
    }

    #[test]
    fn conic_tail_integrability() {
        assert!(conic_tail_integral(0.05, 0.2).unwrap().divergent);
        let ok = conic_tail_integral(0.3, 0.2).unwrap();
        assert!(!ok.divergent && ok.value.is_finite());
    }

    #[test]
    fn field_connection_matches_map_connection() {
        let grid = crate::sphere::build_grid(32).unwrap();
        // w = |z|²/(1+|z|²) around z = 0 with m = 0: A_θ = iρ²/(1+ρ²)²
        let w = ScalarField::from_chart_fn(&grid, |z| z.norm_sqr() / (1.0 + z.norm_sqr()));
        let rs: Vec<f64> = (0..5).map(|k| 0.05 * 2f64.powi(k)).collect();
        let c = connection_from_field(&w, &SpherePoint::from_chart(C::new(0.0, 0.0)), 0, &rs, 16);
        for (i, r) in c.radii.iter().enumerate() {
            for a in c.theta_row(i) {
                assert!((a - C::new(0.0, r * r / (1.0 + r * r).powi(2))).norm() < 1e-8, "{a} at {r}");
            }
        }
    }
}
