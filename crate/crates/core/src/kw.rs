//! Background data `(ψ, h)` of a holomorphic map and the scalar
//! Kazdan–Warner equation
//!
//! ```text
//!     Δφ + (s²/2)·h·e^φ − c(s) = 0,     c(s) = 2c₁ − s²/2,  c₁ = 2πr,
//! ```
//!
//! where `Δ = −L` is the analyst's (non-positive) Laplacian and `L` the
//! positive Laplace–Beltrami operator of the unit-area sphere.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::holo::{self, HoloError, HoloMap, SectionTuple};
use crate::quad;
use crate::sphere::{self, GeometryError, GridRef, ScalarField};

#[derive(Debug, Error)]
pub enum KwError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("background curvature integrates to {found:.9} but c₁ = {expected:.9}; refine the grid")]
    Degree { found: f64, expected: f64 },
    #[error("Newton iteration did not converge after {iterations} steps (residuals {history:?})")]
    NonConvergence { iterations: usize, history: Vec<f64> },
    #[error("s→∞ limit undefined: h vanishes somewhere (max h = {max_h:.3e})")]
    LimitUndefined { max_h: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Holo(#[from] HoloError),
}

pub type Result<T> = std::result::Result<T, KwError>;

/// Floor used when taking `−log(−h)` as an initial guess.
pub const H_FLOOR: f64 = 1e-8;

/// Background hermitian data for a section tuple of degree `r`.
///
/// With `f = g·f′` (`g` the common-zero polynomial of degree `l`, including
/// zeros at ∞), the metric is `H = M/(|f′|²(1+|z|²)^l)`, so that
/// `Σ|φ_i|²_H = M·|g|²/(1+|z|²)^l` vanishes exactly at the common zeros and
/// `iΛF_H = ½·L log H = 2π(e(f′) + l)`. The constant `M` is the geometric
/// mean of `|f′|²/(1+|z|²)^{r−l}`, which makes `H` trivial for constant maps.
#[derive(Debug, Clone)]
pub struct Background {
    pub degree: usize,
    pub c1: f64,
    pub zero_degree: usize,
    /// `log M` in the normalization of `H`.
    pub log_scale: f64,
    pub source: Option<SectionTuple>,
    pub reduced: Option<HoloMap>,
    /// Band-limited `iΛF_H = c₁ − Lψ`, so that the discrete vortex and KW
    /// residuals agree identically.
    pub curvature: ScalarField,
    /// `sup|iΛF_H − (c₁ − Lψ)|` against the analytic curvature: the
    /// spectral truncation error of the grid.
    pub curvature_truncation: f64,
    pub section_norm: ScalarField,
    pub psi: ScalarField,
    pub h: ScalarField,
}

/// Split a tuple into its common-zero factor degree and the reduced map.
pub fn reduce(f: &SectionTuple) -> Result<(usize, HoloMap)> {
    let (zeros, map) = holo::strip_gcd(f, holo::GCD_TOL)?;
    Ok((zeros.total(), map))
}

pub fn build_background(f: &SectionTuple, grid: &GridRef) -> Result<Background> {
    let r = f.degree;
    let c1 = 2.0 * PI * r as f64;
    let (l, reduced) = reduce(f)?;
    let n = grid.len();
    let log_m: f64 = (0..n)
        .into_par_iter()
        .map(|i| reduced.log_norm(Some(grid.chart_coord(i))))
        .collect::<Vec<f64>>()
        .iter()
        .zip(grid.weights())
        .map(|(v, w)| v * w)
        .sum();
    let (curv, norm): (Vec<f64>, Vec<f64>) = (0..n)
        .into_par_iter()
        .map(|i| {
            let z = Some(grid.chart_coord(i));
            let e = reduced.density_at(z);
            let sn = (f.log_norm(z) - reduced.log_norm(z) + log_m).exp();
            (2.0 * PI * (e + l as f64), sn)
        })
        .unzip();
    let analytic = ScalarField::new(grid, curv)?;
    let section_norm = ScalarField::new(grid, norm)?;
    let found = sphere::integrate(&analytic);
    if (found - c1).abs() > 1e-6 * (1.0 + c1) {
        return Err(KwError::Degree { found, expected: c1 });
    }
    // Lψ = c₁ − iΛF_H; the quadrature mean is removed after the check above
    let rhs = analytic.map(|v| found - v);
    let psi = sphere::solve_poisson(&rhs)?;
    let curvature = sphere::laplace_beltrami(&psi).map(|v| c1 - v);
    let curvature_truncation = analytic.zip_with(&curvature, |a, b| a - b)?.sup_norm();
    let h = psi.zip_with(&section_norm, |p, n| -(2.0 * p).exp() * n)?;
    Ok(Background {
        degree: r,
        c1,
        zero_degree: l,
        log_scale: log_m,
        source: Some(f.clone()),
        reduced: Some(reduced),
        curvature,
        curvature_truncation,
        section_norm,
        psi,
        h,
    })
}

impl Background {
    /// Synthetic data with constant `h ≡ h0 < 0` and flat background
    /// curvature `iΛF_H ≡ 2πr` (no underlying map).
    pub fn uniform(grid: &GridRef, degree: usize, h0: f64) -> Self {
        let c1 = 2.0 * PI * degree as f64;
        Background {
            degree,
            c1,
            zero_degree: 0,
            log_scale: 0.0,
            source: None,
            reduced: None,
            curvature: ScalarField::constant(grid, c1),
            curvature_truncation: 0.0,
            section_norm: ScalarField::constant(grid, -h0),
            psi: ScalarField::constant(grid, 0.0),
            h: ScalarField::constant(grid, h0),
        }
    }

    pub fn grid(&self) -> &GridRef {
        self.h.grid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KwOptions {
    /// Residual tolerance relative to `1 + |c(s)|`.
    pub tol: f64,
    pub max_iter: usize,
    /// Reuse the previous solution as the initial guess along a sweep
    /// (serializes the sweep).
    pub warm_start: bool,
}

impl Default for KwOptions {
    fn default() -> Self {
        KwOptions { tol: 1e-10, max_iter: 60, warm_start: false }
    }
}

#[derive(Debug, Clone)]
pub struct KwProblem {
    pub h: ScalarField,
    pub c1: f64,
    pub s: f64,
    pub options: KwOptions,
}

pub fn c_of_s(c1: f64, s: f64) -> f64 {
    2.0 * c1 - 0.5 * s * s
}

impl KwProblem {
    pub fn new(h: ScalarField, c1: f64, s: f64, options: KwOptions) -> Result<Self> {
        if let Some(v) = h.values().iter().find(|v| **v > 0.0) {
            return Err(KwError::Precondition(format!("h must be ≤ 0, found {v:.3e}")));
        }
        if h.max() == 0.0 && h.min() == 0.0 {
            return Err(KwError::Precondition("h vanishes identically".into()));
        }
        let r = c1 / (2.0 * PI);
        if !(s.is_finite() && s * s > 4.0 * PI * r && s > 0.0) {
            return Err(KwError::Precondition(format!("s = {s} is outside the stable range s² > 4πr")));
        }
        // integrating the equation gives (s²/2)∫h e^φ = c(s), impossible for h ≤ 0 unless c(s) < 0
        if c_of_s(c1, s) >= 0.0 {
            return Err(KwError::Precondition(format!(
                "c(s) = {:.6} ≥ 0 admits no solution with h ≤ 0; need s² > 8πr = {:.6}",
                c_of_s(c1, s),
                8.0 * PI * r
            )));
        }
        Ok(KwProblem { h, c1, s, options })
    }

    pub fn c(&self) -> f64 {
        c_of_s(self.c1, self.s)
    }

    pub fn grid(&self) -> &GridRef {
        self.h.grid()
    }

    pub fn tolerance(&self) -> f64 {
        self.options.tol * (1.0 + self.c().abs())
    }

    /// `K(φ) = −Lφ + (s²/2)·h·e^φ − c(s)`.
    pub fn residual(&self, phi: &ScalarField) -> ScalarField {
        let a = 0.5 * self.s * self.s;
        let c = self.c();
        let lap = sphere::laplace_beltrami(phi);
        let vals: Vec<f64> = lap
            .values()
            .iter()
            .zip(self.h.values())
            .zip(phi.values())
            .map(|((l, h), p)| -l + a * h * p.exp() - c)
            .collect();
        ScalarField::new(self.grid(), vals).expect("finite residual")
    }

    /// `φ⁰ = −log(max(−h, floor))`.
    pub fn default_guess(&self) -> ScalarField {
        self.h.map(|h| -(-h).max(H_FLOOR).ln())
    }
}

#[derive(Debug, Clone)]
pub struct KwSolution {
    pub s: f64,
    pub c: f64,
    pub phi: ScalarField,
    pub residual_sup: f64,
    pub iterations: usize,
    pub damping: Vec<f64>,
    pub residual_history: Vec<f64>,
}

fn dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// Solve `(L + D)v = rhs` by preconditioned CG in the quadrature inner product.
fn pcg(grid: &GridRef, d: &[f64], rhs: &[f64], rel_tol: f64) -> Vec<f64> {
    let w = grid.weights();
    let n = rhs.len();
    let d_mean = d.iter().zip(w).map(|(d, w)| d * w).sum::<f64>().max(1e-300);
    let apply = |v: &[f64]| -> Vec<f64> {
        let f = ScalarField::new(grid, v.to_vec()).expect("finite");
        let lap = sphere::laplace_beltrami(&f);
        lap.values().iter().zip(d).zip(v).map(|((l, d), v)| l + d * v).collect()
    };
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut spec = grid.analyze(r);
        let band = grid.synthesize(&spec);
        for l in 0..=spec.l_max {
            let ev = 4.0 * PI * (l * (l + 1)) as f64 + d_mean;
            for m in 0..=l {
                spec.coeffs[sphere::lm_index(l, m)] /= ev;
            }
        }
        let smooth = grid.synthesize(&spec);
        smooth.iter().zip(r).zip(&band).map(|((s, r), b)| s + (r - b) / d_mean).collect()
    };
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let rhs_norm = dot(w, rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        return x;
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(w, &r, &z);
    for _ in 0..1000 {
        let ap = apply(&p);
        let alpha = rz / dot(w, &p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(w, &r, &r).sqrt() <= rel_tol * rhs_norm {
            break;
        }
        z = precond(&r);
        let rz_new = dot(w, &r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// Damped Newton with residual line search.
pub fn solve_kw(p: &KwProblem, initial: Option<&ScalarField>) -> Result<KwSolution> {
    let grid = p.grid().clone();
    let a = 0.5 * p.s * p.s;
    let tol = p.tolerance();
    let mut phi = match initial {
        Some(g) => {
            g.same_grid(&p.h)?;
            g.clone()
        }
        None => p.default_guess(),
    };
    let mut res = p.residual(&phi);
    let mut history = vec![res.sup_norm()];
    let mut damping = Vec::new();
    let l2 = |f: &ScalarField| sphere::integrate(&f.map(|v| v * v)).sqrt();
    for it in 0..p.options.max_iter {
        if res.sup_norm() <= tol {
            return Ok(KwSolution {
                s: p.s,
                c: p.c(),
                residual_sup: res.sup_norm(),
                phi,
                iterations: it,
                damping,
                residual_history: history,
            });
        }
        let d: Vec<f64> = p.h.values().iter().zip(phi.values()).map(|(h, v)| -a * h * v.exp()).collect();
        let v = pcg(&grid, &d, res.values(), 1e-13);
        let base = l2(&res);
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = phi.values().iter().zip(&v).map(|(x, dv)| x + lambda * dv).collect();
            if trial.iter().all(|t| t.is_finite() && *t < 700.0) {
                let trial = ScalarField::new(&grid, trial)?;
                let tres = p.residual(&trial);
                let tn = l2(&tres);
                if tn < (1.0 - 1e-4 * lambda) * base || tres.sup_norm() <= tol {
                    accepted = Some((trial, tres));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((next, next_res)) = accepted else {
            return Err(KwError::NonConvergence { iterations: it + 1, history });
        };
        damping.push(lambda);
        phi = next;
        res = next_res;
        history.push(res.sup_norm());
    }
    if res.sup_norm() <= tol {
        let iterations = p.options.max_iter;
        return Ok(KwSolution { s: p.s, c: p.c(), residual_sup: res.sup_norm(), phi, iterations, damping, residual_history: history });
    }
    Err(KwError::NonConvergence { iterations: p.options.max_iter, history })
}

/// Constant sub/super-solution bracket from `min h` and `max h`.
pub fn constant_bracket(p: &KwProblem) -> (f64, f64) {
    // for h ≡ h₀ the constant solution is e^φ = −2c/(s²·(−h₀))·… = 2c/(s²h₀)
    let k = 2.0 * p.c() / (p.s * p.s);
    let lo = (k / p.h.min()).ln();
    let hi = (k / p.h.max()).ln();
    (lo, hi)
}

#[derive(Debug, Clone)]
pub struct AdiabaticSweep {
    pub schedule: Vec<f64>,
    pub solutions: Vec<KwSolution>,
    pub phi_inf: ScalarField,
    /// `sup|φ_s − φ_∞|` per schedule entry.
    pub distance_to_limit: Vec<f64>,
    pub monotone: bool,
    /// Log–log slope of the distance against `s`.
    pub rate: f64,
}

/// Sweep the schedule for a fixed `h`; `φ_∞ = −log(−h)` requires `max h < 0`.
pub fn sweep_field(h: &ScalarField, c1: f64, schedule: &[f64], options: KwOptions) -> Result<AdiabaticSweep> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(KwError::Precondition("schedule must be non-empty and strictly increasing".into()));
    }
    let max_h = h.max();
    if max_h >= -1e-10 {
        return Err(KwError::LimitUndefined { max_h });
    }
    let phi_inf = h.map(|v| -(-v).ln());
    let problems: Vec<KwProblem> =
        schedule.iter().map(|&s| KwProblem::new(h.clone(), c1, s, options)).collect::<Result<_>>()?;
    let solutions: Vec<KwSolution> = if options.warm_start {
        let mut out: Vec<KwSolution> = Vec::with_capacity(problems.len());
        for p in &problems {
            let guess = out.last().map(|s| s.phi.clone());
            out.push(solve_kw(p, guess.as_ref())?);
        }
        out
    } else {
        problems.par_iter().map(|p| solve_kw(p, None)).collect::<Result<_>>()?
    };
    let distance_to_limit: Vec<f64> = solutions
        .iter()
        .map(|s| s.phi.zip_with(&phi_inf, |a, b| a - b).map(|f| f.sup_norm()))
        .collect::<std::result::Result<_, _>>()?;
    let monotone = distance_to_limit.windows(2).all(|w| w[1] < w[0]);
    let rate = if schedule.len() >= 2 {
        let xs: Vec<f64> = schedule.iter().map(|s| s.ln()).collect();
        let ys: Vec<f64> = distance_to_limit.iter().map(|d| d.max(1e-300).ln()).collect();
        quad::linear_fit(&xs, &ys).0
    } else {
        f64::NAN
    };
    Ok(AdiabaticSweep { schedule: schedule.to_vec(), solutions, phi_inf, distance_to_limit, monotone, rate })
}

pub fn adiabatic_sweep(f: &SectionTuple, grid: &GridRef, schedule: &[f64], options: KwOptions) -> Result<AdiabaticSweep> {
    let bg = build_background(f, grid)?;
    if bg.zero_degree > 0 {
        return Err(KwError::LimitUndefined { max_h: 0.0 });
    }
    sweep_field(&bg.h, bg.c1, schedule, options)
}
