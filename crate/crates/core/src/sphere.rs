//! Discrete geometry of the unit-area round sphere.
//!
//! Nodes are Gauss–Legendre in colatitude times uniform in longitude, so the
//! quadrature is exact for band-limited products up to degree `2·L_max`.
//! The sphere has radius² = 1/4π; spherical harmonics of degree `l` are
//! eigenfunctions of the positive Laplacian with eigenvalue `4π·l(l+1)`.
//!
//! Chart convention: `z = cot(θ/2)·e^{iφ}`, so `z = 0` is the south pole
//! (θ = π) and the north pole is `z = ∞`. The area element in the chart is
//! `dA = (1/π)·dx dy / (1+|z|²)²`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_L_MAX: usize = 4;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("band limit {0} is below the minimum of {MIN_L_MAX}")]
    BandLimit(usize),
    #[error("fields live on different grids (L_max {0} vs {1})")]
    GridMismatch(usize, usize),
    #[error("Poisson right-hand side has nonzero mean {mean:.3e}")]
    Solvability { mean: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("field dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// A point on the sphere in colatitude/longitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpherePoint {
    pub theta: f64,
    pub phi: f64,
}

impl SpherePoint {
    pub const NORTH: SpherePoint = SpherePoint { theta: 0.0, phi: 0.0 };
    pub const SOUTH: SpherePoint = SpherePoint { theta: PI, phi: 0.0 };

    pub fn from_chart(z: Complex64) -> Self {
        let r = z.norm();
        let phi = if r == 0.0 { 0.0 } else { z.arg().rem_euclid(2.0 * PI) };
        SpherePoint { theta: 2.0 * (1.0f64).atan2(r), phi }
    }

    /// Chart coordinate, `None` at the north pole.
    pub fn chart(&self) -> Option<Complex64> {
        let half = 0.5 * self.theta;
        if half.sin() == 0.0 {
            return None;
        }
        Some(Complex64::from_polar(half.cos() / half.sin(), self.phi))
    }

    pub fn cartesian(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        [st * self.phi.cos(), st * self.phi.sin(), ct]
    }

    /// Angle between two points (on the unit-radius model).
    pub fn angle_to(&self, other: &SpherePoint) -> f64 {
        let a = self.cartesian();
        let b = other.cartesian();
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let c = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        c.atan2(dot)
    }
}

/// Area density of the chart: `dA = area_density(z)·dx dy`.
pub fn area_density(z: Complex64) -> f64 {
    let q = 1.0 + z.norm_sqr();
    1.0 / (PI * q * q)
}

/// Isometric chart centred at `p`: the rotation taking `p` to the chart
/// origin, expressed in the standard chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CenteredChart {
    /// `w = (z − a)/(1 + ā z)`
    Finite(Complex64),
    /// `w = 1/z`
    Infinity,
}

impl CenteredChart {
    pub fn at(p: &SpherePoint) -> Self {
        match p.chart() {
            Some(a) if a.norm() <= 1e12 => CenteredChart::Finite(a),
            _ => CenteredChart::Infinity,
        }
    }

    /// Standard chart `z` → centred chart `w`; `None` means `w = ∞`.
    pub fn forward(&self, z: Complex64) -> Option<Complex64> {
        match *self {
            CenteredChart::Finite(a) => {
                let den = Complex64::new(1.0, 0.0) + a.conj() * z;
                if den.norm() == 0.0 {
                    None
                } else {
                    Some((z - a) / den)
                }
            }
            CenteredChart::Infinity => {
                if z.norm() == 0.0 {
                    None
                } else {
                    Some(z.inv())
                }
            }
        }
    }

    /// Centred chart `w` → point on the sphere.
    pub fn inverse_point(&self, w: Complex64) -> SpherePoint {
        match *self {
            CenteredChart::Finite(a) => {
                let den = Complex64::new(1.0, 0.0) - a.conj() * w;
                if den.norm() == 0.0 {
                    SpherePoint::NORTH
                } else {
                    SpherePoint::from_chart((w + a) / den)
                }
            }
            CenteredChart::Infinity => {
                if w.norm() == 0.0 {
                    SpherePoint::NORTH
                } else {
                    SpherePoint::from_chart(w.inv())
                }
            }
        }
    }
}

/// Gauss–Legendre nodes (descending) and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wt = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = wt;
        w[n - 1 - i] = wt;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Fully normalized associated Legendre values `P̄_l^m(x)` for all
/// `0 ≤ m ≤ l ≤ l_max`, packed by [`lm_index`]. Normalized so that
/// `∫_{−1}^{1} P̄² dx = 1`; no Condon–Shortley phase.
pub fn legendre_all(l_max: usize, x: f64, out: &mut [f64]) {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = std::f64::consts::FRAC_1_SQRT_2;
    for m in 0..=l_max {
        if m > 0 {
            pmm *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s;
        }
        out[lm_index(m, m)] = pmm;
        if m == l_max {
            break;
        }
        let mut p_prev = pmm;
        let mut p = ((2 * m + 3) as f64).sqrt() * x * pmm;
        out[lm_index(m + 1, m)] = p;
        for l in (m + 2)..=l_max {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            let next = a * (x * p - b * p_prev);
            p_prev = p;
            p = next;
            out[lm_index(l, m)] = p;
        }
    }
}

/// `dP̄_l^m/dθ` for all packed `(l, m)` at colatitude `acos(x)`, from the
/// ladder relations of the phase-free normalized functions.
pub fn legendre_dtheta_all(l_max: usize, x: f64, out: &mut [f64]) {
    let mut p = vec![0.0; lm_count(l_max)];
    legendre_all(l_max, x, &mut p);
    for l in 0..=l_max {
        let lf = l as f64;
        for m in 0..=l {
            let mf = m as f64;
            let up = if m < l { p[lm_index(l, m + 1)] } else { 0.0 };
            out[lm_index(l, m)] = if m == 0 {
                -(lf * (lf + 1.0)).sqrt() * up
            } else {
                let down = p[lm_index(l, m - 1)];
                let a = ((lf + mf) * (lf - mf + 1.0)).sqrt();
                let b = ((lf - mf) * (lf + mf + 1.0)).sqrt();
                0.5 * (a * down - b * up)
            };
        }
    }
}

#[inline]
pub fn lm_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

pub fn lm_count(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 2) / 2
}

/// Real spherical harmonic, orthonormal against the unit-area measure.
/// `m < 0` selects the sine harmonic.
pub fn real_harmonic(l: usize, m: i64, theta: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs() as usize;
    assert!(am <= l, "|m| must not exceed l");
    let mut buf = vec![0.0; lm_count(l)];
    legendre_all(l, theta.cos(), &mut buf);
    let p = buf[lm_index(l, am)];
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => std::f64::consts::SQRT_2 * p,
        std::cmp::Ordering::Greater => 2.0 * p * (am as f64 * phi).cos(),
        std::cmp::Ordering::Less => 2.0 * p * (am as f64 * phi).sin(),
    }
}

struct Transform {
    /// `plm[i * lm_count + lm_index(l,m)]`
    plm: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

/// Gauss–Legendre × uniform-longitude grid on the unit-area sphere.
pub struct SphereGrid {
    l_max: usize,
    n_theta: usize,
    n_phi: usize,
    cos_theta: Vec<f64>,
    theta: Vec<f64>,
    phi: Vec<f64>,
    gl_weights: Vec<f64>,
    weights: Vec<f64>,
    transform: OnceLock<Transform>,
    dtheta_table: OnceLock<Vec<f64>>,
}

impl std::fmt::Debug for SphereGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SphereGrid")
            .field("l_max", &self.l_max)
            .field("n_theta", &self.n_theta)
            .field("n_phi", &self.n_phi)
            .finish()
    }
}

pub type GridRef = Arc<SphereGrid>;

pub fn build_grid(l_max: usize) -> Result<GridRef> {
    if l_max < MIN_L_MAX {
        return Err(GeometryError::BandLimit(l_max));
    }
    let n_theta = l_max + 1;
    let n_phi = 2 * l_max + 2;
    let (x, gw) = gauss_legendre(n_theta);
    let theta: Vec<f64> = x.iter().map(|c| c.acos()).collect();
    let phi: Vec<f64> = (0..n_phi).map(|j| 2.0 * PI * j as f64 / n_phi as f64).collect();
    let mut weights = Vec::with_capacity(n_theta * n_phi);
    for &g in &gw {
        let w = g / (2.0 * n_phi as f64);
        weights.extend(std::iter::repeat_n(w, n_phi));
    }
    Ok(Arc::new(SphereGrid {
        l_max,
        n_theta,
        n_phi,
        cos_theta: x,
        theta,
        phi,
        gl_weights: gw,
        weights,
        transform: OnceLock::new(),
        dtheta_table: OnceLock::new(),
    }))
}

/// Spherical-harmonic coefficients `c_{lm}`, `m ≥ 0`, of a real field.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub l_max: usize,
    pub coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(l_max: usize) -> Self {
        Spectrum { l_max, coeffs: vec![Complex64::new(0.0, 0.0); lm_count(l_max)] }
    }

    pub fn get(&self, l: usize, m: usize) -> Complex64 {
        self.coeffs[lm_index(l, m)]
    }

    /// Evaluate the band-limited expansion at an arbitrary point.
    pub fn eval(&self, p: &SpherePoint) -> f64 {
        let mut buf = vec![0.0; lm_count(self.l_max)];
        legendre_all(self.l_max, p.theta.cos(), &mut buf);
        let norm = 1.0 / (2.0 * PI).sqrt();
        let mut total = 0.0;
        for m in 0..=self.l_max {
            let mut b = Complex64::new(0.0, 0.0);
            for l in m..=self.l_max {
                b += self.coeffs[lm_index(l, m)] * buf[lm_index(l, m)];
            }
            let e = Complex64::from_polar(1.0, m as f64 * p.phi);
            let v = (b * e).re * norm;
            total += if m == 0 { v } else { 2.0 * v };
        }
        total
    }

    /// `(f, ∂_θ f, ∂_φ f)` of the expansion at an arbitrary point.
    pub fn eval_with_gradient(&self, p: &SpherePoint) -> (f64, f64, f64) {
        let n = lm_count(self.l_max);
        let (mut buf, mut dbuf) = (vec![0.0; n], vec![0.0; n]);
        legendre_all(self.l_max, p.theta.cos(), &mut buf);
        legendre_dtheta_all(self.l_max, p.theta.cos(), &mut dbuf);
        let norm = 1.0 / (2.0 * PI).sqrt();
        let (mut f, mut ft, mut fp) = (0.0, 0.0, 0.0);
        for m in 0..=self.l_max {
            let (mut b, mut db) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for l in m..=self.l_max {
                let c = self.coeffs[lm_index(l, m)];
                b += c * buf[lm_index(l, m)];
                db += c * dbuf[lm_index(l, m)];
            }
            let e = Complex64::from_polar(norm, m as f64 * p.phi);
            let w = if m == 0 { 1.0 } else { 2.0 };
            f += w * (b * e).re;
            ft += w * (db * e).re;
            fp += w * (b * e * Complex64::new(0.0, m as f64)).re;
        }
        (f, ft, fp)
    }

    /// Sum of `|c_lm|²` (weighted for the real-field symmetry) by degree.
    pub fn degree_power(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.l_max + 1];
        for l in 0..=self.l_max {
            for m in 0..=l {
                let w = if m == 0 { 1.0 } else { 2.0 };
                out[l] += w * self.coeffs[lm_index(l, m)].norm_sqr();
            }
        }
        out
    }
}

impl SphereGrid {
    pub fn l_max(&self) -> usize {
        self.l_max
    }
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }
    pub fn n_phi(&self) -> usize {
        self.n_phi
    }
    pub fn len(&self) -> usize {
        self.n_theta * self.n_phi
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn point(&self, idx: usize) -> SpherePoint {
        SpherePoint { theta: self.theta[idx / self.n_phi], phi: self.phi[idx % self.n_phi] }
    }
    /// Chart coordinate of a node (nodes never sit on the poles).
    pub fn chart_coord(&self, idx: usize) -> Complex64 {
        self.point(idx).chart().expect("grid nodes avoid the poles")
    }

    fn transform(&self) -> &Transform {
        self.transform.get_or_init(|| {
            let count = lm_count(self.l_max);
            let mut plm = vec![0.0; self.n_theta * count];
            plm.par_chunks_mut(count)
                .zip(self.cos_theta.par_iter())
                .for_each(|(row, &x)| legendre_all(self.l_max, x, row));
            let mut planner = FftPlanner::new();
            Transform {
                plm,
                fft: planner.plan_fft_forward(self.n_phi),
                ifft: planner.plan_fft_inverse(self.n_phi),
            }
        })
    }

    /// Forward transform (quadrature projection onto harmonics ≤ L_max).
    pub fn analyze(&self, values: &[f64]) -> Spectrum {
        let tr = self.transform();
        let count = lm_count(self.l_max);
        let scale = (2.0 * PI) / self.n_phi as f64 / (2.0 * PI).sqrt();
        let rings: Vec<Vec<Complex64>> = values
            .par_chunks(self.n_phi)
            .map(|ring| {
                let mut buf: Vec<Complex64> = ring.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                tr.fft.process(&mut buf);
                buf.truncate(self.l_max + 1);
                buf.iter_mut().for_each(|c| *c *= scale);
                buf
            })
            .collect();
        let per_m: Vec<Vec<Complex64>> = (0..=self.l_max)
            .into_par_iter()
            .map(|m| {
                let mut col = vec![Complex64::new(0.0, 0.0); self.l_max + 1 - m];
                for (i, ring) in rings.iter().enumerate() {
                    let a = ring[m] * self.gl_weights[i];
                    let row = &tr.plm[i * count..(i + 1) * count];
                    for l in m..=self.l_max {
                        col[l - m] += a * row[lm_index(l, m)];
                    }
                }
                col
            })
            .collect();
        let mut spec = Spectrum::zeros(self.l_max);
        for (m, col) in per_m.into_iter().enumerate() {
            for (k, c) in col.into_iter().enumerate() {
                spec.coeffs[lm_index(m + k, m)] = c;
            }
        }
        spec
    }

    /// Inverse transform onto the grid nodes.
    pub fn synthesize(&self, spec: &Spectrum) -> Vec<f64> {
        self.synthesize_with(spec, &self.transform().plm, |_| Complex64::new(1.0, 0.0))
    }

    /// Spectral `(∂_θ f, ∂_φ f)` on the grid nodes.
    pub fn synthesize_gradient(&self, spec: &Spectrum) -> (Vec<f64>, Vec<f64>) {
        let dplm = self.dtheta_table.get_or_init(|| {
            let count = lm_count(self.l_max);
            let mut t = vec![0.0; self.n_theta * count];
            t.par_chunks_mut(count)
                .zip(self.cos_theta.par_iter())
                .for_each(|(row, &x)| legendre_dtheta_all(self.l_max, x, row));
            t
        });
        let d_theta = self.synthesize_with(spec, dplm, |_| Complex64::new(1.0, 0.0));
        let d_phi = self.synthesize_with(spec, &self.transform().plm, |m| Complex64::new(0.0, m as f64));
        (d_theta, d_phi)
    }

    fn synthesize_with(&self, spec: &Spectrum, table: &[f64], mult: impl Fn(usize) -> Complex64 + Sync) -> Vec<f64> {
        assert_eq!(spec.l_max, self.l_max, "spectrum band limit must match the grid");
        let tr = self.transform();
        let count = lm_count(self.l_max);
        let norm = 1.0 / (2.0 * PI).sqrt();
        let mut out = vec![0.0; self.len()];
        out.par_chunks_mut(self.n_phi).enumerate().for_each(|(i, ring)| {
            let row = &table[i * count..(i + 1) * count];
            let mut buf = vec![Complex64::new(0.0, 0.0); self.n_phi];
            for m in 0..=self.l_max {
                let mut b = Complex64::new(0.0, 0.0);
                for l in m..=self.l_max {
                    b += spec.coeffs[lm_index(l, m)] * row[lm_index(l, m)];
                }
                b *= norm * mult(m);
                if m == 0 {
                    buf[0] = Complex64::new(b.re, 0.0);
                } else {
                    buf[m] = b;
                    buf[self.n_phi - m] = b.conj();
                }
            }
            tr.ifft.process(&mut buf);
            for (dst, src) in ring.iter_mut().zip(buf.iter()) {
                *dst = src.re;
            }
        });
        out
    }
}

/// Real function sampled on a sphere grid.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: GridRef,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: &GridRef, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(GeometryError::Domain(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::Domain(format!("non-finite sample at node {i}")));
        }
        Ok(ScalarField { grid: grid.clone(), values })
    }

    pub fn constant(grid: &GridRef, c: f64) -> Self {
        ScalarField { grid: grid.clone(), values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: &GridRef, f: impl Fn(SpherePoint) -> f64 + Sync) -> Self {
        let values = (0..grid.len()).into_par_iter().map(|i| f(grid.point(i))).collect();
        ScalarField { grid: grid.clone(), values }
    }

    /// Sample a function of the chart coordinate.
    pub fn from_chart_fn(grid: &GridRef, f: impl Fn(Complex64) -> f64 + Sync) -> Self {
        let values = (0..grid.len()).into_par_iter().map(|i| f(grid.chart_coord(i))).collect();
        ScalarField { grid: grid.clone(), values }
    }

    pub fn from_spectrum(grid: &GridRef, spec: &Spectrum) -> Self {
        ScalarField { grid: grid.clone(), values: grid.synthesize(spec) }
    }

    pub fn grid(&self) -> &GridRef {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.grid.l_max != other.grid.l_max {
            return Err(GeometryError::GridMismatch(self.grid.l_max, other.grid.l_max));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<ScalarField> {
        self.same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(ScalarField { grid: self.grid.clone(), values })
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn spectrum(&self) -> Spectrum {
        self.grid.analyze(&self.values)
    }

    /// Band-limited interpolation at an arbitrary point.
    pub fn eval_at(&self, p: &SpherePoint) -> f64 {
        self.spectrum().eval(p)
    }
}

/// Spectral gradient `(∂_θ f, ∂_φ f)` of a field.
pub fn gradient(f: &ScalarField) -> (ScalarField, ScalarField) {
    let (t, p) = f.grid.synthesize_gradient(&f.spectrum());
    (ScalarField { grid: f.grid.clone(), values: t }, ScalarField { grid: f.grid.clone(), values: p })
}

/// `∂_z f` in the standard chart from spherical partials at colatitude θ.
pub fn chart_dz(theta: f64, phi: f64, f_theta: f64, f_phi: f64) -> Complex64 {
    // ρ = cot(θ/2): ∂_ρ = −2 sin²(θ/2) ∂_θ; ∂_z = e^{−iφ}/2 (∂_ρ − (i/ρ) ∂_φ)
    let half = 0.5 * theta;
    let rho = half.cos() / half.sin();
    let f_rho = -2.0 * half.sin().powi(2) * f_theta;
    Complex64::from_polar(0.5, -phi) * Complex64::new(f_rho, -f_phi / rho)
}

/// Quadrature against the unit-area element.
pub fn integrate(f: &ScalarField) -> f64 {
    f.values.iter().zip(&f.grid.weights).map(|(v, w)| v * w).sum()
}

/// Positive Laplace–Beltrami operator on the unit-area sphere.
pub fn laplace_beltrami(f: &ScalarField) -> ScalarField {
    let mut spec = f.spectrum();
    for l in 0..=spec.l_max {
        let ev = 4.0 * PI * (l * (l + 1)) as f64;
        for m in 0..=l {
            spec.coeffs[lm_index(l, m)] *= ev;
        }
    }
    ScalarField::from_spectrum(&f.grid, &spec)
}

/// Mean-zero solution of `Δψ = rhs` (positive Laplacian).
pub fn solve_poisson(rhs: &ScalarField) -> Result<ScalarField> {
    let mean = integrate(rhs);
    if mean.abs() > 1e-9 * (1.0 + rhs.sup_norm()) {
        return Err(GeometryError::Solvability { mean });
    }
    let mut spec = rhs.spectrum();
    spec.coeffs[0] = Complex64::new(0.0, 0.0);
    for l in 1..=spec.l_max {
        let ev = 4.0 * PI * (l * (l + 1)) as f64;
        for m in 0..=l {
            spec.coeffs[lm_index(l, m)] /= ev;
        }
    }
    Ok(ScalarField::from_spectrum(&rhs.grid, &spec))
}

/// Conformal renormalization map: bubble coordinate `y` ↦ point with
/// centred-chart coordinate `w = b + y/t` around `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenormMap {
    pub center: SpherePoint,
    pub translation: Complex64,
    pub scale: f64,
}

pub fn make_renorm_map(p: SpherePoint, translation: Complex64, t: f64) -> Result<RenormMap> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(GeometryError::Domain(format!("dilation scale must be positive, got {t}")));
    }
    if !translation.re.is_finite() || !translation.im.is_finite() {
        return Err(GeometryError::Domain("translation must be finite".into()));
    }
    Ok(RenormMap { center: p, translation, scale: t })
}

impl RenormMap {
    pub fn centered_coord(&self, y: Complex64) -> Complex64 {
        self.translation + y / self.scale
    }

    pub fn apply(&self, y: Complex64) -> SpherePoint {
        CenteredChart::at(&self.center).inverse_point(self.centered_coord(y))
    }

    /// Area Jacobian `dA_image/dA_bubble` at bubble coordinate `y`.
    pub fn jacobian(&self, y: Complex64) -> f64 {
        let w = self.centered_coord(y);
        let qy = 1.0 + y.norm_sqr();
        let qw = 1.0 + w.norm_sqr();
        (qy * qy) / (qw * qw * self.scale * self.scale)
    }

    /// Pulled-back weight `g(b + ξ/t)·(1+|ξ|²)⁻²` with `g(w) = (1+|w|²)⁻²`
    /// the round weight in the centred chart (so `g(0) = 1`).
    pub fn conformal_factor(&self, xi: Complex64) -> f64 {
        let qw = 1.0 + self.centered_coord(xi).norm_sqr();
        let qx = 1.0 + xi.norm_sqr();
        1.0 / (qw * qw * qx * qx)
    }
}

/// Pull a density back to a grid on the bubble sphere; integrals over the
/// whole sphere are preserved.
pub fn pullback_field(r: &RenormMap, f: &ScalarField, target: &GridRef) -> ScalarField {
    let spec = f.spectrum();
    let values = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let y = target.chart_coord(i);
            spec.eval(&r.apply(y)) * r.jacobian(y)
        })
        .collect();
    ScalarField { grid: target.clone(), values }
}

/// Conic area weight `|ξ|^{2β−2}` around a point, in the centred chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConicWeight {
    pub beta: f64,
    pub point: SpherePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConicIntegral {
    pub value: f64,
    pub divergent: bool,
    /// Fitted growth exponent of ring masses towards the singular point;
    /// non-positive means non-integrable.
    pub ring_exponent: f64,
}

const CONIC_RINGS: usize = 60;
const CONIC_GL: usize = 12;
const CONIC_ANGLES: usize = 64;

impl ConicWeight {
    pub fn new(beta: f64, point: SpherePoint) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(GeometryError::Domain(format!("cone angle β must lie in (0,1], got {beta}")));
        }
        Ok(ConicWeight { beta, point })
    }

    /// `∫ f(ξ)·|ξ|^{2β−2} dA` with `ξ` the chart centred at the singular
    /// point. `breaks` lists radii where `f` is not smooth.
    pub fn integrate_fn(&self, f: &(dyn Fn(Complex64) -> f64 + Sync), breaks: &[f64]) -> ConicIntegral {
        let beta = self.beta;
        let (gx, gw) = gauss_legendre(CONIC_GL);
        let angles: Vec<Complex64> = (0..CONIC_ANGLES)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / CONIC_ANGLES as f64))
            .collect();
        let ring_avg = |rho: f64| -> f64 {
            angles.iter().map(|e| f(*e * rho)).sum::<f64>() / CONIC_ANGLES as f64
        };
        // radial integrand after the angular average: 2·ρ^{2β−1}/(1+ρ²)²·⟨f⟩
        let radial = |rho: f64| -> f64 {
            let q = 1.0 + rho * rho;
            2.0 * rho.powf(2.0 * beta - 1.0) / (q * q) * ring_avg(rho)
        };
        let panel = |a: f64, b: f64, g: &dyn Fn(f64) -> f64| -> f64 {
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            gx.iter().zip(&gw).map(|(x, w)| w * half * g(mid + half * x)).sum()
        };
        let mut inner_edge = 0.5f64;
        for &b in breaks {
            if b > 0.0 && b < inner_edge {
                inner_edge = 0.5 * b;
            }
        }
        // geometric rings towards the singular point, integrated in log ρ
        let log_panel = |a: f64, b: f64| -> f64 {
            panel(a.ln(), b.ln(), &|u: f64| {
                let rho = u.exp();
                radial(rho) * rho
            })
        };
        let mut rings = Vec::with_capacity(CONIC_RINGS);
        let mut hi = inner_edge;
        for _ in 0..CONIC_RINGS {
            let lo = 0.5 * hi;
            rings.push(log_panel(lo, hi));
            hi = lo;
        }
        let n = rings.len();
        let (r1, r2, r3) = (rings[n - 3], rings[n - 2], rings[n - 1]);
        let exponent = if r3 == 0.0 && r2 == 0.0 {
            f64::INFINITY
        } else {
            let e1 = (r1.abs() / r2.abs()).log2();
            let e2 = (r2.abs() / r3.abs()).log2();
            0.5 * (e1 + e2)
        };
        let divergent = !(exponent > 1e-3);
        let tail = if divergent || !exponent.is_finite() { 0.0 } else { r3 / (2f64.powf(exponent) - 1.0) };
        let mut value: f64 = rings.iter().sum::<f64>() + tail;
        // middle panels (log variable, split at breaks), then geometric
        // rings outwards towards the antipode
        let outer_edge = 2.0f64.max(breaks.iter().cloned().filter(|b| b.is_finite()).fold(0.0, f64::max) * 2.0);
        let mut edges = vec![inner_edge, outer_edge];
        edges.extend(breaks.iter().cloned().filter(|&b| b > inner_edge && b < outer_edge));
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        edges.dedup();
        for w in edges.windows(2) {
            let (la, lb) = (w[0].ln(), w[1].ln());
            for k in 0..4 {
                let a = (la + (lb - la) * k as f64 / 4.0).exp();
                let b = (la + (lb - la) * (k + 1) as f64 / 4.0).exp();
                value += log_panel(a, b);
            }
        }
        let mut lo = outer_edge;
        for _ in 0..CONIC_RINGS {
            value += log_panel(lo, 2.0 * lo);
            lo *= 2.0;
        }
        ConicIntegral { value: if divergent { f64::INFINITY } else { value }, divergent, ring_exponent: exponent }
    }

    /// Conic integral of a band-limited field (interpolated spectrally).
    pub fn integrate_field(&self, f: &ScalarField) -> ConicIntegral {
        if self.beta == 1.0 {
            return ConicIntegral { value: integrate(f), divergent: false, ring_exponent: 2.0 };
        }
        let spec = f.spectrum();
        let chart = CenteredChart::at(&self.point);
        let g = |xi: Complex64| spec.eval(&chart.inverse_point(xi));
        self.integrate_fn(&g, &[])
    }
}

pub fn conic_area_weight(beta: f64, f: &ScalarField, q: SpherePoint) -> Result<ConicIntegral> {
    Ok(ConicWeight::new(beta, q)?.integrate_field(f))
}

/// Sidecar describing a raw field dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDumpMeta {
    #[serde(rename = "L_max")]
    pub l_max: usize,
    pub rows: usize,
    pub cols: usize,
    pub quantity: String,
}

/// Write `<stem>.f64` (little-endian, colatitude-major) and `<stem>.json`.
pub fn write_field_dump(f: &ScalarField, dir: &Path, stem: &str, quantity: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(f.values.len() * 8);
    for v in &f.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(format!("{stem}.f64")), bytes)?;
    let meta = FieldDumpMeta {
        l_max: f.grid.l_max,
        rows: f.grid.n_theta,
        cols: f.grid.n_phi,
        quantity: quantity.to_string(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| GeometryError::Dump(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), text)?;
    Ok(())
}

/// Read a dump back onto a freshly built grid.
pub fn read_field_dump(data: &Path) -> Result<(FieldDumpMeta, ScalarField)> {
    let side = data.with_extension("json");
    let meta: FieldDumpMeta = serde_json::from_str(&std::fs::read_to_string(&side)?)
        .map_err(|e| GeometryError::Dump(format!("{}: {e}", side.display())))?;
    let bytes = std::fs::read(data)?;
    if bytes.len() != meta.rows * meta.cols * 8 {
        return Err(GeometryError::Dump(format!(
            "{} holds {} bytes, sidecar expects {}",
            data.display(),
            bytes.len(),
            meta.rows * meta.cols * 8
        )));
    }
    let grid = build_grid(meta.l_max)?;
    if grid.n_theta != meta.rows || grid.n_phi != meta.cols {
        return Err(GeometryError::Dump("sidecar shape does not match L_max".into()));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((meta, ScalarField::new(&grid, values)?))
}
