//! Holomorphic maps `ℂP¹ → ℂPᵏ` as tuples of polynomials, their divisors,
//! energy densities and the degeneration/stripping machinery.
//!
//! Energy normalization: the pulled-back Fubini–Study form is scaled so
//! that `E(f) = deg f`. In the chart the density is
//! `e = (1/π)·|f∧f′|²/|f|⁴ = (1/4π)·Δ_flat log|f|²`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::quad;
use crate::sphere::{self, CenteredChart, GridRef, ScalarField, SpherePoint};

pub type C = Complex64;

const ZERO: C = C { re: 0.0, im: 0.0 };
const ONE: C = C { re: 1.0, im: 0.0 };

/// Relative threshold below which a Euclidean remainder counts as zero.
pub const GCD_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HoloError {
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("base point {0} lies on a divisor")]
    DegenerateFiber(C),
    #[error("family is not in the divisor-coalescence stratum: {0}")]
    Stratification(String),
    #[error("family does not converge: {0}")]
    NonConvergence(String),
    #[error("family specification: {0}")]
    Spec(String),
    #[error("expression '{src}': {err}")]
    Expr { src: String, err: ExprError },
    #[error(transparent)]
    Geometry(#[from] sphere::GeometryError),
}

pub type Result<T> = std::result::Result<T, HoloError>;

/// Polynomial with ascending coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    pub coeffs: Vec<C>,
}

impl Serialize for Poly {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = self.coeffs.iter().map(|c| [c.re, c.im]).collect();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Poly {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs: Vec<[f64; 2]> = Vec::deserialize(d)?;
        Ok(Poly { coeffs: pairs.into_iter().map(|[re, im]| C::new(re, im)).collect() })
    }
}

impl Poly {
    pub fn new(coeffs: Vec<C>) -> Self {
        Poly { coeffs }
    }
    pub fn constant(c: C) -> Self {
        Poly { coeffs: vec![c] }
    }
    pub fn zero() -> Self {
        Poly { coeffs: vec![] }
    }
    pub fn monomial(c: C, k: usize) -> Self {
        let mut coeffs = vec![ZERO; k + 1];
        coeffs[k] = c;
        Poly { coeffs }
    }
    pub fn from_real(coeffs: &[f64]) -> Self {
        Poly { coeffs: coeffs.iter().map(|&c| C::new(c, 0.0)).collect() }
    }

    pub fn from_roots(roots: &[C], lead: C) -> Self {
        let mut p = Poly::constant(lead);
        for &a in roots {
            p = p.mul(&Poly::new(vec![-a, ONE]));
        }
        p
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// Degree ignoring coefficients below `tol·max|c|`; `None` for zero.
    pub fn degree_tol(&self, tol: f64) -> Option<usize> {
        let cut = tol * self.max_abs();
        self.coeffs.iter().rposition(|c| c.norm() > cut && c.norm() > 0.0)
    }

    pub fn degree(&self) -> Option<usize> {
        self.coeffs.iter().rposition(|c| c.norm() > 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.degree().is_none()
    }

    pub fn trimmed(&self, tol: f64) -> Poly {
        match self.degree_tol(tol) {
            None => Poly::zero(),
            Some(d) => Poly::new(self.coeffs[..=d].to_vec()),
        }
    }

    pub fn eval(&self, z: C) -> C {
        self.coeffs.iter().rev().fold(ZERO, |acc, &c| acc * z + c)
    }

    /// Value and derivative by Horner.
    pub fn eval_d(&self, z: C) -> (C, C) {
        let mut p = ZERO;
        let mut dp = ZERO;
        for &c in self.coeffs.iter().rev() {
            dp = dp * z + p;
            p = p * z + c;
        }
        (p, dp)
    }

    pub fn derivative(&self) -> Poly {
        Poly::new(self.coeffs.iter().enumerate().skip(1).map(|(k, &c)| c * k as f64).collect())
    }

    pub fn scale(&self, a: C) -> Poly {
        Poly::new(self.coeffs.iter().map(|&c| c * a).collect())
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.coeffs.len().max(other.coeffs.len());
        Poly::new(
            (0..n)
                .map(|i| {
                    self.coeffs.get(i).copied().unwrap_or(ZERO) + other.coeffs.get(i).copied().unwrap_or(ZERO)
                })
                .collect(),
        )
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-ONE))
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        if self.coeffs.is_empty() || other.coeffs.is_empty() {
            return Poly::zero();
        }
        let mut out = vec![ZERO; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly::new(out)
    }

    pub fn pow(&self, n: usize) -> Poly {
        (0..n).fold(Poly::constant(ONE), |acc, _| acc.mul(self))
    }

    /// Quotient and remainder; `divisor` must be nonzero after trimming.
    pub fn div_rem(&self, divisor: &Poly, tol: f64) -> (Poly, Poly) {
        let d = divisor.trimmed(tol);
        let dd = d.degree().expect("division by the zero polynomial");
        let lead = d.coeffs[dd];
        let mut rem = self.coeffs.clone();
        let n = rem.len();
        if n <= dd {
            return (Poly::zero(), self.clone());
        }
        let mut quot = vec![ZERO; n - dd];
        for k in (0..n - dd).rev() {
            let q = rem[k + dd] / lead;
            quot[k] = q;
            for j in 0..=dd {
                rem[k + j] -= q * d.coeffs[j];
            }
            rem[k + dd] = ZERO;
        }
        rem.truncate(dd);
        (Poly::new(quot), Poly::new(rem))
    }

    /// `p(b + a·y)` as a polynomial in `y`.
    pub fn compose_affine(&self, b: C, a: C) -> Poly {
        let lin = Poly::new(vec![b, a]);
        let mut acc = Poly::zero();
        for &c in self.coeffs.iter().rev() {
            acc = acc.mul(&lin).add(&Poly::constant(c));
        }
        acc
    }

    /// Reversed coefficients padded to length `r + 1`: `w^r·p(1/w)`.
    pub fn reversed(&self, r: usize) -> Poly {
        let mut c = self.coeffs.clone();
        c.resize(r + 1, ZERO);
        c.truncate(r + 1);
        c.reverse();
        Poly::new(c)
    }

    /// Roots by Aberth–Ehrlich iteration with Newton polishing.
    pub fn roots(&self) -> Vec<C> {
        let p = self.trimmed(1e-14);
        let n = match p.degree() {
            None | Some(0) => return vec![],
            Some(n) => n,
        };
        let lead = p.coeffs[n];
        let monic = p.scale(lead.inv());
        // leading zeros of the constant term are exact roots at 0
        let zeros = monic.coeffs.iter().take_while(|c| c.norm() == 0.0).count();
        let reduced = Poly::new(monic.coeffs[zeros..].to_vec());
        let m = n - zeros;
        let mut out = vec![ZERO; zeros];
        if m == 0 {
            return out;
        }
        let radius = (reduced.coeffs[0].norm()).powf(1.0 / m as f64).max(1e-300);
        let mut z: Vec<C> = (0..m)
            .map(|k| C::from_polar(radius, 2.0 * PI * k as f64 / m as f64 + 0.4))
            .collect();
        let d = reduced.derivative();
        for _ in 0..500 {
            let mut max_step: f64 = 0.0;
            for i in 0..m {
                let (pv, dv) = (reduced.eval(z[i]), d.eval(z[i]));
                if pv.norm() == 0.0 {
                    continue;
                }
                let ratio = pv / dv;
                let mut sum = ZERO;
                for j in 0..m {
                    if j != i {
                        let diff = z[i] - z[j];
                        if diff.norm() > 0.0 {
                            sum += diff.inv();
                        }
                    }
                }
                let step = ratio / (ONE - ratio * sum);
                if step.re.is_finite() && step.im.is_finite() {
                    z[i] -= step;
                    max_step = max_step.max(step.norm() / (1.0 + z[i].norm()));
                }
            }
            if max_step < 1e-15 {
                break;
            }
        }
        for zi in z.iter_mut() {
            for _ in 0..3 {
                let (pv, dv) = reduced.eval_d(*zi);
                if dv.norm() == 0.0 {
                    break;
                }
                let step = pv / dv;
                let cand = *zi - step;
                if reduced.eval(cand).norm() < pv.norm() {
                    *zi = cand;
                } else {
                    break;
                }
            }
        }
        out.extend(z);
        out.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        out
    }
}

/// Monic greatest common divisor with a relative remainder threshold.
pub fn poly_gcd(a: &Poly, b: &Poly, tol: f64) -> Poly {
    let norm = |p: &Poly| -> Poly {
        let m = p.max_abs();
        if m == 0.0 {
            Poly::zero()
        } else {
            p.scale(C::new(1.0 / m, 0.0)).trimmed(tol)
        }
    };
    let mut x = norm(a);
    let mut y = norm(b);
    if x.is_zero() {
        std::mem::swap(&mut x, &mut y);
    }
    while !y.is_zero() {
        if x.degree() < y.degree() {
            std::mem::swap(&mut x, &mut y);
            continue;
        }
        let (_, r) = x.div_rem(&y, tol);
        x = y;
        y = norm(&r);
        if r.max_abs() <= tol {
            y = Poly::zero();
        }
    }
    match x.degree() {
        None => Poly::zero(),
        Some(d) => x.scale(x.coeffs[d].inv()),
    }
}

/// A point of ℂP¹ in the standard chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChartPoint {
    Finite([f64; 2]),
    Infinity,
}

impl ChartPoint {
    pub fn finite(z: C) -> Self {
        ChartPoint::Finite([z.re, z.im])
    }
    pub fn value(&self) -> Option<C> {
        match self {
            ChartPoint::Finite([re, im]) => Some(C::new(*re, *im)),
            ChartPoint::Infinity => None,
        }
    }
    pub fn to_sphere(&self) -> SpherePoint {
        match self.value() {
            Some(z) => SpherePoint::from_chart(z),
            None => SpherePoint::NORTH,
        }
    }
    pub fn from_sphere(p: &SpherePoint) -> Self {
        match p.chart() {
            Some(z) if z.norm() < 1e12 => ChartPoint::finite(z),
            _ => ChartPoint::Infinity,
        }
    }
}

/// Chordal distance on the unit-diameter model of ℂP¹ (∞ allowed).
pub fn chordal(a: Option<C>, b: Option<C>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => 2.0 * (a - b).norm() / ((1.0 + a.norm_sqr()) * (1.0 + b.norm_sqr())).sqrt(),
        (Some(a), None) | (None, Some(a)) => 2.0 / (1.0 + a.norm_sqr()).sqrt(),
        (None, None) => 0.0,
    }
}

/// Effective divisor on ℂP¹: finite points with repetition plus a
/// multiplicity at ∞.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Divisor {
    pub finite: Vec<[f64; 2]>,
    pub at_infinity: usize,
}

impl Divisor {
    pub fn new(points: &[C], at_infinity: usize) -> Self {
        Divisor { finite: points.iter().map(|z| [z.re, z.im]).collect(), at_infinity }
    }
    pub fn points(&self) -> Vec<C> {
        self.finite.iter().map(|[re, im]| C::new(*re, *im)).collect()
    }
    pub fn degree(&self) -> usize {
        self.finite.len() + self.at_infinity
    }
}

pub type DivisorTuple = Vec<Divisor>;

/// Multiset of common zeros with multiplicities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ZeroSet {
    pub points: Vec<(ChartPoint, usize)>,
}

impl ZeroSet {
    pub fn total(&self) -> usize {
        self.points.iter().map(|p| p.1).sum()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A `(k+1)`-tuple of sections of `O(r)`, possibly with common zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionTuple {
    pub degree: usize,
    pub components: Vec<Poly>,
}

impl SectionTuple {
    pub fn new(components: Vec<Poly>, degree: usize) -> Result<Self> {
        if components.len() < 2 {
            return Err(HoloError::InvalidMap("need at least two components".into()));
        }
        for (i, p) in components.iter().enumerate() {
            if p.degree().unwrap_or(0) > degree {
                return Err(HoloError::InvalidMap(format!("component {i} exceeds degree {degree}")));
            }
            if p.coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(HoloError::InvalidMap(format!("component {i} has non-finite coefficients")));
            }
        }
        if components.iter().all(|p| p.is_zero()) {
            return Err(HoloError::InvalidMap("all components vanish".into()));
        }
        let components = components
            .into_iter()
            .map(|mut p| {
                p.coeffs.resize(degree + 1, ZERO);
                p
            })
            .collect();
        Ok(SectionTuple { degree, components })
    }

    pub fn k(&self) -> usize {
        self.components.len() - 1
    }

    /// Concatenated coefficient vector.
    pub fn coefficient_vector(&self) -> Vec<C> {
        self.components.iter().flat_map(|p| p.coeffs.iter().copied()).collect()
    }

    pub fn from_coefficient_vector(v: &[C], k: usize, degree: usize) -> Self {
        let components = v.chunks(degree + 1).take(k + 1).map(|c| Poly::new(c.to_vec())).collect();
        SectionTuple { degree, components }
    }

    /// Divide by the coefficient of largest modulus (first on ties).
    pub fn normalized(&self) -> SectionTuple {
        let v = self.coefficient_vector();
        let max = v.iter().fold(0.0, |m: f64, c| m.max(c.norm()));
        let pivot = v.iter().find(|c| c.norm() >= max * (1.0 - 1e-12)).copied().unwrap_or(ONE);
        let inv = pivot.inv();
        SectionTuple {
            degree: self.degree,
            components: self.components.iter().map(|p| p.scale(inv)).collect(),
        }
    }

    pub fn values(&self, z: C) -> Vec<C> {
        self.components.iter().map(|p| p.eval(z)).collect()
    }

    /// Tuple in the chart `w = 1/z`: `w^r·f(1/w)`.
    pub fn at_infinity(&self) -> SectionTuple {
        SectionTuple {
            degree: self.degree,
            components: self.components.iter().map(|p| p.reversed(self.degree)).collect(),
        }
    }

    /// Values of the section tuple at a sphere point, in whichever
    /// standard chart keeps `|z| ≤ 1`. Returns `(values, z_in_chart)`.
    fn balanced_values(&self, z: Option<C>) -> (Vec<C>, Vec<C>, C) {
        match z {
            Some(z) if z.norm() <= 1.0 => {
                let (v, d): (Vec<C>, Vec<C>) = self.components.iter().map(|p| p.eval_d(z)).unzip();
                (v, d, z)
            }
            _ => {
                let w = z.map(|z| z.inv()).unwrap_or(ZERO);
                let rev = self.at_infinity();
                let (v, d): (Vec<C>, Vec<C>) = rev.components.iter().map(|p| p.eval_d(w)).unzip();
                (v, d, w)
            }
        }
    }

    /// Energy density per unit area at a point (`None` = ∞); the round
    /// metric is invariant under `z ↦ 1/z`, so the same formula serves
    /// both charts.
    pub fn density_at(&self, z: Option<C>) -> f64 {
        let (v, d, u) = self.balanced_values(z);
        let n2: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        let mut wedge = 0.0;
        for i in 0..v.len() {
            for j in (i + 1)..v.len() {
                wedge += (v[i] * d[j] - v[j] * d[i]).norm_sqr();
            }
        }
        let q = 1.0 + u.norm_sqr();
        q * q * wedge / (n2 * n2)
    }

    /// Chart density `(1/π)|f∧f′|²/|f|⁴` at a finite chart point.
    pub fn chart_density(&self, z: C) -> f64 {
        self.density_at(Some(z)) * sphere::area_density(z)
    }

    /// `log(Σ|f_i|²/(1+|z|²)^r)`, a global function on the sphere.
    pub fn log_norm(&self, z: Option<C>) -> f64 {
        let (v, _, u) = self.balanced_values(z);
        let n2: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        n2.ln() - self.degree as f64 * (1.0 + u.norm_sqr()).ln()
    }

    /// Point of ℂPᵏ at `z` as a unit vector.
    pub fn unit_value(&self, z: Option<C>) -> Vec<C> {
        let (v, _, _) = self.balanced_values(z);
        let n = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        v.into_iter().map(|c| c / n).collect()
    }

    /// Express the tuple in the isometric chart centred at `p`.
    pub fn recentered(&self, chart: &CenteredChart) -> SectionTuple {
        match *chart {
            CenteredChart::Infinity => self.at_infinity(),
            CenteredChart::Finite(a) => {
                // f((w+a)/(1−āw))·(1−āw)^r = Σ c_k (w+a)^k (1−āw)^{r−k}
                let num = Poly::new(vec![a, ONE]);
                let den = Poly::new(vec![ONE, -a.conj()]);
                let r = self.degree;
                let num_pows: Vec<Poly> = (0..=r).map(|k| num.pow(k)).collect();
                let den_pows: Vec<Poly> = (0..=r).map(|k| den.pow(k)).collect();
                let components = self
                    .components
                    .iter()
                    .map(|p| {
                        let mut acc = Poly::new(vec![ZERO; r + 1]);
                        for (k, &c) in p.coeffs.iter().enumerate() {
                            if c.norm() == 0.0 {
                                continue;
                            }
                            acc = acc.add(&num_pows[k].mul(&den_pows[r - k]).scale(c));
                        }
                        acc.coeffs.resize(r + 1, ZERO);
                        acc
                    })
                    .collect();
                SectionTuple { degree: r, components }
            }
        }
    }

    /// `f(b + y/t)` as a tuple in `y`.
    pub fn rescaled(&self, b: C, t: f64) -> SectionTuple {
        let a = C::new(1.0 / t, 0.0);
        SectionTuple {
            degree: self.degree,
            components: self
                .components
                .iter()
                .map(|p| {
                    let mut q = p.compose_affine(b, a);
                    q.coeffs.resize(self.degree + 1, ZERO);
                    q
                })
                .collect(),
        }
    }
}

/// Common zeros of all components, including the multiplicity at ∞.
pub fn common_zeros(f: &SectionTuple) -> ZeroSet {
    common_zeros_tol(f, GCD_TOL)
}

/// Relative gcd tolerance for a tuple known to accuracy `err`
/// (extrapolated limits).
pub fn limit_tolerance(err: f64) -> f64 {
    (100.0 * err).clamp(GCD_TOL, 1e-6)
}

fn tuple_gcd(f: &SectionTuple, tol: f64) -> Option<Poly> {
    let nonzero: Vec<&Poly> = f.components.iter().filter(|p| p.degree_tol(tol).is_some()).collect();
    let first = nonzero.first()?;
    Some(nonzero.iter().skip(1).fold(first.trimmed(tol), |acc, p| poly_gcd(&acc, p, tol)))
}

/// Divide out the common zeros (finite and at ∞) found at tolerance `tol`.
pub fn strip_gcd(f: &SectionTuple, tol: f64) -> Result<(ZeroSet, HoloMap)> {
    let zeros = common_zeros_tol(f, tol);
    let g = tuple_gcd(f, tol).ok_or_else(|| HoloError::InvalidMap("all components vanish".into()))?;
    let comps: Vec<Poly> = f
        .components
        .iter()
        .map(|p| if p.degree_tol(tol).is_none() { Poly::zero() } else { p.trimmed(tol).div_rem(&g, tol).0 })
        .collect();
    let degree = f.degree - zeros.total();
    Ok((zeros, HoloMap::new(comps, degree)?))
}

pub fn common_zeros_tol(f: &SectionTuple, tol: f64) -> ZeroSet {
    let nonzero: Vec<&Poly> = f.components.iter().filter(|p| p.degree_tol(tol).is_some()).collect();
    let Some(g) = tuple_gcd(f, tol) else {
        return ZeroSet::default();
    };
    let deficit = nonzero.iter().map(|p| f.degree - p.degree_tol(tol).unwrap()).min().unwrap_or(0);
    let mut points: Vec<(ChartPoint, usize)> = cluster_roots(&g.roots())
        .into_iter()
        .map(|(z, m)| (ChartPoint::finite(z), m))
        .collect();
    if deficit > 0 {
        points.push((ChartPoint::Infinity, deficit));
    }
    ZeroSet { points }
}

/// Merge numerically multiple roots into (centre, multiplicity).
pub fn cluster_roots(roots: &[C]) -> Vec<(C, usize)> {
    let mut out: Vec<(C, usize, C)> = Vec::new();
    for &z in roots {
        let radius = 1e-5 * (1.0 + z.norm());
        if let Some(c) = out.iter_mut().find(|c| (c.0 - z).norm() < radius) {
            c.2 += z;
            c.1 += 1;
            c.0 = c.2 / c.1 as f64;
        } else {
            out.push((z, 1, z));
        }
    }
    out.into_iter().map(|(z, m, _)| (z, m)).collect()
}

/// Validated holomorphic map: no common zeros, projectively normalized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoloMap(SectionTuple);

impl<'de> Deserialize<'de> for HoloMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let t = SectionTuple::deserialize(d)?;
        HoloMap::from_sections(t).map_err(serde::de::Error::custom)
    }
}

impl std::ops::Deref for HoloMap {
    type Target = SectionTuple;
    fn deref(&self) -> &SectionTuple {
        &self.0
    }
}

impl HoloMap {
    pub fn new(components: Vec<Poly>, degree: usize) -> Result<Self> {
        Self::from_sections(SectionTuple::new(components, degree)?)
    }

    pub fn from_sections(t: SectionTuple) -> Result<Self> {
        let t = SectionTuple::new(t.components, t.degree)?;
        let zeros = common_zeros(&t);
        if !zeros.is_empty() {
            return Err(HoloError::InvalidMap(format!("components share zeros {:?}", zeros.points)));
        }
        Ok(HoloMap(t.normalized()))
    }

    pub fn constant(values: &[C]) -> Result<Self> {
        Self::new(values.iter().map(|&v| Poly::constant(v)).collect(), 0)
    }

    pub fn sections(&self) -> &SectionTuple {
        &self.0
    }
}

/// Divisor/fiber correspondence: components with the given zeros whose
/// values at `base` are projectively `fiber`.
pub fn from_divisors(d: &DivisorTuple, base: C, fiber: &[C]) -> Result<HoloMap> {
    if d.len() < 2 || d.len() != fiber.len() {
        return Err(HoloError::InvalidMap("divisor and fiber tuples must have equal length ≥ 2".into()));
    }
    let r = d[0].degree();
    if d.iter().any(|di| di.degree() != r) {
        return Err(HoloError::InvalidMap("divisors must share one degree".into()));
    }
    if fiber.iter().any(|v| v.norm() == 0.0) {
        return Err(HoloError::InvalidMap("fiber values must be nonzero".into()));
    }
    for di in d {
        for a in di.points() {
            if (a - base).norm() <= 1e-12 * (1.0 + a.norm()) {
                return Err(HoloError::DegenerateFiber(base));
            }
        }
    }
    if d.iter().all(|di| di.at_infinity > 0) {
        return Err(HoloError::InvalidMap("every component vanishes at ∞".into()));
    }
    for a in d[0].points() {
        let shared = d[1..]
            .iter()
            .all(|di| di.points().iter().any(|b| (*b - a).norm() <= 1e-12 * (1.0 + a.norm())));
        if shared {
            return Err(HoloError::InvalidMap(format!("root {a} is common to every component")));
        }
    }
    let components = d
        .iter()
        .zip(fiber)
        .map(|(di, &v)| {
            let pts = di.points();
            let at_base = pts.iter().fold(ONE, |acc, &a| acc * (base - a));
            Poly::from_roots(&pts, v / at_base)
        })
        .collect();
    HoloMap::new(components, r)
}

/// Energy density per unit area on the grid.
pub fn energy_density(f: &HoloMap, grid: &GridRef) -> ScalarField {
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| f.density_at(Some(grid.chart_coord(i))))
        .collect();
    ScalarField::new(grid, values).expect("density of a valid map is finite")
}

/// Bookkeeping energy: the degree.
pub fn total_energy(f: &HoloMap) -> f64 {
    f.degree as f64
}

/// Energy by adaptive cubature over the two hemispherical chart discs.
pub fn numerical_energy(f: &SectionTuple, tol: f64) -> quad::Cubature {
    let south = |z: C| f.chart_density(z);
    let rev = f.at_infinity();
    let north = |w: C| rev.chart_density(w);
    let a = quad::disc(&south, ZERO, 1.0, 0.5 * tol);
    let b = quad::disc(&north, ZERO, 1.0, 0.5 * tol);
    quad::Cubature { value: a.value + b.value, error: a.error + b.error, evals: a.evals + b.evals }
}

/// Fubini–Study angle between coefficient vectors (projective distance).
pub fn projective_distance(a: &[C], b: &[C]) -> f64 {
    // |a ∧ b|/(|a||b|): no cancellation for nearby points
    let na: f64 = a.iter().map(|c| c.norm_sqr()).sum();
    let nb: f64 = b.iter().map(|c| c.norm_sqr()).sum();
    let mut wedge = 0.0;
    for i in 0..a.len() {
        for j in (i + 1)..a.len() {
            wedge += (a[i] * b[j] - a[j] * b[i]).norm_sqr();
        }
    }
    (wedge / (na * nb)).sqrt().min(1.0)
}

/// Fubini–Study chordal distance between two values in ℂPᵏ.
pub fn fs_distance(u: &[C], v: &[C]) -> f64 {
    projective_distance(u, v)
}

/// Root trajectory and fiber value for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub roots: Vec<String>,
    #[serde(default = "default_fiber")]
    pub fiber: String,
}

fn default_fiber() -> String {
    "1".to_string()
}

/// Scenario fragment describing a degenerating family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub delta: String,
    pub base_point: [f64; 2],
    pub components: Vec<ComponentSpec>,
}

fn parse(src: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|err| HoloError::Expr { src: src.to_string(), err })
}

fn is_infinity(src: &str) -> bool {
    matches!(src.trim(), "inf" | "infinity" | "∞")
}

impl FamilySpec {
    pub fn degree(&self) -> usize {
        self.components.first().map(|c| c.roots.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.len() < 2 {
            return Err(HoloError::Spec("a family needs at least two components".into()));
        }
        let r = self.degree();
        if self.components.iter().any(|c| c.roots.len() != r) {
            return Err(HoloError::Spec("every component needs the same number of roots".into()));
        }
        parse(&self.delta)?;
        for c in &self.components {
            parse(&c.fiber)?;
            for root in c.roots.iter().filter(|r| !is_infinity(r)) {
                parse(root)?;
            }
        }
        Ok(())
    }

    pub fn divisors_at(&self, delta: f64, s: f64) -> Result<DivisorTuple> {
        self.components
            .iter()
            .map(|c| {
                let mut pts = Vec::new();
                let mut inf = 0;
                for r in &c.roots {
                    if is_infinity(r) {
                        inf += 1;
                    } else {
                        pts.push(parse(r)?.eval(delta, s));
                    }
                }
                Ok(Divisor::new(&pts, inf))
            })
            .collect()
    }

    pub fn member(&self, s: f64) -> Result<(f64, DivisorTuple, HoloMap)> {
        let delta = parse(&self.delta)?.eval_real(0.0, s);
        let d = self.divisors_at(delta, s)?;
        let fiber: Vec<C> =
            self.components.iter().map(|c| parse(&c.fiber).map(|e| e.eval(delta, s))).collect::<Result<_>>()?;
        let base = C::new(self.base_point[0], self.base_point[1]);
        let f = from_divisors(&d, base, &fiber)?;
        Ok((delta, d, f))
    }
}

/// One-parameter family of maps over an `s` schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFamily {
    pub schedule: Vec<f64>,
    /// Degeneration parameter per member, tending to 0 (δ, or 1/scale).
    pub params: Vec<f64>,
    pub members: Vec<HoloMap>,
    pub divisors: Option<Vec<DivisorTuple>>,
    pub base_point: Option<[f64; 2]>,
}

impl MapFamily {
    pub fn from_spec(spec: &FamilySpec, schedule: &[f64]) -> Result<Self> {
        spec.validate()?;
        check_schedule(schedule)?;
        let built: Vec<(f64, DivisorTuple, HoloMap)> =
            schedule.par_iter().map(|&s| spec.member(s)).collect::<Result<_>>()?;
        let deltas: Vec<f64> = built.iter().map(|b| b.0).collect();
        let params = if degenerating(&deltas) { deltas } else { schedule.iter().map(|s| 1.0 / s).collect() };
        let (divisors, members) = built.into_iter().map(|(_, d, f)| (d, f)).unzip();
        let fam = MapFamily {
            schedule: schedule.to_vec(),
            params,
            members,
            divisors: Some(divisors),
            base_point: Some(spec.base_point),
        };
        fam.check_degree()?;
        Ok(fam)
    }

    pub fn from_members(schedule: &[f64], members: Vec<HoloMap>) -> Result<Self> {
        check_schedule(schedule)?;
        if members.len() != schedule.len() {
            return Err(HoloError::Spec("one member per schedule entry".into()));
        }
        let fam = MapFamily {
            schedule: schedule.to_vec(),
            params: schedule.iter().map(|s| 1.0 / s).collect(),
            members,
            divisors: None,
            base_point: None,
        };
        fam.check_degree()?;
        Ok(fam)
    }

    pub fn constant(schedule: &[f64], f: HoloMap) -> Result<Self> {
        Self::from_members(schedule, vec![f; schedule.len()])
    }

    fn check_degree(&self) -> Result<()> {
        let r = self.members[0].degree;
        let k = self.members[0].k();
        if self.members.iter().any(|m| m.degree != r || m.k() != k) {
            return Err(HoloError::Spec("degree and target dimension must be constant".into()));
        }
        Ok(())
    }

    pub fn degree(&self) -> usize {
        self.members[0].degree
    }
    pub fn k(&self) -> usize {
        self.members[0].k()
    }
    pub fn len(&self) -> usize {
        self.members.len()
    }
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
    pub fn last(&self) -> &HoloMap {
        self.members.last().expect("families are non-empty")
    }

    /// Coefficient-wise limit of the normalized members, extrapolated in
    /// the degeneration parameter. Returns the limit tuple (may have
    /// common zeros) and the extrapolation error estimate.
    pub fn coefficient_limit(&self) -> Result<(SectionTuple, f64)> {
        let last = self.last().coefficient_vector();
        let max = last.iter().fold(0.0, |m: f64, c| m.max(c.norm()));
        let pivot = last.iter().position(|c| c.norm() >= max * (1.0 - 1e-12)).unwrap_or(0);
        let n = self.members.len();
        let take = n.min(4);
        let vecs: Vec<Vec<C>> = self.members[n - take..]
            .iter()
            .map(|m| {
                let v = m.coefficient_vector();
                let p = v[pivot];
                v.iter().map(|c| c / p).collect()
            })
            .collect();
        let h = &self.params[n - take..];
        let dim = last.len();
        let mut limit = vec![ZERO; dim];
        let mut err: f64 = 0.0;
        for j in 0..dim {
            let ys: Vec<C> = vecs.iter().map(|v| v[j]).collect();
            let (v, e) = if take >= 2 { quad::extrapolate_to_zero(h, &ys) } else { (ys[0], 0.0) };
            limit[j] = if v.norm() < 1e-11 { ZERO } else { v };
            err = err.max(e);
        }
        if limit.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(HoloError::NonConvergence("coefficient limit is not finite".into()));
        }
        Ok((SectionTuple::from_coefficient_vector(&limit, self.k(), self.degree()), err))
    }
}

fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(HoloError::Spec("empty schedule".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HoloError::Spec("schedule must be strictly increasing".into()));
    }
    Ok(())
}

fn degenerating(deltas: &[f64]) -> bool {
    deltas.len() >= 2
        && deltas.iter().all(|d| *d > 0.0 && d.is_finite())
        && deltas.windows(2).all(|w| w[1] < w[0])
        && deltas[deltas.len() - 1] < 0.5 * deltas[0]
}

/// Concentration point with its energy, as consumed by stripping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomSite {
    pub point: ChartPoint,
    pub mass: f64,
}

impl AtomSite {
    pub fn multiplicity(&self) -> usize {
        self.mass.round().max(0.0) as usize
    }
}

/// Remove, from every component divisor, the roots coalescing at each atom.
pub fn strip_coalesced(fam: &MapFamily, atoms: &[AtomSite]) -> Result<MapFamily> {
    if atoms.is_empty() {
        return Ok(fam.clone());
    }
    let divisors = fam
        .divisors
        .as_ref()
        .ok_or_else(|| HoloError::Stratification("family carries no divisor data".into()))?;
    let base = fam
        .base_point
        .map(|b| C::new(b[0], b[1]))
        .ok_or_else(|| HoloError::Stratification("family carries no base point".into()))?;
    let capture = capture_radius(divisors.last().expect("non-empty"), atoms);
    let mut members = Vec::with_capacity(fam.len());
    let mut new_divs = Vec::with_capacity(fam.len());
    for (d, f) in divisors.iter().zip(&fam.members) {
        let fiber = f.values(base);
        let mut stripped = Vec::with_capacity(d.len());
        for (i, di) in d.iter().enumerate() {
            let mut pts: Vec<Option<C>> = di.points().into_iter().map(Some).collect();
            pts.extend(std::iter::repeat_n(None, di.at_infinity));
            for atom in atoms {
                let target = atom.point.value();
                for _ in 0..atom.multiplicity() {
                    let (idx, dist) = pts
                        .iter()
                        .enumerate()
                        .map(|(j, p)| (j, chordal(*p, target)))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .ok_or_else(|| HoloError::Stratification(format!("component {i} ran out of roots")))?;
                    if dist > capture {
                        return Err(HoloError::Stratification(format!(
                            "component {i} has no root within {capture:.3e} of atom {:?}",
                            atom.point
                        )));
                    }
                    pts.remove(idx);
                }
            }
            let finite: Vec<C> = pts.iter().flatten().copied().collect();
            let inf = pts.iter().filter(|p| p.is_none()).count();
            stripped.push(Divisor::new(&finite, inf));
        }
        members.push(from_divisors(&stripped, base, &fiber)?);
        new_divs.push(stripped);
    }
    Ok(MapFamily {
        schedule: fam.schedule.clone(),
        params: fam.params.clone(),
        members,
        divisors: Some(new_divs),
        base_point: fam.base_point,
    })
}

/// Half the smallest limiting distance between distinct atoms and between
/// atoms and the residual (non-captured) roots.
fn capture_radius(d: &DivisorTuple, atoms: &[AtomSite]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in atoms.iter().enumerate() {
        for b in &atoms[i + 1..] {
            best = best.min(chordal(a.point.value(), b.point.value()));
        }
    }
    for di in d {
        let mut pts: Vec<Option<C>> = di.points().into_iter().map(Some).collect();
        pts.extend(std::iter::repeat_n(None, di.at_infinity));
        let mut dist: Vec<f64> = pts
            .iter()
            .map(|p| atoms.iter().map(|a| chordal(*p, a.point.value())).fold(f64::INFINITY, f64::min))
            .collect();
        dist.sort_by(|a, b| a.total_cmp(b));
        let captured: usize = atoms.iter().map(|a| a.multiplicity()).sum();
        if let Some(&first_free) = dist.get(captured) {
            best = best.min(first_free);
        }
    }
    if best.is_finite() {
        0.5 * best
    } else {
        1.0
    }
}

/// Weak-* comparison for one test function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakStarCheck {
    pub test_function: String,
    pub family_integral: f64,
    pub limit_integral: f64,
    pub atom_contribution: f64,
    pub defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UhlenbeckLimit {
    pub bubble_divisor: ZeroSet,
    pub limit: HoloMap,
    pub used_strip: bool,
    pub extrapolation_error: f64,
    /// Sup FS distance between the (stripped) member and the limit away
    /// from the atoms, for the last members of the schedule.
    pub c1_distances: Vec<f64>,
    pub weak_star: Vec<WeakStarCheck>,
}

/// `∫ g·e(f)` for a real harmonic `g = Y_lm` through
/// `e = r − (1/4π)·Δ₊ log(|f|²/(1+|z|²)^r)`.
pub fn harmonic_moment(f: &SectionTuple, grid: &GridRef, l: usize, m: i64) -> f64 {
    let vals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.point(i);
            f.log_norm(p.chart()) * sphere::real_harmonic(l, m, p.theta, p.phi)
        })
        .collect();
    let u_moment: f64 = vals.iter().zip(grid.weights()).map(|(a, w)| a * w).sum();
    let mean_g = if l == 0 { 1.0 } else { 0.0 };
    f.degree as f64 * mean_g - (l * (l + 1)) as f64 * u_moment
}

/// Uhlenbeck limit `(E, f₀)` of a family with known atoms.
pub fn uhlenbeck_limit(fam: &MapFamily, atoms: &[AtomSite]) -> Result<UhlenbeckLimit> {
    let (limit_tuple, err_raw) = fam.coefficient_limit()?;
    let (zeros, limit) = strip_gcd(&limit_tuple, limit_tolerance(err_raw))?;
    // the detected atoms must match the gcd divisor
    let total_atoms: usize = atoms.iter().map(|a| a.multiplicity()).sum();
    if total_atoms != zeros.total() {
        return Err(HoloError::NonConvergence(format!(
            "detected atom masses sum to {total_atoms} but the limit divisor has degree {}",
            zeros.total()
        )));
    }
    for a in atoms {
        let hit = zeros.points.iter().any(|(p, m)| *m == a.multiplicity() && chordal(p.value(), a.point.value()) < 1e-3);
        if !hit {
            return Err(HoloError::NonConvergence(format!("atom {:?} is not a zero of the limit tuple", a.point)));
        }
    }
    let (compare, used_strip) = match strip_coalesced(fam, atoms) {
        Ok(s) => (s, !atoms.is_empty()),
        Err(HoloError::Stratification(_)) => (fam.clone(), false),
        Err(e) => return Err(e),
    };
    // C¹-type check on sample points away from the atoms
    let sample_grid = sphere::build_grid(24)?;
    let away: Vec<SpherePoint> = (0..sample_grid.len())
        .map(|i| sample_grid.point(i))
        .filter(|p| atoms.iter().all(|a| p.angle_to(&a.point.to_sphere()) > 0.2))
        .collect();
    let n = compare.len();
    let c1_distances: Vec<f64> = compare.members[n.saturating_sub(3)..]
        .iter()
        .map(|m| {
            away.iter()
                .map(|p| fs_distance(&m.unit_value(p.chart()), &limit.unit_value(p.chart())))
                .fold(0.0, f64::max)
        })
        .collect();
    let last = *c1_distances.last().unwrap_or(&0.0);
    let monotone = c1_distances.windows(2).all(|w| w[1] <= w[0] * 1.0001 + 1e-12);
    if last > 5e-2 || !monotone {
        return Err(HoloError::NonConvergence(format!("sup distance away from atoms: {c1_distances:?}")));
    }
    // weak-* check at the largest s
    let grid = sphere::build_grid(256)?;
    let f_last = fam.last();
    let tests: [(usize, i64, &str); 4] = [(0, 0, "Y00"), (1, 0, "Y10"), (1, 1, "Y11"), (2, 1, "Y21")];
    let weak_star = tests
        .iter()
        .map(|&(l, m, name)| {
            let fam_int = harmonic_moment(f_last, &grid, l, m);
            let lim_int = harmonic_moment(&limit, &grid, l, m);
            let atom_part: f64 = atoms
                .iter()
                .map(|a| {
                    let p = a.point.to_sphere();
                    a.mass * sphere::real_harmonic(l, m, p.theta, p.phi)
                })
                .sum();
            WeakStarCheck {
                test_function: name.to_string(),
                family_integral: fam_int,
                limit_integral: lim_int,
                atom_contribution: atom_part,
                defect: (fam_int - lim_int - atom_part).abs(),
            }
        })
        .collect();
    Ok(UhlenbeckLimit {
        bubble_divisor: zeros,
        limit,
        used_strip,
        extrapolation_error: err_raw,
        c1_distances,
        weak_star,
    })
}
