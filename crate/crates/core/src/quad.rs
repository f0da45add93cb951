//! Adaptive cubature on chart discs and annuli.
//!
//! Concentrated densities (bubbles of width 1e−6 in the chart) are far
//! beyond any fixed grid, so disc energies are integrated by globally
//! adaptive tensor Gauss–Legendre on polar rectangles.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use num_complex::Complex64;

use crate::sphere::gauss_legendre;

const ORDER: usize = 7;
const MAX_EVALS: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cubature {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
}

impl Cubature {
    pub fn converged(&self, tol: f64) -> bool {
        self.error <= tol
    }
}

#[derive(Clone, Copy)]
struct Rect {
    r0: f64,
    r1: f64,
    t0: f64,
    t1: f64,
    value: f64,
    error: f64,
    seq: usize,
}

impl PartialEq for Rect {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Rect {}
impl PartialOrd for Rect {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Rect {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error).then(other.seq.cmp(&self.seq))
    }
}

struct Rule {
    x: Vec<f64>,
    w: Vec<f64>,
}

impl Rule {
    fn new() -> Self {
        let (x, w) = gauss_legendre(ORDER);
        Rule { x, w }
    }

    fn apply(&self, f: &dyn Fn(Complex64) -> f64, c: Complex64, r0: f64, r1: f64, t0: f64, t1: f64) -> f64 {
        let (rm, rh) = (0.5 * (r0 + r1), 0.5 * (r1 - r0));
        let (tm, th) = (0.5 * (t0 + t1), 0.5 * (t1 - t0));
        let mut acc = 0.0;
        for (xi, wi) in self.x.iter().zip(&self.w) {
            let rho = rm + rh * xi;
            let mut ring = 0.0;
            for (xj, wj) in self.x.iter().zip(&self.w) {
                let th_ = tm + th * xj;
                ring += wj * f(c + Complex64::from_polar(rho, th_));
            }
            acc += wi * rho * ring;
        }
        acc * rh * th
    }
}

/// `∫ f(z) dx dy` over the annulus `r_in ≤ |z − c| ≤ r_out`, with `f` a
/// chart density. Radial breakpoints are geometric towards `r_in` so that
/// structure at the centre is found without a priori knowledge.
pub fn annulus(f: &dyn Fn(Complex64) -> f64, c: Complex64, r_in: f64, r_out: f64, tol: f64) -> Cubature {
    assert!(r_out > r_in && r_in >= 0.0);
    let rule = Rule::new();
    let mut radial = vec![r_out];
    let floor = if r_in > 0.0 { r_in } else { r_out * 1e-9 };
    let mut r = r_out;
    while r * 0.25 > floor {
        r *= 0.25;
        radial.push(r);
    }
    radial.push(r_in);
    radial.reverse();
    let n_theta = 8;
    let mut evals = 0usize;
    let mut seq = 0usize;
    let mut heap = BinaryHeap::new();
    let eval_rect = |r0: f64, r1: f64, t0: f64, t1: f64, evals: &mut usize, seq: &mut usize| -> Rect {
        let whole = rule.apply(f, c, r0, r1, t0, t1);
        let (rm, tm) = (0.5 * (r0 + r1), 0.5 * (t0 + t1));
        let split = rule.apply(f, c, r0, rm, t0, tm)
            + rule.apply(f, c, rm, r1, t0, tm)
            + rule.apply(f, c, r0, rm, tm, t1)
            + rule.apply(f, c, rm, r1, tm, t1);
        *evals += 5 * ORDER * ORDER;
        *seq += 1;
        Rect { r0, r1, t0, t1, value: split, error: (split - whole).abs(), seq: *seq }
    };
    for w in radial.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        for k in 0..n_theta {
            let t0 = 2.0 * PI * k as f64 / n_theta as f64;
            let t1 = 2.0 * PI * (k + 1) as f64 / n_theta as f64;
            heap.push(eval_rect(w[0], w[1], t0, t1, &mut evals, &mut seq));
        }
    }
    loop {
        let total_err: f64 = heap.iter().map(|r| r.error).sum();
        if total_err <= tol || evals >= MAX_EVALS {
            break;
        }
        let worst = heap.pop().expect("non-empty");
        let (rm, tm) = (0.5 * (worst.r0 + worst.r1), 0.5 * (worst.t0 + worst.t1));
        for (a, b, c0, d) in [
            (worst.r0, rm, worst.t0, tm),
            (rm, worst.r1, worst.t0, tm),
            (worst.r0, rm, tm, worst.t1),
            (rm, worst.r1, tm, worst.t1),
        ] {
            heap.push(eval_rect(a, b, c0, d, &mut evals, &mut seq));
        }
    }
    // fixed summation order for reproducibility
    let mut rects = heap.into_vec();
    rects.sort_by_key(|r| r.seq);
    let value = rects.iter().map(|r| r.value).sum();
    let error = rects.iter().map(|r| r.error).sum();
    Cubature { value, error, evals }
}

pub fn disc(f: &dyn Fn(Complex64) -> f64, c: Complex64, radius: f64, tol: f64) -> Cubature {
    annulus(f, c, 0.0, radius, tol)
}

/// Trapezoidal mean of `f` on the circle `|z − c| = r`, refined by doubling
/// until two consecutive estimates agree to `tol`.
pub fn circle_mean(f: &dyn Fn(Complex64) -> f64, c: Complex64, r: f64, tol: f64) -> f64 {
    let mut n = 32usize;
    let sample = |n: usize, offset: bool| -> f64 {
        let shift = if offset { 0.5 } else { 0.0 };
        (0..n)
            .map(|k| f(c + Complex64::from_polar(r, 2.0 * PI * (k as f64 + shift) / n as f64)))
            .sum::<f64>()
    };
    let mut sum = sample(n, false);
    let mut mean = sum / n as f64;
    while n < (1 << 20) {
        sum += sample(n, true);
        n *= 2;
        let next = sum / n as f64;
        let done = (next - mean).abs() <= tol * (1.0 + next.abs());
        mean = next;
        if done {
            break;
        }
    }
    mean
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Neville extrapolation of samples `(h_i, y_i)` to `h = 0`, returning the
/// value and the change from dropping the point farthest from zero.
pub fn extrapolate_to_zero(h: &[f64], y: &[Complex64]) -> (Complex64, f64) {
    let n = h.len();
    let neville = |hs: &[f64], ys: &[Complex64]| -> Complex64 {
        let mut p: Vec<Complex64> = ys.to_vec();
        let m = hs.len();
        for level in 1..m {
            for i in 0..m - level {
                let (hi, hj) = (hs[i], hs[i + level]);
                p[i] = (p[i + 1] * hi - p[i] * hj) / (hi - hj);
            }
        }
        p[0]
    };
    if n == 1 {
        return (y[0], f64::INFINITY);
    }
    let full = neville(h, y);
    // order samples so index 0 is the farthest from zero
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| h[b].abs().total_cmp(&h[a].abs()));
    let hs: Vec<f64> = idx[1..].iter().map(|&i| h[i]).collect();
    let ys: Vec<Complex64> = idx[1..].iter().map(|&i| y[i]).collect();
    let reduced = neville(&hs, &ys);
    (full, (full - reduced).norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaked_density_mass() {
        // chart mass of [z−δ : z+δ] inside radius R: R²/(R²+δ²)
        for delta in [1e-1, 1e-3, 1e-6] {
            let f = move |z: Complex64| {
                let d = z.norm_sqr() + delta * delta;
                delta * delta / (PI * d * d)
            };
            let r = 0.05;
            let res = disc(&f, Complex64::new(0.0, 0.0), r, 1e-11);
            let exact = r * r / (r * r + delta * delta);
            assert!((res.value - exact).abs() < 1e-10, "δ={delta}: {} vs {exact}", res.value);
        }
    }

    #[test]
    fn off_centre_peak() {
        let delta = 1e-3;
        let p = Complex64::new(0.3, -0.2);
        let f = move |z: Complex64| {
            let d = (z - p).norm_sqr() + delta * delta;
            delta * delta / (PI * d * d)
        };
        let res = disc(&f, Complex64::new(0.0, 0.0), 1.0, 1e-10);
        // outside mass: (δ²/π)∫_{|z|>1}|z−p|⁻⁴ = δ²/(1−|p|²)² up to O(δ⁴)
        let exact = 1.0 - delta * delta / (1.0 - p.norm_sqr()).powi(2);
        assert!((res.value - exact).abs() < 1e-9, "{} vs {exact}", res.value);
    }

    #[test]
    fn neville_recovers_polynomial_limit() {
        let h = [0.1, 0.05, 0.025, 0.0125];
        let y: Vec<Complex64> = h.iter().map(|x| Complex64::new(2.0 + 3.0 * x - x * x, 0.0)).collect();
        let (v, err) = extrapolate_to_zero(&h, &y);
        assert!((v.re - 2.0).abs() < 1e-12 && err < 1e-10);
    }

    #[test]
    fn slope_fit() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 3.0, 5.0];
        let (m, b) = linear_fit(&x, &y);
        assert!((m - 2.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
    }
}
