//! Fourier representation of real fields on the torus `[0, 2pi)^2`.
//!
//! Coefficients use the normalized measure, so `f(x) = sum_k c_k e^{i k.x}`
//! and `||f||_0^2 = sum_k |c_k|^2`. Storage is row-major with rows indexed by
//! the `k2` slot and columns by the `k1` slot; physical samples are row-major
//! with rows along `x2`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Largest Sobolev index accepted by [`sobolev_norm`].
pub const SOBOLEV_CAP: usize = 6;

/// Mean coefficient tolerated by [`inverse_curl`].
pub const MEAN_TOL: f64 = 1e-13;

struct Plan {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize) -> Rc<Plan> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Rc::new(Plan { fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) })
            })
            .clone()
    })
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

fn fft2(buf: &mut [Complex64], n: usize, inverse: bool) {
    let p = plan(n);
    let f = if inverse { &p.inv } else { &p.fwd };
    f.process(buf);
    transpose(buf, n);
    f.process(buf);
    transpose(buf, n);
}

/// Signed wavenumber stored in slot `j`. The Nyquist slot reports `+n/2`.
#[inline]
pub fn wavenumber(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

#[inline]
pub fn is_nyquist(j: usize, n: usize) -> bool {
    j == n / 2
}

/// Slot for signed wavenumber `k`.
#[inline]
pub fn slot(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

/// Largest wavenumber kept by the 2/3 rule.
#[inline]
pub fn dealias_cut(n: usize) -> i64 {
    (n / 3) as i64
}

/// Physical coordinate of grid index `i`.
#[inline]
pub fn coord(i: usize, n: usize) -> f64 {
    TWO_PI * i as f64 / n as f64
}

pub fn check_grid(n: usize) -> Result<()> {
    if n < 4 || n % 2 != 0 {
        return Err(Error::InvalidGrid(n));
    }
    Ok(())
}

/// Sum over multi-indices `|alpha| <= m` of `k1^(2 a1) k2^(2 a2)`.
pub fn sobolev_weight(k1: f64, k2: f64, m: usize) -> f64 {
    let (a, b) = (k1 * k1, k2 * k2);
    let mut total = 0.0;
    for j in 0..=m {
        for a1 in 0..=j {
            total += a.powi(a1 as i32) * b.powi((j - a1) as i32);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    n: usize,
    c: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 4 && n % 2 == 0, "grid size must be even and >= 4");
        SpectralField { n, c: vec![Complex64::new(0.0, 0.0); n * n] }
    }

    pub fn from_coeffs(n: usize, c: Vec<Complex64>) -> Result<Self> {
        check_grid(n)?;
        if c.len() != n * n {
            return Err(Error::GridMismatch(n * n, c.len()));
        }
        Ok(SpectralField { n, c })
    }

    pub fn from_physical(n: usize, values: &[f64]) -> Result<Self> {
        check_grid(n)?;
        if values.len() != n * n {
            return Err(Error::GridMismatch(n * n, values.len()));
        }
        let mut c: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut c, n, false);
        let s = 1.0 / (n * n) as f64;
        c.iter_mut().for_each(|z| *z *= s);
        Ok(SpectralField { n, c })
    }

    /// Samples `f(x1, x2)` on the grid and transforms.
    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut v = vec![0.0; n * n];
        for i2 in 0..n {
            for i1 in 0..n {
                v[i2 * n + i1] = f(coord(i1, n), coord(i2, n));
            }
        }
        Self::from_physical(n, &v).expect("valid grid")
    }

    /// Single real mode `amp * cos(k.x + phase)`.
    pub fn mode(n: usize, k1: i64, k2: i64, amp: f64, phase: f64) -> Self {
        let mut f = Self::zeros(n);
        if k1 == 0 && k2 == 0 {
            f.c[0] = Complex64::new(amp * phase.cos(), 0.0);
            return f;
        }
        let z = Complex64::from_polar(0.5 * amp, phase);
        f.add_coeff(k1, k2, z);
        f.add_coeff(-k1, -k2, z.conj());
        f
    }

    /// Random real field with modes `0 < |k|_inf <= kmax` and zero mean.
    pub fn random_band_limited<R: Rng>(n: usize, kmax: i64, amp: f64, rng: &mut R) -> Self {
        let mut f = Self::zeros(n);
        for k2 in -kmax..=kmax {
            for k1 in -kmax..=kmax {
                if (k1, k2) <= (0, 0) {
                    continue;
                }
                let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * (0.5 * amp);
                f.add_coeff(k1, k2, z);
                f.add_coeff(-k1, -k2, z.conj());
            }
        }
        f
    }

    /// Random real field with modes `0 < |k| <= radius` (Euclidean) and
    /// zero mean.
    pub fn random_disk<R: Rng>(n: usize, radius: f64, amp: f64, rng: &mut R) -> Self {
        let mut f = Self::zeros(n);
        let r = radius.floor() as i64;
        for k2 in -r..=r {
            for k1 in -r..=r {
                if (k1, k2) <= (0, 0) || ((k1 * k1 + k2 * k2) as f64) > radius * radius {
                    continue;
                }
                let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * (0.5 * amp);
                f.add_coeff(k1, k2, z);
                f.add_coeff(-k1, -k2, z.conj());
            }
        }
        f
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.c
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.c
    }

    pub fn coeff(&self, k1: i64, k2: i64) -> Complex64 {
        self.c[slot(k2, self.n) * self.n + slot(k1, self.n)]
    }

    pub fn add_coeff(&mut self, k1: i64, k2: i64, z: Complex64) {
        let n = self.n;
        self.c[slot(k2, n) * n + slot(k1, n)] += z;
    }

    pub fn set_coeff(&mut self, k1: i64, k2: i64, z: Complex64) {
        let n = self.n;
        self.c[slot(k2, n) * n + slot(k1, n)] = z;
    }

    pub fn mean(&self) -> f64 {
        self.c[0].re
    }

    pub fn set_mean(&mut self, m: f64) {
        self.c[0] = Complex64::new(m, 0.0);
    }

    pub fn to_physical(&self) -> Vec<f64> {
        let mut c = self.c.clone();
        fft2(&mut c, self.n, true);
        c.iter().map(|z| z.re).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn same_grid(&self, other: &Self) -> Result<()> {
        if self.n != other.n {
            return Err(Error::GridMismatch(self.n, other.n));
        }
        Ok(())
    }

    /// Applies `m(k1, k2, j1, j2)` to every coefficient.
    pub fn map_k(&self, m: impl Fn(f64, f64, usize, usize) -> Complex64) -> Self {
        let n = self.n;
        let mut out = self.clone();
        for j2 in 0..n {
            let k2 = wavenumber(j2, n) as f64;
            for j1 in 0..n {
                let k1 = wavenumber(j1, n) as f64;
                out.c[j2 * n + j1] *= m(k1, k2, j1, j2);
            }
        }
        out
    }

    pub fn dx1(&self) -> Self {
        let n = self.n;
        self.map_k(|k1, _, j1, _| if is_nyquist(j1, n) { Complex64::default() } else { Complex64::new(0.0, k1) })
    }

    pub fn dx2(&self) -> Self {
        let n = self.n;
        self.map_k(|_, k2, _, j2| if is_nyquist(j2, n) { Complex64::default() } else { Complex64::new(0.0, k2) })
    }

    pub fn laplacian(&self) -> Self {
        self.map_k(|k1, k2, _, _| Complex64::new(-(k1 * k1 + k2 * k2), 0.0))
    }

    /// Zero-x1-mean antiderivative in `x1`; the `k1 = 0` part is dropped.
    pub fn antiderivative_x1(&self) -> Self {
        let n = self.n;
        self.map_k(|k1, _, j1, _| {
            if j1 == 0 || is_nyquist(j1, n) {
                Complex64::default()
            } else {
                Complex64::new(0.0, -1.0 / k1)
            }
        })
    }

    /// Part of the field with `k1 = 0` (the horizontal line means).
    pub fn line_mean_part(&self) -> Self {
        self.map_k(|_, _, j1, _| if j1 == 0 { Complex64::new(1.0, 0.0) } else { Complex64::default() })
    }

    /// Keeps only `|k_i| <= n/3`.
    pub fn dealias(&self) -> Self {
        let cut = dealias_cut(self.n) as f64;
        self.map_k(|k1, k2, _, _| {
            if k1.abs() <= cut && k2.abs() <= cut {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::default()
            }
        })
    }

    /// Keeps only `|k_i| <= kmax`.
    pub fn truncate(&self, kmax: i64) -> Self {
        let cut = kmax as f64;
        self.map_k(|k1, k2, _, _| {
            if k1.abs() <= cut && k2.abs() <= cut {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::default()
            }
        })
    }

    pub fn zero_nyquist(&mut self) {
        let n = self.n;
        let h = n / 2;
        for j in 0..n {
            self.c[h * n + j] = Complex64::default();
            self.c[j * n + h] = Complex64::default();
        }
    }

    /// Composition with `x -> x + d e2`, i.e. `f(x1, x2 + d)`.
    pub fn shift_vertical(&self, d: f64) -> Self {
        let n = self.n;
        let mut out = self.clone();
        for j2 in 0..n {
            let ph = if is_nyquist(j2, n) {
                Complex64::new((0.5 * n as f64 * d).cos(), 0.0)
            } else {
                Complex64::from_polar(1.0, wavenumber(j2, n) as f64 * d)
            };
            for z in &mut out.c[j2 * n..(j2 + 1) * n] {
                *z *= ph;
            }
        }
        out
    }

    /// Pointwise product with a physical-space profile sampled on the grid.
    pub fn mul_physical(&self, profile: &[f64]) -> Self {
        let n = self.n;
        let mut v = self.to_physical();
        for (a, b) in v.iter_mut().zip(profile) {
            *a *= b;
        }
        Self::from_physical(n, &v).expect("same grid")
    }

    /// Pointwise product with a profile depending on `x2` only.
    pub fn mul_profile_x2(&self, profile: &[f64]) -> Self {
        let n = self.n;
        let mut v = self.to_physical();
        for i2 in 0..n {
            for a in &mut v[i2 * n..(i2 + 1) * n] {
                *a *= profile[i2];
            }
        }
        Self::from_physical(n, &v).expect("same grid")
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.c.iter_mut().for_each(|z| *z *= s);
        out
    }

    pub fn scale_mut(&mut self, s: f64) {
        self.c.iter_mut().for_each(|z| *z *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += b * s;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// `sum_k w(k) |c_k|^2` for a nonnegative weight.
    pub fn weighted_sq(&self, w: impl Fn(f64, f64) -> f64) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for j2 in 0..n {
            let k2 = wavenumber(j2, n) as f64;
            for j1 in 0..n {
                s += w(wavenumber(j1, n) as f64, k2) * self.c[j2 * n + j1].norm_sqr();
            }
        }
        s
    }

    pub fn l2(&self) -> f64 {
        self.c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.c.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `||f||_m` with the exact multi-index weight.
    pub fn norm(&self, m: usize) -> f64 {
        self.weighted_sq(|k1, k2| sobolev_weight(k1, k2, m)).sqrt()
    }

    /// Trigonometric interpolant at one point; Nyquist slots use `cos`.
    pub fn eval_point(&self, x: [f64; 2]) -> f64 {
        let n = self.n;
        let e1 = axis_factors(x[0], n);
        let e2 = axis_factors(x[1], n);
        let mut acc = Complex64::default();
        for j2 in 0..n {
            let row = &self.c[j2 * n..(j2 + 1) * n];
            let mut r = Complex64::default();
            for j1 in 0..n {
                r += row[j1] * e1[j1];
            }
            acc += r * e2[j2];
        }
        acc.re
    }
}

fn axis_factors(x: f64, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|j| {
            if is_nyquist(j, n) {
                Complex64::new((0.5 * n as f64 * x).cos(), 0.0)
            } else {
                Complex64::from_polar(1.0, wavenumber(j, n) as f64 * x)
            }
        })
        .collect()
}

/// Velocity field stored as two spectral components; the `(0,0)` slots carry
/// the mean velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub u1: SpectralField,
    pub u2: SpectralField,
}

impl VelocityField {
    pub fn mean(&self) -> [f64; 2] {
        [self.u1.mean(), self.u2.mean()]
    }

    pub fn divergence(&self) -> SpectralField {
        self.u1.dx1().add(&self.u2.dx2())
    }

    /// Largest pointwise speed on the grid.
    pub fn max_speed(&self) -> f64 {
        let a = self.u1.to_physical();
        let b = self.u2.to_physical();
        a.iter().zip(&b).map(|(x, y)| (x * x + y * y).sqrt()).fold(0.0, f64::max)
    }
}

/// `curl u = d1 u2 - d2 u1`.
pub fn curl(u: &VelocityField) -> Result<SpectralField> {
    u.u1.same_grid(&u.u2)?;
    Ok(u.u2.dx1().sub(&u.u1.dx2()))
}

/// Divergence-free velocity with curl `z` and mean `a`.
pub fn inverse_curl(z: &SpectralField, a: [f64; 2]) -> Result<VelocityField> {
    let m = z.coeffs()[0].norm();
    if m > MEAN_TOL {
        return Err(Error::NonzeroMean(m));
    }
    let n = z.n();
    // stream function: -Lap psi = z
    let psi = z.map_k(|k1, k2, _, _| {
        let k = k1 * k1 + k2 * k2;
        if k == 0.0 {
            Complex64::default()
        } else {
            Complex64::new(1.0 / k, 0.0)
        }
    });
    let mut u1 = psi.dx2();
    let mut u2 = psi.dx1().scale(-1.0);
    u1.set_mean(a[0]);
    u2.set_mean(a[1]);
    debug_assert_eq!(u1.n(), n);
    Ok(VelocityField { u1, u2 })
}

pub fn sobolev_norm(f: &SpectralField, m: usize) -> Result<f64> {
    if m > SOBOLEV_CAP {
        return Err(Error::SobolevIndex { m, cap: SOBOLEV_CAP });
    }
    Ok(f.norm(m))
}

/// Product of two fields with 2/3-rule truncation of inputs and output.
pub fn dealiased_product(f: &SpectralField, g: &SpectralField) -> Result<SpectralField> {
    f.same_grid(g)?;
    let n = f.n();
    let a = f.dealias().to_physical();
    let b = g.dealias().to_physical();
    let p: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    Ok(SpectralField::from_physical(n, &p)?.dealias())
}

/// Trigonometric interpolant at arbitrary points.
pub fn evaluate(f: &SpectralField, points: &[[f64; 2]]) -> Vec<f64> {
    if points.len() < 64 {
        points.iter().map(|&p| f.eval_point(p)).collect()
    } else {
        points.par_iter().map(|&p| f.eval_point(p)).collect()
    }
}

pub fn shift_vertical(f: &SpectralField, d: f64) -> SpectralField {
    f.shift_vertical(d)
}

/// Grid points in storage order.
pub fn grid_points(n: usize) -> Vec<[f64; 2]> {
    let mut v = Vec::with_capacity(n * n);
    for i2 in 0..n {
        for i1 in 0..n {
            v.push([coord(i1, n), coord(i2, n)]);
        }
    }
    v
}
