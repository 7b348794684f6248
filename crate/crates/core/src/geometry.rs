//! Strip partition of the torus, the cutoffs attached to the control region
//! and the visiting-time grid.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::TWO_PI;

/// Horizontal band `omega = T x (a, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub margin_fraction: f64,
    pub smoothstep_order: usize,
    pub max_k: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { margin_fraction: 0.125, smoothstep_order: 7, max_k: 512 }
    }
}

/// Odd-order polynomial smoothstep `S` with `S(0)=0`, `S(1)=1`,
/// `S(s) + S(1-s) = 1` and `(order-1)/2` vanishing derivatives at both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Smoothstep {
    q: usize,
    binom: Vec<f64>,
}

impl Smoothstep {
    pub fn new(order: usize) -> Result<Self> {
        if order < 1 || order % 2 == 0 {
            return Err(Error::InvalidArgument(format!("smoothstep order {order} must be odd")));
        }
        let q = (order - 1) / 2;
        // C(q + j, j)
        let binom = (0..=q)
            .map(|j| (1..=j).fold(1.0, |acc, i| acc * (q + i) as f64 / i as f64))
            .collect();
        Ok(Smoothstep { q, binom })
    }

    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= 1.0 {
            return 1.0;
        }
        let r = 1.0 - s;
        let mut acc = 0.0;
        let mut rp = 1.0;
        for b in &self.binom {
            acc += b * rp;
            rp *= r;
        }
        s.powi(self.q as i32 + 1) * acc
    }
}

/// Normalized bump `B(s) = s^q (1-s)^q / Beta(q+1, q+1)` on `[0,1]` with
/// unit integral, together with its antiderivative and derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    q: usize,
    /// coefficients of `B` as a polynomial in `s`
    poly: Vec<f64>,
}

impl Bump {
    pub fn new(q: usize) -> Self {
        // s^q (1-s)^q = sum_j C(q,j) (-1)^j s^(q+j)
        let mut poly = vec![0.0; 2 * q + 1];
        let mut c = 1.0;
        for j in 0..=q {
            poly[q + j] = if j % 2 == 0 { c } else { -c };
            c = c * (q - j) as f64 / (j + 1) as f64;
        }
        // 1 / Beta(q+1, q+1) = (2q+1)! / (q!)^2
        let mut norm = 1.0;
        for i in 1..=(2 * q + 1) {
            norm *= i as f64;
        }
        for i in 1..=q {
            norm /= (i * i) as f64;
        }
        poly.iter_mut().for_each(|p| *p *= norm);
        Bump { q, poly }
    }

    pub fn order(&self) -> usize {
        self.q
    }

    fn horner(c: &[f64], s: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &a| acc * s + a)
    }

    pub fn value(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 0.0;
        }
        Self::horner(&self.poly, s)
    }

    pub fn derivative(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 0.0;
        }
        let d: Vec<f64> = self.poly.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect();
        Self::horner(&d, s)
    }

    pub fn second_derivative(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 0.0;
        }
        let d: Vec<f64> =
            self.poly.iter().enumerate().skip(2).map(|(i, c)| c * (i * (i - 1)) as f64).collect();
        Self::horner(&d, s)
    }

    /// `int_0^s B`, clamped to `[0, 1]`.
    pub fn integral(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= 1.0 {
            return 1.0;
        }
        let mut acc = 0.0;
        let mut sp = s;
        for (i, c) in self.poly.iter().enumerate() {
            acc += c * sp / (i + 1) as f64;
            sp *= s;
        }
        acc
    }
}

/// Strip partition attached to a band.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub domain: Domain,
    pub h1: f64,
    pub h2: f64,
    pub k: usize,
    pub lk: f64,
    /// `(start, end)` of each strip in `[0, 2pi + lk/4)`.
    pub strips: Vec<(f64, f64)>,
    /// Reference strip `O = (h1 + lk, h1 + 2 lk)`.
    pub reference: (f64, f64),
    step: Smoothstep,
    bump: Bump,
}

pub fn build_partition(domain: Domain, cfg: &GeometryConfig) -> Result<Partition> {
    let (a, b) = (domain.a, domain.b);
    if !(a >= 0.0 && a < b && b <= TWO_PI) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidDomain { a, b });
    }
    if !(cfg.margin_fraction > 0.0 && cfg.margin_fraction < 0.5) {
        return Err(Error::InvalidArgument(format!("margin fraction {}", cfg.margin_fraction)));
    }
    let h1 = a + cfg.margin_fraction * (b - a);
    let h2 = b - cfg.margin_fraction * (b - a);
    let width = h2 - h1;
    // smallest K with 8 pi / (3K) < width / 3
    let mut k = (8.0 * std::f64::consts::PI / width).floor() as usize;
    while 8.0 * std::f64::consts::PI / (3.0 * k.max(1) as f64) >= width / 3.0 {
        k += 1;
    }
    let k = k.max(1);
    if k > cfg.max_k {
        return Err(Error::PartitionTooFine { k, max: cfg.max_k });
    }
    let lk = 8.0 * std::f64::consts::PI / (3.0 * k as f64);
    let strips = (0..k)
        .map(|i| {
            let s = 0.75 * i as f64 * lk;
            (s, s + lk)
        })
        .collect();
    Ok(Partition {
        domain,
        h1,
        h2,
        k,
        lk,
        strips,
        reference: (h1 + lk, h1 + 2.0 * lk),
        step: Smoothstep::new(cfg.smoothstep_order)?,
        bump: Bump::new(4),
    })
}

fn wrap(x: f64) -> f64 {
    x.rem_euclid(TWO_PI)
}

impl Partition {
    /// Cutoff `mu`, supported in `(0, lk)` and equal to one on
    /// `[lk/4, 3lk/4]`; its argument is taken modulo `2pi`.
    pub fn mu(&self, x: f64) -> f64 {
        let x = wrap(x);
        let q = 0.25 * self.lk;
        if x >= self.lk {
            0.0
        } else if x < q {
            self.step.eval(x / q)
        } else if x <= 3.0 * q {
            1.0
        } else {
            1.0 - self.step.eval((x - 3.0 * q) / q)
        }
    }

    /// `chi(x) = mu(x2 - h1 - lk)`, supported in the reference strip.
    pub fn chi(&self, x2: f64) -> f64 {
        self.mu(x2 - self.h1 - self.lk)
    }

    fn chi_tilde_arg(&self, x2: f64) -> Option<f64> {
        let x = wrap(x2);
        if x <= self.h1 || x >= self.h2 {
            None
        } else {
            Some((x - self.h1) / (self.h2 - self.h1))
        }
    }

    /// Bump in `(h1, h2)` with unit normalized mean.
    pub fn chi_tilde(&self, x2: f64) -> f64 {
        let s = TWO_PI / (self.h2 - self.h1);
        self.chi_tilde_arg(x2).map_or(0.0, |u| s * self.bump.value(u))
    }

    pub fn chi_tilde_prime(&self, x2: f64) -> f64 {
        let w = self.h2 - self.h1;
        self.chi_tilde_arg(x2).map_or(0.0, |u| TWO_PI / (w * w) * self.bump.derivative(u))
    }

    pub fn chi_tilde_second(&self, x2: f64) -> f64 {
        let w = self.h2 - self.h1;
        self.chi_tilde_arg(x2).map_or(0.0, |u| TWO_PI / (w * w * w) * self.bump.second_derivative(u))
    }

    /// Position of `x2` inside strip `i` (0-based), if it belongs to it.
    pub fn strip_coordinate(&self, i: usize, x2: f64) -> Option<f64> {
        let (s, _) = self.strips[i];
        let r = wrap(x2 - s);
        if r > 0.0 && r < self.lk {
            Some(r)
        } else {
            None
        }
    }

    /// Strips containing `x2` (0-based, increasing).
    pub fn memberships(&self, x2: f64) -> Vec<usize> {
        (0..self.k).filter(|&i| self.strip_coordinate(i, x2).is_some()).collect()
    }

    pub fn in_band(&self, x2: f64) -> bool {
        let x = wrap(x2);
        x > self.domain.a && x < self.domain.b
    }

    /// Fourier coefficient `(1/2pi) int chi(x2) e^{-i q x2} dx2`, by
    /// Gauss-Legendre on the polynomial pieces.
    pub fn chi_fourier(&self, q: i64) -> Complex64 {
        let (x, w) = gauss_legendre(16);
        let start = self.h1 + self.lk;
        let piece = 0.25 * self.lk;
        let sub = 4 + q.unsigned_abs() as usize / 8;
        let mut acc = Complex64::default();
        for p in 0..4 * sub {
            let a = start + piece * p as f64 / sub as f64;
            let half = 0.5 * piece / sub as f64;
            for (xi, wi) in x.iter().zip(&w) {
                let y = a + half * (1.0 + xi);
                acc += Complex64::from_polar(wi * half * self.chi(y), -(q as f64) * y);
            }
        }
        acc / TWO_PI
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid { k: self.k, t_delta: 1.0 / (3 * self.k + 2) as f64 }
    }
}

/// Visiting times on `[0, 1]`: strip `i` (1-based) is parked in the
/// reference strip on `[t_a^i, t_b^i]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub k: usize,
    pub t_delta: f64,
}

impl TimeGrid {
    pub fn t_a(&self, i: usize) -> f64 {
        (3 * i - 1) as f64 * self.t_delta
    }
    pub fn t_b(&self, i: usize) -> f64 {
        (3 * i) as f64 * self.t_delta
    }
    pub fn t_c(&self, i: usize) -> f64 {
        (3 * i + 1) as f64 * self.t_delta
    }
    /// Window index `i` (1-based) with `t` in `[t_a^i, t_b^i]`.
    pub fn window(&self, t: f64) -> Option<usize> {
        let i = ((t / self.t_delta + 1.0) / 3.0).floor();
        if i < 1.0 || i > self.k as f64 {
            return None;
        }
        let i = i as usize;
        if t >= self.t_a(i) && t <= self.t_b(i) {
            Some(i)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffReport {
    pub points: usize,
    pub partition_of_unity_error: f64,
    pub plateau_error: f64,
    pub support_violation: f64,
    pub chi_tilde_integral_error: f64,
    pub strip_overlap_ok: bool,
}

impl CutoffReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.partition_of_unity_error <= tol
            && self.plateau_error <= tol
            && self.support_violation <= tol
            && self.chi_tilde_integral_error <= 1e-10
            && self.strip_overlap_ok
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Checks the cutoff identities on `points` random abscissae.
pub fn verify_cutoffs(p: &Partition, points: usize, seed: u64) -> CutoffReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = 0.25 * p.lk;
    let mut pou = 0.0f64;
    let mut plateau = 0.0f64;
    let mut support = 0.0f64;
    let mut overlap_ok = true;
    for _ in 0..points {
        let x2: f64 = rng.gen_range(0.0..TWO_PI);
        let mem = p.memberships(x2);
        if mem.is_empty() || mem.len() > 2 {
            overlap_ok = false;
        }
        // sum over strips of mu(x2 - start_i) should be one
        let s: f64 = (0..p.k).map(|i| p.mu(x2 - p.strips[i].0)).sum();
        pou = pou.max((s - 1.0).abs());
        let y: f64 = rng.gen_range(0.0..p.lk);
        if (q..=3.0 * q).contains(&y) {
            plateau = plateau.max((p.mu(y) - 1.0).abs());
        }
        let r = x2 - p.reference.0;
        if wrap(r) >= p.lk {
            support = support.max(p.chi(x2).abs());
        }
        if !p.in_band(x2) {
            support = support.max(p.chi_tilde(x2).abs());
        }
    }
    // chi_tilde is polynomial on (h1, h2): Gauss-Legendre is exact
    let (gx, gw) = gauss_legendre(12);
    let half = 0.5 * (p.h2 - p.h1);
    let mid = 0.5 * (p.h2 + p.h1);
    let integral: f64 = gx.iter().zip(&gw).map(|(x, w)| w * half * p.chi_tilde(mid + half * x)).sum::<f64>() / TWO_PI;
    CutoffReport {
        points,
        partition_of_unity_error: pou,
        plateau_error: plateau,
        support_violation: support,
        chi_tilde_integral_error: (integral - 1.0).abs(),
        strip_overlap_ok: overlap_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn part() -> Partition {
        build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap()
    }

    #[test]
    fn strip_count_and_width() {
        let p = part();
        assert_eq!(p.k, 17);
        assert_abs_diff_eq!(p.lk, 8.0 * std::f64::consts::PI / 51.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.h1, 1.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.h2, 2.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p.time_grid().t_delta, 1.0 / 53.0, epsilon = 1e-16);
    }

    #[test]
    fn smoothstep_symmetry() {
        let s = Smoothstep::new(7).unwrap();
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            assert_abs_diff_eq!(s.eval(x) + s.eval(1.0 - x), 1.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(s.eval(0.5), 0.5, epsilon = 1e-15);
        assert!(Smoothstep::new(4).is_err());
    }

    #[test]
    fn bump_has_unit_mass() {
        for q in 1..7 {
            let b = Bump::new(q);
            assert_abs_diff_eq!(b.integral(1.0), 1.0, epsilon = 1e-15);
            let (x, w) = gauss_legendre(16);
            let m: f64 = x.iter().zip(&w).map(|(x, w)| 0.5 * w * b.value(0.5 * (x + 1.0))).sum();
            assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(Bump::new(4).value(0.5), 630.0 / 256.0, epsilon = 1e-12);
    }

    #[test]
    fn cutoff_identities() {
        let r = verify_cutoffs(&part(), 10_000, 5);
        assert!(r.passes(1e-12), "{r:?}");
    }

    #[test]
    fn rejects_bad_domain() {
        let c = GeometryConfig::default();
        assert!(build_partition(Domain { a: 2.0, b: 1.0 }, &c).is_err());
        assert!(build_partition(Domain { a: 0.0, b: 7.0 }, &c).is_err());
        let tight = GeometryConfig { max_k: 4, ..c };
        assert!(matches!(
            build_partition(Domain { a: 1.0, b: 3.0 }, &tight),
            Err(Error::PartitionTooFine { k: 17, .. })
        ));
    }

    #[test]
    fn windows() {
        let g = part().time_grid();
        assert_eq!(g.window(g.t_a(1) + 1e-6), Some(1));
        assert_eq!(g.window(g.t_c(1) + 1e-6), None);
        assert_eq!(g.window(g.t_a(17) + 1e-4), Some(17));
        assert_eq!(g.window(0.999), None);
    }
}
