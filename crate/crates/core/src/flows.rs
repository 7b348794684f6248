//! Vertical convection strategy, its flow, and the generating field used for
//! transport controllability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gauss_legendre, Bump, Partition, TimeGrid};
use crate::spectral::TWO_PI;

/// Reduces an angle to `(-pi, pi]`.
pub fn principal(x: f64) -> f64 {
    let r = x.rem_euclid(TWO_PI);
    if r > std::f64::consts::PI {
        r - TWO_PI
    } else {
        r
    }
}

/// Piecewise vertical drift `[0, y2(t)]` that shifts strip `i` into the
/// reference strip, parks it there for `[t_a^i, t_b^i]` and shifts it back.
#[derive(Clone, Debug, PartialEq)]
pub struct Convection {
    pub grid: TimeGrid,
    /// Shift amounts `c_i` in `(-pi, pi]`.
    pub shifts: Vec<f64>,
    bump: Bump,
}

enum Phase {
    Idle,
    Shift(usize, f64),
    Park(usize),
    Unshift(usize, f64),
}

pub fn build_convection(p: &Partition, bump_order: usize) -> Result<Convection> {
    if bump_order < 2 {
        return Err(Error::InvalidArgument(format!("bump order {bump_order} too small")));
    }
    let shifts = (0..p.k).map(|i| principal(p.h1 + p.lk - 0.75 * i as f64 * p.lk)).collect();
    Ok(Convection { grid: p.time_grid(), shifts, bump: Bump::new(bump_order) })
}

impl Convection {
    fn phase(&self, t: f64) -> Phase {
        let td = self.grid.t_delta;
        if !(t > td) || t >= 1.0 - td {
            return Phase::Idle;
        }
        let j = (t / td).floor() as usize;
        let loc = t / td - j as f64;
        match j % 3 {
            1 => Phase::Shift((j + 2) / 3, loc),
            2 => Phase::Park((j + 1) / 3),
            _ => Phase::Unshift(j / 3, loc),
        }
    }

    fn c(&self, i: usize) -> f64 {
        self.shifts[i - 1]
    }

    /// Vertical velocity `y2(t)`.
    pub fn y2(&self, t: f64) -> f64 {
        let td = self.grid.t_delta;
        match self.phase(t) {
            Phase::Shift(i, s) => self.c(i) * self.bump.value(s) / td,
            Phase::Unshift(i, s) => -self.c(i) * self.bump.value(s) / td,
            _ => 0.0,
        }
    }

    pub fn y2_prime(&self, t: f64) -> f64 {
        let td = self.grid.t_delta;
        match self.phase(t) {
            Phase::Shift(i, s) => self.c(i) * self.bump.derivative(s) / (td * td),
            Phase::Unshift(i, s) => -self.c(i) * self.bump.derivative(s) / (td * td),
            _ => 0.0,
        }
    }

    pub fn y2_second(&self, t: f64) -> f64 {
        let td = self.grid.t_delta;
        match self.phase(t) {
            Phase::Shift(i, s) => self.c(i) * self.bump.second_derivative(s) / (td * td * td),
            Phase::Unshift(i, s) => -self.c(i) * self.bump.second_derivative(s) / (td * td * td),
            _ => 0.0,
        }
    }

    /// Displacement `D(t) = int_0^t y2`.
    pub fn displacement(&self, t: f64) -> f64 {
        match self.phase(t) {
            Phase::Idle => 0.0,
            Phase::Shift(i, s) => self.c(i) * self.bump.integral(s),
            Phase::Park(i) => self.c(i),
            Phase::Unshift(i, s) => self.c(i) * (1.0 - self.bump.integral(s)),
        }
    }

    /// Largest `|y2|`.
    pub fn max_speed(&self) -> f64 {
        let peak = self.bump.value(0.5);
        self.shifts.iter().fold(0.0f64, |m, c| m.max(c.abs())) * peak / self.grid.t_delta
    }
}

/// `Y(x, s, t)`: position at time `t` of the particle at `x` at time `s`.
pub fn flow_y(c: &Convection, x: [f64; 2], s: f64, t: f64) -> [f64; 2] {
    [x[0], x[1] + c.displacement(t) - c.displacement(s)]
}

/// Sawtooth that runs from 0 to 1 across every parking window.
pub fn sigma(g: &TimeGrid, t: f64) -> f64 {
    match g.window(t) {
        Some(i) => (t - g.t_a(i)) / g.t_delta,
        None => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiChoice {
    /// `psi_l = A (1 - t) int_0^t cos(2 pi l s) ds`.
    Trig,
    /// Cycle of single-component shears with bump-shaped amplitude.
    Staged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub substeps: usize,
    pub phi_choice: PhiChoice,
    pub bump_order: usize,
    /// Scale `A` of the generating field; for the staged choice it is the
    /// displacement produced by one shear.
    pub amplitude: f64,
    /// Number of shear stages for the staged choice.
    pub stages: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { substeps: 256, phi_choice: PhiChoice::Staged, bump_order: 4, amplitude: 0.5, stages: 64 }
    }
}

/// Stage order of the staged field: `psi_1, psi_3, psi_2, psi_4`.
const STAGE_ORDER: [usize; 4] = [0, 2, 1, 3];

/// Divergence-free field
/// `[psi1 sin(x1+x2) + psi2 cos(x1+x2), psi3 sin x1 + psi4 cos x1 - psi1 sin(x1+x2) - psi2 cos(x1+x2)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratingField {
    pub choice: PhiChoice,
    pub amplitude: f64,
    pub stages: usize,
    bump: Bump,
}

impl GeneratingField {
    pub fn new(cfg: &FlowConfig) -> Result<Self> {
        if cfg.stages == 0 || !cfg.amplitude.is_finite() {
            return Err(Error::InvalidArgument("generating field needs stages > 0 and finite amplitude".into()));
        }
        Ok(GeneratingField { choice: cfg.phi_choice, amplitude: cfg.amplitude, stages: cfg.stages, bump: Bump::new(4) })
    }

    /// Coefficients `psi_1..psi_4` at time `t`.
    pub fn psi(&self, t: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        if !(0.0..=1.0).contains(&t) {
            return out;
        }
        match self.choice {
            PhiChoice::Trig => {
                for (l, o) in out.iter_mut().enumerate() {
                    let w = TWO_PI * (l + 1) as f64;
                    *o = self.amplitude * (1.0 - t) * (w * t).sin() / w;
                }
            }
            PhiChoice::Staged => {
                let ns = self.stages as f64;
                let k = ((t * ns).floor() as usize).min(self.stages - 1);
                let loc = t * ns - k as f64;
                let sign = if (k / 4) % 2 == 0 { 1.0 } else { -1.0 };
                out[STAGE_ORDER[k % 4]] = sign * self.amplitude * ns * self.bump.value(loc);
            }
        }
        out
    }

    /// Observable family `phi_l` with `psi_l = phi(t) int_0^t phi_l`.
    pub fn phi_l(&self, t: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        match self.choice {
            PhiChoice::Trig => {
                for (l, o) in out.iter_mut().enumerate() {
                    *o = self.amplitude * (TWO_PI * (l + 1) as f64 * t).cos();
                }
            }
            PhiChoice::Staged => {
                let ns = self.stages as f64;
                let k = ((t * ns).floor() as usize).min(self.stages - 1);
                let loc = t * ns - k as f64;
                let sign = if (k / 4) % 2 == 0 { 1.0 } else { -1.0 };
                out[STAGE_ORDER[k % 4]] = sign * self.amplitude * ns * ns * self.bump.derivative(loc);
            }
        }
        out
    }

    pub fn velocity(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let p = self.psi(t);
        let (s12, c12) = (x[0] + x[1]).sin_cos();
        let (s1, c1) = x[0].sin_cos();
        let u1 = p[0] * s12 + p[1] * c12;
        [u1, p[2] * s1 + p[3] * c1 - u1]
    }

    /// Characteristic breakpoints: stage boundaries for the staged choice.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self.choice {
            PhiChoice::Trig => vec![0.0, 1.0],
            PhiChoice::Staged => (0..=self.stages).map(|k| k as f64 / self.stages as f64).collect(),
        }
    }
}

/// One RK4 step of the characteristic ODE.
#[inline]
pub fn rk4_step(g: &GeneratingField, x: [f64; 2], t: f64, h: f64) -> [f64; 2] {
    let add = |a: [f64; 2], b: [f64; 2], s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
    let k1 = g.velocity(x, t);
    let k2 = g.velocity(add(x, k1, 0.5 * h), t + 0.5 * h);
    let k3 = g.velocity(add(x, k2, 0.5 * h), t + 0.5 * h);
    let k4 = g.velocity(add(x, k3, h), t + h);
    [
        x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// `U(x, s, t)` by `substeps` RK4 steps from `s` to `t` (either direction).
pub fn flow_u(g: &GeneratingField, x: [f64; 2], s: f64, t: f64, substeps: usize) -> [f64; 2] {
    let m = substeps.max(1);
    let h = (t - s) / m as f64;
    let mut y = x;
    for i in 0..m {
        y = rk4_step(g, y, s + i as f64 * h, h);
    }
    y
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramReport {
    pub gram: [[f64; 4]; 4],
    pub condition: f64,
}

/// Builds the generating field and the conditioning of the time Gram matrix
/// of its observable family on `[0, 1]`.
pub fn build_generating(cfg: &FlowConfig) -> Result<(GeneratingField, GramReport)> {
    let g = GeneratingField::new(cfg)?;
    let (x, w) = gauss_legendre(8);
    let bp = g.breakpoints();
    let mut gram = [[0.0; 4]; 4];
    let sub = if bp.len() > 2 { 1 } else { 64 };
    for seg in bp.windows(2) {
        for p in 0..sub {
            let a = seg[0] + (seg[1] - seg[0]) * p as f64 / sub as f64;
            let b = seg[0] + (seg[1] - seg[0]) * (p + 1) as f64 / sub as f64;
            for (xi, wi) in x.iter().zip(&w) {
                let t = 0.5 * (a + b) + 0.5 * (b - a) * xi;
                let f = g.phi_l(t);
                for i in 0..4 {
                    for j in 0..4 {
                        gram[i][j] += 0.5 * (b - a) * wi * f[i] * f[j];
                    }
                }
            }
        }
    }
    let m = nalgebra::Matrix4::from_fn(|i, j| gram[i][j]);
    let ev = m.symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Ok((g, GramReport { gram, condition }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_partition, Domain, GeometryConfig};
    use approx::assert_abs_diff_eq;

    fn conv() -> Convection {
        let p = build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap();
        build_convection(&p, 4).unwrap()
    }

    #[test]
    fn first_shift_amount() {
        let c = conv();
        assert_abs_diff_eq!(c.shifts[0], 1.25 + 8.0 * std::f64::consts::PI / 51.0, epsilon = 1e-14);
        assert!(c.shifts.iter().all(|s| s.abs() <= std::f64::consts::PI));
    }

    #[test]
    fn displacement_returns_to_zero() {
        let c = conv();
        assert_eq!(c.displacement(1.0), 0.0);
        for i in 1..=c.grid.k {
            assert_abs_diff_eq!(c.displacement(c.grid.t_c(i)), 0.0, epsilon = 1e-13);
            let m = 0.5 * (c.grid.t_a(i) + c.grid.t_b(i));
            assert_eq!(c.displacement(m), c.shifts[i - 1]);
        }
    }

    #[test]
    fn displacement_matches_quadrature() {
        let c = conv();
        let (x, w) = gauss_legendre(10);
        let td = c.grid.t_delta;
        let mut acc = 0.0;
        for j in 0..53 {
            let (a, b) = (j as f64 * td, (j + 1) as f64 * td);
            for (xi, wi) in x.iter().zip(&w) {
                acc += 0.5 * (b - a) * wi * c.y2(0.5 * (a + b) + 0.5 * (b - a) * xi);
            }
            assert_abs_diff_eq!(acc, c.displacement(b), epsilon = 1e-11);
        }
    }

    #[test]
    fn sigma_runs_over_windows() {
        let g = conv().grid;
        assert_abs_diff_eq!(sigma(&g, g.t_a(3)), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sigma(&g, 0.5 * (g.t_a(3) + g.t_b(3))), 0.5, epsilon = 1e-12);
        assert_eq!(sigma(&g, 0.5 * (g.t_b(3) + g.t_c(3))), 0.0);
    }

    #[test]
    fn generating_field_is_divergence_free() {
        for choice in [PhiChoice::Trig, PhiChoice::Staged] {
            let g = GeneratingField::new(&FlowConfig { phi_choice: choice, amplitude: 3.0, ..FlowConfig::default() }).unwrap();
            let h = 1e-5;
            for &(x, y, t) in &[(0.3, 1.2, 0.17), (2.0, -1.0, 0.61), (5.0, 4.0, 0.93)] {
                let dx = (g.velocity([x + h, y], t)[0] - g.velocity([x - h, y], t)[0]) / (2.0 * h);
                let dy = (g.velocity([x, y + h], t)[1] - g.velocity([x, y - h], t)[1]) / (2.0 * h);
                assert!((dx + dy).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn flow_round_trip() {
        let g = GeneratingField::new(&FlowConfig::default()).unwrap();
        let x = [0.4, 2.2];
        let y = flow_u(&g, x, 0.0, 1.0, 256);
        let z = flow_u(&g, y, 1.0, 0.0, 256);
        assert!((z[0] - x[0]).abs() < 1e-10 && (z[1] - x[1]).abs() < 1e-10);
    }
}
