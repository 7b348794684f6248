//! Finite-dimensional controls for linear transport along the generating
//! field, and their assembly into a control of the linearized coupled
//! system transported by the convection strategy.
//!
//! All time integrals use composite Simpson on the uniform control grid
//! `s_i = i / S`. Controls with jumps store the average of the two one-sided
//! values at a jump node; since jumps sit on even nodes this reproduces the
//! per-piece Simpson rule exactly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{rk4_step, Convection, GeneratingField};
use crate::geometry::Bump;
use crate::spectral::{dealias_cut, evaluate, grid_points, sobolev_weight, SpectralField};

/// The four-dimensional actuator space, in coefficient order.
pub const H0_LABELS: [&str; 4] = ["sin(x1)", "cos(x1)", "sin(x1+x2)", "cos(x1+x2)"];

/// Enumeration of the 12-mode family: transported modes, their material
/// derivatives after x1-integration, and the x1-antiderivatives.
pub const FAMILY_LABELS: [&str; 12] = [
    "T[sin(x1)]",
    "T[cos(x1)]",
    "T[sin(x1+x2)]",
    "T[cos(x1+x2)]",
    "DA[sin(x1)]",
    "DA[cos(x1)]",
    "DA[sin(x1+x2)]",
    "DA[cos(x1+x2)]",
    "A[sin(x1)]",
    "A[cos(x1)]",
    "A[sin(x1+x2)]",
    "A[cos(x1+x2)]",
];

fn h0(x: [f64; 2]) -> [f64; 4] {
    let (s1, c1) = x[0].sin_cos();
    let (s12, c12) = (x[0] + x[1]).sin_cos();
    [s1, c1, s12, c12]
}

fn h0_grad(x: [f64; 2]) -> [[f64; 2]; 4] {
    let (s1, c1) = x[0].sin_cos();
    let (s12, c12) = (x[0] + x[1]).sin_cos();
    [[c1, 0.0], [-s1, 0.0], [c12, c12], [-s12, -s12]]
}

/// Composite Simpson weights for `samples` intervals of width `h`.
pub fn simpson_weights(samples: usize, h: f64) -> Vec<f64> {
    (0..=samples)
        .map(|i| {
            let c = if i == 0 || i == samples {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < 2 || samples % 2 != 0 {
        return Err(Error::InvalidArgument(format!("sample count {samples} must be even and positive")));
    }
    Ok(())
}

/// Drift of a linear transport problem.
pub enum Drift<'a> {
    Convection(&'a Convection),
    Generating { field: &'a GeneratingField, substeps: usize },
}

/// Backward characteristics from every grid point at `t_end`, recorded at
/// the sample times; indexed `[sample][point]`.
fn back_trace(g: &GeneratingField, n: usize, t_end: f64, samples: usize, substeps: usize) -> Vec<Vec<[f64; 2]>> {
    let sub = substeps.max(1);
    let h = t_end / samples as f64;
    let per_point: Vec<Vec<[f64; 2]>> = grid_points(n)
        .par_iter()
        .map(|&x| {
            let mut traj = vec![x; samples + 1];
            let mut y = x;
            let dt = -h / sub as f64;
            for i in (0..samples).rev() {
                let t0 = h * (i + 1) as f64;
                for q in 0..sub {
                    y = rk4_step(g, y, t0 + q as f64 * dt, dt);
                }
                traj[i] = y;
            }
            traj
        })
        .collect();
    (0..=samples).map(|i| per_point.iter().map(|t| t[i]).collect()).collect()
}

/// `z(., t_end)` for `z_t + b . grad z = source`, `z(0) = 0`, with `source`
/// sampled uniformly on `[0, t_end]` (an even number of intervals).
pub fn transport_solve(drift: &Drift, source: &[SpectralField], t_end: f64) -> Result<SpectralField> {
    let samples = source.len().saturating_sub(1);
    check_samples(samples)?;
    let n = source[0].n();
    for f in source {
        source[0].same_grid(f)?;
    }
    let w = simpson_weights(samples, t_end / samples as f64);
    match drift {
        Drift::Convection(c) => {
            let d1 = c.displacement(t_end);
            let mut out = SpectralField::zeros(n);
            for (i, f) in source.iter().enumerate() {
                let t = t_end * i as f64 / samples as f64;
                out.axpy(w[i], &f.shift_vertical(c.displacement(t) - d1));
            }
            Ok(out)
        }
        Drift::Generating { field, substeps } => {
            let traj = back_trace(field, n, t_end, samples, *substeps);
            let mut acc = vec![0.0; n * n];
            for (i, f) in source.iter().enumerate() {
                for (a, v) in acc.iter_mut().zip(evaluate(f, &traj[i])) {
                    *a += w[i] * v;
                }
            }
            SpectralField::from_physical(n, &acc)
        }
    }
}

/// Actuator modes transported by the generating field,
/// `F_j(x, s) = h_j(U(x, 1, s))`, on the control grid.
pub struct TransportedModes {
    n: usize,
    samples: usize,
    substeps: usize,
    field: GeneratingField,
    positions: Vec<Vec<[f64; 2]>>,
}

impl TransportedModes {
    pub fn build(field: &GeneratingField, n: usize, samples: usize, substeps: usize) -> Result<Self> {
        crate::spectral::check_grid(n)?;
        check_samples(samples)?;
        let positions = back_trace(field, n, 1.0, samples, substeps);
        Ok(TransportedModes { n, samples, substeps: substeps.max(1), field: field.clone(), positions })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.samples as f64
    }

    pub fn weights(&self) -> Vec<f64> {
        simpson_weights(self.samples, 1.0 / self.samples as f64)
    }

    fn to_fields(&self, vals: [Vec<f64>; 4]) -> [SpectralField; 4] {
        vals.map(|v| {
            let mut f = SpectralField::from_physical(self.n, &v).expect("grid");
            f.zero_nyquist();
            f.set_mean(0.0);
            f
        })
    }

    fn modes_from(&self, pos: &[[f64; 2]]) -> [SpectralField; 4] {
        let mut vals: [Vec<f64>; 4] = Default::default();
        vals.iter_mut().for_each(|v| v.reserve(pos.len()));
        for &x in pos {
            for (v, h) in vals.iter_mut().zip(h0(x)) {
                v.push(h);
            }
        }
        self.to_fields(vals)
    }

    fn rates_from(&self, pos: &[[f64; 2]], s: f64) -> [SpectralField; 4] {
        let mut vals: [Vec<f64>; 4] = Default::default();
        for &x in pos {
            let u = self.field.velocity(x, s);
            for (v, g) in vals.iter_mut().zip(h0_grad(x)) {
                v.push(g[0] * u[0] + g[1] * u[1]);
            }
        }
        self.to_fields(vals)
    }

    /// `F_j(., s_i)`.
    pub fn modes(&self, i: usize) -> [SpectralField; 4] {
        self.modes_from(&self.positions[i])
    }

    /// `d/ds F_j(., s_i)`.
    pub fn rates(&self, i: usize) -> [SpectralField; 4] {
        self.rates_from(&self.positions[i], self.time(i))
    }

    /// `U(x, 1, s)` for every grid point at an arbitrary `s` in `[0, 1]`.
    pub fn positions_at(&self, s: f64) -> Vec<[f64; 2]> {
        let s = s.clamp(0.0, 1.0);
        let i = ((s * self.samples as f64).ceil() as usize).min(self.samples);
        let si = self.time(i);
        if si == s {
            return self.positions[i].clone();
        }
        let dt = (s - si) / self.substeps as f64;
        self.positions[i]
            .iter()
            .map(|&x| {
                let mut y = x;
                for q in 0..self.substeps {
                    y = rk4_step(&self.field, y, si + q as f64 * dt, dt);
                }
                y
            })
            .collect()
    }

    pub fn modes_at(&self, s: f64) -> [SpectralField; 4] {
        self.modes_from(&self.positions_at(s))
    }

    pub fn rates_at(&self, s: f64) -> [SpectralField; 4] {
        self.rates_from(&self.positions_at(s), s)
    }

    /// Neighbors and spacing of the centered difference at sample `i`,
    /// one-sided at the ends.
    pub fn stencil(&self, i: usize) -> (usize, usize, f64) {
        let h = 1.0 / self.samples as f64;
        if i == 0 {
            (0, 1, h)
        } else if i == self.samples {
            (i - 1, i, h)
        } else {
            (i - 1, i + 1, 2.0 * h)
        }
    }

    /// Stencil average and centered difference of the modes at sample `i`.
    pub fn averaged(&self, i: usize) -> ([SpectralField; 4], [SpectralField; 4]) {
        let (lo, hi, span) = self.stencil(i);
        let a = self.modes(lo);
        let b = self.modes(hi);
        let avg = std::array::from_fn(|j| a[j].add(&b[j]).scale(0.5));
        let diff = std::array::from_fn(|j| b[j].sub(&a[j]).scale(1.0 / span));
        (avg, diff)
    }

    /// Stencil average and centered difference of a scalar sequence.
    pub fn average_difference(&self, x: &[f64], i: usize) -> (f64, f64) {
        let (lo, hi, span) = self.stencil(i);
        (0.5 * (x[lo] + x[hi]), (x[hi] - x[lo]) / span)
    }

    /// Weights `e` with `sum_i c_i D_i x = sum_k e_k x_k` for the centered
    /// difference `D`.
    pub fn difference_adjoint(&self, c: &[f64]) -> Vec<f64> {
        let mut e = vec![0.0; self.samples + 1];
        for (i, ci) in c.iter().enumerate() {
            let (lo, hi, span) = self.stencil(i);
            e[hi] += ci / span;
            e[lo] -= ci / span;
        }
        e
    }

    /// `sum_i W_i r(s_i) sum_j c_ij F_j(s_i)` with Simpson weights `W_i`.
    pub fn integrate(&self, coeffs: &[[f64; 4]], r: impl Fn(f64) -> f64) -> SpectralField {
        let w: Vec<f64> = self.weights().iter().enumerate().map(|(i, w)| w * r(self.time(i))).collect();
        self.integrate_with(coeffs, &w)
    }

    /// `sum_i w_i sum_j c_ij F_j(s_i)`.
    pub fn integrate_with(&self, coeffs: &[[f64; 4]], w: &[f64]) -> SpectralField {
        (0..=self.samples)
            .into_par_iter()
            .fold(
                || SpectralField::zeros(self.n),
                |mut acc, i| {
                    if w[i] == 0.0 {
                        return acc;
                    }
                    let f = self.modes(i);
                    let wi = w[i];
                    for (fj, c) in f.iter().zip(coeffs[i]) {
                        if c != 0.0 {
                            acc.axpy(wi * c, fj);
                        }
                    }
                    acc
                },
            )
            .reduce(|| SpectralField::zeros(self.n), |a, b| a.add(&b))
    }
}

/// Time basis of the synthesized coefficients on `M` equal subintervals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBasis {
    /// Indicators of the subintervals.
    PiecewiseConstant,
    /// Continuous piecewise-linear hats at all `M + 1` nodes.
    Hat,
    /// Hats at the `M - 1` interior nodes; coefficients vanish at 0 and 1.
    InteriorHat,
}

impl TimeBasis {
    pub fn count(self, m: usize) -> usize {
        match self {
            TimeBasis::PiecewiseConstant => m,
            TimeBasis::Hat => m + 1,
            TimeBasis::InteriorHat => m.saturating_sub(1),
        }
    }

    fn hat_values(m: usize, i: usize, samples: usize) -> Vec<(usize, f64)> {
        let r = samples / m;
        let (p, rem) = (i / r, i % r);
        if rem == 0 {
            vec![(p, 1.0)]
        } else {
            let x = rem as f64 / r as f64;
            vec![(p, 1.0 - x), (p + 1, x)]
        }
    }

    fn hat_slopes(m: usize, i: usize, samples: usize) -> Vec<(usize, f64)> {
        let r = samples / m;
        let (p, rem) = (i / r, i % r);
        let mf = m as f64;
        if rem != 0 {
            vec![(p, -mf), (p + 1, mf)]
        } else if p == 0 {
            vec![(0, -mf), (1, mf)]
        } else if p == m {
            vec![(m - 1, -mf), (m, mf)]
        } else {
            vec![(p - 1, -0.5 * mf), (p + 1, 0.5 * mf)]
        }
    }

    fn interior(v: Vec<(usize, f64)>, m: usize) -> Vec<(usize, f64)> {
        v.into_iter().filter(|&(b, _)| b > 0 && b < m).map(|(b, x)| (b - 1, x)).collect()
    }

    /// Nonzero basis values at sample `i`; jump nodes carry the average.
    pub fn values(self, m: usize, i: usize, samples: usize) -> Vec<(usize, f64)> {
        match self {
            TimeBasis::PiecewiseConstant => {
                let r = samples / m;
                let (p, rem) = (i / r, i % r);
                if rem != 0 || i == 0 {
                    vec![(p, 1.0)]
                } else if p == m {
                    vec![(m - 1, 1.0)]
                } else {
                    vec![(p - 1, 0.5), (p, 0.5)]
                }
            }
            TimeBasis::Hat => Self::hat_values(m, i, samples),
            TimeBasis::InteriorHat => Self::interior(Self::hat_values(m, i, samples), m),
        }
    }

    /// Nonzero time derivatives at sample `i`; kinks carry the average
    /// slope, and jumps of piecewise-constant coefficients are ignored.
    pub fn slopes(self, m: usize, i: usize, samples: usize) -> Vec<(usize, f64)> {
        match self {
            TimeBasis::PiecewiseConstant => Vec::new(),
            TimeBasis::Hat => Self::hat_slopes(m, i, samples),
            TimeBasis::InteriorHat => Self::interior(Self::hat_slopes(m, i, samples), m),
        }
    }

    fn check(self, m: usize, samples: usize) -> Result<()> {
        if m == 0 || samples % (2 * m) != 0 || self.count(m) == 0 {
            return Err(Error::InvalidArgument(format!(
                "{m} subintervals need a sample count divisible by {} (got {samples})",
                2 * m
            )));
        }
        Ok(())
    }
}

/// Coefficients over the actuator space in a time basis.
#[derive(Clone, Debug, PartialEq)]
pub struct H0Control {
    pub basis: TimeBasis,
    pub bins: usize,
    pub alpha: Vec<[f64; 4]>,
}

impl H0Control {
    pub fn zero(basis: TimeBasis, bins: usize) -> Self {
        H0Control { basis, bins, alpha: vec![[0.0; 4]; basis.count(bins)] }
    }

    fn combine(&self, terms: Vec<(usize, f64)>) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (b, x) in terms {
            for j in 0..4 {
                out[j] += x * self.alpha[b][j];
            }
        }
        out
    }

    /// Values and time derivatives on the control grid.
    pub fn sampled(&self, samples: usize) -> Result<SampledControl> {
        self.basis.check(self.bins, samples)?;
        let values = (0..=samples).map(|i| self.combine(self.basis.values(self.bins, i, samples))).collect();
        let rates = (0..=samples).map(|i| self.combine(self.basis.slopes(self.bins, i, samples))).collect();
        Ok(SampledControl { values, rates })
    }
}

/// Actuator coefficients and their time derivatives on the control grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledControl {
    pub values: Vec<[f64; 4]>,
    pub rates: Vec<[f64; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Number of time subintervals `M`.
    #[serde(alias = "M")]
    pub m: usize,
    pub lambda: f64,
    /// Largest `|k_i|` fitted; zero selects the dealiasing cutoff.
    pub k_cut: i64,
    pub samples_per_window: usize,
    /// Sobolev index of the fitted norm.
    pub fit_index: usize,
    /// Sobolev index of the reported residual.
    pub report_index: usize,
    pub taper_width: f64,
    /// RK4 steps per control sample for characteristics.
    pub substeps: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            m: 64,
            lambda: 1e-8,
            k_cut: 0,
            samples_per_window: 512,
            fit_index: 0,
            report_index: 2,
            taper_width: 0.02,
            substeps: 2,
        }
    }
}

/// Half-plane modes `0 < |k|_inf <= k_cut`, optionally without `k1 = 0`.
fn fit_modes(k_cut: i64, k1_nonzero: bool) -> Vec<(i64, i64)> {
    let mut v = Vec::new();
    for k2 in 0..=k_cut {
        for k1 in -k_cut..=k_cut {
            if (k2 == 0 && k1 <= 0) || (k1_nonzero && k1 == 0) {
                continue;
            }
            v.push((k1, k2));
        }
    }
    v
}

/// Linear map from basis coefficients to the fitted Fourier data of `z(., 1)`.
pub struct ControlOperator {
    pub basis: TimeBasis,
    pub bins: usize,
    pub k_cut: i64,
    pub k1_nonzero: bool,
    fit_index: usize,
    /// Time quadrature weights of the endpoint map.
    pub weights: Vec<f64>,
    rows: Vec<(i64, i64)>,
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ControlOperator {
    pub fn build(
        modes: &TransportedModes,
        basis: TimeBasis,
        bins: usize,
        k_cut: i64,
        fit_index: usize,
        k1_nonzero: bool,
        weights: &[f64],
    ) -> Result<Self> {
        let samples = modes.samples();
        if weights.len() != samples + 1 {
            return Err(Error::InvalidArgument(format!("{} quadrature weights for {samples} samples", weights.len())));
        }
        basis.check(bins, samples)?;
        let k_cut = if k_cut <= 0 { dealias_cut(modes.n()) } else { k_cut.min(modes.n() as i64 / 2 - 1) };
        let rows = fit_modes(k_cut, k1_nonzero);
        let row_weights: Vec<f64> =
            rows.iter().map(|&(a, b)| (2.0 * sobolev_weight(a as f64, b as f64, fit_index)).sqrt()).collect();
        let nr = 2 * rows.len();
        let nc = 4 * basis.count(bins);
        let w = weights;
        let a = (0..=samples)
            .into_par_iter()
            .fold(
                || DMatrix::<f64>::zeros(nr, nc),
                |mut a, i| {
                    if w[i] == 0.0 {
                        return a;
                    }
                    let f = modes.modes(i);
                    for (b, x) in basis.values(bins, i, samples) {
                        for (j, fj) in f.iter().enumerate() {
                            let col = 4 * b + j;
                            for (r, (&(k1, k2), &om)) in rows.iter().zip(&row_weights).enumerate() {
                                let c = fj.coeff(k1, k2) * (w[i] * x * om);
                                a[(2 * r, col)] += c.re;
                                a[(2 * r + 1, col)] += c.im;
                            }
                        }
                    }
                    a
                },
            )
            .reduce(|| DMatrix::<f64>::zeros(nr, nc), |a, b| a + b);
        let svd = a.svd(true, true);
        Ok(ControlOperator { basis, bins, k_cut, k1_nonzero, fit_index, weights: weights.to_vec(), rows, svd })
    }

    fn rhs(&self, target: &SpectralField) -> DVector<f64> {
        let mut b = DVector::zeros(2 * self.rows.len());
        for (r, &(k1, k2)) in self.rows.iter().enumerate() {
            let om = (2.0 * sobolev_weight(k1 as f64, k2 as f64, self.fit_index)).sqrt();
            let c: Complex64 = target.coeff(k1, k2) * om;
            b[2 * r] = c.re;
            b[2 * r + 1] = c.im;
        }
        b
    }

    /// Ratio of extreme singular values.
    pub fn condition(&self) -> f64 {
        let sv = &self.svd.singular_values;
        let hi = sv.iter().cloned().fold(0.0, f64::max);
        let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    }

    /// Minimizer of `|A a - b|^2 + lambda / M |a|^2`.
    pub fn solve(&self, target: &SpectralField, lambda: f64) -> Result<H0Control> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge parameter {lambda}")));
        }
        let b = self.rhs(target);
        let u = self.svd.u.as_ref().expect("u computed");
        let vt = self.svd.v_t.as_ref().expect("v computed");
        let sv = &self.svd.singular_values;
        let hi = sv.iter().cloned().fold(0.0, f64::max);
        let ridge = lambda / self.bins as f64;
        let utb = u.transpose() * &b;
        let mut y = DVector::zeros(sv.len());
        for k in 0..sv.len() {
            let s = sv[k];
            y[k] = if ridge > 0.0 {
                s / (s * s + ridge) * utb[k]
            } else if s > hi * 1e-14 {
                utb[k] / s
            } else {
                0.0
            };
        }
        let x = vt.transpose() * y;
        let mut c = H0Control::zero(self.basis, self.bins);
        for (b, a) in c.alpha.iter_mut().enumerate() {
            for j in 0..4 {
                a[j] = x[4 * b + j];
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthesisReport {
    pub target_id: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub lambda: f64,
    pub residual_l2: f64,
    #[serde(rename = "residual_Hm")]
    pub residual_hm: f64,
    pub cond_estimate: f64,
}

pub struct Synthesis {
    pub control: H0Control,
    pub sampled: SampledControl,
    /// `z(., 1)` produced by the control.
    pub endpoint: SpectralField,
    pub report: SynthesisReport,
}

fn check_mean_free(f: &SpectralField) -> Result<()> {
    let m = f.mean();
    if m.abs() > 1e-12 * f.l2().max(1.0) {
        return Err(Error::NonzeroMean(m));
    }
    Ok(())
}

/// Fits a control with a prebuilt operator; with `k1_nonzero` the residual
/// is measured on the `k1 != 0` part only.
pub fn synthesize_with(
    op: &ControlOperator,
    modes: &TransportedModes,
    target: &SpectralField,
    cfg: &SynthesisConfig,
    target_id: &str,
) -> Result<Synthesis> {
    check_mean_free(target)?;
    let control = op.solve(target, cfg.lambda)?;
    let sampled = control.sampled(modes.samples())?;
    let endpoint = modes.integrate_with(&sampled.values, &op.weights);
    let mut err = endpoint.sub(target);
    if op.k1_nonzero {
        err = err.sub(&err.line_mean_part());
    }
    let report = SynthesisReport {
        target_id: target_id.to_string(),
        m: op.bins,
        lambda: cfg.lambda,
        residual_l2: err.norm(0),
        residual_hm: err.norm(cfg.report_index),
        cond_estimate: op.condition(),
    };
    Ok(Synthesis { control, sampled, endpoint, report })
}

/// Piecewise-constant control steering `z(., 1)` toward `z1` along the
/// generating field.
pub fn synthesize_transport_control(
    z1: &SpectralField,
    modes: &TransportedModes,
    cfg: &SynthesisConfig,
    target_id: &str,
) -> Result<Synthesis> {
    check_mean_free(z1)?;
    let op = ControlOperator::build(
        modes,
        TimeBasis::PiecewiseConstant,
        cfg.m,
        cfg.k_cut,
        cfg.fit_index,
        false,
        &modes.weights(),
    )?;
    synthesize_with(&op, modes, z1, cfg, target_id)
}

/// Temporal window equal to one on `[width, 1 - width]`, zero at 0 and 1.
#[derive(Clone, Debug)]
pub struct Taper {
    pub width: f64,
    bump: Bump,
}

impl Taper {
    pub fn new(width: f64) -> Result<Self> {
        if !(width > 0.0 && width < 0.25) {
            return Err(Error::InvalidArgument(format!("taper width {width} outside (0, 1/4)")));
        }
        Ok(Taper { width, bump: Bump::new(4) })
    }

    pub fn value(&self, s: f64) -> f64 {
        if s <= 0.0 || s >= 1.0 {
            0.0
        } else if s < self.width {
            self.bump.integral(s / self.width)
        } else if s > 1.0 - self.width {
            self.bump.integral((1.0 - s) / self.width)
        } else {
            1.0
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        if s <= 0.0 || s >= 1.0 {
            0.0
        } else if s < self.width {
            self.bump.value(s / self.width) / self.width
        } else if s > 1.0 - self.width {
            -self.bump.value((1.0 - s) / self.width) / self.width
        } else {
            0.0
        }
    }
}

/// Multiplies a sampled control by the window of `width`; returns the
/// tapered control and the change `||dz(1)||_0` of the endpoint
/// `sum_i weights_i q(s_i)`.
pub fn taper(
    control: &SampledControl,
    width: f64,
    modes: &TransportedModes,
    weights: &[f64],
) -> Result<(SampledControl, f64)> {
    let tp = Taper::new(width)?;
    let samples = control.values.len() - 1;
    let mut out = control.clone();
    for i in 0..=samples {
        let s = i as f64 / samples as f64;
        let (w, dw) = (tp.value(s), tp.derivative(s));
        for j in 0..4 {
            out.values[i][j] = w * control.values[i][j];
            out.rates[i][j] = w * control.rates[i][j] + dw * control.values[i][j];
        }
    }
    let diff: Vec<[f64; 4]> = control
        .values
        .iter()
        .zip(&out.values)
        .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]])
        .collect();
    let pert = modes.integrate_with(&diff, weights).norm(0);
    Ok((out, pert))
}

/// Evaluators of the 12-mode family on the torus, in [`FAMILY_LABELS`] order.
pub struct ModeLibrary<'a> {
    pub modes: &'a TransportedModes,
    pub conv: &'a Convection,
}

impl<'a> ModeLibrary<'a> {
    fn family(&self, f: &[SpectralField; 4], avg: &[SpectralField; 4], rate: &[SpectralField; 4], s: f64) -> [SpectralField; 12] {
        let d = -self.conv.displacement(s);
        let mut out: Vec<SpectralField> = Vec::with_capacity(12);
        out.extend(f.iter().map(|x| x.shift_vertical(d)));
        out.extend(rate.iter().map(|x| x.antiderivative_x1().shift_vertical(d)));
        out.extend(avg.iter().map(|x| x.antiderivative_x1().shift_vertical(d)));
        out.try_into().expect("twelve fields")
    }

    /// Family members at control sample `i`. The derivative members use the
    /// centered difference and the antiderivative members the matching
    /// stencil average, so that the product rule holds exactly on the grid.
    pub fn eval(&self, i: usize) -> [SpectralField; 12] {
        let (avg, diff) = self.modes.averaged(i);
        self.family(&self.modes.modes(i), &avg, &diff, self.modes.time(i))
    }

    /// Continuum family members at an arbitrary `s` in `[0, 1]`.
    pub fn eval_at(&self, s: f64) -> [SpectralField; 12] {
        let f = self.modes.modes_at(s);
        self.family(&f, &f, &self.modes.rates_at(s), s)
    }

    /// `sum_l alpha_l T_l(s_i)`.
    pub fn combine(&self, i: usize, alpha: &[f64; 12]) -> SpectralField {
        let fam = self.eval(i);
        let mut g = SpectralField::zeros(self.modes.n());
        for (a, f) in alpha.iter().zip(&fam) {
            g.axpy(*a, f);
        }
        g
    }

    /// `S_{D(s_i)} g(s_i)`: the control sample pulled back along the
    /// convection flow, built without shifts.
    pub fn pulled_back(&self, i: usize, alpha: &[f64; 12]) -> SpectralField {
        let f = self.modes.modes(i);
        let (avg, diff) = self.modes.averaged(i);
        let mut g = SpectralField::zeros(self.modes.n());
        let mut a = SpectralField::zeros(self.modes.n());
        for j in 0..4 {
            g.axpy(alpha[j], &f[j]);
            a.axpy(alpha[4 + j], &diff[j]);
            a.axpy(alpha[8 + j], &avg[j]);
        }
        g.axpy(1.0, &a.antiderivative_x1());
        g
    }
}

/// Endpoint `(v(1), theta(1))` of the inviscid linearized system along the
/// convection flow, `theta_t + y2 theta_2 = g`, `v_t + y2 v_2 = theta_1`,
/// from zero data, given pulled-back samples `G_i = S_{D(s_i)} g(s_i)`.
pub fn linear_endpoint(pulled: &[SpectralField]) -> Result<(SpectralField, SpectralField)> {
    let samples = pulled.len().saturating_sub(1);
    check_samples(samples)?;
    let n = pulled[0].n();
    let w = simpson_weights(samples, 1.0 / samples as f64);
    let mut theta = SpectralField::zeros(n);
    let mut moment = SpectralField::zeros(n);
    for (i, g) in pulled.iter().enumerate() {
        let s = i as f64 / samples as f64;
        theta.axpy(w[i], g);
        moment.axpy(w[i] * (1.0 - s), g);
    }
    Ok((moment.dx1(), theta))
}

/// Control of the linearized coupled system with its coefficients over the
/// 12-mode family at every control sample.
pub struct NonlocalizedControl {
    pub samples: usize,
    pub alpha: Vec<[f64; 12]>,
    /// Endpoints produced by the temperature-steering part alone.
    pub theta_hat_1: SpectralField,
    pub v_hat_1: SpectralField,
    /// Temperature endpoint of the vorticity-correcting part.
    pub theta_tilde_1: SpectralField,
    /// Endpoints produced by the full control.
    pub theta_1: SpectralField,
    pub v_1: SpectralField,
    pub step1: SynthesisReport,
    pub step2: SynthesisReport,
    pub taper_perturbation: f64,
    /// `||P_{k1=0} (v1 - v_hat_1)||_0`, out of reach of the correction.
    pub unreachable_l2: f64,
    /// `||p~||_0`-scale of the correction: the endpoint it was fitted to.
    pub correction_l2: f64,
}

/// Prebuilt operators for repeated assemblies on the same modes.
pub struct CoupledSynthesizer<'a> {
    pub modes: &'a TransportedModes,
    pub conv: &'a Convection,
    pub cfg: SynthesisConfig,
    temperature: ControlOperator,
    vorticity: ControlOperator,
    correction_weights: Vec<f64>,
}

impl<'a> CoupledSynthesizer<'a> {
    pub fn new(modes: &'a TransportedModes, conv: &'a Convection, cfg: &SynthesisConfig) -> Result<Self> {
        let w = modes.weights();
        let temperature =
            ControlOperator::build(modes, TimeBasis::PiecewiseConstant, cfg.m, cfg.k_cut, cfg.fit_index, false, &w)?;
        // the correction enters the vorticity through sum_i W_i (1 - s_i) D_i
        let c: Vec<f64> = w.iter().enumerate().map(|(i, wi)| wi * (1.0 - modes.time(i))).collect();
        let e = modes.difference_adjoint(&c);
        // fit the tapered control, so the taper leaves the fitted endpoint intact
        let tp = Taper::new(cfg.taper_width)?;
        let et: Vec<f64> = e.iter().enumerate().map(|(i, x)| x * tp.value(modes.time(i))).collect();
        let vorticity = ControlOperator::build(modes, TimeBasis::InteriorHat, cfg.m, cfg.k_cut, cfg.fit_index, true, &et)?;
        Ok(CoupledSynthesizer { modes, conv, cfg: *cfg, temperature, vorticity, correction_weights: e })
    }

    pub fn library(&self) -> ModeLibrary<'_> {
        ModeLibrary { modes: self.modes, conv: self.conv }
    }

    /// Steers `(v, theta)` from zero to `(v1, theta1)`: first the
    /// temperature, then a correction that moves the vorticity and returns
    /// the temperature.
    pub fn assemble(&self, v1: &SpectralField, theta1: &SpectralField) -> Result<NonlocalizedControl> {
        check_mean_free(v1)?;
        check_mean_free(theta1)?;
        let samples = self.modes.samples();
        let step1 = synthesize_with(&self.temperature, self.modes, theta1, &self.cfg, "theta")?;
        let a = &step1.sampled.values;
        let theta_hat_1 = step1.endpoint.clone();
        let v_hat_1 = self.modes.integrate(a, |s| 1.0 - s).dx1();

        let rest = v1.sub(&v_hat_1);
        let unreachable_l2 = rest.line_mean_part().norm(0);
        let step2 = synthesize_with(&self.vorticity, self.modes, &rest, &self.cfg, "v")?;
        let (b, taper_perturbation) = taper(&step2.sampled, self.cfg.taper_width, self.modes, &self.correction_weights)?;
        let correction_l2 = step2.endpoint.norm(0);

        let comp: Vec<Vec<f64>> = (0..4).map(|j| b.values.iter().map(|v| v[j]).collect()).collect();
        let alpha: Vec<[f64; 12]> = (0..=samples)
            .map(|i| {
                let mut x = [0.0; 12];
                x[..4].copy_from_slice(&a[i]);
                for j in 0..4 {
                    let (m, d) = self.modes.average_difference(&comp[j], i);
                    x[4 + j] = m;
                    x[8 + j] = d;
                }
                x
            })
            .collect();
        let lib = self.library();
        let pulled: Vec<SpectralField> = (0..=samples).into_par_iter().map(|i| lib.pulled_back(i, &alpha[i])).collect();
        let (v_1, theta_1) = linear_endpoint(&pulled)?;
        let theta_tilde_1 = theta_1.sub(&theta_hat_1);
        Ok(NonlocalizedControl {
            samples,
            alpha,
            theta_hat_1,
            v_hat_1,
            theta_tilde_1,
            theta_1,
            v_1,
            step1: step1.report,
            step2: step2.report,
            taper_perturbation,
            unreachable_l2,
            correction_l2,
        })
    }
}

/// One-shot assembly; see [`CoupledSynthesizer::assemble`].
pub fn assemble_coupled_control(
    v1: &SpectralField,
    theta1: &SpectralField,
    modes: &TransportedModes,
    conv: &Convection,
    cfg: &SynthesisConfig,
) -> Result<NonlocalizedControl> {
    CoupledSynthesizer::new(modes, conv, cfg)?.assemble(v1, theta1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{build_convection, FlowConfig, PhiChoice};
    use crate::geometry::{build_partition, Domain, GeometryConfig};
    use approx::assert_abs_diff_eq;

    fn still() -> GeneratingField {
        GeneratingField::new(&FlowConfig { amplitude: 0.0, ..FlowConfig::default() }).unwrap()
    }

    #[test]
    fn simpson_integrates_cubics() {
        let w = simpson_weights(8, 0.25);
        let s: f64 = w.iter().enumerate().map(|(i, wi)| wi * (0.25 * i as f64).powi(3)).sum();
        assert_abs_diff_eq!(s, 4.0, epsilon = 1e-13);
    }

    #[test]
    fn piecewise_constant_sums_to_one() {
        for i in 0..=32 {
            let t: f64 = TimeBasis::PiecewiseConstant.values(4, i, 32).iter().map(|x| x.1).sum();
            assert_abs_diff_eq!(t, 1.0);
        }
    }

    #[test]
    fn hat_slopes_average_at_nodes() {
        let s = TimeBasis::Hat.slopes(4, 8, 32);
        assert_eq!(s, vec![(0, -2.0), (2, 2.0)]);
        assert!(TimeBasis::InteriorHat.values(4, 0, 32).is_empty());
    }

    #[test]
    fn identity_flow_recovers_actuator_coefficients() {
        let modes = TransportedModes::build(&still(), 16, 16, 1).unwrap();
        let mut z = SpectralField::mode(16, 1, 0, 0.7, -std::f64::consts::FRAC_PI_2);
        z.axpy(1.0, &SpectralField::mode(16, 1, 1, -0.3, 0.0));
        let extra = SpectralField::mode(16, 2, 1, 0.2, 0.0);
        z.axpy(1.0, &extra);
        let cfg = SynthesisConfig { m: 4, lambda: 0.0, samples_per_window: 16, ..Default::default() };
        let s = synthesize_transport_control(&z, &modes, &cfg, "t").unwrap();
        let total = s.control.alpha.iter().fold([0.0; 4], |mut a, b| {
            for j in 0..4 {
                a[j] += b[j] / 4.0;
            }
            a
        });
        assert_abs_diff_eq!(total[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(total[3], -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(s.report.residual_l2, extra.norm(0), epsilon = 1e-12);
    }

    #[test]
    fn zero_target_gives_zero_control() {
        let modes = TransportedModes::build(&still(), 8, 8, 1).unwrap();
        let cfg = SynthesisConfig { m: 2, samples_per_window: 8, ..Default::default() };
        let s = synthesize_transport_control(&SpectralField::zeros(8), &modes, &cfg, "0").unwrap();
        assert!(s.control.alpha.iter().flatten().all(|a| *a == 0.0));
    }

    #[test]
    fn mean_target_rejected() {
        let modes = TransportedModes::build(&still(), 8, 8, 1).unwrap();
        let mut z = SpectralField::zeros(8);
        z.set_mean(1.0);
        let cfg = SynthesisConfig { m: 2, samples_per_window: 8, ..Default::default() };
        assert!(synthesize_transport_control(&z, &modes, &cfg, "m").is_err());
    }

    #[test]
    fn vertical_drift_keeps_horizontal_profiles() {
        let p = build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap();
        let c = build_convection(&p, 4).unwrap();
        let h = SpectralField::mode(16, 2, 0, 1.0, 0.3);
        let src = vec![h.clone(); 65];
        let z = transport_solve(&Drift::Convection(&c), &src, 1.0).unwrap();
        assert!(z.sub(&h).l2() < 1e-13);
    }

    #[test]
    fn rates_match_finite_differences() {
        let g = GeneratingField::new(&FlowConfig { phi_choice: PhiChoice::Trig, amplitude: 1.0, ..Default::default() })
            .unwrap();
        let modes = TransportedModes::build(&g, 16, 64, 8).unwrap();
        let eps = 1e-4;
        let a = modes.modes_at(0.4 + eps);
        let b = modes.modes_at(0.4 - eps);
        let r = modes.rates_at(0.4);
        for j in 0..4 {
            let fd = a[j].sub(&b[j]).scale(0.5 / eps);
            assert!(fd.sub(&r[j]).l2() < 1e-6 * r[j].l2().max(1.0));
        }
    }

    #[test]
    fn taper_zeroes_endpoints() {
        let tp = Taper::new(0.1).unwrap();
        assert_eq!(tp.value(0.0), 0.0);
        assert_eq!(tp.value(1.0), 0.0);
        assert_eq!(tp.value(0.5), 1.0);
        assert!(Taper::new(0.3).is_err());
    }
}
