//! Pseudo-spectral integrator for the forced Boussinesq system in
//! vorticity/temperature form.
//!
//! Diffusion and transport by the spatially constant mean velocity are
//! integrated exactly by a Fourier-space integrating factor; the remaining
//! advection, buoyancy and forcing terms use SSP-RK3.

use std::sync::Mutex;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{is_nyquist, wavenumber, SpectralField, TWO_PI};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Physics {
    pub nu: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub t: f64,
    pub w: SpectralField,
    pub theta: SpectralField,
}

impl State {
    pub fn new(t: f64, w: SpectralField, theta: SpectralField) -> Self {
        State { t, w, theta }
    }
}

/// Body force `(h1, h2)`; `None` stands for zero.
pub trait Forcing: Send + Sync {
    fn sample(&self, t: f64) -> (Option<SpectralField>, Option<SpectralField>);

    /// Step bound needed to resolve the forcing in time.
    fn max_dt(&self) -> f64 {
        f64::INFINITY
    }
}

/// Spatially constant velocity added to the divergence-curl inversion.
pub trait MeanFlow: Send + Sync {
    fn velocity(&self, t: f64) -> [f64; 2];
    /// `int_{t0}^{t1}` of the velocity.
    fn displacement(&self, t0: f64, t1: f64) -> [f64; 2];
}

pub struct NoForcing;

impl Forcing for NoForcing {
    fn sample(&self, _t: f64) -> (Option<SpectralField>, Option<SpectralField>) {
        (None, None)
    }
}

pub struct NoMeanFlow;

impl MeanFlow for NoMeanFlow {
    fn velocity(&self, _t: f64) -> [f64; 2] {
        [0.0, 0.0]
    }
    fn displacement(&self, _t0: f64, _t1: f64) -> [f64; 2] {
        [0.0, 0.0]
    }
}

pub struct ConstantMeanFlow(pub [f64; 2]);

impl MeanFlow for ConstantMeanFlow {
    fn velocity(&self, _t: f64) -> [f64; 2] {
        self.0
    }
    fn displacement(&self, t0: f64, t1: f64) -> [f64; 2] {
        [self.0[0] * (t1 - t0), self.0[1] * (t1 - t0)]
    }
}

/// Time-independent forcing.
pub struct SteadyForcing {
    pub h1: Option<SpectralField>,
    pub h2: Option<SpectralField>,
}

impl Forcing for SteadyForcing {
    fn sample(&self, _t: f64) -> (Option<SpectralField>, Option<SpectralField>) {
        (self.h1.clone(), self.h2.clone())
    }
}

/// Source of forcing samples on a fixed, non-decreasing time grid; a
/// repeated time holds the left and right limits of a jump.
pub trait SampleSource: Send + Sync {
    fn times(&self) -> &[f64];
    fn sample_at(&self, i: usize) -> (Option<SpectralField>, Option<SpectralField>);
}

type Pair = (Option<SpectralField>, Option<SpectralField>);

/// Forcing linearly interpolated in coefficient space between the samples of
/// a [`SampleSource`]; zero outside the sampled interval. Recently used
/// samples are cached.
pub struct Interpolated<S: SampleSource> {
    pub source: S,
    cache: Mutex<Vec<(usize, Pair)>>,
}

impl<S: SampleSource> Interpolated<S> {
    pub fn new(source: S) -> Self {
        Interpolated { source, cache: Mutex::new(Vec::new()) }
    }

    fn get(&self, i: usize) -> Pair {
        {
            let c = self.cache.lock().unwrap();
            if let Some((_, p)) = c.iter().find(|(j, _)| *j == i) {
                return p.clone();
            }
        }
        let p = self.source.sample_at(i);
        let mut c = self.cache.lock().unwrap();
        if c.len() >= 6 {
            c.remove(0);
        }
        c.push((i, p.clone()));
        p
    }
}

fn lerp(a: &Option<SpectralField>, b: &Option<SpectralField>, s: f64) -> Option<SpectralField> {
    match (a, b) {
        (None, None) => None,
        (Some(x), None) => Some(x.scale(1.0 - s)),
        (None, Some(y)) => Some(y.scale(s)),
        (Some(x), Some(y)) => {
            let mut out = x.scale(1.0 - s);
            out.axpy(s, y);
            Some(out)
        }
    }
}

impl<S: SampleSource> Forcing for Interpolated<S> {
    fn sample(&self, t: f64) -> Pair {
        let ts = self.source.times();
        let m = ts.len();
        if m == 0 {
            return (None, None);
        }
        // stage times may miss the sampled range by rounding
        let tol = 1e-9 * (ts[m - 1] - ts[0]);
        if t < ts[0] - tol || t > ts[m - 1] + tol {
            return (None, None);
        }
        if m == 1 {
            return self.get(0);
        }
        let t = t.clamp(ts[0], ts[m - 1]);
        // repeated times mark jumps: the later sample is the right limit
        let j = ts.partition_point(|x| *x <= t);
        if ts[j - 1] == t {
            return self.get(j - 1);
        }
        let (i0, i1) = (j - 1, j);
        let s = (t - ts[i0]) / (ts[i1] - ts[i0]);
        let a = self.get(i0);
        let b = self.get(i1);
        (lerp(&a.0, &b.0, s), lerp(&a.1, &b.1, s))
    }

    fn max_dt(&self) -> f64 {
        let ts = self.source.times();
        ts.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min)
    }
}

/// Explicitly stored samples.
pub struct StoredSamples {
    pub times: Vec<f64>,
    pub h1: Vec<Option<SpectralField>>,
    pub h2: Vec<Option<SpectralField>>,
}

impl SampleSource for StoredSamples {
    fn times(&self) -> &[f64] {
        &self.times
    }
    fn sample_at(&self, i: usize) -> Pair {
        (self.h1[i].clone(), self.h2[i].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepPolicy {
    /// CFL-limited steps capped by `dt_max` and the forcing resolution.
    Adaptive,
    /// Uniform steps no longer than the given value.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverParams {
    pub c_cfl: f64,
    pub dt_max: f64,
    pub eps_floor: f64,
    pub policy: StepPolicy,
    /// Sobolev index used for recorded norms (`w` in `m-1`, `theta` in `m`).
    pub m: usize,
    /// Spacing of recorded trajectory samples; `0` records every step.
    pub record_every: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            c_cfl: 0.4,
            dt_max: 1e-2,
            eps_floor: 1e-12,
            policy: StepPolicy::Adaptive,
            m: 2,
            record_every: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub norm_w_0: f64,
    pub norm_w_m: f64,
    pub norm_theta_0: f64,
    pub norm_theta_m: f64,
    pub mean_theta: f64,
}

impl TrajectorySample {
    pub fn of(s: &State, m: usize) -> Self {
        TrajectorySample {
            t: s.t,
            norm_w_0: s.w.norm(0),
            norm_w_m: s.w.norm(m.saturating_sub(1)),
            norm_theta_0: s.theta.norm(0),
            norm_theta_m: s.theta.norm(m),
            mean_theta: s.theta.mean(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub final_state: State,
    pub samples: Vec<TrajectorySample>,
    pub steps: usize,
}

/// Applies the exact linear propagator from `t0` to `t1` in place.
fn propagate(f: &mut SpectralField, kappa: f64, disp: [f64; 2], dt: f64) {
    let n = f.n();
    let c = f.coeffs_mut();
    for j2 in 0..n {
        let k2 = wavenumber(j2, n) as f64;
        let p2 = if is_nyquist(j2, n) { 0.0 } else { k2 * disp[1] };
        for j1 in 0..n {
            let k1 = wavenumber(j1, n) as f64;
            let p1 = if is_nyquist(j1, n) { 0.0 } else { k1 * disp[0] };
            let decay = (-kappa * (k1 * k1 + k2 * k2) * dt).exp();
            c[j2 * n + j1] *= Complex64::from_polar(decay, -(p1 + p2));
        }
    }
}

struct Rhs {
    w: SpectralField,
    theta: SpectralField,
}

/// Advection by the fluctuating velocity, buoyancy and forcing.
fn rhs(w: &SpectralField, theta: &SpectralField, t: f64, forcing: &dyn Forcing) -> Rhs {
    let n = w.n();
    let wd = w.dealias();
    let td = theta.dealias();
    let psi = wd.map_k(|k1, k2, _, _| {
        let k = k1 * k1 + k2 * k2;
        if k == 0.0 {
            Complex64::default()
        } else {
            Complex64::new(1.0 / k, 0.0)
        }
    });
    let u1 = psi.dx2().to_physical();
    let u2 = psi.dx1().to_physical();
    let w1 = wd.dx1().to_physical();
    let w2 = wd.dx2().to_physical();
    let t1 = td.dx1().to_physical();
    let t2 = td.dx2().to_physical();
    let mut aw = vec![0.0; n * n];
    let mut at = vec![0.0; n * n];
    for i in 0..n * n {
        // u2 = -d1 psi
        aw[i] = u1[i] * w1[i] - u2[i] * w2[i];
        at[i] = u1[i] * t1[i] - u2[i] * t2[i];
    }
    let aw = SpectralField::from_physical(n, &aw).unwrap().dealias();
    let at = SpectralField::from_physical(n, &at).unwrap().dealias();
    let (h1, h2) = forcing.sample(t);
    let mut rw = theta.dx1();
    rw.axpy(-1.0, &aw);
    if let Some(h) = h1 {
        rw.axpy(1.0, &h);
    }
    let mut rt = at.scale(-1.0);
    if let Some(h) = h2 {
        rt.axpy(1.0, &h);
    }
    Rhs { w: rw, theta: rt }
}

/// One integrating-factor SSP-RK3 step of length `dt`.
pub fn step(
    s: &State,
    dt: f64,
    physics: &Physics,
    forcing: &dyn Forcing,
    mean: &dyn MeanFlow,
) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step size {dt}")));
    }
    let t0 = s.t;
    let th = t0 + 0.5 * dt;
    let t1 = t0 + dt;
    let d_full = mean.displacement(t0, t1);
    let d_h0 = mean.displacement(t0, th);
    let d_h1 = mean.displacement(th, t1);
    let neg = |d: [f64; 2]| [-d[0], -d[1]];
    let (nu, tau) = (physics.nu, physics.tau);

    // stage 1
    let r = rhs(&s.w, &s.theta, t0, forcing);
    let mut w1 = s.w.clone();
    w1.axpy(dt, &r.w);
    let mut q1 = s.theta.clone();
    q1.axpy(dt, &r.theta);
    propagate(&mut w1, nu, d_full, dt);
    propagate(&mut q1, tau, d_full, dt);

    // stage 2, at t0 + dt
    let r = rhs(&w1, &q1, t1, forcing);
    let mut a = w1.clone();
    a.axpy(dt, &r.w);
    propagate(&mut a, nu, neg(d_h1), -0.5 * dt);
    let mut b = s.w.clone();
    propagate(&mut b, nu, d_h0, 0.5 * dt);
    let mut w2 = b.scale(0.75);
    w2.axpy(0.25, &a);
    let mut a = q1.clone();
    a.axpy(dt, &r.theta);
    propagate(&mut a, tau, neg(d_h1), -0.5 * dt);
    let mut b = s.theta.clone();
    propagate(&mut b, tau, d_h0, 0.5 * dt);
    let mut q2 = b.scale(0.75);
    q2.axpy(0.25, &a);

    // stage 3
    let r = rhs(&w2, &q2, th, forcing);
    let mut a = w2.clone();
    a.axpy(dt, &r.w);
    propagate(&mut a, nu, d_h1, 0.5 * dt);
    let mut w3 = s.w.clone();
    propagate(&mut w3, nu, d_full, dt);
    w3.scale_mut(1.0 / 3.0);
    w3.axpy(2.0 / 3.0, &a);
    let mut a = q2.clone();
    a.axpy(dt, &r.theta);
    propagate(&mut a, tau, d_h1, 0.5 * dt);
    let mut q3 = s.theta.clone();
    propagate(&mut q3, tau, d_full, dt);
    q3.scale_mut(1.0 / 3.0);
    q3.axpy(2.0 / 3.0, &a);

    w3.set_mean(0.0);
    if !w3.is_finite() || !q3.is_finite() {
        return Err(Error::Blowup { t: t1 });
    }
    Ok(State { t: t1, w: w3, theta: q3 })
}

/// CFL step bound from the fluctuating velocity. The mean drift is
/// transported exactly and does not enter.
pub fn cfl_dt(s: &State, params: &SolverParams) -> Result<f64> {
    let u = crate::spectral::inverse_curl(&zero_mean(&s.w), [0.0, 0.0])?;
    let h = TWO_PI / s.w.n() as f64;
    let dt = params.c_cfl * h / (u.max_speed() + params.eps_floor);
    Ok(dt.min(params.dt_max))
}

fn zero_mean(w: &SpectralField) -> SpectralField {
    let mut z = w.clone();
    z.set_mean(0.0);
    z
}

/// Integrates from `initial.t` to `t_end`.
pub fn solve(
    initial: &State,
    t_end: f64,
    physics: &Physics,
    forcing: &dyn Forcing,
    mean: &dyn MeanFlow,
    params: &SolverParams,
) -> Result<Trajectory> {
    initial.w.same_grid(&initial.theta)?;
    if !(t_end >= initial.t) {
        return Err(Error::InvalidArgument(format!("end time {t_end} before start {}", initial.t)));
    }
    if physics.nu < 0.0 || physics.tau < 0.0 {
        return Err(Error::InvalidArgument("negative diffusivity".into()));
    }
    let mut s = initial.clone();
    s.w.set_mean(0.0);
    let mut samples = vec![TrajectorySample::of(&s, params.m)];
    let mut next_record = s.t + params.record_every;
    let span = t_end - s.t;
    let mut steps = 0usize;
    let fixed = match params.policy {
        StepPolicy::Fixed(dt) => {
            if !(dt > 0.0) {
                return Err(Error::InvalidArgument(format!("step size {dt}")));
            }
            let k = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
            Some((k, span / k as f64))
        }
        StepPolicy::Adaptive => None,
    };
    if span == 0.0 {
        return Ok(Trajectory { final_state: s, samples, steps });
    }
    let fmax = forcing.max_dt();
    loop {
        let dt = match fixed {
            Some((k, dt)) => {
                if steps == k {
                    break;
                }
                dt
            }
            None => {
                let remaining = t_end - s.t;
                if remaining <= 1e-14 * span.max(1.0) {
                    break;
                }
                let dt = cfl_dt(&s, params)?.min(fmax);
                if dt >= remaining {
                    remaining
                } else if dt > 0.5 * remaining {
                    0.5 * remaining
                } else {
                    dt
                }
            }
        };
        let t_prev = s.t;
        s = step(&s, dt, physics, forcing, mean)?;
        if let Some((k, _)) = fixed {
            s.t = initial.t + span * (steps + 1) as f64 / k as f64;
        } else if (t_end - s.t).abs() < 1e-12 * span.max(1.0) {
            s.t = t_end;
        }
        debug_assert!(s.t > t_prev);
        steps += 1;
        if params.record_every == 0.0 || s.t >= next_record - 1e-12 {
            samples.push(TrajectorySample::of(&s, params.m));
            while next_record <= s.t + 1e-12 {
                next_record += params.record_every.max(f64::MIN_POSITIVE);
            }
        }
    }
    s.t = t_end;
    if samples.last().map(|x| x.t) != Some(s.t) {
        samples.push(TrajectorySample::of(&s, params.m));
    }
    Ok(Trajectory { final_state: s, samples, steps })
}
