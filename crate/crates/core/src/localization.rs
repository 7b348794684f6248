//! Localization of a control into the band: each strip is treated while the
//! convection strategy parks it in the reference strip, and two profile
//! terms remove the spatial mean.
//!
//! The localized control lives on a node grid of `3K + 2` intervals of
//! length `T_delta`, each carrying `S + 1` nodes; interval ends are repeated
//! so that jumps at window edges keep both one-sided values.

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flows::Convection;
use crate::geometry::{Partition, TimeGrid};
use crate::linear_control::{
    linear_endpoint, simpson_weights, CoupledSynthesizer, ModeLibrary, NonlocalizedControl, FAMILY_LABELS,
};
use crate::spectral::{coord, SpectralField};

/// Number of actuator profiles of a localized control.
pub const ZETA_COUNT: usize = 14;

pub fn zeta_labels() -> Vec<String> {
    let mut v = vec!["chi_tilde".to_string(), "chi_tilde'".to_string()];
    v.extend(FAMILY_LABELS.iter().map(|l| format!("chi*{l}")));
    v
}

/// Visits of every grid row to the reference strip.
#[derive(Clone, Debug, PartialEq)]
pub struct HittingData {
    pub x2: Vec<f64>,
    /// Window indices `k_l(x)` (1-based, increasing).
    pub windows: Vec<Vec<usize>>,
    /// `a_l(x) = chi(x2 + c_{k_l})`.
    pub weights: Vec<Vec<f64>>,
    pub e: Vec<f64>,
}

pub fn hitting_data(p: &Partition, c: &Convection, n: usize) -> Result<HittingData> {
    crate::spectral::check_grid(n)?;
    let g = c.grid;
    let mut out = HittingData { x2: Vec::new(), windows: Vec::new(), weights: Vec::new(), e: Vec::new() };
    for i2 in 0..n {
        let x2 = coord(i2, n);
        let (mut ks, mut ws) = (Vec::new(), Vec::new());
        for k in 1..=p.k {
            let a = p.chi(x2 + c.shifts[k - 1]);
            if a > 0.0 {
                ks.push(k);
                ws.push(a);
            }
        }
        if ks.is_empty() || ks.len() > 2 {
            return Err(Error::Precondition(format!("row x2 = {x2} is visited {} times", ks.len())));
        }
        let e = ks.iter().zip(&ws).map(|(&k, &a)| a * (1.0 - g.t_b(k))).sum();
        out.x2.push(x2);
        out.windows.push(ks);
        out.weights.push(ws);
        out.e.push(e);
    }
    Ok(out)
}

/// Node `i` of interval `j` on the localized time grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node {
    pub j: usize,
    pub i: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LocalizationReport {
    /// `||theta#(1) - theta(1)|| / ||theta(1)||`.
    pub theta_sharp_rel: f64,
    /// `||Theta(1) - theta#(1)|| / ||theta#(1)||`.
    pub endpoint_preservation_rel: f64,
    /// `||V(1) - E d1 Theta(1) - T_delta v(1)|| / ||V(1)||`.
    pub v_identity_rel: f64,
    /// Space-time average of the localized control before correction.
    pub f_average: f64,
    pub max_outside: f64,
    /// Largest `|mean eta(t)|` relative to `max |eta|`.
    pub max_mean_rel: f64,
    /// Endpoint errors of the localized linear system against its targets.
    pub v_error: f64,
    pub theta_error: f64,
    pub target_norm: f64,
    pub failed: bool,
}

/// Localized control with its coefficient schedules.
pub struct LocalizedControl {
    pub partition: Partition,
    pub conv: Convection,
    pub n: usize,
    pub samples: usize,
    pub alpha: Vec<[f64; 12]>,
    pulled: Vec<SpectralField>,
    chi: Vec<f64>,
    chi_tilde: Vec<f64>,
    chi_tilde_prime: Vec<f64>,
    chi_tilde_mean: f64,
    chi_tilde_prime_mean: f64,
    /// Mean of `f` at window `k` node `i`.
    mf: Vec<Vec<f64>>,
    cum: Vec<Vec<f64>>,
    f_before: Vec<f64>,
    pub hitting: HittingData,
    pub report: LocalizationReport,
}

/// `(V(1), Theta(1), theta#(1))` of the inviscid linear system driven by the
/// localized control.
pub struct LinearEndpoints {
    pub v: SpectralField,
    pub theta: SpectralField,
    pub theta_sharp: SpectralField,
}

fn profile(n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..n).map(|i| f(coord(i, n))).collect()
}

fn grid_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let s: f64 = b.iter().map(|y| y * y).sum();
    (d / s.max(f64::MIN_POSITIVE)).sqrt()
}

impl LocalizedControl {
    /// Builds the localized control from a non-localized one.
    pub fn new(nonlocal: &NonlocalizedControl, lib: &ModeLibrary, partition: &Partition) -> Result<Self> {
        let conv = lib.conv.clone();
        let n = lib.modes.n();
        let samples = nonlocal.samples;
        if samples < 2 || samples % 2 != 0 {
            return Err(Error::InvalidArgument(format!("{samples} samples per window")));
        }
        let g = conv.grid;
        let td = g.t_delta;
        let pulled: Vec<SpectralField> =
            (0..=samples).into_par_iter().map(|i| lib.pulled_back(i, &nonlocal.alpha[i])).collect();
        let half = n as i64 / 2;
        let chat: Vec<Complex64> = (-half + 1..half).map(|q| partition.chi_fourier(-q)).collect();
        let mut mf = Vec::with_capacity(g.k);
        let mut cum = Vec::with_capacity(g.k);
        let mut f_before = vec![0.0];
        let h = 1.0 / samples as f64;
        for k in 1..=g.k {
            let c = conv.shifts[k - 1];
            let m: Vec<f64> = pulled
                .iter()
                .map(|gi| {
                    let mut s = Complex64::default();
                    for (idx, q) in (-half + 1..half).enumerate() {
                        s += chat[idx] * gi.coeff(0, q) * Complex64::from_polar(1.0, -(q as f64) * c);
                    }
                    s.re / td
                })
                .collect();
            let mut cu = vec![0.0; samples + 1];
            for i in 1..=samples {
                cu[i] = if i % 2 == 0 {
                    cu[i - 2] + h / 3.0 * (m[i - 2] + 4.0 * m[i - 1] + m[i])
                } else {
                    cu[i - 1] + h / 12.0 * (5.0 * m[i - 1] + 8.0 * m[i] - m[i + 1])
                };
            }
            let last = *f_before.last().unwrap();
            f_before.push(last + td * cu[samples]);
            mf.push(m);
            cum.push(cu);
        }
        let chi_tilde = profile(n, |x| partition.chi_tilde(x));
        let chi_tilde_prime = profile(n, |x| partition.chi_tilde_prime(x));
        let mut out = LocalizedControl {
            partition: partition.clone(),
            n,
            samples,
            alpha: nonlocal.alpha.clone(),
            pulled,
            chi: profile(n, |x| partition.chi(x)),
            chi_tilde_mean: grid_mean(&chi_tilde),
            chi_tilde_prime_mean: grid_mean(&chi_tilde_prime),
            chi_tilde,
            chi_tilde_prime,
            mf,
            cum,
            f_before,
            hitting: hitting_data(partition, &conv, n)?,
            conv,
            report: LocalizationReport::default(),
        };
        out.report.f_average = *out.f_before.last().unwrap();
        Ok(out)
    }

    pub fn grid(&self) -> TimeGrid {
        self.conv.grid
    }

    pub fn intervals(&self) -> usize {
        3 * self.grid().k + 2
    }

    /// All nodes in time order.
    pub fn nodes(&self) -> Vec<Node> {
        (0..self.intervals()).flat_map(|j| (0..=self.samples).map(move |i| Node { j, i })).collect()
    }

    pub fn time(&self, node: Node) -> f64 {
        (node.j as f64 + node.i as f64 / self.samples as f64) * self.grid().t_delta
    }

    /// Window parked during interval `j`.
    pub fn window(&self, j: usize) -> Option<usize> {
        if j % 3 == 2 && j + 1 <= 3 * self.grid().k {
            Some((j + 1) / 3)
        } else {
            None
        }
    }

    fn displacement(&self, node: Node) -> f64 {
        match self.window(node.j) {
            Some(k) => self.conv.shifts[k - 1],
            None => self.conv.displacement(self.time(node)),
        }
    }

    /// `F(t) = int_0^t int f dx ds`.
    pub fn big_f(&self, node: Node) -> f64 {
        let td = self.grid().t_delta;
        match self.window(node.j) {
            Some(k) => self.f_before[k - 1] + td * self.cum[k - 1][node.i],
            None => self.f_before[(node.j + 1) / 3],
        }
    }

    fn gamma2(&self, node: Node) -> f64 {
        match self.window(node.j) {
            Some(_) => 0.0,
            None => -self.conv.y2(self.time(node)) * self.big_f(node),
        }
    }

    /// `f` at a node, before correction (physical values).
    fn f_physical(&self, node: Node) -> Option<Vec<f64>> {
        let k = self.window(node.j)?;
        let td = self.grid().t_delta;
        let mut v = self.pulled[node.i].shift_vertical(-self.conv.shifts[k - 1]).to_physical();
        let n = self.n;
        for i2 in 0..n {
            let a = self.chi[i2] / td;
            for x in &mut v[i2 * n..(i2 + 1) * n] {
                *x *= a;
            }
        }
        Some(v)
    }

    /// Schedules `gamma_1..gamma_14` at a node; `gamma_1` makes the grid
    /// mean of the emitted control vanish.
    pub fn gammas(&self, node: Node) -> [f64; ZETA_COUNT] {
        let mut out = [0.0; ZETA_COUNT];
        let g2 = self.gamma2(node);
        out[1] = g2;
        let fmean = self.f_physical(node).map_or(0.0, |v| grid_mean(&v));
        out[0] = -(fmean + g2 * self.chi_tilde_prime_mean) / self.chi_tilde_mean;
        if self.window(node.j).is_some() {
            let td = self.grid().t_delta;
            for l in 0..12 {
                out[2 + l] = self.alpha[node.i][l] / td;
            }
        }
        out
    }

    /// Emitted control at a node, physical values.
    pub fn eta_physical(&self, node: Node) -> Vec<f64> {
        let gm = self.gammas(node);
        let n = self.n;
        let mut v = self.f_physical(node).unwrap_or_else(|| vec![0.0; n * n]);
        for i2 in 0..n {
            let p = gm[0] * self.chi_tilde[i2] + gm[1] * self.chi_tilde_prime[i2];
            for x in &mut v[i2 * n..(i2 + 1) * n] {
                *x += p;
            }
        }
        v
    }

    pub fn eta(&self, node: Node) -> SpectralField {
        SpectralField::from_physical(self.n, &self.eta_physical(node)).expect("grid")
    }

    /// Exact translates of the correction profiles, summed over every node.
    fn correction_profile(&self) -> Vec<f64> {
        let td = self.grid().t_delta;
        let w = simpson_weights(self.samples, td / self.samples as f64);
        let n = self.n;
        let mut acc = vec![0.0; n];
        for node in self.nodes() {
            let d = self.displacement(node);
            let g1 = match self.window(node.j) {
                Some(k) => -self.mf[k - 1][node.i],
                None => 0.0,
            };
            let g2 = self.gamma2(node);
            if g1 == 0.0 && g2 == 0.0 {
                continue;
            }
            for (i2, a) in acc.iter_mut().enumerate() {
                let x = coord(i2, n) + d;
                *a += w[node.i] * (g1 * self.partition.chi_tilde(x) + g2 * self.partition.chi_tilde_prime(x));
            }
        }
        acc
    }

    /// Endpoints of the inviscid linear system along the convection flow,
    /// with translates of the cutoff profiles evaluated exactly and the
    /// smooth factor shifted spectrally. The correction uses the exact
    /// continuum mean of `f`.
    pub fn linear_endpoints(&self) -> LinearEndpoints {
        let g = self.grid();
        let n = self.n;
        let w = simpson_weights(self.samples, 1.0 / self.samples as f64);
        let mut sharp = vec![0.0; n * n];
        let mut moment = vec![0.0; n * n];
        for k in 1..=g.k {
            let c = self.conv.shifts[k - 1];
            let mut a = SpectralField::zeros(n);
            let mut b = SpectralField::zeros(n);
            for (i, gi) in self.pulled.iter().enumerate() {
                let t = g.t_a(k) + g.t_delta * i as f64 / self.samples as f64;
                a.axpy(w[i], gi);
                b.axpy(w[i] * (1.0 - t), gi);
            }
            let (pa, pb) = (a.to_physical(), b.to_physical());
            for i2 in 0..n {
                let x = self.partition.chi(coord(i2, n) + c);
                if x == 0.0 {
                    continue;
                }
                for i1 in 0..n {
                    sharp[i2 * n + i1] += x * pa[i2 * n + i1];
                    moment[i2 * n + i1] += x * pb[i2 * n + i1];
                }
            }
        }
        let corr = self.correction_profile();
        let mut theta = sharp.clone();
        for i2 in 0..n {
            for x in &mut theta[i2 * n..(i2 + 1) * n] {
                *x += corr[i2];
            }
        }
        let f = |v: &[f64]| SpectralField::from_physical(n, v).expect("grid");
        LinearEndpoints { v: f(&moment).dx1(), theta: f(&theta), theta_sharp: f(&sharp) }
    }

    /// Grid product `E(x2) h`.
    pub fn times_e(&self, h: &SpectralField) -> SpectralField {
        let n = self.n;
        h.mul_profile_x2(&self.hitting.e[..n])
    }

    /// Fills the identity and support diagnostics of the report.
    pub fn check(&mut self, v1: &SpectralField, theta1: &SpectralField) -> Result<()> {
        let ends = self.linear_endpoints();
        let (v_nl, theta_nl) = linear_endpoint(&self.pulled)?;
        let td = self.grid().t_delta;
        let r = &mut self.report;
        r.theta_sharp_rel = rel(&ends.theta_sharp.to_physical(), &theta_nl.to_physical());
        r.endpoint_preservation_rel = rel(&ends.theta.to_physical(), &ends.theta_sharp.to_physical());
        let mut rhs = self.times_e(&ends.theta.dx1());
        rhs.axpy(td, &v_nl);
        let r = &mut self.report;
        r.v_identity_rel = rel(&rhs.to_physical(), &ends.v.to_physical());
        r.v_error = ends.v.sub(v1).norm(0);
        r.theta_error = ends.theta.sub(theta1).norm(0);
        r.target_norm = v1.norm(0) + theta1.norm(0);
        let nodes = self.nodes();
        let stats: Vec<(f64, f64)> = nodes
            .par_iter()
            .filter(|nd| nd.i % 8 == 0 || self.window(nd.j).is_none())
            .map(|&nd| {
                let v = self.eta_physical(nd);
                let n = self.n;
                let mut out = 0.0f64;
                for i2 in 0..n {
                    if !self.partition.in_band(coord(i2, n)) {
                        for x in &v[i2 * n..(i2 + 1) * n] {
                            out = out.max(x.abs());
                        }
                    }
                }
                let big = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                (out, grid_mean(&v).abs() / big.max(1.0))
            })
            .collect();
        self.report.max_outside = stats.iter().map(|s| s.0).fold(0.0, f64::max);
        self.report.max_mean_rel = stats.iter().map(|s| s.1).fold(0.0, f64::max);
        Ok(())
    }
}

/// Localized control steering the inviscid linear system along the
/// convection flow from zero to `(v1, theta1)`.
pub fn localized_plan(
    v1: &SpectralField,
    theta1: &SpectralField,
    synth: &CoupledSynthesizer,
    partition: &Partition,
    epsilon: Option<f64>,
) -> Result<LocalizedControl> {
    let n = synth.modes.n();
    let hit = hitting_data(partition, synth.conv, n)?;
    let td = synth.conv.grid.t_delta;
    let e_d1 = theta1.dx1().mul_profile_x2(&hit.e);
    let v_nl = v1.sub(&e_d1).scale(1.0 / td);
    let nonlocal = synth.assemble(&v_nl, theta1)?;
    let mut plan = LocalizedControl::new(&nonlocal, &synth.library(), partition)?;
    plan.check(v1, theta1)?;
    if let Some(eps) = epsilon {
        let err = plan.report.v_error + plan.report.theta_error;
        if err > eps {
            warn!("localized plan misses its target by {err:.3e} (tolerance {eps:.3e})");
            plan.report.failed = true;
        }
    }
    Ok(plan)
}

/// The fourteen actuator profiles of localized controls.
pub struct ZetaLibrary<'a> {
    pub lib: ModeLibrary<'a>,
    pub partition: &'a Partition,
}

pub fn build_zeta_library<'a>(partition: &'a Partition, lib: ModeLibrary<'a>) -> ZetaLibrary<'a> {
    ZetaLibrary { lib, partition }
}

impl<'a> ZetaLibrary<'a> {
    fn assemble(&self, fam: [SpectralField; 12], shift: f64) -> Vec<Vec<f64>> {
        let n = self.lib.modes.n();
        let chi = profile(n, |x| self.partition.chi(x));
        let mut out = vec![profile(n, |x| self.partition.chi_tilde(x)), profile(n, |x| self.partition.chi_tilde_prime(x))];
        for f in fam {
            let mut v = f.shift_vertical(shift).to_physical();
            for i2 in 0..n {
                for x in &mut v[i2 * n..(i2 + 1) * n] {
                    *x *= chi[i2];
                }
            }
            out.push(v);
        }
        out[0] = expand(&out[0], n);
        out[1] = expand(&out[1], n);
        out
    }

    /// All profiles at a node of a localized grid with `samples` per window.
    pub fn at_node(&self, plan: &LocalizedControl, node: Node) -> Vec<Vec<f64>> {
        let (i, d) = match plan.window(node.j) {
            Some(k) => (Some(node.i), plan.conv.shifts[k - 1]),
            None => (None, plan.conv.displacement(plan.time(node))),
        };
        let fam = match i {
            Some(i) => self.lib.eval(i),
            None => self.lib.eval(0),
        };
        let sigma_d = match i {
            Some(i) => self.lib.conv.displacement(i as f64 / plan.samples as f64),
            None => 0.0,
        };
        self.assemble(fam, sigma_d - d)
    }

    /// All profiles at an arbitrary time.
    pub fn at(&self, t: f64) -> Vec<Vec<f64>> {
        let g = self.lib.conv.grid;
        let s = crate::flows::sigma(&g, t);
        let d = self.lib.conv.displacement(s) - self.lib.conv.displacement(t);
        self.assemble(self.lib.eval_at(s), d)
    }
}

fn expand(p: &[f64], n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n * n);
    for x in p {
        v.extend(std::iter::repeat(*x).take(n));
    }
    v
}

/// `sum_l gamma_l zeta_l` on the grid.
pub fn reconstruct(gammas: &[f64; ZETA_COUNT], zetas: &[Vec<f64>]) -> Vec<f64> {
    let mut v = vec![0.0; zetas[0].len()];
    for (g, z) in gammas.iter().zip(zetas) {
        if *g != 0.0 {
            for (a, b) in v.iter_mut().zip(z) {
                *a += g * b;
            }
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::build_convection;
    use crate::geometry::{build_partition, Domain, GeometryConfig};
    use approx::assert_abs_diff_eq;

    fn setup() -> (Partition, Convection) {
        let p = build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap();
        let c = build_convection(&p, 4).unwrap();
        (p, c)
    }

    #[test]
    fn single_visit_weight() {
        let (p, c) = setup();
        let h = hitting_data(&p, &c, 256).unwrap();
        let mut seen = false;
        for (i, ks) in h.windows.iter().enumerate() {
            let s: f64 = h.weights[i].iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            if ks == &vec![1] {
                assert_abs_diff_eq!(h.e[i], 50.0 / 53.0, epsilon = 1e-14);
                seen = true;
            }
            assert!(h.e[i] > 0.0 && h.e[i] < 1.0);
        }
        assert!(seen);
    }

    #[test]
    fn chi_fourier_matches_fine_sum() {
        let (p, _) = setup();
        let m = 1 << 16;
        for q in [0i64, 1, 5, -7, 30] {
            let mut s = Complex64::default();
            for i in 0..m {
                let x = coord(i, m);
                s += Complex64::from_polar(p.chi(x), -(q as f64) * x);
            }
            s /= m as f64;
            assert!((s - p.chi_fourier(q)).norm() < 1e-12);
        }
    }
}
