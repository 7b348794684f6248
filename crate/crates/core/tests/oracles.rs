use std::f64::consts::PI;

use approx::assert_relative_eq;

use bouss::flows::{build_convection, flow_u, FlowConfig, GeneratingField};
use bouss::geometry::{build_partition, gauss_legendre, Domain, GeometryConfig};
use bouss::linear_control::{transport_solve, Drift};
use bouss::solver::{solve, NoForcing, NoMeanFlow, Physics, SolverParams, State, StepPolicy, SteadyForcing};
use bouss::spectral::{evaluate, grid_points, SpectralField};
use bouss::steering::reduction_constant;

fn fixed(dt: f64) -> SolverParams {
    SolverParams { policy: StepPolicy::Fixed(dt), ..SolverParams::default() }
}

#[test]
fn arithmetic_example_of_the_partition() {
    let p = build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap();
    assert_eq!(p.k, 17);
    assert_relative_eq!(p.lk, 8.0 * PI / 51.0, epsilon = 1e-15);
    assert_relative_eq!(p.time_grid().t_delta, 1.0 / 53.0, epsilon = 1e-15);
    assert_relative_eq!(p.h1, 1.25, epsilon = 1e-15);
    assert_relative_eq!(p.h2, 2.75, epsilon = 1e-15);
}

#[test]
fn gauss_legendre_matches_tabulated_nodes() {
    let (x, w) = gauss_legendre(3);
    let mut x = x;
    x.sort_by(f64::total_cmp);
    let r = (0.6f64).sqrt();
    assert_relative_eq!(x[0], -r, epsilon = 1e-15);
    assert_relative_eq!(x[1], 0.0, epsilon = 1e-15);
    assert_relative_eq!(x[2], r, epsilon = 1e-15);
    assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
}

/// Buoyancy drives a single horizontal mode with no advection:
/// `theta = e^{-tau t} sin x1`, `w = (e^{-tau t} - e^{-nu t}) / (nu - tau) cos x1`.
#[test]
fn buoyancy_forced_mode() {
    let n = 32;
    let ph = Physics { nu: 0.1, tau: 0.03 };
    let th0 = SpectralField::from_fn(n, |x, _| x.sin());
    let s = solve(&State::new(0.0, SpectralField::zeros(n), th0.clone()), 1.0, &ph, &NoForcing, &NoMeanFlow, &fixed(1e-3))
        .unwrap()
        .final_state;
    let amp = ((-ph.tau).exp() - (-ph.nu).exp()) / (ph.nu - ph.tau);
    let w = SpectralField::from_fn(n, |x, _| amp * x.cos());
    assert!(s.w.sub(&w).l2() / w.l2() < 1e-7);
    assert!(s.theta.sub(&th0.scale((-ph.tau).exp())).l2() < 1e-10);
}

/// Steady shear forcing `cos x2` on a shear flow: `w = (1 - e^{-nu t}) / nu cos x2`.
#[test]
fn forced_shear_mode() {
    let n = 32;
    let ph = Physics { nu: 0.2, tau: 0.2 };
    let h = SpectralField::from_fn(n, |_, y| y.cos());
    let forcing = SteadyForcing { h1: Some(h.clone()), h2: None };
    let s = solve(&State::new(0.0, SpectralField::zeros(n), SpectralField::zeros(n)), 1.5, &ph, &forcing, &NoMeanFlow, &fixed(1e-3))
        .unwrap()
        .final_state;
    let expect = h.scale((1.0 - (-ph.nu * 1.5).exp()) / ph.nu);
    assert!(s.w.sub(&expect).l2() / expect.l2() < 1e-8);
}

/// A constant vertical mean flow translates a passive temperature mode.
#[test]
fn mean_flow_translates_exactly() {
    let n = 32;
    let ph = Physics { nu: 0.0, tau: 0.0 };
    let th0 = SpectralField::from_fn(n, |_, y| (2.0 * y).sin() + 0.5 * y.cos());
    let mean = bouss::solver::ConstantMeanFlow([0.0, 1.7]);
    let s = solve(&State::new(0.0, SpectralField::zeros(n), th0), 0.8, &ph, &NoForcing, &mean, &fixed(1e-2))
        .unwrap()
        .final_state;
    let expect = SpectralField::from_fn(n, |_, y| (2.0 * (y - 1.36)).sin() + 0.5 * (y - 1.36).cos());
    assert!(s.theta.sub(&expect).l2() < 1e-12);
}

/// Transport along the convection drift: `z(x, 1) = int_0^1 f(x2 + D(t) - D(1), t) dt`,
/// with `D` obtained by Gauss-Legendre quadrature of `y2`.
#[test]
fn convection_transport_matches_quadrature() {
    let n = 16;
    let p = build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap();
    let c = build_convection(&p, 4).unwrap();
    let samples = 53 * 256;
    let f = |x: f64, y: f64, t: f64| (x + y).cos() * (1.0 + t) + (2.0 * y).sin();
    let source: Vec<SpectralField> =
        (0..=samples).map(|i| SpectralField::from_fn(n, |x, y| f(x, y, i as f64 / samples as f64))).collect();
    let z = transport_solve(&Drift::Convection(&c), &source, 1.0).unwrap();

    let (gx, gw) = gauss_legendre(20);
    let td = c.grid.t_delta;
    let mut nodes = Vec::new();
    let mut d = 0.0;
    for j in 0..53 {
        let (a, b) = (j as f64 * td, (j + 1) as f64 * td);
        let mut inner = Vec::new();
        for (xi, wi) in gx.iter().zip(&gw) {
            let t = 0.5 * (a + b) + 0.5 * (b - a) * xi;
            let (tx, tw) = (0.5 * (a + t), 0.5 * (t - a));
            let dt: f64 = gx.iter().zip(&gw).map(|(y, v)| tw * v * c.y2(tx + tw * y)).sum();
            inner.push((t, 0.5 * (b - a) * wi, d + dt));
        }
        d += gx.iter().zip(&gw).map(|(y, v)| 0.5 * (b - a) * v * c.y2(0.5 * (a + b) + 0.5 * (b - a) * y)).sum::<f64>();
        nodes.extend(inner);
    }
    let pts: Vec<[f64; 2]> = grid_points(n).into_iter().step_by(7).collect();
    let got = evaluate(&z, &pts);
    for (q, x) in pts.iter().enumerate() {
        let oracle: f64 = nodes.iter().map(|&(t, w, dt)| w * f(x[0], x[1] + dt - d, t)).sum();
        assert!((got[q] - oracle).abs() < 1e-6, "{} vs {oracle}", got[q]);
    }
}

/// `int_0^1 f(U(x, 1, t), t) dt` with Gauss-Legendre nodes on every stage of
/// the generating field, carrying the characteristic backward stage by stage.
pub fn characteristics_oracle(g: &GeneratingField, f: &dyn Fn([f64; 2], f64) -> f64, x: [f64; 2]) -> f64 {
    let (gx, gw) = gauss_legendre(8);
    let bp = g.breakpoints();
    let mut y = x;
    let mut acc = 0.0;
    for seg in bp.windows(2).rev() {
        let (a, b) = (seg[0], seg[1]);
        for (xi, wi) in gx.iter().zip(&gw) {
            let t = 0.5 * (a + b) + 0.5 * (b - a) * xi;
            acc += 0.5 * (b - a) * wi * f(flow_u(g, y, b, t, 64), t);
        }
        y = flow_u(g, y, b, a, 128);
    }
    acc
}

/// Transport along the generating field against characteristics traced
/// point by point.
#[test]
fn generating_transport_matches_characteristics() {
    let n = 16;
    let g = GeneratingField::new(&FlowConfig::default()).unwrap();
    let samples = 512;
    let f = |x: [f64; 2], t: f64| (x[0] - t).sin() * (x[1]).cos() + 0.3;
    let source: Vec<SpectralField> =
        (0..=samples).map(|i| SpectralField::from_fn(n, |a, b| f([a, b], i as f64 / samples as f64))).collect();
    let z = transport_solve(&Drift::Generating { field: &g, substeps: 16 }, &source, 1.0).unwrap();
    for x in grid_points(n).into_iter().step_by(19) {
        let oracle = characteristics_oracle(&g, &f, x);
        let got = evaluate(&z, &[x])[0];
        assert!((got - oracle).abs() < 1e-4, "{got} vs {oracle}");
    }
}

/// `sup ||Upsilon(z, 0)||_m / ||z||_{m-1}` over single modes; frozen values.
#[test]
fn reduction_constant_values() {
    // both ratios peak at |k| = 1: (1 + |k|^2) / |k|^2 and (1 + |k|^2 + k1^4 + k1^2 k2^2 + k2^4) / (|k|^2 (1 + |k|^2))
    assert_relative_eq!(reduction_constant(16, 1), 2.0f64.sqrt(), epsilon = 1e-15);
    assert_relative_eq!(reduction_constant(16, 2), 1.5f64.sqrt(), epsilon = 1e-15);
}
