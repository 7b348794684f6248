//! Invariant suites behind `bouss verify`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::flows::{build_convection, flow_u, flow_y, GeneratingField};
use crate::geometry::{build_partition, verify_cutoffs, Domain};
use crate::localization::{build_zeta_library, localized_plan, reconstruct, Node};
use crate::solver::{solve, NoForcing, NoMeanFlow, Physics, SolverParams, State, StepPolicy};
use crate::spectral::{curl, inverse_curl, SpectralField, TWO_PI};
use crate::steering::Setup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Spectral,
    Solver,
    Geometry,
    Flows,
    Localization,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Spectral, Suite::Solver, Suite::Geometry, Suite::Flows, Suite::Localization];

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Spectral => "spectral",
            Suite::Solver => "solver",
            Suite::Geometry => "geometry",
            Suite::Flows => "flows",
            Suite::Localization => "localization",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

fn check(suite: Suite, name: &str, value: f64, tol: f64) -> Check {
    Check { suite: suite.name(), name: name.to_string(), value, tol, pass: value <= tol }
}

/// Inputs of the suites: the configured grid, physics and setup.
pub struct VerifyInputs<'a> {
    pub n: usize,
    pub physics: Physics,
    pub setup: Option<&'a Setup>,
    pub seed: u64,
}

pub fn run(suite: Suite, inp: &VerifyInputs) -> Result<Vec<Check>> {
    match suite {
        Suite::Spectral => spectral(inp),
        Suite::Solver => solver(inp),
        Suite::Geometry => geometry(inp),
        Suite::Flows => flows(inp),
        Suite::Localization => localization(inp),
    }
}

fn spectral(inp: &VerifyInputs) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(inp.seed);
    let (mut curl_err, mut mean_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let mut z = SpectralField::random_band_limited(inp.n, (inp.n / 3) as i64, 1.0, &mut rng);
        z.set_mean(0.0);
        let a = [0.7, -1.3];
        let u = inverse_curl(&z, a)?;
        curl_err = curl_err.max(curl(&u)?.sub(&z).max_abs_coeff());
        let m = u.mean();
        mean_err = mean_err.max((m[0] - a[0]).abs().max((m[1] - a[1]).abs()));
    }
    Ok(vec![
        check(Suite::Spectral, "curl_of_inverse_curl", curl_err, 1e-12),
        check(Suite::Spectral, "mean_of_inverse_curl", mean_err, 1e-12),
    ])
}

fn solver(inp: &VerifyInputs) -> Result<Vec<Check>> {
    let n = inp.n;
    let ph = inp.physics;
    let params = SolverParams { policy: StepPolicy::Fixed(1e-3), ..SolverParams::default() };
    let w0 = SpectralField::from_fn(n, |_, y| y.cos());
    let run = solve(&State::new(0.0, w0.clone(), SpectralField::zeros(n)), 1.0, &ph, &NoForcing, &NoMeanFlow, &params)?;
    let w_err = run.final_state.w.sub(&w0.scale((-ph.nu).exp())).l2() / w0.scale((-ph.nu).exp()).l2();
    let th0 = SpectralField::from_fn(n, |_, y| y.sin() + 0.5);
    let run = solve(&State::new(0.0, SpectralField::zeros(n), th0.clone()), 1.0, &ph, &NoForcing, &NoMeanFlow, &params)?;
    let mut expect = SpectralField::from_fn(n, |_, y| y.sin()).scale((-ph.tau).exp());
    expect.set_mean(0.5);
    let th_err = run.final_state.theta.sub(&expect).l2() / expect.l2();
    let mean_err = (run.final_state.theta.mean() - 0.5).abs();
    Ok(vec![
        check(Suite::Solver, "vorticity_decay_rel", w_err, 1e-8),
        check(Suite::Solver, "temperature_decay_rel", th_err, 1e-8),
        check(Suite::Solver, "temperature_mean", mean_err, 1e-10),
    ])
}

fn geometry(inp: &VerifyInputs) -> Result<Vec<Check>> {
    let p = build_partition(Domain { a: 1.0, b: 3.0 }, &Default::default())?;
    let r = verify_cutoffs(&p, 10_000, inp.seed);
    let td = p.time_grid().t_delta;
    Ok(vec![
        check(Suite::Geometry, "partition_of_unity", r.partition_of_unity_error, 1e-12),
        check(Suite::Geometry, "plateau", r.plateau_error, 1e-12),
        check(Suite::Geometry, "support", r.support_violation, 1e-12),
        check(Suite::Geometry, "k_equals_17", (p.k as f64 - 17.0).abs(), 0.0),
        check(Suite::Geometry, "t_delta_equals_1_over_53", (td - 1.0 / 53.0).abs(), 1e-15),
    ])
}

fn flows(inp: &VerifyInputs) -> Result<Vec<Check>> {
    let p = build_partition(Domain { a: 1.0, b: 3.0 }, &Default::default())?;
    let c = build_convection(&p, 4)?;
    let g = c.grid;
    let mut parked = 0.0f64;
    let mut member = 0.0f64;
    for i in 1..=p.k {
        let (ta, tb) = (g.t_a(i), g.t_b(i));
        let mid = 0.5 * (ta + tb);
        for q in 0..=8 {
            parked = parked.max((c.displacement(ta + (tb - ta) * q as f64 / 8.0) - c.shifts[i - 1]).abs());
        }
        let (lo, hi) = p.strips[i - 1];
        for q in 0..=16 {
            let x2 = lo + (hi - lo) * q as f64 / 16.0;
            let y = flow_y(&c, [0.0, x2], 0.0, mid)[1];
            let (rlo, rhi) = p.reference;
            let off = crate::flows::principal(y - 0.5 * (rlo + rhi));
            member = member.max(off.abs() - 0.5 * (rhi - rlo)).max(0.0);
        }
    }
    let gf = GeneratingField::new(&Default::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(inp.seed);
    let mut trip = 0.0f64;
    for _ in 0..16 {
        use rand::Rng;
        let x = [rng.gen_range(0.0..TWO_PI), rng.gen_range(0.0..TWO_PI)];
        let y = flow_u(&gf, x, 0.0, 1.0, 256);
        let z = flow_u(&gf, y, 1.0, 0.0, 256);
        trip = trip.max((z[0] - x[0]).abs().max((z[1] - x[1]).abs()));
    }
    Ok(vec![
        check(Suite::Flows, "displacement_at_1", c.displacement(1.0).abs(), 0.0),
        check(Suite::Flows, "displacement_constant_on_windows", parked, 0.0),
        check(Suite::Flows, "strip_reaches_reference", member, 1e-12),
        check(Suite::Flows, "generating_flow_round_trip", trip, 1e-10),
    ])
}

fn localization(inp: &VerifyInputs) -> Result<Vec<Check>> {
    let Some(setup) = inp.setup else {
        return Ok(Vec::new());
    };
    let n = setup.n;
    let planner = setup.planner()?;
    let mut rng = ChaCha8Rng::seed_from_u64(inp.seed);
    let mut v1 = SpectralField::random_disk(n, 2.0, 1.0, &mut rng);
    v1.set_mean(0.0);
    let mut th1 = SpectralField::random_disk(n, 2.0, 1.0, &mut rng);
    th1.set_mean(0.0);
    let plan = localized_plan(&v1, &th1, &planner.synth, &setup.partition, None)?;
    let zl = build_zeta_library(&setup.partition, planner.synth.library());
    let mut recon = 0.0f64;
    for j in [2usize, 5, 26, 50] {
        for i in [0, plan.samples / 3, plan.samples] {
            let nd = Node { j, i };
            let eta = plan.eta_physical(nd);
            let r = reconstruct(&plan.gammas(nd), &zl.at_node(&plan, nd));
            let scale = eta.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            let d = eta.iter().zip(&r).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            recon = recon.max(d / scale);
        }
    }
    let r = &plan.report;
    Ok(vec![
        check(Suite::Localization, "theta_sharp_identity_rel", r.theta_sharp_rel, 1e-3),
        check(Suite::Localization, "v_identity_rel", r.v_identity_rel, 1e-3),
        check(Suite::Localization, "support_outside_band", r.max_outside, 1e-12),
        check(Suite::Localization, "spatial_mean_rel", r.max_mean_rel, 1e-10),
        check(Suite::Localization, "reconstruction_from_zeta", recon, 1e-10),
    ])
}
