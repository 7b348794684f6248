use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bouss::flows::{build_convection, flow_y, principal};
use bouss::geometry::{build_partition, Domain, GeometryConfig};
use bouss::linear_control::{simpson_weights, Taper};
use bouss::localization::{reconstruct, ZETA_COUNT};
use bouss::solver::{solve, NoMeanFlow, Physics, SolverParams, State, StepPolicy, SteadyForcing};
use bouss::spectral::{curl, inverse_curl, SpectralField, TWO_PI};
use bouss::steering::{choose_xi, loglog_slope, SweepRow};

fn field(n: usize, kmax: i64, seed: u64) -> SpectralField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = SpectralField::random_band_limited(n, kmax, 1.0, &mut rng);
    f.set_mean(0.0);
    f
}

fn grid() -> impl Strategy<Value = usize> {
    prop_oneof![Just(8usize), Just(16), Just(32)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn curl_inverts_div_curl(n in grid(), seed in any::<u64>(), a1 in -3.0..3.0f64, a2 in -3.0..3.0f64) {
        let z = field(n, (n / 4) as i64, seed);
        let u = inverse_curl(&z, [a1, a2]).unwrap();
        prop_assert!(curl(&u).unwrap().sub(&z).max_abs_coeff() < 1e-12);
        prop_assert!(u.divergence().max_abs_coeff() < 1e-12);
        let m = u.mean();
        prop_assert!((m[0] - a1).abs() < 1e-13 && (m[1] - a2).abs() < 1e-13);
    }

    #[test]
    fn sobolev_norms_grow_with_index(n in grid(), seed in any::<u64>(), s in -4.0..4.0f64) {
        let f = field(n, (n / 4) as i64, seed);
        let mut prev = 0.0;
        for m in 0..=4 {
            let v = f.norm(m);
            prop_assert!(v + 1e-12 >= prev);
            prev = v;
        }
        prop_assert!((f.scale(s).norm(2) - s.abs() * f.norm(2)).abs() <= 1e-12 * (1.0 + f.norm(2)));
    }

    #[test]
    fn vertical_shifts_compose(n in grid(), seed in any::<u64>(), a in -7.0..7.0f64, b in -7.0..7.0f64) {
        let f = field(n, (n / 4) as i64, seed);
        let lhs = f.shift_vertical(a).shift_vertical(b);
        let rhs = f.shift_vertical(a + b);
        prop_assert!(lhs.sub(&rhs).max_abs_coeff() < 1e-12);
    }

    #[test]
    fn antiderivative_inverts_d1_off_line_means(n in grid(), seed in any::<u64>()) {
        let f = field(n, (n / 4) as i64, seed);
        let g = f.antiderivative_x1().dx1();
        prop_assert!(g.sub(&f.sub(&f.line_mean_part())).max_abs_coeff() < 1e-12);
    }

    #[test]
    fn xi_residual_is_the_line_mean_part(seed in any::<u64>()) {
        let n = 16;
        let a = field(n, 4, seed);
        let b = field(n, 4, seed.wrapping_add(1));
        let (xi, r) = choose_xi(&a, &b, 2).unwrap();
        let left = a.sub(&xi.dx1()).sub(&b);
        prop_assert!((left.norm(1) - r).abs() <= 1e-10 * (1.0 + r));
    }

    #[test]
    fn cutoffs_cover_the_circle(x in -10.0..10.0f64) {
        let p = build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap();
        let s: f64 = (0..p.k).map(|i| p.mu(x - 0.75 * i as f64 * p.lk)).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p.mu(x)));
    }

    #[test]
    fn convection_flow_composes(x2 in 0.0..TWO_PI, s in 0.0..1.0f64, t in 0.0..1.0f64, r in 0.0..1.0f64) {
        let p = build_partition(Domain { a: 1.0, b: 3.0 }, &GeometryConfig::default()).unwrap();
        let c = build_convection(&p, 4).unwrap();
        let direct = flow_y(&c, [0.5, x2], s, r);
        let via = flow_y(&c, flow_y(&c, [0.5, x2], s, t), t, r);
        prop_assert!(principal(direct[1] - via[1]).abs() < 1e-12);
        prop_assert_eq!(direct[0], 0.5);
    }

    #[test]
    fn taper_stays_in_unit_range(w in 0.01..0.25f64, s in 0.0..1.0f64) {
        let t = Taper::new(w).unwrap();
        let v = t.value(s);
        prop_assert!((0.0..=1.0).contains(&v));
        if s >= w && s <= 1.0 - w {
            prop_assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn reconstruction_is_linear(seed in any::<u64>(), a in -5.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let zetas: Vec<Vec<f64>> = (0..ZETA_COUNT).map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let g1: [f64; ZETA_COUNT] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let g2: [f64; ZETA_COUNT] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let mix: [f64; ZETA_COUNT] = std::array::from_fn(|l| a * g1[l] + g2[l]);
        let (r1, r2, rm) = (reconstruct(&g1, &zetas), reconstruct(&g2, &zetas), reconstruct(&mix, &zetas));
        for q in 0..64 {
            prop_assert!((rm[q] - (a * r1[q] + r2[q])).abs() < 1e-12);
        }
    }

    #[test]
    fn simpson_integrates_cubics(k in 1usize..40, c0 in -2.0..2.0f64, c3 in -2.0..2.0f64) {
        let samples = 2 * k;
        let h = 1.0 / samples as f64;
        let w = simpson_weights(samples, h);
        let f = |t: f64| c0 + t - 3.0 * t * t + c3 * t * t * t;
        let got: f64 = w.iter().enumerate().map(|(i, wi)| wi * f(i as f64 * h)).sum();
        prop_assert!((got - (c0 + 0.5 - 1.0 + 0.25 * c3)).abs() < 1e-12);
    }

    #[test]
    fn slope_recovers_power_laws(p in -3.0..3.0f64, c in 0.1..10.0f64) {
        let rows: Vec<SweepRow> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&d: &f64| SweepRow { delta: d, discrepancy: c * d.powf(p), secondary: 0.0, steps: 0, failed: false })
            .collect();
        prop_assert!((loglog_slope(&rows).unwrap() - p).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn temperature_mean_follows_the_forcing(seed in any::<u64>(), c in -1.0..1.0f64, m0 in -1.0..1.0f64) {
        let n = 16;
        let mut psi = field(n, 3, seed);
        psi.set_mean(c);
        let mut theta = field(n, 3, seed ^ 7);
        theta.set_mean(m0);
        let forcing = SteadyForcing { h1: Some(field(n, 3, seed ^ 9)), h2: Some(psi) };
        let params = SolverParams { policy: StepPolicy::Fixed(5e-3), ..SolverParams::default() };
        let s = solve(&State::new(0.0, field(n, 3, seed ^ 3), theta), 0.5, &Physics { nu: 0.05, tau: 0.05 }, &forcing, &NoMeanFlow, &params)
            .unwrap()
            .final_state;
        prop_assert!((s.theta.mean() - (m0 + 0.5 * c)).abs() < 1e-10);
        prop_assert!(s.w.mean().abs() < 1e-14);
    }
}
