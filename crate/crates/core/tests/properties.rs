use nalgebra::DMatrix;
use phbeam::linalg::CsrMatrix;
use phbeam::{
    actuator_characteristic, boundary_delta, casimir_residuals, casimir_tolerance, controller_rhs, d1, d11,
    discrete_gradient, hc_gradient, integrate, integrate_product, interconnect, make_grid, output_density,
    step_midpoint, variational_derivative, AffineSystem, Beam, BeamParams, CasimirCandidate, ControllerGains,
    ControllerParams, Density2, Field, LeftEnd, PlantState,
};
use proptest::prelude::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn smooth(grid: phbeam::Grid, c: [f64; 3]) -> Field {
    Field::from_fn(grid, |z| c[0] * z * z + c[1] * z.powi(3) + c[2] * (3.0 * z).sin() * z * z)
}

/// Clamped at 0 and free at 1 (`w_11 = w_111 = 0` there).
fn cantilever(grid: phbeam::Grid, c: [f64; 3]) -> Field {
    Field::from_fn(grid, |z| {
        c[0] * z * z * (6.0 - 4.0 * z + z * z) + (1.0 - z).powi(4) * z * z * (c[1] + c[2] * (3.0 * z).sin())
    })
}

fn bending_coeff(grid: phbeam::Grid, amp: f64) -> Field {
    Field::from_fn(grid, |z| 1.0 + amp * (2.0 * std::f64::consts::PI * z).cos())
}

fn state(w: Field) -> PlantState {
    let grid = *w.grid();
    PlantState::new(w, Field::zeros(grid), 0.0).unwrap()
}

fn patch_params() -> impl Strategy<Value = BeamParams> {
    (80.0..100.0f64, 0.2..0.4f64, 0.1..0.3f64, 0.5..2.0f64, 0.5..2.0f64, 0.5..2.0f64).prop_map(
        |(sigma, z_p, l_p, ei, theta_p, delta_p)| BeamParams {
            sigma,
            z_p,
            l_p,
            ei,
            theta_p,
            delta_p,
            ..BeamParams::unit()
        },
    )
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn gradient_routes_agree_to_second_order(
        c in prop::array::uniform3(-1.0..1.0f64),
        amp in 0.0..0.5f64,
    ) {
        // Interior nodes whose stencils stay clear of the ends.
        let err = |n: usize| {
            let grid = make_grid(1.0, n).unwrap();
            let h = Density2::new(grid).with_bending(bending_coeff(grid, amp)).unwrap();
            let s = state(smooth(grid, c));
            let (a, _) = variational_derivative(&h, &s).unwrap();
            let (b, _) = discrete_gradient(&h, &s).unwrap();
            (4..n - 4).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
        };
        let scale = 1.0 + c.iter().map(|v| v.abs()).sum::<f64>();
        for n in [101, 201, 401] {
            let h = 1.0 / (n - 1) as f64;
            prop_assert!(err(n) <= 1e3 * scale * h * h, "N={n}: {:e}", err(n));
        }
    }

    #[test]
    fn input_output_duality(
        p in prop::collection::vec(-1.0..1.0f64, 201),
        u in -3.0..3.0f64,
    ) {
        let grid = make_grid(1.0, 201).unwrap();
        let prof = actuator_characteristic(&BeamParams { sigma: 40.0, z_p: 0.4, ..BeamParams::unit() }, &grid).unwrap();
        let h = phbeam::hamiltonian_density(&prof).unwrap();
        let mut p = p;
        p[0] = 0.0;
        let s = PlantState::new(Field::zeros(grid), Field::new(grid, p).unwrap(), u).unwrap();
        let (_, dp) = discrete_gradient(&h, &s).unwrap();
        let lhs = integrate(&prof.g.zip_map(&dp, |g, v| u * g * v).unwrap());
        let y = output_density(&prof, &s).unwrap();
        let rhs = u * integrate(&y);
        let scale = integrate(&prof.g.zip_map(&dp, |g, v| (u * g * v).abs()).unwrap()).max(1e-300);
        prop_assert!((lhs - rhs).abs() <= 1e-13 * scale);
    }

    #[test]
    fn ibp_remainder_matches_boundary_operators(
        c in prop::array::uniform3(-1.0..1.0f64),
        d in prop::array::uniform3(-1.0..1.0f64),
        amp in 0.0..0.5f64,
    ) {
        // dH[v] = ∫ δH v dz + [v δ^{∂,1} + v_1 δ^{∂,2}] for admissible w and
        // variations v clamped at z = 0.
        let mismatch = |n: usize| {
            let grid = make_grid(1.0, n).unwrap();
            let h = Density2::new(grid)
                .with_bending(bending_coeff(grid, amp))
                .unwrap()
                .with_left_end(LeftEnd::Clamped);
            let s = state(cantilever(grid, c));
            let v = smooth(grid, d);
            let (dw, _) = discrete_gradient(&h, &s).unwrap();
            let (var, _) = variational_derivative(&h, &s).unwrap();
            let directional = integrate_product(&dw, &v).unwrap();
            let bulk = integrate_product(&var, &v).unwrap();
            let b = boundary_delta(&h, &s).unwrap();
            let last = n - 1;
            let v1 = d1(&v);
            let remainder = v[last] * b.w.first.at_l + v1[last] * b.w.second.at_l
                - v[0] * b.w.first.at_0
                - v1[0] * b.w.second.at_0;
            (directional - bulk - remainder).abs()
        };
        let scale = (1.0 + c.iter().map(|v| v.abs()).sum::<f64>()) * (1.0 + d.iter().map(|v| v.abs()).sum::<f64>());
        for n in [201, 401, 801] {
            let h = 1.0 / (n - 1) as f64;
            let e = mismatch(n);
            prop_assert!(e <= 100.0 * scale * h * h, "N={n}: {e:e}");
        }
    }

    #[test]
    fn input_profile_has_no_net_force_or_torque(params in patch_params()) {
        let grid = make_grid(1.0, 401).unwrap();
        let prof = actuator_characteristic(&params, &grid).unwrap();
        prop_assert!(integrate(&prof.g).abs() <= 1e-8);
        let z = Field::from_fn(grid, |z| z);
        prop_assert!(integrate_product(&prof.g, &z).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn mass_and_stiffness_stay_positive(
        params in patch_params(),
        rho in (0.1..5.0f64, 0.1..5.0f64),
    ) {
        let params = BeamParams { rho_a_beam: rho.0, rho_a_patch: rho.1, ..params };
        let grid = make_grid(1.0, 401).unwrap();
        let prof = actuator_characteristic(&params, &grid).unwrap();
        prop_assert!(prof.kappa.values().iter().all(|&k| k > 0.0));
        prop_assert!(prof.theta.values().iter().all(|&t| t > 0.0));
    }

    #[test]
    fn midpoint_preserves_norm_of_skew_flows(
        entries in prop::collection::vec(-2.0..2.0f64, 36),
        x in prop::collection::vec(-1.0..1.0f64, 6),
        dt in 0.01..1.0f64,
    ) {
        let n = 6;
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..i {
                let v = entries[i * n + j];
                t.push((i, j, v));
                t.push((j, i, -v));
            }
        }
        let sys = AffineSystem::new(CsrMatrix::from_triplets(n, n, &t), vec![0.0; n]).unwrap();
        let next = step_midpoint(&sys, &x, dt).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((norm(&next) - norm(&x)).abs() <= 1e-12 * (1.0 + norm(&x)));
    }

    #[test]
    fn interconnection_is_power_conserving(
        k in prop::collection::vec(-3.0..3.0f64, 3),
        int_y in prop::collection::vec(-5.0..5.0f64, 2),
        y_c in prop::collection::vec(-5.0..5.0f64, 2),
    ) {
        let skewed = DMatrix::from_row_slice(2, 2, &[k[0], k[1], k[1] + 1.0, k[2]]);
        prop_assert!(interconnect(&int_y, &y_c, &skewed).is_err());
        let k = DMatrix::from_row_slice(2, 2, &[k[0], k[1], k[1], k[2]]);
        let (u, u_c) = interconnect(&int_y, &y_c, &k).unwrap();
        let power = u.iter().zip(&int_y).map(|(a, b)| a * b).sum::<f64>()
            + u_c.iter().zip(&y_c).map(|(a, b)| a * b).sum::<f64>();
        prop_assert!(power.abs() <= 1e-12 * 100.0);
    }

    #[test]
    fn controller_alone_dissipates(
        x in prop::collection::vec(-2.0..2.0f64, 3),
        u_s in -2.0..2.0f64,
        x1 in -1.0..1.0f64,
    ) {
        let params = ControllerParams::new(ControllerGains::example3(), u_s, x1).unwrap();
        let grad = hc_gradient(&params, &x).unwrap();
        let rate = grad.dot(&controller_rhs(&params, &x, &[0.0]).unwrap());
        let diss = grad.dot(&(&params.gains().r * &grad));
        prop_assert!(rate <= 1e-12 * (1.0 + diss));
        prop_assert!((rate + diss).abs() <= 1e-12 * (1.0 + diss));
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn casimir_verdict_is_grid_stable(
        params in patch_params(),
        n in prop::sample::select(vec![201usize, 401, 801]),
        u_s in -2.0..2.0f64,
    ) {
        let grid = make_grid(1.0, n).unwrap();
        prop_assume!(params.sigma * grid.spacing() <= 0.5);
        let beam = Beam::new(params, grid).unwrap();
        let ctrl = ControllerParams::new(ControllerGains::example3(), u_s, 0.1).unwrap();
        let cand = CasimirCandidate::example3(beam.g());
        let res = casimir_residuals(&cand, &beam, &ctrl).unwrap();
        prop_assert!(res.passes(casimir_tolerance(&beam)), "{res:?}");

        let mut doubled = ControllerGains::example3();
        doubled.k[(0, 0)] = 2.0;
        let ctrl = ControllerParams::new(doubled, u_s, 0.1).unwrap();
        let res = casimir_residuals(&cand, &beam, &ctrl).unwrap();
        prop_assert!(!res.verdicts(casimir_tolerance(&beam))[1]);
    }
}

#[test]
fn d11_is_exact_on_quadratics_away_from_ends() {
    let grid = make_grid(1.0, 51).unwrap();
    let f = Field::from_fn(grid, |z| 3.0 * z * z - z + 2.0);
    let d = d11(&f);
    assert!(d.values().iter().all(|v| (v - 6.0).abs() < 1e-8));
}
