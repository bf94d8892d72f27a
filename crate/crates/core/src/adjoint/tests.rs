#![allow(clippy::needless_range_loop)]

use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::integrators::reference_integrate;
use crate::memory::MeterSession;
use crate::model::{dynamics, init_params, Arch};
use crate::systems::{coupled_ho, double_well, henon_heiles};

fn tight() -> FpiConfig {
    FpiConfig::with_tol(1e-12)
}

fn net(widths: &[usize], seed: u64) -> ParamVector {
    init_params(widths, seed).unwrap()
}

/// Reference trajectory of a benchmark system with a deterministic offset,
/// so the network's rollout has non-zero residuals against it.
fn window(d: usize, tau: usize, h: f64, shift: f64) -> Vec<PhasePoint> {
    let (spec, y0) = if d == 1 {
        (
            double_well(),
            PhasePoint::new(&[0.4 + shift], &[-0.3]).unwrap(),
        )
    } else {
        (
            henon_heiles(),
            PhasePoint::new(&[0.1, 0.2 + shift], &[0.05, -0.1]).unwrap(),
        )
    };
    let traj = reference_integrate(&HamiltonianField(&spec), &y0, h, tau).unwrap();
    traj.points
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            PhasePoint::from_coords(
                p.as_slice()
                    .iter()
                    .map(|v| v + 0.01 * (k as f64).sin())
                    .collect(),
            )
        })
        .collect()
}

fn window_loss(theta: &ParamVector, obs: &[PhasePoint], h: f64, cfg: &FpiConfig) -> f64 {
    let field = HamiltonianField(&NetHamiltonian(theta));
    let hints = (cfg.guess == GuessSource::Observation).then_some(obs);
    let fwd = integrate(
        &field,
        &obs[0],
        h,
        obs.len() - 1,
        &Method::ImplicitMidpoint,
        cfg,
        hints,
    )
    .unwrap();
    loss(&fwd.trajectory.points, obs).unwrap().0
}

fn fd_grad(theta: &ParamVector, obs: &[PhasePoint], h: f64, cfg: &FpiConfig, eps: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut plus = theta.clone();
            plus.values_mut()[k] += eps;
            let mut minus = theta.clone();
            minus.values_mut()[k] -= eps;
            (window_loss(&plus, obs, h, cfg) - window_loss(&minus, obs, h, cfg)) / (2.0 * eps)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}

#[test]
fn terminal_conditions_examples() {
    let pred = PhasePoint::new(&[1.3], &[0.0]).unwrap();
    let obs = PhasePoint::new(&[1.0], &[0.0]).unwrap();
    let l = terminal_conditions(&pred, &obs).unwrap();
    assert_relative_eq!(l.lambda_q()[0], 0.6, epsilon = 1e-15);
    assert_eq!(l.lambda_p()[0], 0.0);
    assert!(terminal_conditions(&obs, &obs).unwrap().is_zero());
    let bad = PhasePoint::zeros(2);
    assert!(terminal_conditions(&pred, &bad).is_err());
}

#[test]
fn scaled_loss_scales_gradient() {
    let theta = net(&[2, 6, 1], 3);
    let obs = window(1, 3, 0.01, 0.0);
    let field = HamiltonianField(&NetHamiltonian(&theta));
    let states = integrate(
        &field,
        &obs[0],
        0.01,
        3,
        &Method::ImplicitMidpoint,
        &tight(),
        None,
    )
    .unwrap()
    .trajectory
    .points;
    let (_, partials) = loss(&states, &obs).unwrap();
    let g1 = solve_adjoint_accumulate(
        &theta,
        &states,
        &partials,
        0.01,
        &tight(),
        Quadrature::Midpoint,
    )
    .unwrap();
    let g3 = solve_adjoint_accumulate(
        &theta,
        &states,
        &partials.scale(3.0),
        0.01,
        &tight(),
        Quadrature::Midpoint,
    )
    .unwrap();
    for (a, b) in g1.grad.iter().zip(&g3.grad) {
        assert_relative_eq!(3.0 * a, *b, max_relative = 1e-9, epsilon = 1e-14);
    }
}

#[test]
fn adjoint_rhs_zero_and_sho() {
    let theta = net(&[2, 5, 1], 1);
    let y = PhasePoint::new(&[0.2], &[0.1]).unwrap();
    assert!(adjoint_rhs(&theta, &y, &AdjointState::zeros(1))
        .unwrap()
        .is_zero());

    let mut b = hess_state(&theta, &y).unwrap();
    b.hqq = crate::model::SquareMatrix::identity(1);
    b.hpp = crate::model::SquareMatrix::identity(1);
    b.hqp = crate::model::SquareMatrix::zeros(1);
    b.hpq = crate::model::SquareMatrix::zeros(1);
    let l = AdjointState::new(&[0.7], &[-0.4]).unwrap();
    let r = adjoint_rhs_blocks(&b, &l).unwrap();
    assert_eq!(r.as_slice(), &[-0.4, -0.7]);
    assert!(adjoint_rhs(&theta, &y, &AdjointState::zeros(2)).is_err());
}

#[test]
fn adjoint_rhs_matches_fd_jacobian_transpose() {
    // Oracle: −Jᵀλ with J assembled column by column from central
    // differences of the network dynamics.
    for (widths, y, lam) in [
        (vec![2, 8, 1], vec![0.3, -0.2], vec![0.5, 1.1]),
        (
            vec![4, 8, 6, 1],
            vec![0.1, -0.3, 0.2, 0.4],
            vec![0.2, -0.5, 0.9, 0.3],
        ),
    ] {
        let theta = net(&widths, 9);
        let y = PhasePoint::from_flat(&y).unwrap();
        let n = y.dim();
        let eps = 1e-5;
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut yp = y.clone();
            yp.as_mut_slice()[j] += eps;
            let mut ym = y.clone();
            ym.as_mut_slice()[j] -= eps;
            let fp = dynamics(&theta, &yp).unwrap();
            let fm = dynamics(&theta, &ym).unwrap();
            for i in 0..n {
                jac[i][j] = (fp.as_slice()[i] - fm.as_slice()[i]) / (2.0 * eps);
            }
        }
        let expect: Vec<f64> = (0..n)
            .map(|j| -(0..n).map(|i| jac[i][j] * lam[i]).sum::<f64>())
            .collect();
        let got = adjoint_rhs(
            &theta,
            &y,
            &AdjointState::from_coords(lam.iter().copied().collect()),
        )
        .unwrap();
        assert!(
            rel_err(got.as_slice(), &expect) < 1e-5,
            "{got:?} vs {expect:?}"
        );
    }
}

#[test]
fn zero_partials_give_zero_gradient() {
    let theta = net(&[2, 4, 1], 2);
    let obs = window(1, 4, 0.01, 0.0);
    let field = HamiltonianField(&NetHamiltonian(&theta));
    let states = integrate(
        &field,
        &obs[0],
        0.01,
        4,
        &Method::ImplicitMidpoint,
        &tight(),
        None,
    )
    .unwrap()
    .trajectory
    .points;
    let partials = LossPartials::new(vec![AdjointState::zeros(1); 4]).unwrap();
    for q in [Quadrature::Midpoint, Quadrature::EndpointTrapezoid] {
        let sol = solve_adjoint_accumulate(&theta, &states, &partials, 0.01, &tight(), q).unwrap();
        assert!(sol.grad.iter().all(|&g| g == 0.0));
    }
    // A window that the rollout reproduces exactly has zero gradient in both engines.
    let g = adjoint_window(&theta, &states, 0.01, &tight(), Quadrature::Midpoint).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.grad.iter().all(|&v| v == 0.0));
    let b = backprop_window(&theta, &states, 0.01, &tight()).unwrap();
    assert!(b.grad.iter().all(|&v| v == 0.0));
}

#[test]
fn one_step_gradient_matches_finite_differences() {
    let theta = net(&[2, 4, 1], 11);
    let obs = window(1, 1, 0.01, 0.1);
    let g = adjoint_window(&theta, &obs, 0.01, &tight(), Quadrature::Midpoint).unwrap();
    let fd = fd_grad(&theta, &obs, 0.01, &tight(), 1e-5);
    let e = rel_err(&g.grad, &fd);
    assert!(e <= 1e-4, "relative error {e}");
}

#[test]
fn backprop_matches_finite_differences() {
    let theta = net(&[2, 6, 1], 5);
    let obs = window(1, 2, 0.05, 0.0);
    let g = backprop_window(&theta, &obs, 0.05, &tight()).unwrap();
    let fd = fd_grad(&theta, &obs, 0.05, &tight(), 1e-5);
    assert!(rel_err(&g.grad, &fd) <= 1e-4);
}

#[test]
fn adjoint_matches_backprop_and_fd_multi_step() {
    for (widths, d, tau, h) in [
        (vec![2, 8, 1], 1, 4, 0.01),
        (vec![2, 8, 1], 1, 3, 0.1),
        (vec![4, 6, 1], 2, 4, 0.05),
    ] {
        let theta = net(&widths, 7);
        let obs = window(d, tau, h, 0.05);
        let a = adjoint_window(&theta, &obs, h, &tight(), Quadrature::Midpoint).unwrap();
        let b = backprop_window(&theta, &obs, h, &tight()).unwrap();
        assert_eq!(a.loss, b.loss);
        let e = rel_err(&a.grad, &b.grad);
        assert!(e <= 1e-6, "adjoint vs backprop {e}");
        let fd = fd_grad(&theta, &obs, h, &tight(), 1e-5);
        assert!(rel_err(&a.grad, &fd) <= 1e-4);
    }
}

#[test]
fn every_guess_source_matches_backprop() {
    let theta = net(&[2, 8, 1], 21);
    let obs = window(1, 4, 0.05, 0.02);
    for guess in [
        GuessSource::Predictor,
        GuessSource::PreviousState,
        GuessSource::Observation,
    ] {
        let cfg = FpiConfig { guess, ..tight() };
        let a = adjoint_window(&theta, &obs, 0.05, &cfg, Quadrature::Midpoint).unwrap();
        let b = backprop_window(&theta, &obs, 0.05, &cfg).unwrap();
        assert!(rel_err(&a.grad, &b.grad) <= 1e-6, "{guess:?}");
    }
}

#[test]
fn truncated_iteration_backprop_is_exact_for_its_own_map() {
    // With a fixed, small iteration count the forward map is a smooth
    // composition; backprop must still match finite differences of it.
    let cfg = FpiConfig {
        max_iters: 2,
        early_exit: false,
        ..tight()
    };
    let theta = net(&[2, 6, 1], 4);
    let obs = window(1, 3, 0.1, 0.0);
    let b = backprop_window(&theta, &obs, 0.1, &cfg).unwrap();
    let fd = fd_grad(&theta, &obs, 0.1, &cfg, 1e-5);
    assert!(rel_err(&b.grad, &fd) <= 1e-6);
}

#[test]
fn terminal_only_jumps_are_bitwise_terminal_conditions() {
    let theta = net(&[2, 8, 1], 8);
    let h = 0.02;
    let field = HamiltonianField(&NetHamiltonian(&theta));
    let y0 = PhasePoint::new(&[0.3], &[0.2]).unwrap();
    let states = integrate(&field, &y0, h, 4, &Method::ImplicitMidpoint, &tight(), None)
        .unwrap()
        .trajectory
        .points;
    // Observations equal the rollout except at t = T.
    let mut obs = states.clone();
    obs[4].as_mut_slice()[0] += 0.1;
    let (_, from_loss) = loss(&states, &obs).unwrap();
    let direct =
        LossPartials::terminal_only(4, terminal_conditions(&states[4], &obs[4]).unwrap()).unwrap();
    let a = solve_adjoint_accumulate(
        &theta,
        &states,
        &from_loss,
        h,
        &tight(),
        Quadrature::Midpoint,
    )
    .unwrap();
    let b = solve_adjoint_accumulate(&theta, &states, &direct, h, &tight(), Quadrature::Midpoint)
        .unwrap();
    assert_eq!(a.grad, b.grad);
    assert_eq!(a.lambda0, b.lambda0);
}

#[test]
fn endpoint_trapezoid_converges_at_second_order() {
    let theta = net(&[2, 8, 1], 12);
    let spec = coupled_ho(0.5).unwrap();
    let y0 = PhasePoint::new(&[0.5], &[0.1]).unwrap();
    let t_end = 0.4;
    let diff = |n: usize| {
        let h = t_end / n as f64;
        let obs: Vec<PhasePoint> = reference_integrate(&HamiltonianField(&spec), &y0, h, n)
            .unwrap()
            .points;
        let m = adjoint_window(&theta, &obs, h, &tight(), Quadrature::Midpoint).unwrap();
        let t = adjoint_window(&theta, &obs, h, &tight(), Quadrature::EndpointTrapezoid).unwrap();
        // Normalized per step so the comparison is against a fixed integral.
        let scale: f64 = m.grad.iter().fold(0.0, |a, v| a.max(v.abs()));
        m.grad
            .iter()
            .zip(&t.grad)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
            / scale
    };
    let (coarse, fine) = (diff(4), diff(8));
    assert!(coarse > 0.0 && fine < coarse / 2.5, "{coarse} {fine}");
}

#[test]
fn batch_gradient_is_mean_of_elements() {
    let theta = net(&[2, 8, 1], 13);
    let windows: Vec<Vec<PhasePoint>> = (0..5)
        .map(|i| window(1, 3, 0.02, 0.05 * i as f64))
        .collect();
    let (l, g) = backprop_through_solver(&theta, &windows, 0.02, &tight()).unwrap();
    let parts: Vec<WindowGradient> = windows
        .iter()
        .map(|w| backprop_window(&theta, w, 0.02, &tight()).unwrap())
        .collect();
    let mean_l = parts.iter().map(|p| p.loss).sum::<f64>() / 5.0;
    assert_relative_eq!(l, mean_l, max_relative = 1e-12);
    for k in 0..theta.len() {
        let m = parts.iter().map(|p| p.grad[k]).sum::<f64>() / 5.0;
        assert!((g[k] - m).abs() <= 1e-12 * (1.0 + m.abs()));
    }
    assert!(backprop_through_solver(&theta, &[], 0.02, &tight()).is_err());
}

#[test]
fn checkpoint_count_must_match_partials() {
    let theta = net(&[2, 4, 1], 1);
    let states = vec![PhasePoint::zeros(1); 3];
    let partials = LossPartials::new(vec![AdjointState::zeros(1); 3]).unwrap();
    assert!(solve_adjoint_accumulate(
        &theta,
        &states,
        &partials,
        0.01,
        &tight(),
        Quadrature::Midpoint
    )
    .is_err());
}

fn peak(f: impl FnOnce()) -> usize {
    let s = MeterSession::start().unwrap();
    f();
    s.peak_bytes()
}

#[test]
fn adjoint_memory_is_flat_and_backprop_grows() {
    let theta = init_params(
        Arch::with_hidden(1, &crate::model::DEFAULT_HIDDEN)
            .unwrap()
            .widths(),
        0,
    )
    .unwrap();
    let spec = coupled_ho(0.5).unwrap();
    let y0 = PhasePoint::new(&[0.3], &[-0.4]).unwrap();
    let mut adj = Vec::new();
    let mut bp = Vec::new();
    for tau in [4, 8, 16, 32] {
        let obs = reference_integrate(&HamiltonianField(&spec), &y0, 0.01, tau)
            .unwrap()
            .points;
        adj.push(peak(|| {
            adjoint_window(
                &theta,
                &obs,
                0.01,
                &FpiConfig::default(),
                Quadrature::Midpoint,
            )
            .unwrap();
        }));
        bp.push(peak(|| {
            backprop_window(&theta, &obs, 0.01, &FpiConfig::default()).unwrap();
        }));
    }
    assert!(adj.iter().all(|&b| b > 0));
    assert!((adj[3] as f64) <= 1.10 * adj[0] as f64, "{adj:?}");
    assert!(bp.windows(2).all(|w| w[1] > w[0]), "{bp:?}");
    assert!(bp[3] >= 2 * bp[0]);
}

#[test]
fn henon_heiles_window_gradients_agree() {
    let theta = net(&[4, 8, 1], 6);
    let spec = henon_heiles();
    let y0 = PhasePoint::new(&[0.1, -0.2], &[0.2, 0.1]).unwrap();
    let obs = reference_integrate(&HamiltonianField(&spec), &y0, 0.01, 4)
        .unwrap()
        .points;
    let a = adjoint_window(&theta, &obs, 0.01, &tight(), Quadrature::Midpoint).unwrap();
    let b = backprop_window(&theta, &obs, 0.01, &tight()).unwrap();
    assert!(rel_err(&a.grad, &b.grad) <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_and_backprop_coincide(seed in 0u64..1000, tau in 1usize..5, q in -0.8f64..0.8, p in -0.8f64..0.8) {
        let theta = net(&[2, 8, 1], seed);
        let spec = double_well();
        let y0 = PhasePoint::new(&[q], &[p]).unwrap();
        let mut obs = reference_integrate(&HamiltonianField(&spec), &y0, 0.01, tau).unwrap().points;
        obs.iter_mut().skip(1).for_each(|o| o.as_mut_slice()[1] += 0.01);
        let a = adjoint_window(&theta, &obs, 0.01, &tight(), Quadrature::Midpoint).unwrap();
        let b = backprop_window(&theta, &obs, 0.01, &tight()).unwrap();
        prop_assert!(rel_err(&a.grad, &b.grad) <= 1e-6);
    }

    #[test]
    fn gradient_is_linear_in_partials(seed in 0u64..1000, c in -3.0f64..3.0) {
        let theta = net(&[2, 5, 1], seed);
        let obs = window(1, 3, 0.02, 0.0);
        let field = HamiltonianField(&NetHamiltonian(&theta));
        let states = integrate(&field, &obs[0], 0.02, 3, &Method::ImplicitMidpoint, &tight(), None).unwrap().trajectory.points;
        let (_, partials) = loss(&states, &obs).unwrap();
        let g1 = solve_adjoint_accumulate(&theta, &states, &partials, 0.02, &tight(), Quadrature::Midpoint).unwrap();
        let gc = solve_adjoint_accumulate(&theta, &states, &partials.scale(c), 0.02, &tight(), Quadrature::Midpoint).unwrap();
        let scale = g1.grad.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for (a, b) in g1.grad.iter().zip(&gc.grad) {
            prop_assert!((c * a - b).abs() <= 1e-9 * scale * (1.0 + c.abs()));
        }
    }
}

#[test]
fn grad_check_rows_agree() {
    let theta = net(&[2, 8, 1], 3);
    let obs = window(1, 4, 0.01, 0.05);
    let rows = grad_check(&theta, &obs, 0.01, &tight(), 1e-5).unwrap();
    assert_eq!(rows.len(), theta.len());
    assert!(rows.iter().all(|r| r.rel_error <= 1e-4));
    assert!(rows.iter().any(|r| r.adjoint != 0.0));
    assert!(grad_check(&theta, &obs, 0.01, &tight(), 0.0).is_err());
}
