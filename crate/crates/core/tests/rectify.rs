use tilt_core::experiments::experiment_outer_options;
use tilt_core::imaging::gen_checkerboard;
use tilt_core::inner::{solve_ladmap, InnerProblem, SolverOptions};
use tilt_core::outer::{build_constraints_q, linearize, relative_error, run_tilt, ConstraintMode, Method, OuterOptions};
use tilt_core::projector::Projector;
use tilt_core::transform::{TransformKind, TransformParams, WindowSpec};

fn rotated_board(theta_deg: f64) -> (tilt_core::imaging::SyntheticBoard, WindowSpec) {
    let board = gen_checkerboard(10, 8, theta_deg.to_radians(), 0.0);
    let window = WindowSpec::centered(board.center.0, board.center.1, 40, 40).unwrap();
    (board, window)
}

#[test]
fn ten_degree_board_is_recovered() {
    let (board, window) = rotated_board(10.0);
    let tau0 = TransformParams::identity(TransformKind::Affine, &window);
    for method in [Method::Adm, Method::LadmapVwsSvdws] {
        let r = run_tilt(&board.image, &window, &tau0, &experiment_outer_options().with_method(method)).unwrap();
        let err = relative_error(&r.tau_star, board.linear);
        assert!(err < 0.05, "{method}: {err}");
    }
}

#[test]
fn undeformed_board_is_a_fixed_point_for_every_method() {
    let board = gen_checkerboard(10, 8, 0.0, 0.0);
    let window = WindowSpec::centered(board.center.0, board.center.1, 40, 40).unwrap();
    let tau0 = TransformParams::identity(TransformKind::Affine, &window);
    for method in Method::ALL {
        let r = run_tilt(&board.image, &window, &tau0, &OuterOptions::for_method(method)).unwrap();
        let dev = tau0.params.iter().zip(&r.tau_star.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3 && r.outer_iters <= 3, "{method}: {dev} after {}", r.outer_iters);
    }
}

/// Inner problem at a rotated start, solved tightly enough that the
/// linearized constraint can be checked at the 1e-8 level.
fn tight_inner(q: bool) -> (InnerProblem, tilt_core::inner::InnerSolution) {
    let (board, window) = rotated_board(6.0);
    let img = board.image.gaussian_blur(1.0);
    let tau = TransformParams::identity(TransformKind::Affine, &window);
    let (d, _, jac) = linearize(&img, &tau, &window).unwrap();
    let q = q.then(|| build_constraints_q(&tau, &window).unwrap());
    let problem = InnerProblem::new(d, Projector::build(jac, q).unwrap(), 1.0 / 40f64.sqrt()).unwrap();
    let opts = SolverOptions { eps1: 1e-10, eps2: 1e9, rho0: 1.3, max_inner_iters: 5000, ..SolverOptions::default() };
    let sol = solve_ladmap(&problem, None, &opts).unwrap();
    assert!(sol.report.converged());
    (problem, sol)
}

#[test]
fn recovered_step_satisfies_linearized_constraints() {
    for with_q in [false, true] {
        let (problem, sol) = tight_inner(with_q);
        let p = &problem.projector;
        let dt = p.recover_delta_tau(&sol.a, &sol.e, &problem.d_tau).unwrap();
        let jdt = p.jacobian().data() * &dt;
        let mut resid = &problem.d_tau - &sol.a - &sol.e;
        for (r, j) in resid.as_mut_slice().iter_mut().zip(jdt.iter()) {
            *r += j;
        }
        assert!(resid.norm() < 1e-8, "{}", resid.norm());
        if let Some(q) = p.constraints() {
            let qdt = q.data() * &dt;
            assert!(qdt.norm() < 1e-6 * dt.norm(), "{} vs {}", qdt.norm(), dt.norm());
        }
    }
}

#[test]
fn disabled_constraints_take_the_plain_projection_path() {
    let (board, window) = rotated_board(5.0);
    let tau0 = TransformParams::identity(TransformKind::Affine, &window);
    let opts = OuterOptions {
        constraint_mode: ConstraintMode::None,
        max_outer_iters: 1,
        ..OuterOptions::for_method(Method::Ladmap)
    };
    let r = run_tilt(&board.image, &window, &tau0, &opts).unwrap();

    let (d, _, jac) = linearize(&board.image, &tau0, &window).unwrap();
    let problem = InnerProblem::new(d, Projector::build(jac, None).unwrap(), opts.lambda(40, 40)).unwrap();
    let sol = solve_ladmap(&problem, None, &opts.inner).unwrap();
    let dt = problem.projector.recover_delta_tau(&sol.a, &sol.e, &problem.d_tau).unwrap();
    assert_eq!(r.a_star, sol.a);
    assert_eq!(r.e_star, sol.e);
    let expected: Vec<f64> = tau0.params.iter().zip(dt.iter()).map(|(a, b)| a + b).collect();
    assert_eq!(r.tau_star.params, expected);
}

#[test]
fn warm_starts_do_not_inflate_inner_iterations() {
    let mut warm_total = 0usize;
    let mut cold_total = 0usize;
    for (theta, t) in [(4.0, 0.0), (8.0, 0.0), (6.0, 0.1), (10.0, 0.0)] {
        let board = gen_checkerboard(10, 8, f64::to_radians(theta), t);
        let window = WindowSpec::centered(board.center.0, board.center.1, 40, 40).unwrap();
        let tau0 = TransformParams::identity(TransformKind::Affine, &window);
        let base = OuterOptions { max_outer_iters: 10, ..experiment_outer_options() };
        let warm = run_tilt(&board.image, &window, &tau0, &base.clone().with_method(Method::LadmapVws)).unwrap();
        let cold = run_tilt(&board.image, &window, &tau0, &base.with_method(Method::Ladmap)).unwrap();
        let n = warm.inner_reports.len().min(cold.inner_reports.len());
        warm_total += warm.inner_reports[..n].iter().map(|r| r.iterations).sum::<usize>();
        cold_total += cold.inner_reports[..n].iter().map(|r| r.iterations).sum::<usize>();
    }
    assert!(warm_total as f64 <= 1.2 * cold_total as f64, "warm {warm_total} vs cold {cold_total}");
}
