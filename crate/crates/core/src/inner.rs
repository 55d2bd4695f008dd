//! Inner-loop convex solvers for `min ‖A‖_* + λ‖E‖₁` subject to the
//! linearized transform constraint.
//!
//! [`solve_ladmap`] works on the reduced two-block problem
//! `P(A + E) = P(D∘τ)`, where `P` is the projector (`J⊥`, or `WᵀW` with side
//! constraints), and tracks the pre-multiplied multiplier `Ỹ`.
//! [`solve_adm`] is the three-block baseline over `(A, E, Δτ)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::linalg::{l1_norm, nuclear_norm, shrink_scalar, soft, spectral_norm, svd_full, Matrix, SvdFactors, Vector};
use crate::projector::Projector;
use crate::svd_warm::{svd_warm, WarmOptions};

const DIVERGENCE_OBJECTIVE: f64 = 1e12;
const POWER_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Adm,
    Ladmap,
    LadmapSvdws,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Adm => "adm",
            SolverKind::Ladmap => "ladmap",
            SolverKind::LadmapSvdws => "ladmap-svdws",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub kind: SolverKind,
    /// Initial penalty; `None` means `1.25/‖D∘τ‖₂`.
    pub mu0: Option<f64>,
    /// Penalty cap; `None` means `1e10·μ₀`.
    pub mu_max: Option<f64>,
    pub rho0: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Warm-SVD gate, relative to `‖M_k‖_F`.
    pub eps_svd: f64,
    pub max_inner_iters: usize,
    /// Linearization constant shared by the A and E steps.
    pub eta: f64,
    /// Constant penalty growth factor of the ADM baseline.
    pub adm_rho: f64,
    pub warm_svd_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kind: SolverKind::Ladmap,
            mu0: None,
            mu_max: None,
            rho0: 1.25,
            eps1: 1e-7,
            eps2: 1e-6,
            eps_svd: 1e-2,
            max_inner_iters: 1000,
            eta: 1.0,
            adm_rho: 1.25,
            warm_svd_steps: 1,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TiltError::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

impl SolverOptions {
    pub fn with_kind(kind: SolverKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.mu0 {
            positive("mu0", m)?;
        }
        if let Some(m) = self.mu_max {
            positive("mu_max", m)?;
        }
        if !(self.rho0 >= 1.0) || !(self.adm_rho >= 1.0) {
            return Err(TiltError::InvalidArgument("rho0 and adm_rho must be at least 1".into()));
        }
        positive("eps1", self.eps1)?;
        positive("eps2", self.eps2)?;
        positive("eps_svd", self.eps_svd)?;
        positive("eta", self.eta)?;
        if self.max_inner_iters == 0 || self.warm_svd_steps == 0 {
            return Err(TiltError::InvalidArgument(
                "max_inner_iters and warm_svd_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn penalties(&self, d: &Matrix) -> (f64, f64) {
        let mu0 = self.mu0.unwrap_or_else(|| default_mu0(d));
        (mu0, self.mu_max.unwrap_or(1e10 * mu0).max(mu0))
    }
}

pub fn default_mu0(d: &Matrix) -> f64 {
    let s = spectral_norm(d, POWER_ITERS);
    if s > 0.0 {
        1.25 / s
    } else {
        1.25
    }
}

#[derive(Debug, Clone)]
pub struct InnerProblem {
    pub d_tau: Matrix,
    pub projector: Projector,
    pub lambda: f64,
}

impl InnerProblem {
    pub fn new(d_tau: Matrix, projector: Projector, lambda: f64) -> Result<Self> {
        positive("lambda", lambda)?;
        crate::linalg::ensure_finite(&d_tau, "inner problem data")?;
        let shape = projector.patch_shape();
        if d_tau.shape() != shape {
            return Err(TiltError::ShapeMismatch { expected: shape, got: d_tau.shape() });
        }
        Ok(Self { d_tau, projector, lambda })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.d_tau.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerState {
    pub a: Matrix,
    pub e: Matrix,
    pub y_tilde: Matrix,
    pub mu: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solver: SolverKind,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub objective_trace: Vec<f64>,
    pub constraint_trace: Vec<f64>,
    pub wall_time: f64,
    pub full_svd_count: usize,
    pub warm_svd_count: usize,
    /// Projector applications performed inside the iteration loop.
    pub projector_applications: usize,
    pub warm_started: bool,
    pub final_mu: f64,
}

impl SolveReport {
    fn new(solver: SolverKind, warm_started: bool) -> Self {
        Self {
            solver,
            iterations: 0,
            stop_reason: StopReason::Converged,
            objective_trace: Vec::new(),
            constraint_trace: Vec::new(),
            wall_time: 0.0,
            full_svd_count: 0,
            warm_svd_count: 0,
            projector_applications: 0,
            warm_started,
            final_mu: 0.0,
        }
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    pub fn converged(&self) -> bool {
        self.stop_reason == StopReason::Converged
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub a: Matrix,
    pub e: Matrix,
    pub report: SolveReport,
    pub state: InnerState,
}

#[derive(Debug, Clone)]
pub struct AdmSolution {
    pub a: Matrix,
    pub e: Matrix,
    pub delta_tau: Vector,
    pub report: SolveReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCheck {
    pub stop: bool,
    pub crit1: f64,
    pub crit2: f64,
}

/// `‖A‖_* + λ‖E‖₁`.
pub fn objective(a: &Matrix, e: &Matrix, lambda: f64) -> Result<f64> {
    if a.shape() != e.shape() {
        return Err(TiltError::ShapeMismatch { expected: a.shape(), got: e.shape() });
    }
    Ok(nuclear_norm(a)? + lambda * l1_norm(e))
}

/// Adaptive penalty: grow by `ρ₀` only when the scaled iterate change is below `ε₂`.
pub fn update_penalty(mu: f64, delta_a: f64, delta_e: f64, norm_ref: f64, mu_max: f64, opts: &SolverOptions) -> f64 {
    let rho = if mu * delta_a.max(delta_e) / norm_ref < opts.eps2 { opts.rho0 } else { 1.0 };
    mu_max.min(rho * mu)
}

fn stop_from(crit1: f64, crit2: f64, opts: &SolverOptions) -> StopCheck {
    StopCheck { stop: crit1 < opts.eps1 && crit2 < opts.eps2, crit1, crit2 }
}

/// Evaluates both KKT-based stopping criteria for the iterate `(A, E)`.
pub fn check_stop(
    problem: &InnerProblem,
    a: &Matrix,
    e: &Matrix,
    mu: f64,
    delta_a: f64,
    delta_e: f64,
    opts: &SolverOptions,
) -> Result<StopCheck> {
    let p = &problem.projector;
    let norm_ref = p.residual_norm(&problem.d_tau)?;
    if !(norm_ref > 0.0) {
        return Err(TiltError::DegenerateProblem);
    }
    let crit1 = p.residual_norm(&(a + e - &problem.d_tau))? / norm_ref;
    let crit2 = mu * delta_a.max(delta_e) / norm_ref;
    Ok(stop_from(crit1, crit2, opts))
}

fn diverged(objective: f64, crit: f64) -> bool {
    !objective.is_finite() || !crit.is_finite() || objective > DIVERGENCE_OBJECTIVE
}

fn zero_solution(problem: &InnerProblem, kind: SolverKind, mu0: f64, start: Instant) -> (Matrix, SolveReport) {
    let (m, n) = problem.shape();
    let mut report = SolveReport::new(kind, false);
    report.final_mu = mu0;
    report.wall_time = start.elapsed().as_secs_f64();
    (Matrix::zeros(m, n), report)
}

/// LADMAP on the reduced problem, optionally warm-started from a previous
/// inner loop and optionally using the warm-start SVD.
///
/// Per iteration:
/// `M = A − (Ỹ/μ + r)/η`, `A ← S_{1/(μη)}(M)`,
/// `N = E − (Ỹ/μ + P(A + E − D))/η`, `E ← T_{λ/(μη)}(N)`,
/// `r ← P(A + E − D)`, `Ỹ ← Ỹ + μ r`. The residual `r` is reused by the next
/// `M`, so each iteration applies `P` exactly twice.
pub fn solve_ladmap(problem: &InnerProblem, warm: Option<&InnerState>, opts: &SolverOptions) -> Result<InnerSolution> {
    let start = Instant::now();
    opts.validate()?;
    if opts.kind == SolverKind::Adm {
        return Err(TiltError::InvalidArgument("solve_ladmap called with the ADM solver kind".into()));
    }
    let use_warm_svd = opts.kind == SolverKind::LadmapSvdws;
    let p = &problem.projector;
    let d = &problem.d_tau;
    let lambda = problem.lambda;
    let (mu0, mu_max) = opts.penalties(d);

    let norm_ref = p.residual_norm(d)?;
    if !(norm_ref > 0.0) {
        let (zero, mut report) = zero_solution(problem, opts.kind, mu0, start);
        report.projector_applications = 0;
        let state = InnerState { a: zero.clone(), e: zero.clone(), y_tilde: zero.clone(), mu: mu0, k: 0 };
        return Ok(InnerSolution { a: zero.clone(), e: zero, report, state });
    }

    let warm = warm.filter(|w| w.a.shape() == d.shape() && w.e.shape() == d.shape() && w.y_tilde.shape() == d.shape());
    let mut report = SolveReport::new(opts.kind, warm.is_some());
    let (mut a, mut e, mut y, mut r) = match warm {
        Some(w) => {
            let y = p.project_multiplier(&w.y_tilde)?;
            let r = p.apply(&(&w.a + &w.e - d))?;
            (w.a.clone(), w.e.clone(), y, r)
        }
        // A = D, E = 0 makes the initial residual vanish exactly.
        None => (d.clone(), Matrix::zeros(d.nrows(), d.ncols()), Matrix::zeros(d.nrows(), d.ncols()), Matrix::zeros(d.nrows(), d.ncols())),
    };

    let apps_before = p.applications();
    let mut mu = mu0;
    let mut svd_cache: Option<(SvdFactors, Matrix)> = None;
    let warm_opts = WarmOptions { steps: opts.warm_svd_steps };

    for k in 0..opts.max_inner_iters {
        let inv = 1.0 / (mu * opts.eta);
        let m_k = &a - (&y / mu + &r) / opts.eta;

        let factors = match (&svd_cache, use_warm_svd) {
            (Some((prev, prev_m)), true) => {
                let drift = (&m_k - prev_m).norm();
                let out = svd_warm(&m_k, prev, drift, opts.eps_svd * m_k.norm(), warm_opts)?;
                if out.used_warm {
                    report.warm_svd_count += 1;
                } else {
                    report.full_svd_count += 1;
                }
                out.factors
            }
            _ => {
                report.full_svd_count += 1;
                svd_full(&m_k)?
            }
        };
        let a_new = factors.shrink(inv);
        let nuclear: f64 = factors.sigma.iter().map(|&s| soft(s, inv).abs()).sum();
        if use_warm_svd {
            svd_cache = Some((factors, m_k));
        }

        let s = p.apply(&(&a_new + &e - d))?;
        let n_k = &e - (&y / mu + &s) / opts.eta;
        let e_new = shrink_scalar(&n_k, lambda * inv);

        let (r_new, coeffs) = p.apply_with_coeffs(&(&a_new + &e_new - d))?;
        let crit1 = p.image_norm(&r_new, &coeffs) / norm_ref;
        let delta_a = (&a_new - &a).norm();
        let delta_e = (&e_new - &e).norm();
        let check = stop_from(crit1, mu * delta_a.max(delta_e) / norm_ref, opts);
        y += &r_new * mu;

        let obj = nuclear + lambda * l1_norm(&e_new);
        report.objective_trace.push(obj);
        report.constraint_trace.push(crit1);
        report.iterations = k + 1;
        a = a_new;
        e = e_new;
        r = r_new;

        if diverged(obj, crit1) {
            report.stop_reason = StopReason::MaxIters;
            report.final_mu = mu;
            report.projector_applications = p.applications() - apps_before;
            report.wall_time = start.elapsed().as_secs_f64();
            return Err(TiltError::Divergence { report: Box::new(report) });
        }
        if check.stop {
            report.stop_reason = StopReason::Converged;
            break;
        }
        report.stop_reason = StopReason::MaxIters;
        mu = update_penalty(mu, delta_a, delta_e, norm_ref, mu_max, opts);
    }

    report.final_mu = mu;
    report.projector_applications = p.applications() - apps_before;
    report.wall_time = start.elapsed().as_secs_f64();
    let state = InnerState { a: a.clone(), e: e.clone(), y_tilde: y, mu, k: report.iterations };
    Ok(InnerSolution { a, e, report, state })
}

/// Three-block ADM baseline, cold-started at `A = D∘τ`, `E = 0`, `Δτ = 0`,
/// `Y = 0`, with unbounded geometric penalty growth. With side constraints
/// the `Δτ` step is the least-squares solution of the stacked system.
pub fn solve_adm(problem: &InnerProblem, opts: &SolverOptions) -> Result<AdmSolution> {
    let start = Instant::now();
    opts.validate()?;
    let p = &problem.projector;
    let d = &problem.d_tau;
    let lambda = problem.lambda;
    let (mu0, _) = opts.penalties(d);
    let j = p.jacobian().data();
    let nparams = j.ncols();

    let d_norm = d.norm();
    if !(d_norm > 0.0) {
        let (zero, report) = zero_solution(problem, SolverKind::Adm, mu0, start);
        return Ok(AdmSolution { a: zero.clone(), e: zero, delta_tau: Vector::zeros(nparams), report });
    }

    let mut report = SolveReport::new(SolverKind::Adm, false);
    let (rows, cols) = d.shape();
    let mut a = d.clone();
    let mut e = Matrix::zeros(rows, cols);
    let mut y = Matrix::zeros(rows, cols);
    let mut dt = Vector::zeros(nparams);
    let mut j_dt = Matrix::zeros(rows, cols);
    let mut mu = mu0;

    let reshape = |v: Vector| Matrix::from_vec(rows, cols, v.data.into());

    for k in 0..opts.max_inner_iters {
        let inv = 1.0 / mu;
        let base = d + &j_dt + &y * inv;
        let factors = svd_full(&(&base - &e))?;
        report.full_svd_count += 1;
        a = factors.shrink(inv);
        let nuclear: f64 = factors.sigma.iter().map(|&s| soft(s, inv)).sum();
        e = shrink_scalar(&(&base - &a), lambda * inv);
        dt = p.recover_delta_tau(&(&a - &y * inv), &e, d)?;
        j_dt = reshape(j * &dt);
        let gap = d + &j_dt - &a - &e;
        let crit = gap.norm() / d_norm;
        y += &gap * mu;

        let obj = nuclear + lambda * l1_norm(&e);
        report.objective_trace.push(obj);
        report.constraint_trace.push(crit);
        report.iterations = k + 1;
        if diverged(obj, crit) {
            report.stop_reason = StopReason::MaxIters;
            report.final_mu = mu;
            report.wall_time = start.elapsed().as_secs_f64();
            return Err(TiltError::Divergence { report: Box::new(report) });
        }
        if crit < opts.eps1 {
            report.stop_reason = StopReason::Converged;
            break;
        }
        report.stop_reason = StopReason::MaxIters;
        mu *= opts.adm_rho;
    }

    report.final_mu = mu;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(AdmSolution { a, e, delta_tau: dt, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::JacobianMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(rows: usize, cols: usize, p: usize, seed: u64) -> InnerProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0));
        let j = Matrix::from_fn(rows * cols, p, |_, _| rng.gen_range(-1.0..1.0));
        let proj = Projector::build(JacobianMatrix::new(j, rows, cols).unwrap(), None).unwrap();
        InnerProblem::new(d, proj, 1.0 / (rows.max(cols) as f64).sqrt()).unwrap()
    }

    #[test]
    fn objective_examples() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        assert!((objective(&a, &Matrix::zeros(2, 2), 1.0).unwrap() - 5.0).abs() < 1e-12);
        let e = Matrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0]);
        assert!((objective(&Matrix::zeros(2, 3), &e, 0.5).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_rule() {
        let opts = SolverOptions::default();
        assert_eq!(update_penalty(1.0, 0.0, 0.0, 1.0, 10.0, &opts), 1.25);
        assert_eq!(update_penalty(10.0, 0.0, 0.0, 1.0, 10.0, &opts), 10.0);
        assert_eq!(update_penalty(1.0, opts.eps2, 0.0, 1.0, 10.0, &opts), 1.0);
    }

    #[test]
    fn stop_is_strict() {
        let pr = problem(6, 5, 2, 1);
        let opts = SolverOptions::default();
        let check = check_stop(&pr, &pr.d_tau, &Matrix::zeros(6, 5), 1.0, 0.0, 0.0, &opts).unwrap();
        assert!(check.stop);
        assert!(!stop_from(opts.eps1, 0.0, &opts).stop);
    }

    #[test]
    fn zero_data() {
        let mut pr = problem(5, 5, 2, 2);
        pr.d_tau = Matrix::zeros(5, 5);
        let sol = solve_ladmap(&pr, None, &SolverOptions::default()).unwrap();
        assert!(sol.a.norm() == 0.0 && sol.e.norm() == 0.0 && sol.report.iterations <= 2);
        let adm = solve_adm(&pr, &SolverOptions::default()).unwrap();
        assert!(adm.a.norm() == 0.0 && adm.report.iterations <= 2);
        assert!(check_stop(&pr, &pr.d_tau, &pr.d_tau, 1.0, 0.0, 0.0, &SolverOptions::default()).is_err());
    }

    #[test]
    fn two_applications_per_iteration_and_invariants() {
        let pr = problem(12, 10, 3, 3);
        let sol = solve_ladmap(&pr, None, &SolverOptions::default()).unwrap();
        let rep = &sol.report;
        assert!(rep.converged());
        assert_eq!(rep.projector_applications, 2 * rep.iterations);
        assert_eq!(rep.objective_trace.len(), rep.iterations);
        assert_eq!(rep.constraint_trace.len(), rep.iterations);
        assert!(*rep.constraint_trace.last().unwrap() < 1e-7);
        let y = &sol.state.y_tilde;
        assert!((pr.projector.apply(y).unwrap() - y).norm() < 1e-8);
    }

    #[test]
    fn warm_start_from_solution_is_quick() {
        let pr = problem(10, 10, 3, 4);
        let opts = SolverOptions::default();
        let cold = solve_ladmap(&pr, None, &opts).unwrap();
        let warm = solve_ladmap(&pr, Some(&cold.state), &opts).unwrap();
        assert!(warm.report.warm_started);
        assert!(warm.report.iterations <= cold.report.iterations);
        let other = InnerState { a: Matrix::zeros(3, 3), ..cold.state.clone() };
        let fallback = solve_ladmap(&pr, Some(&other), &opts).unwrap();
        assert!(!fallback.report.warm_started);
        assert_eq!(fallback.report.iterations, cold.report.iterations);
    }

    #[test]
    fn solvers_agree() {
        let pr = problem(15, 15, 4, 5);
        let l = solve_ladmap(&pr, None, &SolverOptions::default()).unwrap();
        let w = solve_ladmap(&pr, None, &SolverOptions::with_kind(SolverKind::LadmapSvdws)).unwrap();
        let a = solve_adm(&pr, &SolverOptions::with_kind(SolverKind::Adm)).unwrap();
        let ol = objective(&l.a, &l.e, pr.lambda).unwrap();
        let ow = objective(&w.a, &w.e, pr.lambda).unwrap();
        let oa = objective(&a.a, &a.e, pr.lambda).unwrap();
        assert!((ol - oa).abs() / oa < 1e-3, "{ol} {oa}");
        assert!((ow - oa).abs() / oa < 1e-3, "{ow} {oa}");
        assert!(w.report.warm_svd_count > 0);
    }

    #[test]
    fn invalid_options_rejected() {
        let pr = problem(4, 4, 1, 6);
        let opts = SolverOptions { rho0: 0.5, ..SolverOptions::default() };
        assert!(solve_ladmap(&pr, None, &opts).is_err());
        assert!(solve_ladmap(&pr, None, &SolverOptions::with_kind(SolverKind::Adm)).is_err());
    }
}
