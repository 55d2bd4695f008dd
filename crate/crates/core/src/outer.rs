//! The outer loop: linearize the warped, normalized patch around the current
//! transform, solve the convex inner problem, and step the transform.

use std::borrow::Cow;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::imaging::{warp_patch, GrayImage};
use crate::inner::{solve_adm, solve_ladmap, InnerProblem, InnerState, SolveReport, SolverKind, SolverOptions};
use crate::linalg::{Matrix, Vector};
use crate::projector::{ConstraintMatrix, JacobianMatrix, Projector};
use crate::transform::{TransformParams, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    CenterArea,
}

/// The four solver configurations compared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Adm,
    Ladmap,
    LadmapVws,
    LadmapVwsSvdws,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Adm, Method::Ladmap, Method::LadmapVws, Method::LadmapVwsSvdws];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adm => "adm",
            Method::Ladmap => "ladmap",
            Method::LadmapVws => "ladmap-vws",
            Method::LadmapVwsSvdws => "ladmap-vws-svdws",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn solver_kind(self) -> SolverKind {
        match self {
            Method::Adm => SolverKind::Adm,
            Method::Ladmap | Method::LadmapVws => SolverKind::Ladmap,
            Method::LadmapVwsSvdws => SolverKind::LadmapSvdws,
        }
    }

    pub fn warm_start(self) -> bool {
        matches!(self, Method::LadmapVws | Method::LadmapVwsSvdws)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterOptions {
    pub max_outer_iters: usize,
    /// Stop once `‖Δτ‖∞` falls below this.
    pub tau_tol: f64,
    /// `c` in `λ = c/√max(m, n)`.
    pub lambda_scale: f64,
    pub constraint_mode: ConstraintMode,
    /// Seed each LADMAP inner loop with the previous one's `A`, `E` and
    /// projected multiplier. Ignored by ADM, which always starts cold.
    pub warm_start: bool,
    /// Gaussian pre-blur of the source image, in pixels; 0 disables it.
    pub blur_sigma: f64,
    pub inner: SolverOptions,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 50,
            tau_tol: 1e-4,
            lambda_scale: 1.0,
            constraint_mode: ConstraintMode::CenterArea,
            warm_start: true,
            blur_sigma: 0.0,
            inner: SolverOptions::default(),
        }
    }
}

impl OuterOptions {
    pub fn for_method(method: Method) -> Self {
        Self::default().with_method(method)
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.inner.kind = method.solver_kind();
        self.warm_start = method.warm_start();
        self
    }

    pub fn method(&self) -> Method {
        match (self.inner.kind, self.warm_start) {
            (SolverKind::Adm, _) => Method::Adm,
            (SolverKind::Ladmap, false) => Method::Ladmap,
            (SolverKind::Ladmap, true) => Method::LadmapVws,
            // SVD warm starts without variable warm starts have no method
            // name of their own.
            (SolverKind::LadmapSvdws, _) => Method::LadmapVwsSvdws,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 {
            return Err(TiltError::InvalidArgument("max_outer_iters must be at least 1".into()));
        }
        for (name, v) in [("tau_tol", self.tau_tol), ("lambda_scale", self.lambda_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TiltError::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(TiltError::InvalidArgument(format!("blur_sigma must be non-negative, got {}", self.blur_sigma)));
        }
        self.inner.validate()
    }

    pub fn lambda(&self, rows: usize, cols: usize) -> f64 {
        self.lambda_scale / (rows.max(cols) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct TiltResult {
    /// Low-rank part at unit-normalized scale.
    pub a_star: Matrix,
    /// Sparse part at unit-normalized scale.
    pub e_star: Matrix,
    pub tau_star: TransformParams,
    /// Frobenius norm of the last warped patch before normalization.
    pub patch_norm: f64,
    pub outer_iters: usize,
    pub converged: bool,
    pub inner_reports: Vec<SolveReport>,
    /// Transform after each outer iteration, starting with `τ₀`.
    pub tau_trace: Vec<TransformParams>,
    /// Final inner objective of each outer iteration.
    pub objective_trace: Vec<f64>,
    pub total_time: f64,
}

impl TiltResult {
    fn empty(tau0: &TransformParams, window: &WindowSpec) -> Self {
        Self {
            a_star: Matrix::zeros(window.height, window.width),
            e_star: Matrix::zeros(window.height, window.width),
            tau_star: tau0.clone(),
            patch_norm: 0.0,
            outer_iters: 0,
            converged: false,
            inner_reports: Vec::new(),
            tau_trace: vec![tau0.clone()],
            objective_trace: Vec::new(),
            total_time: 0.0,
        }
    }

    pub fn inner_iterations(&self) -> usize {
        self.inner_reports.iter().map(|r| r.iterations).sum()
    }
}

/// Failed outer loop, with everything computed up to the failing step.
#[derive(Debug)]
pub struct TiltFailure {
    pub error: TiltError,
    pub partial: Box<TiltResult>,
}

impl fmt::Display for TiltFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} outer iterations)", self.error, self.partial.outer_iters)
    }
}

impl std::error::Error for TiltFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub fn normalize_patch(patch: &Matrix) -> Result<(Matrix, f64)> {
    let norm = patch.norm();
    if !norm.is_finite() {
        return Err(TiltError::NonFinite { context: "patch" });
    }
    if norm <= 0.0 {
        return Err(TiltError::DegenerateWindow);
    }
    Ok((patch / norm, norm))
}

/// Normalized patch, its norm, and the Jacobian of the normalized patch.
pub fn linearize(img: &GrayImage, tau: &TransformParams, window: &WindowSpec) -> Result<(Matrix, f64, JacobianMatrix)> {
    let (h, w) = (window.height, window.width);
    let np = tau.num_params();
    let mut patch = Matrix::zeros(h, w);
    let mut raw = Matrix::zeros(h * w, np);
    let (mut dx, mut dy) = (vec![0.0; np], vec![0.0; np]);
    for j in 0..w {
        for i in 0..h {
            let (u, v) = window.local(i, j);
            let (x, y) = tau.apply_with_derivative(u, v, &mut dx, &mut dy);
            let (val, gx, gy) = img
                .sample_with_gradient(x, y)
                .ok_or(TiltError::WindowEscape { x, y })?;
            let k = i + h * j;
            patch[(i, j)] = val;
            for c in 0..np {
                raw[(k, c)] = gx * dx[c] + gy * dy[c];
            }
        }
    }
    let (d, norm) = normalize_patch(&patch)?;
    // Quotient rule: ∂(I/‖I‖) = ∂I/‖I‖ − I⟨I, ∂I⟩/‖I‖³, with d = I/‖I‖.
    let flat = d.as_slice();
    for c in 0..np {
        let mut col = raw.column_mut(c);
        let dot: f64 = col.iter().zip(flat).map(|(g, x)| g * x).sum();
        for (g, x) in col.iter_mut().zip(flat) {
            *g = (*g - x * dot) / norm;
        }
    }
    check_column_rank(&raw)?;
    Ok((d, norm, JacobianMatrix::new(raw, h, w)?))
}

pub fn compute_jacobian(img: &GrayImage, tau: &TransformParams, window: &WindowSpec) -> Result<JacobianMatrix> {
    linearize(img, tau, window).map(|(_, _, j)| j)
}

fn check_column_rank(j: &Matrix) -> Result<()> {
    let scales: Vec<f64> = j.column_iter().map(|c| c.norm()).collect();
    let top = scales.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) || scales.iter().any(|&s| s <= 1e-12 * top) {
        return Err(TiltError::SingularJacobian);
    }
    let mut scaled = j.clone();
    for (c, s) in scales.iter().enumerate() {
        scaled.column_mut(c).scale_mut(1.0 / s);
    }
    let eig = (scaled.transpose() * &scaled).symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if lo <= 1e-12 * hi {
        return Err(TiltError::SingularJacobian);
    }
    Ok(())
}

const CONSTRAINT_FD_STEP: f64 = 1e-6;

/// Gradients of the warped window's center `(x, y)` and area with respect
/// to τ, by central differences, each scaled to unit norm.
pub fn build_constraints_q(tau: &TransformParams, window: &WindowSpec) -> Result<ConstraintMatrix> {
    let np = tau.num_params();
    let mut q = Matrix::zeros(3, np);
    let eval = |t: &TransformParams| {
        let (cx, cy) = t.warped_center();
        [cx, cy, t.warped_area(window)]
    };
    for c in 0..np {
        let mut plus = tau.clone();
        plus.params[c] += CONSTRAINT_FD_STEP;
        let mut minus = tau.clone();
        minus.params[c] -= CONSTRAINT_FD_STEP;
        let (fp, fm) = (eval(&plus), eval(&minus));
        for r in 0..3 {
            q[(r, c)] = (fp[r] - fm[r]) / (2.0 * CONSTRAINT_FD_STEP);
        }
    }
    for r in 0..3 {
        let n = q.row(r).norm();
        if n > 0.0 {
            q.row_mut(r).scale_mut(1.0 / n);
        }
    }
    ConstraintMatrix::new(q)
}

/// Rectifies the texture in `window` of `img`, starting from `tau0`.
pub fn run_tilt(
    img: &GrayImage,
    window: &WindowSpec,
    tau0: &TransformParams,
    opts: &OuterOptions,
) -> std::result::Result<TiltResult, TiltFailure> {
    let start = Instant::now();
    let mut result = TiltResult::empty(tau0, window);
    let fail = |error: TiltError, mut partial: TiltResult| {
        partial.total_time = start.elapsed().as_secs_f64();
        TiltFailure { error, partial: Box::new(partial) }
    };
    if let Err(e) = opts.validate() {
        return Err(fail(e, result));
    }
    let img: Cow<'_, GrayImage> = if opts.blur_sigma > 0.0 {
        Cow::Owned(img.gaussian_blur(opts.blur_sigma))
    } else {
        Cow::Borrowed(img)
    };
    if let Err(e) = warp_patch(&img, tau0, window) {
        return Err(fail(e, result));
    }

    let lambda = opts.lambda(window.height, window.width);
    let mut tau = tau0.clone();
    let mut warm: Option<InnerState> = None;
    for _ in 0..opts.max_outer_iters {
        match outer_step(&img, window, &tau, opts, lambda, warm.as_ref()) {
            Ok(step) => {
                result.a_star = step.a;
                result.e_star = step.e;
                result.patch_norm = step.norm;
                result.objective_trace.push(step.report.final_objective().unwrap_or(0.0));
                result.inner_reports.push(step.report);
                result.outer_iters += 1;
                warm = step.state;
                let next = match tau.add(step.delta_tau.as_slice()) {
                    Ok(t) => t,
                    Err(e) => return Err(fail(e, result)),
                };
                tau = next;
                result.tau_star = tau.clone();
                result.tau_trace.push(tau.clone());
                if step.delta_tau.amax() < opts.tau_tol {
                    result.converged = true;
                    break;
                }
            }
            Err(e) => return Err(fail(e, result)),
        }
    }
    result.total_time = start.elapsed().as_secs_f64();
    Ok(result)
}

struct OuterStep {
    a: Matrix,
    e: Matrix,
    norm: f64,
    delta_tau: Vector,
    report: SolveReport,
    state: Option<InnerState>,
}

fn outer_step(
    img: &GrayImage,
    window: &WindowSpec,
    tau: &TransformParams,
    opts: &OuterOptions,
    lambda: f64,
    warm: Option<&InnerState>,
) -> Result<OuterStep> {
    let (d, norm, jac) = linearize(img, tau, window)?;
    let q = match opts.constraint_mode {
        ConstraintMode::None => None,
        ConstraintMode::CenterArea => Some(build_constraints_q(tau, window)?),
    };
    let projector = Projector::build(jac, q)?;
    let problem = InnerProblem::new(d, projector, lambda)?;
    if opts.inner.kind == SolverKind::Adm {
        let sol = solve_adm(&problem, &opts.inner)?;
        return Ok(OuterStep {
            a: sol.a,
            e: sol.e,
            norm,
            delta_tau: sol.delta_tau,
            report: sol.report,
            state: None,
        });
    }
    let sol = solve_ladmap(&problem, if opts.warm_start { warm } else { None }, &opts.inner)?;
    let delta_tau = problem.projector.recover_delta_tau(&sol.a, &sol.e, &problem.d_tau)?;
    Ok(OuterStep {
        a: sol.a,
        e: sol.e,
        norm,
        delta_tau,
        report: sol.report,
        state: opts.warm_start.then_some(sol.state),
    })
}

/// `‖L − L_G‖_F / ‖L_G‖_F` over the 2×2 linear parts, which is where the
/// center constraint leaves the transforms free to differ.
pub fn relative_error(tau: &TransformParams, truth: [[f64; 2]; 2]) -> f64 {
    let l = tau.linear();
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            num += (l[r][c] - truth[r][c]).powi(2);
            den += truth[r][c].powi(2);
        }
    }
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::gen_checkerboard;
    use crate::transform::TransformKind;

    #[test]
    fn normalization() {
        let (n, s) = normalize_patch(&Matrix::from_element(2, 2, 1.0)).unwrap();
        assert!(n.iter().all(|&v| (v - 0.5).abs() < 1e-15) && (s - 2.0).abs() < 1e-15);
        assert!(matches!(normalize_patch(&Matrix::zeros(3, 3)), Err(TiltError::DegenerateWindow)));
    }

    #[test]
    fn constant_image_has_singular_jacobian() {
        let img = GrayImage::from_fn(20, 20, |_, _| 0.4).unwrap();
        let w = WindowSpec::new(5.0, 5.0, 8, 8).unwrap();
        let err = compute_jacobian(&img, &TransformParams::identity(TransformKind::Affine, &w), &w).unwrap_err();
        assert!(matches!(err, TiltError::SingularJacobian));
    }

    #[test]
    fn constraint_rows_ignore_rotation_about_center() {
        let w = WindowSpec::new(3.0, 4.0, 11, 11).unwrap();
        let tau = TransformParams::identity(TransformKind::Affine, &w);
        let q = build_constraints_q(&tau, &w).unwrap();
        let rot = Vector::from_vec(vec![0.0, -1e-3, 1e-3, 0.0, 0.0, 0.0]);
        let qr = q.data() * &rot;
        assert!(qr.amax() < 1e-9, "{qr}");
        for r in 0..3 {
            assert!((q.data().row(r).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn undeformed_board_stays_at_identity() {
        let b = gen_checkerboard(10, 8, 0.0, 0.0);
        let w = WindowSpec::centered(b.center.0, b.center.1, 40, 40).unwrap();
        let tau0 = TransformParams::identity(TransformKind::Affine, &w);
        let r = run_tilt(&b.image, &w, &tau0, &OuterOptions::default()).unwrap();
        let dev = tau0.params.iter().zip(&r.tau_star.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3, "{:?}", r.tau_star);
        assert!(r.outer_iters <= 3);
    }

    #[test]
    fn escape_is_reported_with_partial_result() {
        let b = gen_checkerboard(4, 4, 0.0, 0.0);
        let w = WindowSpec::new(0.0, 0.0, 30, 30).unwrap();
        let f = run_tilt(&b.image, &w, &TransformParams::identity(TransformKind::Affine, &w), &OuterOptions::default())
            .unwrap_err();
        assert!(matches!(f.error, TiltError::WindowEscape { .. }));
        assert_eq!(f.partial.outer_iters, 0);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
            assert_eq!(OuterOptions::for_method(m).method(), m);
        }
    }

    #[test]
    fn relative_error_of_identity() {
        let w = WindowSpec::new(0.0, 0.0, 4, 4).unwrap();
        let t = TransformParams::identity(TransformKind::Affine, &w);
        assert_eq!(relative_error(&t, [[1.0, 0.0], [0.0, 1.0]]), 0.0);
        assert!((relative_error(&t, [[2.0, 0.0], [0.0, 2.0]]) - 0.5).abs() < 1e-15);
    }
}
