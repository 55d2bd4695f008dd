//! Warm-started SVD: one projected-gradient step along Cayley curves on the
//! Stiefel manifolds, starting from the factors of the previous iterate.
//!
//! The dense functions ([`gradients`], [`projected_gradients`],
//! [`curve_point`], [`taylor_step`]) follow the formulas literally and form
//! the `m×m` skew matrix `P_U`. [`svd_warm`] computes the same step in reduced
//! coordinates: `M`, `U(t)` and all skew actions live in the column span of
//! `[U, (I − UUᵀ)MV]`, so only a handful of `m×n` products are needed.

use crate::error::Result;
use crate::linalg::{scale_columns, svd_full, Matrix, SvdFactors, Vector};

/// Curvature below this magnitude is treated as flat and the step is skipped.
const CURVATURE_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct Gradients {
    pub g_u: Matrix,
    /// Full `n×n` matrix `Σ − UᵀMV`; only its diagonal is a feasible direction.
    pub g_sigma: Matrix,
    pub g_v: Matrix,
}

#[derive(Debug, Clone)]
pub struct ProjectedGradients {
    pub p_u: Matrix,
    pub p_sigma: Vector,
    pub p_v: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorStep {
    /// `f'(0)`
    pub slope: f64,
    /// `f''(0)`
    pub curvature: f64,
    /// `−f'(0)/f''(0)`, or 0 when the local model is not strictly convex.
    pub t: f64,
}

fn diag(s: &Vector) -> Matrix {
    Matrix::from_diagonal(s)
}

/// Euclidean gradients of `F(U,Σ,V) = ½‖M − UΣVᵀ‖²_F`.
pub fn gradients(f: &SvdFactors, m: &Matrix) -> Gradients {
    let s = diag(&f.sigma);
    let s2 = diag(&f.sigma.map(|x| x * x));
    let mv = m * &f.v;
    let mtu = m.transpose() * &f.u;
    Gradients {
        g_u: &f.u * &s2 - &mv * &s,
        g_sigma: &s - f.u.transpose() * &mv,
        g_v: &f.v * &s2 - &mtu * &s,
    }
}

/// Projections onto the tangent spaces, using the cached product `X = UΣVᵀ`:
/// `P_U = X Mᵀ − M Xᵀ`, `P_V = XᵀM − MᵀX`, `P_Σ = diag(Σ − UᵀMV)`.
pub fn projected_gradients_with_product(f: &SvdFactors, x: &Matrix, m: &Matrix) -> ProjectedGradients {
    let xmt = x * m.transpose();
    let xtm = x.transpose() * m;
    let mv = m * &f.v;
    let p_sigma = Vector::from_iterator(
        f.sigma.len(),
        (0..f.sigma.len()).map(|i| f.sigma[i] - f.u.column(i).dot(&mv.column(i))),
    );
    ProjectedGradients {
        p_u: &xmt - xmt.transpose(),
        p_sigma,
        p_v: &xtm - xtm.transpose(),
    }
}

pub fn projected_gradients(f: &SvdFactors, m: &Matrix) -> ProjectedGradients {
    projected_gradients_with_product(f, &f.reconstruct(), m)
}

/// `(I + (t/2)P)⁻¹ (I − (t/2)P) X`, evaluated as `2(I + (t/2)P)⁻¹X − X`.
fn cayley(p: &Matrix, x: &Matrix, t: f64) -> Matrix {
    if t == 0.0 {
        return x.clone();
    }
    let n = p.nrows();
    let lhs = Matrix::identity(n, n) + p * (0.5 * t);
    let y = lhs.lu().solve(x).expect("identity plus skew matrix is invertible");
    y * 2.0 - x
}

/// Point on the search curve `U(t), Σ(t) = Σ − t·P_Σ, V(t)`.
pub fn curve_point(f: &SvdFactors, pg: &ProjectedGradients, t: f64) -> SvdFactors {
    SvdFactors {
        u: cayley(&pg.p_u, &f.u, t),
        sigma: &f.sigma - &pg.p_sigma * t,
        v: cayley(&pg.p_v, &f.v, t),
    }
}

/// `f(t) = ½‖M − U(t)Σ(t)V(t)ᵀ‖²_F`.
pub fn curve_objective(f: &SvdFactors, pg: &ProjectedGradients, m: &Matrix, t: f64) -> f64 {
    0.5 * (m - curve_point(f, pg, t).reconstruct()).norm_squared()
}

fn step_from_derivatives(slope: f64, curvature: f64) -> TaylorStep {
    let t = if curvature > CURVATURE_FLOOR && slope != 0.0 {
        -slope / curvature
    } else {
        0.0
    };
    TaylorStep { slope, curvature, t }
}

/// Minimizer of the quadratic Taylor model of `f(t)` at 0.
///
/// `h(0) = M − X`, `h'(0) = P_U X + U P_Σ Vᵀ − X P_V`,
/// `h''(0) = −P_U Z + Z P_V` with `Z = h'(0) + U P_Σ Vᵀ`.
pub fn taylor_step(f: &SvdFactors, pg: &ProjectedGradients, m: &Matrix) -> TaylorStep {
    let x = f.reconstruct();
    let h0 = m - &x;
    let mut up = f.u.clone();
    scale_columns(&mut up, pg.p_sigma.as_slice());
    let u_psig_vt = up * f.v.transpose();
    let h1 = &pg.p_u * &x + &u_psig_vt - &x * &pg.p_v;
    let z = &h1 + &u_psig_vt;
    let h2 = -(&pg.p_u * &z) + &z * &pg.p_v;
    let slope = h0.dot(&h1);
    let curvature = h1.norm_squared() + h0.dot(&h2);
    step_from_derivatives(slope, curvature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WarmOptions {
    /// Number of gradient steps per call; one matches the reference algorithm.
    pub steps: usize,
}

impl Default for WarmOptions {
    fn default() -> Self {
        Self { steps: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct WarmSvd {
    pub factors: SvdFactors,
    pub used_warm: bool,
    /// Step length of the last warm step (0 on the full path or when held).
    pub step: f64,
    /// `‖UΣVᵀ − M_k‖_F` for the returned factors (0 on the full path).
    pub residual: f64,
}

/// Reduced-coordinate description of one warm step.
///
/// Matrices `Y` in the span are written `Y = F·Ŷ·Vᵀ` with `F = [U, W⊥]`
/// (or `F = U` when `U` is square), and inner products use the metric
/// `G = FᵀF = diag(I, N)` with `N = W⊥ᵀW⊥`.
struct Reduced {
    n: usize,
    /// `N`, absent when the basis is `U` alone.
    gram_perp: Option<Matrix>,
    w_perp: Option<Matrix>,
    m_hat: Matrix,
    sigma: Vector,
    p_hat: Matrix,
    p_v_hat: Matrix,
    p_sigma: Vector,
}

impl Reduced {
    fn new(f: &SvdFactors, m: &Matrix) -> Self {
        let (rows, n) = (f.u.nrows(), f.sigma.len());
        let w = m * &f.v;
        let s = f.u.tr_mul(&w);
        let (gram_perp, w_perp, m_hat) = if rows == n {
            (None, None, s.clone())
        } else {
            let w_perp = &w - &f.u * &s;
            let nm = w_perp.tr_mul(&w_perp);
            let mut m_hat = Matrix::zeros(2 * n, n);
            m_hat.view_mut((0, 0), (n, n)).copy_from(&s);
            m_hat.view_mut((n, 0), (n, n)).fill_with_identity();
            (Some(nm), Some(w_perp), m_hat)
        };
        // P̂ = X̂M̂ᵀ − M̂X̂ᵀ with X̂ = [Σ; 0].
        let k = m_hat.nrows();
        let mut xm = Matrix::zeros(k, k);
        for i in 0..n {
            for j in 0..k {
                xm[(i, j)] = f.sigma[i] * m_hat[(j, i)];
            }
        }
        let p_hat = &xm - xm.transpose();
        let mut ss = s.clone();
        for i in 0..n {
            ss.row_mut(i).scale_mut(f.sigma[i]);
        }
        let p_v_hat = &ss - ss.transpose();
        let p_sigma = Vector::from_iterator(n, (0..n).map(|i| f.sigma[i] - s[(i, i)]));
        Self {
            n,
            gram_perp,
            w_perp,
            m_hat,
            sigma: f.sigma.clone(),
            p_hat,
            p_v_hat,
            p_sigma,
        }
    }

    fn k(&self) -> usize {
        self.m_hat.nrows()
    }

    /// `G·a`.
    fn metric(&self, a: &Matrix) -> Matrix {
        match &self.gram_perp {
            None => a.clone(),
            Some(nm) => {
                let n = self.n;
                let mut out = a.clone();
                let bottom = nm * a.rows(n, n);
                out.rows_mut(n, n).copy_from(&bottom);
                out
            }
        }
    }

    fn ip(&self, a: &Matrix, b: &Matrix) -> f64 {
        match &self.gram_perp {
            None => a.dot(b),
            Some(_) => a.dot(&self.metric(b)),
        }
    }

    /// `P̂G`, the action of `P_U` in reduced coordinates.
    fn p_hat_metric(&self) -> Matrix {
        match &self.gram_perp {
            None => self.p_hat.clone(),
            Some(nm) => {
                let n = self.n;
                let mut out = self.p_hat.clone();
                let right = self.p_hat.columns(n, n) * nm;
                out.columns_mut(n, n).copy_from(&right);
                out
            }
        }
    }

    /// Coordinates of `U diag(d) Vᵀ`, i.e. `[diag(d); 0]`.
    fn top_diag(&self, d: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.k(), self.n);
        out.view_mut((0, 0), (self.n, self.n)).set_diagonal(d);
        out
    }

    fn taylor(&self) -> TaylorStep {
        let n = self.n;
        let x = self.top_diag(&self.sigma);
        let h0 = &self.m_hat - &x;
        // P̂GX̂ = P̂[:, :n]·Σ and X̂P̂_V = [ΣP̂_V; 0], since G acts as I on the top block.
        let mut h1 = self.p_hat.columns(0, n).into_owned();
        scale_columns(&mut h1, self.sigma.as_slice());
        for i in 0..n {
            for j in 0..n {
                h1[(i, j)] -= self.sigma[i] * self.p_v_hat[(i, j)];
            }
            h1[(i, i)] += self.p_sigma[i];
        }
        let mut z = h1.clone();
        for i in 0..n {
            z[(i, i)] += self.p_sigma[i];
        }
        let h2 = -(&self.p_hat * self.metric(&z)) + &z * &self.p_v_hat;
        let slope = self.ip(&h0, &h1);
        let curvature = self.ip(&h1, &h1) + self.ip(&h0, &h2);
        step_from_derivatives(slope, curvature)
    }

    /// Coordinates `Û(t)` of `U(t)` and the right factor `R(t)` with `V(t) = V R(t)`.
    fn curve(&self, t: f64) -> (Matrix, Matrix, Vector) {
        let n = self.n;
        let mut e1 = Matrix::zeros(self.k(), n);
        e1.view_mut((0, 0), (n, n)).fill_with_identity();
        let sigma = &self.sigma - &self.p_sigma * t;
        if t == 0.0 {
            return (e1, Matrix::identity(n, n), sigma);
        }
        let u_hat = cayley(&self.p_hat_metric(), &e1, t);
        let r = cayley(&self.p_v_hat, &Matrix::identity(n, n), t);
        (u_hat, r, sigma)
    }

    fn objective_at_zero(&self) -> f64 {
        let d = &self.m_hat - self.top_diag(&self.sigma);
        0.5 * self.ip(&d, &d)
    }

    /// `½‖M − X(t)‖²` from reduced coordinates.
    fn objective(&self, u_hat: &Matrix, r: &Matrix, sigma: &Vector) -> f64 {
        let mut us = u_hat.clone();
        scale_columns(&mut us, sigma.as_slice());
        let d = &self.m_hat - us * r.transpose();
        0.5 * self.ip(&d, &d)
    }

    fn lift(&self, f: &SvdFactors, u_hat: &Matrix, r: &Matrix, sigma: Vector) -> SvdFactors {
        let n = self.n;
        let mut u = &f.u * u_hat.rows(0, n);
        if let Some(wp) = &self.w_perp {
            u += wp * u_hat.rows(n, n);
        }
        SvdFactors {
            u,
            sigma,
            v: &f.v * r,
        }
    }
}

/// One warm step on tall-or-square inputs. Returns the new factors, the step
/// taken and the residual `‖X(t) − M‖_F`.
fn warm_step(f: &SvdFactors, m: &Matrix) -> (SvdFactors, f64, f64) {
    let red = Reduced::new(f, m);
    let f0 = red.objective_at_zero();
    let step = red.taylor();
    if step.t != 0.0 {
        let (u_hat, r, sigma) = red.curve(step.t);
        let ft = red.objective(&u_hat, &r, &sigma);
        if ft <= f0 {
            return (red.lift(f, &u_hat, &r, sigma), step.t, (2.0 * ft.max(0.0)).sqrt());
        }
    }
    (f.clone(), 0.0, (2.0 * f0.max(0.0)).sqrt())
}

fn transpose_factors(f: &SvdFactors) -> SvdFactors {
    SvdFactors {
        u: f.v.clone(),
        sigma: f.sigma.clone(),
        v: f.u.clone(),
    }
}

/// Approximate SVD of `m_k` from the factors of the previous matrix.
///
/// The warm path runs only when `drift = ‖M_k − M_{k−1}‖_F < eps_svd`. Each
/// step is accepted only if it does not increase `½‖M_k − UΣVᵀ‖²`; if the
/// final residual still exceeds `drift` (possible once errors from earlier
/// warm steps have accumulated) a full SVD is computed instead, so the
/// returned factors always satisfy `‖UΣVᵀ − M_k‖_F ≤ drift`.
pub fn svd_warm(
    m_k: &Matrix,
    prev: &SvdFactors,
    drift: f64,
    eps_svd: f64,
    opts: WarmOptions,
) -> Result<WarmSvd> {
    let full = |m: &Matrix| -> Result<WarmSvd> {
        Ok(WarmSvd {
            factors: svd_full(m)?,
            used_warm: false,
            step: 0.0,
            residual: 0.0,
        })
    };
    let wide = m_k.nrows() < m_k.ncols();
    let dims_ok = if wide {
        prev.u.shape() == (m_k.nrows(), m_k.nrows()) && prev.v.nrows() == m_k.ncols()
    } else {
        prev.u.nrows() == m_k.nrows() && prev.v.shape() == (m_k.ncols(), m_k.ncols())
    };
    if !(drift < eps_svd) || !dims_ok || !drift.is_finite() {
        return full(m_k);
    }
    // Work on the tall orientation.
    let (m, mut f) = if wide {
        (m_k.transpose(), transpose_factors(prev))
    } else {
        (m_k.clone(), prev.clone())
    };
    if f.u.ncols() != f.v.ncols() || f.v.nrows() != f.v.ncols() {
        return full(m_k);
    }
    let mut step = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.steps.max(1) {
        let (next, t, res) = warm_step(&f, &m);
        f = next;
        step = t;
        residual = res;
        if t == 0.0 {
            break;
        }
    }
    if residual > drift * (1.0 + 1e-9) + 1e-13 {
        return full(m_k);
    }
    let factors = if wide { transpose_factors(&f) } else { f };
    Ok(WarmSvd {
        factors,
        used_warm: true,
        step,
        residual,
    })
}
