//! Implicit projections `J⊥ = I − J(JᵀJ)⁻¹Jᵀ` and, with side constraints `Q`,
//! `WᵀW = I − J(JᵀJ + QᵀQ)⁻¹Jᵀ`.
//!
//! Only the `p×p` Gram matrix is factored; products with an `m×n` patch cost
//! `O(p·mn)` and nothing of size `mn×mn` is ever formed outside [`Projector::to_dense`].

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DVectorView, Dyn};

use crate::error::{Result, TiltError};
use crate::linalg::{ensure_finite, Matrix, Vector};

/// Derivative of the vectorized patch with respect to the transform parameters.
///
/// `data` is `(rows·cols) × p`; row `i + rows·j` belongs to patch entry `(i, j)`.
#[derive(Debug, Clone)]
pub struct JacobianMatrix {
    data: Matrix,
    rows: usize,
    cols: usize,
}

impl JacobianMatrix {
    pub fn new(data: Matrix, rows: usize, cols: usize) -> Result<Self> {
        if data.nrows() != rows * cols || data.ncols() == 0 {
            return Err(TiltError::ShapeMismatch {
                expected: (rows * cols, data.ncols().max(1)),
                got: data.shape(),
            });
        }
        ensure_finite(&data, "jacobian")?;
        Ok(Self { data, rows, cols })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn num_params(&self) -> usize {
        self.data.ncols()
    }
}

/// `l×p` matrix of linearized side constraints `Q·Δτ = 0`.
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    data: Matrix,
}

impl ConstraintMatrix {
    pub fn new(data: Matrix) -> Result<Self> {
        ensure_finite(&data, "constraint matrix")?;
        if data.nrows() >= data.ncols() {
            return Err(TiltError::InvalidArgument(format!(
                "constraint matrix needs fewer rows than parameters, got {}×{}",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }
}

#[derive(Debug)]
pub struct Projector {
    jac: JacobianMatrix,
    q: Option<ConstraintMatrix>,
    gram: Cholesky<f64, Dyn>,
    applications: AtomicUsize,
}

impl Clone for Projector {
    fn clone(&self) -> Self {
        Self {
            jac: self.jac.clone(),
            q: self.q.clone(),
            gram: self.gram.clone(),
            applications: AtomicUsize::new(self.applications.load(Ordering::Relaxed)),
        }
    }
}

/// Reciprocal condition threshold below which the Gram matrix counts as singular.
const GRAM_RCOND: f64 = 1e-13;

impl Projector {
    pub fn build(jac: JacobianMatrix, q: Option<ConstraintMatrix>) -> Result<Self> {
        let j = jac.data();
        let mut gram = j.transpose() * j;
        if let Some(q) = &q {
            if q.data().ncols() != j.ncols() {
                return Err(TiltError::ShapeMismatch {
                    expected: (q.data().nrows(), j.ncols()),
                    got: q.data().shape(),
                });
            }
            gram += q.data().transpose() * q.data();
        }
        let scale = gram.diagonal().max();
        if !(scale > 0.0) {
            return Err(TiltError::SingularJacobian);
        }
        let chol = Cholesky::new(gram).ok_or(TiltError::SingularJacobian)?;
        let l = chol.l_dirty().diagonal();
        let (lo, hi) = (l.min(), l.max());
        if !(lo > 0.0) || (lo / hi).powi(2) < GRAM_RCOND {
            return Err(TiltError::SingularJacobian);
        }
        Ok(Self {
            jac,
            q,
            gram: chol,
            applications: AtomicUsize::new(0),
        })
    }

    pub fn jacobian(&self) -> &JacobianMatrix {
        &self.jac
    }

    pub fn constraints(&self) -> Option<&ConstraintMatrix> {
        self.q.as_ref()
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        self.jac.patch_shape()
    }

    fn check_shape(&self, v: &Matrix) -> Result<()> {
        let shape = self.patch_shape();
        if v.shape() != shape {
            return Err(TiltError::ShapeMismatch {
                expected: shape,
                got: v.shape(),
            });
        }
        Ok(())
    }

    /// `(JᵀJ [+ QᵀQ])⁻¹ Jᵀ vec(v)`.
    fn coefficients(&self, v: &Matrix) -> Vector {
        let flat = DVectorView::from_slice(v.as_slice(), v.len());
        let jt_v = self.jac.data().tr_mul(&flat);
        self.gram.solve(&jt_v)
    }

    /// Applies the operator and also returns the `p`-vector `(JᵀJ [+ QᵀQ])⁻¹Jᵀv`
    /// used internally, which [`Projector::image_norm`] needs.
    pub fn apply_with_coeffs(&self, v: &Matrix) -> Result<(Matrix, Vector)> {
        self.check_shape(v)?;
        self.applications.fetch_add(1, Ordering::Relaxed);
        let c = self.coefficients(v);
        let jc = self.jac.data() * &c;
        let mut out = v.clone();
        for (o, x) in out.as_mut_slice().iter_mut().zip(jc.iter()) {
            *o -= x;
        }
        Ok((out, c))
    }

    pub fn apply(&self, v: &Matrix) -> Result<Matrix> {
        Ok(self.apply_with_coeffs(v)?.0)
    }

    /// `‖W v‖_F` (equal to `‖J⊥ v‖_F` without constraints) from the pieces
    /// returned by [`Projector::apply_with_coeffs`]. The top block of `W v`
    /// is `WᵀW v`; the bottom block is `−Q c`.
    pub fn image_norm(&self, applied: &Matrix, coeffs: &Vector) -> f64 {
        let top = applied.norm_squared();
        let bottom = self.q.as_ref().map_or(0.0, |q| (q.data() * coeffs).norm_squared());
        (top + bottom).sqrt()
    }

    /// `‖W v‖_F`, costing one application.
    pub fn residual_norm(&self, v: &Matrix) -> Result<f64> {
        let (applied, c) = self.apply_with_coeffs(v)?;
        Ok(self.image_norm(&applied, &c))
    }

    /// Moves a multiplier into the range of the operator: `J⊥ y`, or `WᵀW y`
    /// when constraints are present.
    pub fn project_multiplier(&self, y: &Matrix) -> Result<Matrix> {
        self.apply(y)
    }

    /// Least-squares increment `(JᵀJ [+ QᵀQ])⁻¹ Jᵀ vec(A + E − D∘τ)`. With
    /// constraints this solves the stacked system `[J; Q] Δτ = [A+E−D∘τ; 0]`.
    pub fn recover_delta_tau(&self, a: &Matrix, e: &Matrix, d_tau: &Matrix) -> Result<Vector> {
        self.check_shape(a)?;
        self.check_shape(e)?;
        self.check_shape(d_tau)?;
        Ok(self.coefficients(&(a + e - d_tau)))
    }

    /// Number of operator applications since construction (or the last reset).
    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn reset_applications(&self) {
        self.applications.store(0, Ordering::Relaxed);
    }

    /// Dense `mn×mn` matrix of the operator. Diagnostics only; `O((mn)²)` memory.
    pub fn to_dense(&self) -> Matrix {
        let j = self.jac.data();
        let k_jt = self.gram.solve(&j.transpose());
        let n = j.nrows();
        Matrix::identity(n, n) - j * k_jt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Naive dense inverse of a small matrix by Gauss-Jordan with partial pivoting.
    fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
        let n = a.nrows();
        let mut aug = Matrix::zeros(n, 2 * n);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        aug.view_mut((0, n), (n, n)).fill_with_identity();
        for c in 0..n {
            let piv = (c..n).max_by(|&x, &y| aug[(x, c)].abs().total_cmp(&aug[(y, c)].abs())).unwrap();
            aug.swap_rows(c, piv);
            let d = aug[(c, c)];
            for k in 0..2 * n {
                aug[(c, k)] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = aug[(r, c)];
                    for k in 0..2 * n {
                        aug[(r, k)] -= f * aug[(c, k)];
                    }
                }
            }
        }
        aug.view((0, n), (n, n)).into_owned()
    }

    #[test]
    fn single_column_projects_out_first_axis() {
        let jac = JacobianMatrix::new(Matrix::from_column_slice(2, 1, &[1.0, 0.0]), 2, 1).unwrap();
        let p = Projector::build(jac, None).unwrap();
        let dense = Matrix::from_fn(2, 2, |i, k| {
            let mut e = Matrix::zeros(2, 1);
            e[k] = 1.0;
            p.apply(&e).unwrap()[i]
        });
        assert_eq!(dense, Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn zero_constraint_row_reduces_to_unconstrained() {
        let mut jd = Matrix::zeros(12, 3);
        jd.view_mut((0, 0), (3, 3)).fill_with_identity();
        let jac = JacobianMatrix::new(jd, 4, 3).unwrap();
        let q = ConstraintMatrix::new(Matrix::zeros(1, 3)).unwrap();
        let p0 = Projector::build(jac.clone(), None).unwrap();
        let pq = Projector::build(jac, Some(q)).unwrap();
        assert!((p0.to_dense() - pq.to_dense()).norm() == 0.0);
    }

    #[test]
    fn constrained_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jd = random(40, 3, &mut rng);
        let qd = random(1, 3, &mut rng);
        let gram = jd.transpose() * &jd + qd.transpose() * &qd;
        let oracle = Matrix::identity(40, 40) - &jd * gauss_jordan_inverse(&gram) * jd.transpose();
        let p = Projector::build(
            JacobianMatrix::new(jd, 8, 5).unwrap(),
            Some(ConstraintMatrix::new(qd).unwrap()),
        )
        .unwrap();
        for k in 0..40 {
            let mut e = Matrix::zeros(8, 5);
            e[k] = 1.0;
            let col = p.apply(&e).unwrap();
            for i in 0..40 {
                assert!((col[i] - oracle[(i, k)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn annihilates_range_and_fixes_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let jd = random(30, 4, &mut rng);
        let p = Projector::build(JacobianMatrix::new(jd.clone(), 6, 5).unwrap(), None).unwrap();
        let w = Vector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let v = Matrix::from_column_slice(6, 5, (&jd * &w).as_slice());
        assert!(p.apply(&v).unwrap().norm() < 1e-10);

        let z = random(6, 5, &mut rng);
        let comp = p.apply(&z).unwrap();
        assert!((p.apply(&comp).unwrap() - &comp).norm() < 1e-12);

        let gram_inv = gauss_jordan_inverse(&(jd.transpose() * &jd));
        let dense = Matrix::identity(30, 30) - &jd * gram_inv * jd.transpose();
        let expected = &dense * Vector::from_column_slice(z.as_slice());
        assert!((Vector::from_column_slice(comp.as_slice()) - expected).norm() < 1e-10);
    }

    #[test]
    fn project_multiplier_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Projector::build(JacobianMatrix::new(random(20, 2, &mut rng), 5, 4).unwrap(), None).unwrap();
        assert_eq!(p.project_multiplier(&Matrix::zeros(5, 4)).unwrap().norm(), 0.0);
        let y = random(5, 4, &mut rng);
        let py = p.project_multiplier(&y).unwrap();
        assert!((p.apply(&py).unwrap() - &py).norm() < 1e-10);
        assert!((p.project_multiplier(&py).unwrap() - &py).norm() < 1e-12);
    }

    #[test]
    fn constrained_multiplier_lies_in_range() {
        // Range of WᵀW is the orthogonal complement of {J w : Q w = 0}.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let jd = random(24, 3, &mut rng);
        let qd = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let p = Projector::build(
            JacobianMatrix::new(jd.clone(), 6, 4).unwrap(),
            Some(ConstraintMatrix::new(qd).unwrap()),
        )
        .unwrap();
        let y = p.project_multiplier(&random(6, 4, &mut rng)).unwrap();
        for k in 1..3 {
            let col = jd.column(k);
            let dot: f64 = col.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-10);
        }
    }

    #[test]
    fn delta_tau_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let jd = random(20, 3, &mut rng);
        let p = Projector::build(JacobianMatrix::new(jd.clone(), 4, 5).unwrap(), None).unwrap();
        let d = random(4, 5, &mut rng);
        let a = random(4, 5, &mut rng);
        let e = &d - &a;
        assert!(p.recover_delta_tau(&a, &e, &d).unwrap().norm() < 1e-14);

        let w = Vector::from_vec(vec![1.0, -2.0, 0.25]);
        let e2 = &e + Matrix::from_column_slice(4, 5, (&jd * &w).as_slice());
        let dt = p.recover_delta_tau(&a, &e2, &d).unwrap();
        assert!((dt - w).norm() < 1e-10);
    }

    #[test]
    fn constrained_delta_tau_matches_dense_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let jd = random(30, 4, &mut rng);
        let qd = random(2, 4, &mut rng);
        let p = Projector::build(
            JacobianMatrix::new(jd.clone(), 5, 6).unwrap(),
            Some(ConstraintMatrix::new(qd.clone()).unwrap()),
        )
        .unwrap();
        let (a, e, d) = (random(5, 6, &mut rng), random(5, 6, &mut rng), random(5, 6, &mut rng));
        let dt = p.recover_delta_tau(&a, &e, &d).unwrap();

        let mut stacked = Matrix::zeros(32, 4);
        stacked.view_mut((0, 0), (30, 4)).copy_from(&jd);
        stacked.view_mut((30, 0), (2, 4)).copy_from(&qd);
        let mut rhs = Vector::zeros(32);
        rhs.rows_mut(0, 30).copy_from_slice((&a + &e - &d).as_slice());
        let oracle = stacked.svd(true, true).solve(&rhs, 1e-14).unwrap();
        assert!((&dt - &oracle).norm() < 1e-9);
        assert!(((&qd * &dt).norm() - (&qd * &oracle).norm()).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_jacobian_is_rejected() {
        let jd = Matrix::from_fn(12, 2, |i, _| i as f64);
        let err = Projector::build(JacobianMatrix::new(jd, 3, 4).unwrap(), None).unwrap_err();
        assert!(matches!(err, TiltError::SingularJacobian));
        let err = Projector::build(JacobianMatrix::new(Matrix::zeros(12, 2), 3, 4).unwrap(), None).unwrap_err();
        assert!(matches!(err, TiltError::SingularJacobian));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Projector::build(JacobianMatrix::new(random(12, 2, &mut rng), 3, 4).unwrap(), None).unwrap();
        assert!(matches!(p.apply(&Matrix::zeros(4, 3)), Err(TiltError::ShapeMismatch { .. })));
    }

    #[test]
    fn application_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Projector::build(JacobianMatrix::new(random(12, 2, &mut rng), 3, 4).unwrap(), None).unwrap();
        let v = random(3, 4, &mut rng);
        p.apply(&v).unwrap();
        p.residual_norm(&v).unwrap();
        assert_eq!(p.applications(), 2);
        p.reset_applications();
        assert_eq!(p.applications(), 0);
    }
}
