//! Dense kernels: full SVD, singular-value shrinkage and soft thresholding.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries column-major.
//! Every vectorization in this crate (`vec(M)`) follows that storage order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TiltError};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Thin factorization `M ≈ U diag(sigma) Vᵀ` with `U: m×n`, `V: n×n`, `m ≥ n`.
///
/// Factors coming out of [`svd_full`] are canonical (nonnegative, nonincreasing
/// `sigma`). Factors produced by the warm-start update may carry negative or
/// unordered diagonal values.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vector,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank_dim(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        scale_columns(&mut us, self.sigma.as_slice());
        us * self.v.transpose()
    }

    /// `U T_eps(sigma) Vᵀ`, i.e. singular-value shrinkage applied to the
    /// factored matrix. Negative diagonal values shrink toward zero as well.
    pub fn shrink(&self, eps: f64) -> Matrix {
        let shrunk: Vec<f64> = self.sigma.iter().map(|&s| soft(s, eps)).collect();
        let keep: Vec<usize> = (0..shrunk.len()).filter(|&i| shrunk[i] != 0.0).collect();
        if keep.is_empty() {
            return Matrix::zeros(self.u.nrows(), self.v.nrows());
        }
        let u = self.u.select_columns(keep.iter());
        let v = self.v.select_columns(keep.iter());
        let mut us = u;
        let vals: Vec<f64> = keep.iter().map(|&i| shrunk[i]).collect();
        scale_columns(&mut us, &vals);
        us * v.transpose()
    }

    /// Largest of `‖UᵀU − I‖_F` and `‖VᵀV − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.sigma.len();
        let eu = (self.u.transpose() * &self.u - Matrix::identity(n, n)).norm();
        let ev = (self.v.transpose() * &self.v - Matrix::identity(n, n)).norm();
        eu.max(ev)
    }
}

#[inline]
pub(crate) fn soft(x: f64, eps: f64) -> f64 {
    let a = x.abs() - eps;
    if a > 0.0 {
        a.copysign(x)
    } else {
        0.0
    }
}

pub(crate) fn scale_columns(m: &mut Matrix, s: &[f64]) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col *= s[j];
    }
}

pub fn ensure_finite(m: &Matrix, context: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TiltError::NonFinite { context })
    }
}

/// Full thin SVD of `m`.
///
/// For wide inputs the decomposition is computed on `mᵀ` and the roles of the
/// factors are swapped back, so `U` is always `rows × min(rows, cols)`.
pub fn svd_full(m: &Matrix) -> Result<SvdFactors> {
    ensure_finite(m, "svd input")?;
    let svd = nalgebra::linalg::SVD::new(m.clone(), true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(TiltError::NonFinite { context: "svd factors" }),
    };
    let mut f = SvdFactors {
        u,
        sigma: svd.singular_values,
        v: v_t.transpose(),
    };
    sort_descending(&mut f);
    Ok(f)
}

fn sort_descending(f: &mut SvdFactors) {
    let n = f.sigma.len();
    let sorted = (1..n).all(|i| f.sigma[i - 1] >= f.sigma[i]);
    if sorted {
        return;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| f.sigma[b].total_cmp(&f.sigma[a]));
    f.u = f.u.select_columns(idx.iter());
    f.v = f.v.select_columns(idx.iter());
    f.sigma = Vector::from_iterator(n, idx.iter().map(|&i| f.sigma[i]));
}

/// Singular value shrinkage `S_eps(M) = U T_eps(Σ) Vᵀ`, the proximal map of
/// `eps·‖·‖_*`.
pub fn shrink_singular(m: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps >= 0.0) {
        return Err(TiltError::InvalidArgument(format!(
            "shrinkage threshold must be nonnegative, got {eps}"
        )));
    }
    Ok(svd_full(m)?.shrink(eps))
}

/// Elementwise soft thresholding `x ↦ sgn(x)·max(|x| − eps, 0)`.
pub fn shrink_scalar(m: &Matrix, eps: f64) -> Matrix {
    m.map(|x| soft(x, eps))
}

pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    ensure_finite(m, "nuclear norm input")?;
    Ok(m.singular_values().iter().sum())
}

pub fn l1_norm(m: &Matrix) -> f64 {
    m.iter().map(|x| x.abs()).sum()
}

/// Frobenius inner product `tr(AᵀB)`.
pub fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Spectral norm estimate by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Matrix, iters: usize) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    // Deterministic start with no exact zeros so it overlaps the top vector.
    let mut x = Vector::from_iterator(n, (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7).sin()));
    x /= x.norm();
    let mut est = 0.0;
    for _ in 0..iters {
        let y = m * &x;
        let z = m.transpose() * &y;
        let nz = z.norm();
        if nz == 0.0 {
            return 0.0;
        }
        let next = y.norm();
        x = z / nz;
        if (next - est).abs() <= 1e-12 * next {
            est = next;
            break;
        }
        est = next;
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix. Independent of the SVD path.
    fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
        let n = a.nrows();
        let mut a = a.clone();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let f = svd_full(&Matrix::identity(3, 3)).unwrap();
        assert!(f.sigma.iter().all(|&s| (s - 1.0).abs() < 1e-14));
        assert!((f.reconstruct() - Matrix::identity(3, 3)).norm() < 1e-14);

        let d = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 3.0]));
        let f = svd_full(&d).unwrap();
        assert!((f.sigma[0] - 3.0).abs() < 1e-14 && (f.sigma[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_random_matches_eigen_oracle() {
        let m = random(10, 10, 7);
        let f = svd_full(&m).unwrap();
        assert!((f.reconstruct() - &m).norm() < 1e-10 * m.norm().max(1.0));
        assert!(f.orthonormality_error() < 1e-10);
        let ev = jacobi_eigenvalues(&(m.transpose() * &m));
        for (s, e) in f.sigma.iter().zip(ev.iter()) {
            assert!((s * s - e).abs() < 1e-8, "{s} {e}");
        }
        assert!((1..10).all(|i| f.sigma[i - 1] >= f.sigma[i] && f.sigma[i] >= 0.0));
    }

    #[test]
    fn svd_wide_input_is_transposed() {
        let m = random(4, 9, 3);
        let f = svd_full(&m).unwrap();
        assert_eq!(f.u.shape(), (4, 4));
        assert_eq!(f.v.shape(), (9, 4));
        assert!((f.reconstruct() - &m).norm() < 1e-12);
    }

    #[test]
    fn svd_rejects_nan() {
        let mut m = random(3, 3, 1);
        m[(1, 2)] = f64::NAN;
        assert!(matches!(svd_full(&m), Err(TiltError::NonFinite { .. })));
    }

    #[test]
    fn shrink_singular_cases() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0]));
        let s = shrink_singular(&d, 2.0).unwrap();
        let expected = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        assert!((s - expected).norm() < 1e-12);

        let m = random(5, 4, 11);
        assert!((shrink_singular(&m, 0.0).unwrap() - &m).norm() < 1e-10);
        assert!(shrink_singular(&m, -1.0).is_err());
    }

    #[test]
    fn shrink_singular_is_prox_of_nuclear_norm() {
        let m = random(6, 6, 5);
        let eps = 0.5;
        let a = shrink_singular(&m, eps).unwrap();
        // Oracle: shrink each singular value of the eigen-derived spectrum.
        let ev = jacobi_eigenvalues(&(m.transpose() * &m));
        let sv: Vec<f64> = ev.iter().map(|e| e.max(0.0).sqrt()).collect();
        let shrunk: Vec<f64> = sv.iter().map(|s| (s - eps).max(0.0)).collect();
        let got = svd_full(&a).unwrap().sigma;
        for (g, e) in got.iter().zip(shrunk.iter()) {
            assert!((g - e).abs() < 1e-8);
        }
        // Optimality: (M − A)/eps ∈ ∂‖A‖_*, i.e. (M − A)/eps = U_r U_rᵀ-part + W
        // with ‖W‖₂ ≤ 1 and W orthogonal to the retained subspaces.
        let g = (&m - &a) / eps;
        let fa = svd_full(&a).unwrap();
        let r = fa.sigma.iter().filter(|&&s| s > 1e-10).count();
        let ur = fa.u.columns(0, r).into_owned();
        let vr = fa.v.columns(0, r).into_owned();
        let core = &ur * vr.transpose();
        let w = &g - &core;
        assert!((ur.transpose() * &w).norm() < 1e-8);
        assert!((&w * &vr).norm() < 1e-8);
        assert!(spectral_norm(&w, 500) <= 1.0 + 1e-8);
    }

    #[test]
    fn shrink_scalar_formula() {
        let m = Matrix::from_row_slice(1, 3, &[1.2, -0.3, -2.0]);
        let s = shrink_scalar(&m, 0.5);
        assert!((s[(0, 0)] - 0.7).abs() < 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
        assert!((s[(0, 2)] + 1.5).abs() < 1e-15);
    }

    #[test]
    fn shrink_scalar_matches_grid_search() {
        // argmin_e λ|e| + μ/2 (e − x)² with λ/μ = 0.1, coordinate-wise brute force.
        let m = random(5, 5, 9);
        let (lambda, mu) = (0.1, 1.0);
        let s = shrink_scalar(&m, lambda / mu);
        for (x, got) in m.iter().zip(s.iter()) {
            let mut best = (f64::INFINITY, 0.0);
            let mut e = -1.5;
            while e <= 1.5 {
                let val = lambda * f64::abs(e) + 0.5 * mu * (e - x) * (e - x);
                if val < best.0 {
                    best = (val, e);
                }
                e += 1e-4;
            }
            assert!((best.1 - got).abs() < 2e-4, "{x} {got} {}", best.1);
        }
    }

    #[test]
    fn spectral_norm_diag() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 4.0, 2.0]));
        assert!((spectral_norm(&d, 200) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn pseudocontraction_of_singular_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let (r, c) = (rng.gen_range(2..8), rng.gen_range(2..8));
            let w1 = random(r, c, 1000 + trial);
            let w2 = &w1 + random(r, c, 2000 + trial) * rng.gen_range(0.01..1.0);
            let eps = rng.gen_range(0.0..1.0);
            let s1 = shrink_singular(&w1, eps).unwrap();
            let s2 = shrink_singular(&w2, eps).unwrap();
            let lhs = (&s1 - &s2).norm_squared();
            let rhs = (&w1 - &w2).norm_squared() - ((&s1 - &w1) - (&s2 - &w2)).norm_squared();
            assert!(lhs <= rhs + 1e-8, "trial {trial}: {lhs} > {rhs}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mat(r: usize, c: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |v| Matrix::from_vec(r, c, v))
        }

        proptest! {
            #[test]
            fn soft_threshold_nonexpansive(x in mat(4, 3), y in mat(4, 3), eps in 0.0f64..2.0) {
                let d = (shrink_scalar(&x, eps) - shrink_scalar(&y, eps)).norm();
                prop_assert!(d <= (&x - &y).norm() + 1e-12);
            }

            #[test]
            fn svd_reconstructs(m in mat(6, 4)) {
                let f = svd_full(&m).unwrap();
                prop_assert!((f.reconstruct() - &m).norm() <= 1e-10 * m.norm().max(1.0));
                prop_assert!(f.orthonormality_error() < 1e-10);
            }
        }
    }
}
