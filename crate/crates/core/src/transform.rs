//! Parametric warps and the rectangular window they act on.
//!
//! A transform maps window-centered coordinates `(u, v)` to image
//! coordinates `(x, y)` through the homogeneous matrix
//!
//! ```text
//! [a11 a12 tx]
//! [a21 a22 ty]
//! [h31 h32  1]
//! ```
//!
//! Parameter order is `a11, a12, a21, a22, tx, ty` for affine warps;
//! projective warps append `h31, h32`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Affine,
    Projective,
}

impl TransformKind {
    pub fn num_params(self) -> usize {
        match self {
            TransformKind::Affine => 6,
            TransformKind::Projective => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub params: Vec<f64>,
}

/// Axis-aligned window in source-image pixels. Pixel `(x, y)` is the sample
/// at integer coordinates, so the window covers columns `x0..x0+width` and
/// rows `y0..y0+height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub x0: f64,
    pub y0: f64,
    pub width: usize,
    pub height: usize,
}

impl WindowSpec {
    pub fn new(x0: f64, y0: f64, width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 || !x0.is_finite() || !y0.is_finite() {
            return Err(TiltError::InvalidArgument(format!(
                "window must be at least 2x2 with finite origin, got {width}x{height} at ({x0}, {y0})"
            )));
        }
        Ok(Self { x0, y0, width, height })
    }

    /// Window of the given size centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(cx - (width as f64 - 1.0) / 2.0, cy - (height as f64 - 1.0) / 2.0, width, height)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 + (self.width as f64 - 1.0) / 2.0,
            self.y0 + (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Centered coordinates of patch entry `(row, col)`.
    pub fn local(&self, row: usize, col: usize) -> (f64, f64) {
        (
            col as f64 - (self.width as f64 - 1.0) / 2.0,
            row as f64 - (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Centered coordinates of the four window corners, counter-clockwise in
    /// image orientation.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let hw = (self.width as f64 - 1.0) / 2.0;
        let hh = (self.height as f64 - 1.0) / 2.0;
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
    }
}

impl TransformParams {
    pub fn new(kind: TransformKind, params: Vec<f64>) -> Result<Self> {
        if params.len() != kind.num_params() {
            return Err(TiltError::InvalidArgument(format!(
                "{kind:?} transform needs {} parameters, got {}",
                kind.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(TiltError::InvalidArgument("transform parameters must be finite".into()));
        }
        let t = Self { kind, params };
        if t.matrix_determinant().abs() < 1e-12 {
            return Err(TiltError::InvalidArgument("transform matrix is singular".into()));
        }
        Ok(t)
    }

    /// Transform that leaves `window` in place.
    pub fn identity(kind: TransformKind, window: &WindowSpec) -> Self {
        let (cx, cy) = window.center();
        let mut params = vec![1.0, 0.0, 0.0, 1.0, cx, cy];
        if kind == TransformKind::Projective {
            params.extend([0.0, 0.0]);
        }
        Self { kind, params }
    }

    /// Affine transform with linear part `l` (row-major) centered on `window`.
    pub fn affine(l: [[f64; 2]; 2], window: &WindowSpec) -> Self {
        let (cx, cy) = window.center();
        Self {
            kind: TransformKind::Affine,
            params: vec![l[0][0], l[0][1], l[1][0], l[1][1], cx, cy],
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn linear(&self) -> [[f64; 2]; 2] {
        let p = &self.params;
        [[p[0], p[1]], [p[2], p[3]]]
    }

    fn perspective(&self) -> (f64, f64) {
        match self.kind {
            TransformKind::Affine => (0.0, 0.0),
            TransformKind::Projective => (self.params[6], self.params[7]),
        }
    }

    fn matrix_determinant(&self) -> f64 {
        let p = &self.params;
        let (g, h) = self.perspective();
        p[0] * (p[3] - p[5] * h) - p[1] * (p[2] - p[5] * g) + p[4] * (p[2] * h - p[3] * g)
    }

    /// Image coordinates of the centered point `(u, v)`.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let p = &self.params;
        let (g, h) = self.perspective();
        let w = g * u + h * v + 1.0;
        ((p[0] * u + p[1] * v + p[4]) / w, (p[2] * u + p[3] * v + p[5]) / w)
    }

    /// `(x, y, ∂x/∂τ, ∂y/∂τ)` at `(u, v)`.
    pub fn apply_with_derivative(&self, u: f64, v: f64, dx: &mut [f64], dy: &mut [f64]) -> (f64, f64) {
        let (x, y) = self.apply(u, v);
        let (g, h) = self.perspective();
        let w = g * u + h * v + 1.0;
        let iw = 1.0 / w;
        dx[..6].copy_from_slice(&[u * iw, v * iw, 0.0, 0.0, iw, 0.0]);
        dy[..6].copy_from_slice(&[0.0, 0.0, u * iw, v * iw, 0.0, iw]);
        if self.kind == TransformKind::Projective {
            dx[6] = -x * u * iw;
            dx[7] = -x * v * iw;
            dy[6] = -y * u * iw;
            dy[7] = -y * v * iw;
        }
        (x, y)
    }

    /// Additive parameter update `τ + Δτ`.
    pub fn add(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.params.len() {
            return Err(TiltError::ShapeMismatch {
                expected: (self.params.len(), 1),
                got: (delta.len(), 1),
            });
        }
        let params = self.params.iter().zip(delta).map(|(a, b)| a + b).collect();
        Self::new(self.kind, params)
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, params)
    }

    /// Area of the warped window (shoelace formula over the warped corners).
    pub fn warped_area(&self, window: &WindowSpec) -> f64 {
        let c: Vec<(f64, f64)> = window.corners().iter().map(|&(u, v)| self.apply(u, v)).collect();
        let mut s = 0.0;
        for i in 0..4 {
            let (x1, y1) = c[i];
            let (x2, y2) = c[(i + 1) % 4];
            s += x1 * y2 - x2 * y1;
        }
        0.5 * s.abs()
    }

    /// Image position of the window center.
    pub fn warped_center(&self) -> (f64, f64) {
        self.apply(0.0, 0.0)
    }
}

/// Linear part of a rotation by `theta` followed by a horizontal shear `t`:
/// `R(θ)·[[1, t], [0, 1]]`.
pub fn rotation_shear(theta: f64, t: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, c * t - s], [s, s * t + c]]
}

pub fn invert2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_maps_window_grid_to_pixels() {
        let w = WindowSpec::new(10.0, 20.0, 5, 4).unwrap();
        let t = TransformParams::identity(TransformKind::Affine, &w);
        let (u, v) = w.local(3, 4);
        assert_eq!(t.apply(u, v), (14.0, 23.0));
        let p = TransformParams::identity(TransformKind::Projective, &w);
        assert_eq!(p.apply(u, v), (14.0, 23.0));
        assert!((t.warped_area(&w) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let t = TransformParams::new(TransformKind::Projective, vec![1.1, 0.2, -0.1, 0.9, 30.0, 25.0, 1e-3, -2e-3]).unwrap();
        let (mut dx, mut dy) = ([0.0; 8], [0.0; 8]);
        t.apply_with_derivative(3.0, -2.0, &mut dx, &mut dy);
        for k in 0..8 {
            let h = 1e-7;
            let mut p = t.params.clone();
            p[k] += h;
            let (xp, yp) = t.with_params(p.clone()).unwrap().apply(3.0, -2.0);
            p[k] -= 2.0 * h;
            let (xm, ym) = t.with_params(p).unwrap().apply(3.0, -2.0);
            assert!(((xp - xm) / (2.0 * h) - dx[k]).abs() < 1e-6);
            assert!(((yp - ym) / (2.0 * h) - dy[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_shear_has_unit_determinant() {
        let a = rotation_shear(0.4, 0.7);
        assert!((a[0][0] * a[1][1] - a[0][1] * a[1][0] - 1.0).abs() < 1e-12);
        let i = invert2(a);
        let p = [
            a[0][0] * i[0][0] + a[0][1] * i[1][0],
            a[0][0] * i[0][1] + a[0][1] * i[1][1],
        ];
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TransformParams::new(TransformKind::Affine, vec![1.0; 5]).is_err());
        assert!(TransformParams::new(TransformKind::Affine, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).is_err());
        assert!(WindowSpec::new(0.0, 0.0, 1, 5).is_err());
    }
}
