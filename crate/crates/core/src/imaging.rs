//! Grayscale rasters, bilinear sampling under a transform, and synthetic
//! test images.

use std::path::Path;

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::linalg::Matrix;
use crate::transform::{invert2, TransformParams, WindowSpec};

/// Name of the generator behind every seeded draw in this crate.
pub const RNG_ALGORITHM: &str = "ChaCha8";

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Row-major intensities in `[0, 1]`; pixel `(x, y)` lives at `y·width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(TiltError::InvalidArgument(format!("image must be at least 2x2, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(TiltError::ShapeMismatch {
                expected: (height, width),
                got: (pixels.len(), 1),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(TiltError::NonFinite { context: "image" });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    /// Image whose rows are the rows of `m`.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::from_fn(m.ncols(), m.nrows(), |x, y| m[(y, x)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Loads an 8- or 16-bit PNG; color channels are mixed to luminance and
    /// alpha is ignored.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::ImageReader::open(path.as_ref())?
            .with_guessed_format()?
            .decode()?
            .to_rgb32f();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0) as f64)
            .collect();
        Self::new(w as usize, h as usize, pixels)
    }

    /// Writes an 8-bit grayscale PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Affine map of intensities onto `[0, 1]`; constant images become 0.5.
    pub fn rescaled(&self) -> Self {
        let (lo, hi) = self
            .pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let pixels = self
            .pixels
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.5 })
            .collect();
        Self { pixels, ..*self }
    }

    /// Separable Gaussian blur with edge clamping; `sigma <= 0` is a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0.0; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &c) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    s += c * self.pixels[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = s;
            }
        }
        let mut out = vec![0.0; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &c) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    s += c * tmp[(yy * w + x) as usize];
                }
                out[(y * w + x) as usize] = s;
            }
        }
        Self { pixels: out, ..*self }
    }

    /// Bilinear sample; `None` outside `[0, width-1] × [0, height-1]`.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (x0, fx) = cell(x, self.width, 0)?;
        let (y0, fy) = cell(y, self.height, 0)?;
        Some(self.bilinear(x0, fx, y0, fy))
    }

    /// Bilinear sample with its spatial gradient, requiring a one-pixel
    /// margin. On cell boundaries the gradient is the mean of the two
    /// adjacent one-sided slopes, which is the central difference there.
    pub fn sample_with_gradient(&self, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        let (x0, fx) = cell(x, self.width, 1)?;
        let (y0, fy) = cell(y, self.height, 1)?;
        let v = self.bilinear(x0, fx, y0, fy);
        let gx = if fx == 0.0 {
            0.5 * (self.slope_x(x0 - 1, y0, fy) + self.slope_x(x0, y0, fy))
        } else {
            self.slope_x(x0, y0, fy)
        };
        let gy = if fy == 0.0 {
            0.5 * (self.slope_y(x0, y0 - 1, fx) + self.slope_y(x0, y0, fx))
        } else {
            self.slope_y(x0, y0, fx)
        };
        Some((v, gx, gy))
    }

    #[inline]
    fn bilinear(&self, x0: usize, fx: f64, y0: usize, fy: f64) -> f64 {
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = (1.0 - fx) * self.get(x0, y0) + fx * self.get(x1, y0);
        let bot = (1.0 - fx) * self.get(x0, y1) + fx * self.get(x1, y1);
        (1.0 - fy) * top + fy * bot
    }

    #[inline]
    fn slope_x(&self, x0: usize, y0: usize, fy: f64) -> f64 {
        let y1 = (y0 + 1).min(self.height - 1);
        (1.0 - fy) * (self.get(x0 + 1, y0) - self.get(x0, y0)) + fy * (self.get(x0 + 1, y1) - self.get(x0, y1))
    }

    #[inline]
    fn slope_y(&self, x0: usize, y0: usize, fx: f64) -> f64 {
        let x1 = (x0 + 1).min(self.width - 1);
        (1.0 - fx) * (self.get(x0, y0 + 1) - self.get(x0, y0)) + fx * (self.get(x1, y0 + 1) - self.get(x1, y0))
    }
}

/// Integer cell and fractional offset of `x` on a grid of `len` samples,
/// keeping `margin` samples clear of either edge.
#[inline]
fn cell(x: f64, len: usize, margin: usize) -> Option<(usize, f64)> {
    const SLACK: f64 = 1e-9;
    let lo = margin as f64;
    let hi = (len - 1 - margin) as f64;
    if !(x >= lo - SLACK && x <= hi + SLACK) || hi < lo {
        return None;
    }
    let x = x.clamp(lo, hi);
    let mut x0 = x.floor() as usize;
    if x0 + 1 > len - 1 {
        x0 = len - 2;
    }
    Some((x0, x - x0 as f64))
}

/// `D∘τ`: entry `(i, j)` is the bilinear sample at the τ-image of window
/// grid point `(i, j)`.
pub fn warp_patch(img: &GrayImage, tau: &TransformParams, window: &WindowSpec) -> Result<Matrix> {
    let mut out = Matrix::zeros(window.height, window.width);
    for j in 0..window.width {
        for i in 0..window.height {
            let (u, v) = window.local(i, j);
            let (x, y) = tau.apply(u, v);
            out[(i, j)] = img.sample(x, y).ok_or(TiltError::WindowEscape { x, y })?;
        }
    }
    Ok(out)
}

/// Resamples `img` so that the output at `p` is the input at
/// `L⁻¹(p − c) + c`, i.e. content is moved by `L` about `c`. Samples that
/// fall outside take `background`.
pub fn deform_about(img: &GrayImage, linear: [[f64; 2]; 2], center: (f64, f64), background: f64) -> GrayImage {
    let inv = invert2(linear);
    let (cx, cy) = center;
    let pixels = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            img.sample(sx, sy).unwrap_or(background)
        })
        .collect();
    GrayImage { pixels, ..*img }
}

/// Rendered checkerboard together with the geometry used to draw it.
#[derive(Debug, Clone)]
pub struct SyntheticBoard {
    pub image: GrayImage,
    /// Deformation `A(θ, t)`, mapping board to image coordinates.
    pub linear: [[f64; 2]; 2],
    /// Image position of the board center.
    pub center: (f64, f64),
    /// Side of the undeformed board in pixels.
    pub board_px: usize,
}

impl SyntheticBoard {
    /// Image position of a point given in board coordinates relative to the
    /// board center.
    pub fn to_image(&self, bx: f64, by: f64) -> (f64, f64) {
        let a = self.linear;
        (
            a[0][0] * bx + a[0][1] * by + self.center.0,
            a[1][0] * bx + a[1][1] * by + self.center.1,
        )
    }

    /// Image positions of the four outer board corners.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let h = self.board_px as f64 / 2.0;
        [self.to_image(-h, -h), self.to_image(h, -h), self.to_image(h, h), self.to_image(-h, h)]
    }
}

const BOARD_BACKGROUND: f64 = 0.5;

/// Checkerboard of `cells × cells` squares of `cell_px` pixels, deformed by
/// `y = A(θ, t)x + b` with `b` the canvas center, and rendered with 4×4
/// supersampling. The canvas keeps two cells of margin around the deformed
/// board.
pub fn gen_checkerboard(cells: usize, cell_px: usize, theta: f64, t: f64) -> SyntheticBoard {
    let linear = crate::transform::rotation_shear(theta, t);
    let board_px = cells * cell_px;
    let half = board_px as f64 / 2.0;
    let ext_x = linear[0][0].abs() * half + linear[0][1].abs() * half;
    let ext_y = linear[1][0].abs() * half + linear[1][1].abs() * half;
    let margin = 2 * cell_px;
    let mut side = (2.0 * ext_x.max(ext_y)).ceil() as usize + 2 * margin;
    // An even gap between canvas and board puts the undeformed cell edges
    // on pixel boundaries.
    if (side + board_px) % 2 == 1 {
        side += 1;
    }
    let c = (side as f64 - 1.0) / 2.0;
    let inv = invert2(linear);
    const SS: usize = 4;
    let offsets: Vec<f64> = (0..SS).map(|s| (s as f64 + 0.5) / SS as f64 - 0.5).collect();
    let cell = cell_px as f64;
    let value = |bx: f64, by: f64| -> f64 {
        let gx = (bx + half) / cell;
        let gy = (by + half) / cell;
        if gx < 0.0 || gy < 0.0 || gx >= cells as f64 || gy >= cells as f64 {
            BOARD_BACKGROUND
        } else if (gx.floor() as i64 + gy.floor() as i64) % 2 == 0 {
            1.0
        } else {
            0.0
        }
    };
    let image = GrayImage::from_fn(side, side, |x, y| {
        let mut s = 0.0;
        for &oy in &offsets {
            for &ox in &offsets {
                let dx = x as f64 + ox - c;
                let dy = y as f64 + oy - c;
                s += value(inv[0][0] * dx + inv[0][1] * dy, inv[1][0] * dx + inv[1][1] * dy);
            }
        }
        s / (SS * SS) as f64
    })
    .expect("canvas is at least 2x2");
    SyntheticBoard {
        image,
        linear,
        center: (c, c),
        board_px,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// Replaces exactly `round(fraction·N)` distinct pixels with intensities
/// drawn uniformly from `(0, 1)`.
pub fn corrupt(img: &GrayImage, spec: CorruptionSpec) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(TiltError::InvalidArgument(format!(
            "corruption fraction must lie in [0, 1], got {}",
            spec.fraction
        )));
    }
    let n = img.pixels.len();
    let count = ((spec.fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    let mut out = img.clone();
    for i in idx {
        let v: f64 = rng.sample(Open01);
        out.pixels[i] = (v * 255.0).clamp(0.0, 255.0) / 255.0;
    }
    Ok(out)
}
