//! Texture corpus: PNG images with JSON sidecars giving the window to
//! rectify and, optionally, a synthetic deformation to apply first.
//!
//! [`procedural_corpus`] renders the shipped set of axis-aligned low-rank
//! textures (facades, bricks, tiles, shelves and the like).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::imaging::{deform_about, GrayImage};
use crate::transform::{rotation_shear, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deformation {
    /// Rotation in radians.
    pub theta: f64,
    pub shear: f64,
}

impl Deformation {
    pub fn linear(&self) -> [[f64; 2]; 2] {
        rotation_shear(self.theta, self.shear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub name: String,
    pub window: WindowSpec,
    /// Deformation applied about the window center before rectification;
    /// its linear part is the ground truth.
    #[serde(default)]
    pub deformation: Option<Deformation>,
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub sidecar: Sidecar,
    pub image: GrayImage,
}

impl CorpusEntry {
    /// The image with its sidecar deformation applied, and the ground-truth
    /// linear part when one exists.
    pub fn deformed(&self) -> (GrayImage, Option<[[f64; 2]; 2]>) {
        match self.sidecar.deformation {
            Some(d) => (
                deform_about(&self.image, d.linear(), self.sidecar.window.center(), background(&self.image)),
                Some(d.linear()),
            ),
            None => (self.image.clone(), None),
        }
    }
}

/// Mean intensity, used to fill pixels uncovered by a deformation.
pub fn background(img: &GrayImage) -> f64 {
    img.pixels().iter().sum::<f64>() / img.pixels().len() as f64
}

/// Reads every `*.json` sidecar in `dir` with its same-named PNG, sorted by
/// file name.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<CorpusEntry>> {
    let dir = dir.as_ref();
    let mut sidecars: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    let mut out = Vec::with_capacity(sidecars.len());
    for path in sidecars {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let image = GrayImage::load_png(path.with_extension("png"))?;
        out.push(CorpusEntry { sidecar, image });
    }
    if out.is_empty() {
        return Err(TiltError::InvalidArgument(format!("no sidecars found in {}", dir.display())));
    }
    Ok(out)
}

pub fn write_corpus(dir: impl AsRef<Path>, entries: &[CorpusEntry]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for e in entries {
        e.image.save_png(dir.join(format!("{}.png", e.sidecar.name)))?;
        let json = serde_json::to_string_pretty(&e.sidecar)? + "\n";
        fs::write(dir.join(format!("{}.json", e.sidecar.name)), json)?;
    }
    Ok(())
}

const SIDE: usize = 160;

type Painter = fn(f64, f64, &Cells) -> f64;

/// Per-texture random intensities looked up by integer cell.
struct Cells {
    values: Vec<f64>,
}

impl Cells {
    fn new(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Self {
        Self { values: (0..n).map(|_| rng.gen_range(lo..hi)).collect() }
    }

    fn at(&self, i: i64, j: i64) -> f64 {
        let n = self.values.len() as i64;
        self.values[((i * 31 + j * 17).rem_euclid(n)) as usize]
    }
}

fn band(x: f64, period: f64, width: f64) -> bool {
    x.rem_euclid(period) < width
}

fn checker(x: f64, y: f64, _: &Cells) -> f64 {
    if ((x / 14.0).floor() as i64 + (y / 14.0).floor() as i64) % 2 == 0 {
        0.85
    } else {
        0.15
    }
}

fn bricks(x: f64, y: f64, c: &Cells) -> f64 {
    let row = (y / 18.0).floor();
    let xs = x + if row as i64 % 2 == 0 { 0.0 } else { 20.0 };
    if band(y, 18.0, 4.0) || band(xs, 40.0, 4.0) {
        0.15
    } else {
        c.at((xs / 40.0).floor() as i64, row as i64) * 0.1 + 0.7
    }
}

fn facade(x: f64, y: f64, _: &Cells) -> f64 {
    let (u, v) = (x.rem_euclid(22.0), y.rem_euclid(26.0));
    if (5.0..17.0).contains(&u) && (6.0..22.0).contains(&v) {
        if (10.5..11.5).contains(&u) {
            0.6
        } else {
            0.15
        }
    } else if v < 2.0 {
        0.55
    } else {
        0.8
    }
}

fn panels(x: f64, y: f64, _: &Cells) -> f64 {
    let (u, v) = (x.rem_euclid(40.0), y.rem_euclid(34.0));
    if u < 3.0 || (18.0..20.0).contains(&u) || v < 3.0 {
        0.15
    } else if (18.0..20.0).contains(&v) && u > 20.0 {
        0.45
    } else {
        0.8
    }
}

fn plaid(x: f64, y: f64, _: &Cells) -> f64 {
    let h = if band(y, 18.0, 6.0) { 0.3 } else { 0.0 } + if band(y + 9.0, 18.0, 2.0) { 0.15 } else { 0.0 };
    let v = if band(x, 18.0, 6.0) { 0.3 } else { 0.0 } + if band(x + 9.0, 18.0, 2.0) { 0.15 } else { 0.0 };
    0.15 + h + v
}

fn tiles(x: f64, y: f64, c: &Cells) -> f64 {
    if band(x, 16.0, 2.0) || band(y, 16.0, 2.0) {
        0.9
    } else {
        c.at((x / 16.0).floor() as i64, (y / 16.0).floor() as i64) * 0.5 + 0.1
    }
}

fn fence(x: f64, y: f64, _: &Cells) -> f64 {
    let rail = (30.0..36.0).contains(&y.rem_euclid(64.0));
    if rail || band(x, 15.0, 6.0) {
        0.75
    } else {
        0.25
    }
}

fn keyboard(x: f64, y: f64, _: &Cells) -> f64 {
    let (u, v) = (x.rem_euclid(18.0) - 9.0, y.rem_euclid(18.0) - 9.0);
    let (au, av) = (u.abs() - 4.0, v.abs() - 4.0);
    let d = (au.max(0.0).powi(2) + av.max(0.0).powi(2)).sqrt() + au.max(av).min(0.0);
    if d < 3.0 {
        0.8
    } else {
        0.2
    }
}

fn shelves(x: f64, y: f64, c: &Cells) -> f64 {
    if band(y, 40.0, 4.0) {
        0.9
    } else {
        let shelf = (y / 40.0).floor() as i64;
        c.at((x / 6.0).floor() as i64, shelf) * 0.7 + 0.1
    }
}

fn grille(x: f64, y: f64, _: &Cells) -> f64 {
    let h = band(y, 20.0, 5.0);
    let v = band(x, 14.0, 3.0);
    match (h, v) {
        (true, true) => 0.95,
        (true, false) => 0.7,
        (false, true) => 0.55,
        (false, false) => 0.2,
    }
}

fn text_lines(x: f64, y: f64, c: &Cells) -> f64 {
    let line = (y / 20.0).floor() as i64;
    let v = y.rem_euclid(20.0);
    if (15.0..18.0).contains(&v) {
        return 0.1;
    }
    if !(3.0..13.0).contains(&v) {
        return 0.9;
    }
    let glyph = (x / 10.0).floor() as i64;
    let u = x.rem_euclid(10.0);
    if c.at(glyph, line) > 0.35 && u < 7.0 {
        0.15
    } else {
        0.9
    }
}

fn columns(x: f64, y: f64, _: &Cells) -> f64 {
    let floor_line = band(y, 30.0, 5.0);
    let col = x.rem_euclid(28.0);
    if floor_line {
        0.7
    } else if col < 8.0 {
        0.85 - 0.05 * (col - 4.0).abs()
    } else {
        0.3
    }
}

const TEXTURES: [(&str, Painter, usize); 12] = [
    ("bricks", bricks, 72),
    ("checker", checker, 64),
    ("columns", columns, 80),
    ("facade", facade, 72),
    ("fence", fence, 64),
    ("grille", grille, 48),
    ("keyboard", keyboard, 56),
    ("panels", panels, 64),
    ("plaid", plaid, 64),
    ("shelves", shelves, 80),
    ("text", text_lines, 64),
    ("tiles", tiles, 56),
];

/// FNV-1a hash of the texture name, so each texture's randomness is
/// independent of its position in the list.
fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// The shipped corpus: axis-aligned textures rendered with 4×4
/// supersampling, lightly blurred and with mild sensor noise, each paired
/// with a centered window and a modest synthetic deformation.
pub fn procedural_corpus() -> Vec<CorpusEntry> {
    TEXTURES
        .iter()
        .map(|&(name, paint, window)| {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name));
            let cells = Cells::new(&mut rng, 257, 0.0, 1.0);
            let offsets: Vec<f64> = (0..4).map(|s| (s as f64 + 0.5) / 4.0 - 0.5).collect();
            let noise: Vec<f64> = (0..SIDE * SIDE).map(|_| rng.gen_range(-0.02..0.02)).collect();
            let clean = GrayImage::from_fn(SIDE, SIDE, |x, y| {
                let mut s = 0.0;
                for &oy in &offsets {
                    for &ox in &offsets {
                        s += paint(x as f64 + ox, y as f64 + oy, &cells);
                    }
                }
                s / 16.0
            })
            .expect("corpus canvas is non-empty")
            .gaussian_blur(0.6);
            let pixels = clean.pixels().iter().zip(&noise).map(|(v, n)| (v + n).clamp(0.0, 1.0)).collect();
            let image = GrayImage::new(SIDE, SIDE, pixels).expect("corpus canvas is non-empty");
            let c = (SIDE as f64 - 1.0) / 2.0;
            let theta = rng.gen_range(-15.0f64..15.0).to_radians();
            let shear = rng.gen_range(-0.25..0.25);
            CorpusEntry {
                sidecar: Sidecar {
                    name: name.to_string(),
                    window: WindowSpec::centered(c.round(), c.round(), window, window).expect("valid window"),
                    deformation: Some(Deformation { theta, shear }),
                },
                image,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_roundtrips() {
        let a = procedural_corpus();
        let b = procedural_corpus();
        assert!(a.len() >= 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sidecar, y.sidecar);
            assert_eq!(x.image, y.image);
        }
        let dir = std::env::temp_dir().join(format!("tilt-corpus-{}", std::process::id()));
        write_corpus(&dir, &a[..2]).unwrap();
        let back = load_corpus(&dir).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].sidecar, a[0].sidecar);
        assert!(back[0].image.pixels().iter().zip(a[0].image.pixels()).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-6));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sidecar_rejects_unknown_keys() {
        let bad = r#"{"name":"x","window":{"x0":0,"y0":0,"width":4,"height":4},"extra":1}"#;
        assert!(serde_json::from_str::<Sidecar>(bad).is_err());
    }
}
