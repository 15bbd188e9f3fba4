//! Seeded synthetic corpus: "real" images are smoothed noise, "fake" images
//! are the same images plus a faint pixel-level checkerboard.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{save_png, Manifest};
use crate::error::{Error, Result};
use crate::types::{ImageSample, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub size: usize,
    pub seed: u64,
    /// Box-blur passes applied to the base noise.
    pub smoothing_passes: usize,
    /// Checkerboard amplitude in 8-bit intensity units.
    pub artifact_amplitude: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_real: 400,
            n_fake: 400,
            size: 64,
            seed: 7,
            smoothing_passes: 3,
            artifact_amplitude: 6.0,
        }
    }
}

fn box_blur(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    acc += x[[rr as usize, cc as usize]];
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

fn smoothed_noise(rng: &mut ChaCha8Rng, size: usize, passes: usize) -> Array2<f64> {
    let mut x = Array2::from_shape_fn((size, size), |_| rng.random::<f64>() * 2.0 - 1.0);
    for _ in 0..passes {
        x = box_blur(&x);
    }
    let sd = x.std(0.0).max(1e-12);
    x.mapv(|v| v / sd)
}

fn render(base: &Array2<f64>, tint: [f64; 3], brightness: f64, artifact: f64) -> RgbImage {
    let (h, w) = base.dim();
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        let checker = if (r + c) % 2 == 0 { artifact } else { -artifact };
        let v = brightness + 24.0 * base[[r, c]] + checker;
        Rgb(tint.map(|t| (v + t).round().clamp(0.0, 255.0) as u8))
    })
}

struct Draw {
    base: Array2<f64>,
    brightness: f64,
    tint: [f64; 3],
}

fn draw(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Draw {
    let base = smoothed_noise(rng, cfg.size, cfg.smoothing_passes);
    let brightness = rng.random_range(90.0..160.0);
    let tint = [rng.random_range(-8.0..8.0), 0.0, rng.random_range(-8.0..8.0)];
    Draw { base, brightness, tint }
}

/// Generates the corpus, reals first, ids `real_0000`, `fake_0000`, ...
/// `fake_i` is `real_{i mod n_real}` plus the checkerboard.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<ImageSample>> {
    if cfg.size < 2 || cfg.n_real + cfg.n_fake == 0 {
        return Err(Error::config("synthetic corpus needs size >= 2 and at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reals: Vec<Draw> = (0..cfg.n_real).map(|_| draw(&mut rng, cfg)).collect();
    let mut out = Vec::with_capacity(cfg.n_real + cfg.n_fake);
    for (i, d) in reals.iter().enumerate() {
        out.push(sample(format!("real_{i:04}"), d, 0.0, Label::Real)?);
    }
    for i in 0..cfg.n_fake {
        let fresh;
        let d = if reals.is_empty() {
            fresh = draw(&mut rng, cfg);
            &fresh
        } else {
            &reals[i % reals.len()]
        };
        out.push(sample(format!("fake_{i:04}"), d, cfg.artifact_amplitude, Label::Fake)?);
    }
    Ok(out)
}

fn sample(id: String, d: &Draw, artifact: f64, label: Label) -> Result<ImageSample> {
    Ok(
        ImageSample::from_pixels(id, render(&d.base, d.tint, d.brightness, artifact), Some(label))?
            .with_origin("synthetic"),
    )
}

/// Deterministic split into `(train, validation)`, stratified by label.
pub fn split(
    samples: Vec<ImageSample>,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config("validation fraction must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in [Label::Real, Label::Fake] {
        let mut group: Vec<ImageSample> = samples.iter().filter(|s| s.label == Some(label)).cloned().collect();
        use rand::seq::SliceRandom;
        group.shuffle(&mut rng);
        let n_val = (group.len() as f64 * validation_fraction).round() as usize;
        val.extend(group.drain(..n_val));
        train.extend(group);
    }
    Ok((train, val))
}

/// Writes PNGs under `dir/images/` and returns a manifest rooted at `dir`.
pub fn write_corpus(samples: &[ImageSample], dir: &Path) -> Result<Manifest> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = Path::new("images").join(format!("{}.png", s.id));
        let path = dir.join(&rel);
        save_png(s.pixels()?, &path)?;
        let mut row = ImageSample::new(s.id.clone(), rel);
        row.label = s.label;
        row.origin = s.origin.clone();
        row.category = s.category;
        rows.push(row);
    }
    Manifest::with_root(rows, dir)
}
