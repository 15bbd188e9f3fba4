#![allow(dead_code)]

pub mod contracts;
pub mod oracle;

use sfanet_core::datapipe::{build_folds, cluster_fakes, embed_all, DownsampleEmbedder, Fold, Manifest};
use sfanet_core::synthetic::{generate, SyntheticConfig};
use sfanet_core::Label;

pub fn corpus(n_real: usize, n_fake: usize, size: usize) -> Manifest {
    let cfg = SyntheticConfig {
        n_real,
        n_fake,
        size,
        ..SyntheticConfig::default()
    };
    Manifest::new(generate(&cfg).unwrap()).unwrap()
}

pub fn folds(manifest: &Manifest, k: usize) -> Vec<Fold> {
    let embedder = DownsampleEmbedder::new(4).unwrap();
    let emb = embed_all(&embedder, manifest.with_label(Label::Fake)).unwrap();
    let assignment = cluster_fakes(&emb, k, 1).unwrap();
    build_folds(manifest, &assignment).unwrap()
}

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfanet_core::ImageSample;

pub fn noise_image(id: &str, rows: u32, cols: u32, seed: u64, label: Option<Label>) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RgbImage::from_fn(cols, rows, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    ImageSample::from_pixels(id, img, label).unwrap()
}

/// Moves tile `order[k]` of a `p`-tiled image to tile position `k`.
pub fn permute_tiles(sample: &ImageSample, p: u32, order: &[usize]) -> ImageSample {
    let src = sample.pixels().unwrap();
    let gc = src.width() / p;
    let mut out = RgbImage::new(src.width(), src.height());
    for (k, &from) in order.iter().enumerate() {
        let (tr, tc) = (k as u32 / gc, k as u32 % gc);
        let (fr, fc) = (from as u32 / gc, from as u32 % gc);
        for r in 0..p {
            for c in 0..p {
                out.put_pixel(tc * p + c, tr * p + r, *src.get_pixel(fc * p + c, fr * p + r));
            }
        }
    }
    ImageSample::from_pixels(format!("{}_perm", sample.id), out, sample.label).unwrap()
}
