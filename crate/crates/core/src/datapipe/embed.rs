//! Embedders feeding the fake-set clustering.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::imageops::{self, FilterType};
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::types::{luminance, ImageSample};

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed(&self, sample: &ImageSample) -> Result<Vec<f64>>;
}

/// Stub: luminance of the image downsampled to `side × side`.
#[derive(Debug, Clone)]
pub struct DownsampleEmbedder {
    side: u32,
}

impl DownsampleEmbedder {
    pub fn new(side: u32) -> Result<DownsampleEmbedder> {
        if side == 0 {
            return Err(Error::config("embedding side must be positive"));
        }
        Ok(DownsampleEmbedder { side })
    }
}

impl Embedder for DownsampleEmbedder {
    fn name(&self) -> &str {
        "downsample"
    }

    fn dim(&self) -> usize {
        (self.side * self.side) as usize
    }

    fn embed(&self, sample: &ImageSample) -> Result<Vec<f64>> {
        let small = imageops::resize(sample.pixels()?, self.side, self.side, FilterType::Triangle);
        Ok(luminance(&small).into_iter().collect())
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    id: String,
    embedding: Vec<f64>,
}

/// Production adapter: embeddings exported as JSON lines `{"id": .., "embedding": [..]}`.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<FileEmbedder> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: EmbeddingLine = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
                row: i + 1,
                message: e.to_string(),
            })?;
            let d = *dim.get_or_insert(row.embedding.len());
            if row.embedding.len() != d || d == 0 {
                return Err(Error::Ingestion {
                    row: i + 1,
                    message: format!("embedding dim {} (expected {d})", row.embedding.len()),
                });
            }
            rows.insert(row.id, row.embedding);
        }
        let dim = dim.ok_or_else(|| Error::Manifest(format!("{} has no embeddings", path.display())))?;
        Ok(FileEmbedder { dim, rows })
    }
}

impl Embedder for FileEmbedder {
    fn name(&self) -> &str {
        "embedding-file"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sample: &ImageSample) -> Result<Vec<f64>> {
        self.rows.get(&sample.id).cloned().ok_or_else(|| Error::Provider {
            provider: self.name().into(),
            message: format!("no embedding for `{}`", sample.id),
        })
    }
}

/// Embeds every sample in parallel, preserving order.
pub fn embed_all<'a>(
    embedder: &dyn Embedder,
    samples: impl IntoIterator<Item = &'a ImageSample>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let samples: Vec<&ImageSample> = samples.into_iter().collect();
    samples
        .par_iter()
        .map(|s| {
            let v = embedder.embed(s)?;
            if v.len() != embedder.dim() {
                return Err(Error::invalid(format!(
                    "{} returned dim {} for `{}` (declared {})",
                    embedder.name(),
                    v.len(),
                    s.id,
                    embedder.dim()
                )));
            }
            Ok((s.id.clone(), v))
        })
        .collect()
}
