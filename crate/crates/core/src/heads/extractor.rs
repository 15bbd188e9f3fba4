//! Spatial feature extractors.
//!
//! Backbones are frozen: an extractor maps an image to a `[P, S]` matrix (one
//! row per patch, row-major over the patch grid) or a `[1, S]` global vector.
//! Large pretrained backbones run outside this crate and feed their outputs
//! in through [`PrecomputedExtractor`].

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{luminance, ImageSample};

pub trait SpatialExtractor: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    /// Expected input size as `(rows, cols)`.
    fn resolution(&self) -> (usize, usize);

    fn spatial_dim(&self) -> usize;

    /// Patch grid as `(rows, cols)`; `None` for a global extractor.
    fn patch_grid(&self) -> Option<(usize, usize)>;

    fn num_patches(&self) -> Option<usize> {
        self.patch_grid().map(|(r, c)| r * c)
    }

    /// `[P, S]` for patch extractors, `[1, S]` for global ones.
    fn extract(&self, sample: &ImageSample) -> Result<Array2<f64>>;
}

/// Batch output of an extractor.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialFeatures {
    /// `[B, S]`
    Global(Array2<f64>),
    /// `[B, P, S]`
    PerPatch(Array3<f64>),
}

impl SpatialFeatures {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            SpatialFeatures::Global(a) => a.shape().to_vec(),
            SpatialFeatures::PerPatch(a) => a.shape().to_vec(),
        }
    }
}

pub fn spatial_features(extractor: &dyn SpatialExtractor, batch: &[ImageSample]) -> Result<SpatialFeatures> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let s = extractor.spatial_dim();
    let rows = batch
        .iter()
        .map(|sample| {
            let f = extractor.extract(sample)?;
            let expect = (extractor.num_patches().unwrap_or(1), s);
            if f.dim() != expect {
                return Err(Error::Consistency(format!(
                    "extractor `{}` produced {:?}, declared {:?}",
                    extractor.name(),
                    f.dim(),
                    expect
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Consistency(format!(
                    "extractor `{}` produced non-finite features for `{}`",
                    extractor.name(),
                    sample.id
                )));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).expect("uniform shapes");
    Ok(match extractor.patch_grid() {
        Some(_) => SpatialFeatures::PerPatch(stacked),
        None => SpatialFeatures::Global(stacked.index_axis_move(Axis(1), 0)),
    })
}

/// Checks the sample's pixels against the extractor resolution and returns
/// its luminance grid.
pub(crate) fn checked_luminance(sample: &ImageSample, resolution: (usize, usize)) -> Result<Array2<f64>> {
    let px = sample.pixels()?;
    let got = (px.height() as usize, px.width() as usize);
    if got != resolution {
        return Err(Error::config(format!(
            "sample `{}` is {}x{} but the model expects {}x{}",
            sample.id, got.0, got.1, resolution.0, resolution.1
        )));
    }
    Ok(luminance(px))
}

fn grid_or_global(resolution: (usize, usize), grid: Option<usize>) -> Result<(usize, usize)> {
    match grid {
        None => Ok((1, 1)),
        Some(g) if g > 0 && resolution.0.is_multiple_of(g) && resolution.1.is_multiple_of(g) => Ok((g, g)),
        Some(g) => Err(Error::config(format!(
            "patch grid {g}x{g} does not tile a {}x{} image",
            resolution.0, resolution.1
        ))),
    }
}

/// Which per-patch statistics [`PatchStatsExtractor`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchStat {
    Mean,
    MeanStd,
}

/// Mean (and optionally population standard deviation) of luminance per patch.
#[derive(Debug, Clone)]
pub struct PatchStatsExtractor {
    resolution: (usize, usize),
    grid: Option<(usize, usize)>,
    stat: PatchStat,
}

impl PatchStatsExtractor {
    pub fn new(resolution: (usize, usize), grid: Option<usize>, stat: PatchStat) -> Result<Self> {
        let g = grid_or_global(resolution, grid)?;
        Ok(PatchStatsExtractor {
            resolution,
            grid: grid.map(|_| g),
            stat,
        })
    }
}

impl SpatialExtractor for PatchStatsExtractor {
    fn name(&self) -> String {
        format!("patch_stats[{:?}]", self.stat)
    }

    fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn spatial_dim(&self) -> usize {
        match self.stat {
            PatchStat::Mean => 1,
            PatchStat::MeanStd => 2,
        }
    }

    fn patch_grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    fn extract(&self, sample: &ImageSample) -> Result<Array2<f64>> {
        let lum = checked_luminance(sample, self.resolution)?;
        let (gr, gc) = self.grid.unwrap_or((1, 1));
        let (ph, pw) = (self.resolution.0 / gr, self.resolution.1 / gc);
        let mut out = Array2::zeros((gr * gc, self.spatial_dim()));
        for r in 0..gr {
            for c in 0..gc {
                let tile = lum.slice(ndarray::s![r * ph..(r + 1) * ph, c * pw..(c + 1) * pw]);
                let mean = tile.mean().expect("non-empty tile");
                let k = r * gc + c;
                out[[k, 0]] = mean;
                if self.stat == PatchStat::MeanStd {
                    out[[k, 1]] = tile.mapv(|v| (v - mean).powi(2)).mean().expect("non-empty").sqrt();
                }
            }
        }
        Ok(out)
    }
}

/// Frozen random-feature backbone: each patch's centered luminance is
/// projected by a seeded random matrix and squashed with `tanh`.
#[derive(Debug, Clone)]
pub struct RandomProjectionExtractor {
    resolution: (usize, usize),
    grid: Option<(usize, usize)>,
    projection: Array2<f64>,
}

impl RandomProjectionExtractor {
    pub fn new(resolution: (usize, usize), grid: Option<usize>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("random projection needs dim >= 1"));
        }
        let g = grid_or_global(resolution, grid)?;
        let n = (resolution.0 / g.0) * (resolution.1 / g.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / n as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, n), |_| rng.random_range(-scale..scale) * 4.0);
        Ok(RandomProjectionExtractor {
            resolution,
            grid: grid.map(|_| g),
            projection,
        })
    }
}

impl SpatialExtractor for RandomProjectionExtractor {
    fn name(&self) -> String {
        format!("random_projection[{}]", self.projection.nrows())
    }

    fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn spatial_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn patch_grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    fn extract(&self, sample: &ImageSample) -> Result<Array2<f64>> {
        let lum = checked_luminance(sample, self.resolution)?;
        let (gr, gc) = self.grid.unwrap_or((1, 1));
        let (ph, pw) = (self.resolution.0 / gr, self.resolution.1 / gc);
        let mut out = Array2::zeros((gr * gc, self.spatial_dim()));
        for r in 0..gr {
            for c in 0..gc {
                let tile = lum.slice(ndarray::s![r * ph..(r + 1) * ph, c * pw..(c + 1) * pw]);
                let flat = ndarray::Array1::from_iter(tile.iter().map(|v| v - 0.5));
                let feat = self.projection.dot(&flat).mapv(f64::tanh);
                out.row_mut(r * gc + c).assign(&feat);
            }
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct FeatureRow {
    id: String,
    features: Vec<Vec<f64>>,
}

/// Features computed offline by an external backbone, one JSON object per
/// line: `{"id": "...", "features": [[...], ...]}` with `P` rows of `S`
/// values (a single row for global features).
#[derive(Debug, Clone)]
pub struct PrecomputedExtractor {
    source: PathBuf,
    resolution: (usize, usize),
    grid: Option<(usize, usize)>,
    dim: usize,
    table: Arc<HashMap<String, Array2<f64>>>,
}

impl PrecomputedExtractor {
    pub fn load(path: &Path, resolution: (usize, usize), grid: Option<usize>, dim: usize) -> Result<Self> {
        let g = grid_or_global(resolution, grid)?;
        let rows = g.0 * g.1;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: FeatureRow = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
                row: i + 1,
                message: e.to_string(),
            })?;
            if row.features.len() != rows || row.features.iter().any(|f| f.len() != dim) {
                return Err(Error::Ingestion {
                    row: i + 1,
                    message: format!("features for `{}` are not {rows}x{dim}", row.id),
                });
            }
            let flat: Vec<f64> = row.features.into_iter().flatten().collect();
            table.insert(row.id, Array2::from_shape_vec((rows, dim), flat).expect("checked"));
        }
        Ok(PrecomputedExtractor {
            source: path.to_path_buf(),
            resolution,
            grid: grid.map(|_| g),
            dim,
            table: Arc::new(table),
        })
    }
}

impl SpatialExtractor for PrecomputedExtractor {
    fn name(&self) -> String {
        format!("precomputed[{}]", self.source.display())
    }

    fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn spatial_dim(&self) -> usize {
        self.dim
    }

    fn patch_grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    fn extract(&self, sample: &ImageSample) -> Result<Array2<f64>> {
        self.table
            .get(&sample.id)
            .cloned()
            .ok_or_else(|| Error::Consistency(format!("no precomputed features for `{}`", sample.id)))
    }
}

/// Serializable extractor choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorPreset {
    PatchMean {
        #[serde(default)]
        grid: Option<usize>,
    },
    PatchMeanStd {
        #[serde(default)]
        grid: Option<usize>,
    },
    RandomProjection {
        #[serde(default)]
        grid: Option<usize>,
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Output of an external backbone (e.g. a large windowed transformer).
    Precomputed {
        path: PathBuf,
        #[serde(default)]
        grid: Option<usize>,
        dim: usize,
    },
}

impl ExtractorPreset {
    pub fn build(&self, resolution: (usize, usize)) -> Result<Arc<dyn SpatialExtractor>> {
        Ok(match self {
            ExtractorPreset::PatchMean { grid } => {
                Arc::new(PatchStatsExtractor::new(resolution, *grid, PatchStat::Mean)?)
            }
            ExtractorPreset::PatchMeanStd { grid } => {
                Arc::new(PatchStatsExtractor::new(resolution, *grid, PatchStat::MeanStd)?)
            }
            ExtractorPreset::RandomProjection { grid, dim, seed } => {
                Arc::new(RandomProjectionExtractor::new(resolution, *grid, *dim, *seed)?)
            }
            ExtractorPreset::Precomputed { path, grid, dim } => {
                Arc::new(PrecomputedExtractor::load(path, resolution, *grid, *dim)?)
            }
        })
    }
}
