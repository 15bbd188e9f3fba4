//! Frequency-domain features: 2-D DFT magnitude and phase, whole-image or
//! per patch.
//!
//! The forward transform is unnormalized, so the DC bin equals the pixel sum
//! and Parseval reads `sum(x^2) = sum(|X|^2) / (H * W)`.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySpectrum {
    pub magnitude: Array2<f64>,
    /// Phase in `(-pi, pi]`.
    pub phase: Array2<f64>,
}

impl FrequencySpectrum {
    pub fn dim(&self) -> (usize, usize) {
        self.magnitude.dim()
    }

    pub fn zeros(rows: usize, cols: usize) -> FrequencySpectrum {
        FrequencySpectrum {
            magnitude: Array2::zeros((rows, cols)),
            phase: Array2::zeros((rows, cols)),
        }
    }

    /// Magnitude after the configured compression.
    pub fn compressed_magnitude(&self, scale: MagnitudeScale) -> Array2<f64> {
        match scale {
            MagnitudeScale::Linear => self.magnitude.clone(),
            MagnitudeScale::Log1p => self.magnitude.mapv(f64::ln_1p),
        }
    }
}

/// How magnitudes are compressed before they reach an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeScale {
    Linear,
    #[default]
    Log1p,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpectra {
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major over the patch grid.
    pub patches: Vec<FrequencySpectrum>,
}

impl PatchSpectra {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn fft_magnitude_phase(image: ArrayView2<'_, f64>) -> Result<FrequencySpectrum> {
    let (rows, cols) = image.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("cannot transform an empty grid"));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite values"));
    }

    let mut buf: Vec<Complex<f64>> = image.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();

    let row_fft = planner.plan_fft_forward(cols);
    for row in buf.chunks_exact_mut(cols) {
        row_fft.process(row);
    }

    let col_fft = planner.plan_fft_forward(rows);
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for (r, slot) in column.iter_mut().enumerate() {
            *slot = buf[r * cols + c];
        }
        col_fft.process(&mut column);
        for (r, v) in column.iter().enumerate() {
            buf[r * cols + c] = *v;
        }
    }

    let magnitude = Array2::from_shape_fn((rows, cols), |(r, c)| buf[r * cols + c].norm());
    let phase = Array2::from_shape_fn((rows, cols), |(r, c)| principal_phase(buf[r * cols + c]));
    Ok(FrequencySpectrum { magnitude, phase })
}

/// Argument in `(-pi, pi]`, with an exact zero for the zero bin.
fn principal_phase(z: Complex<f64>) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Splits the grid into row-major `p x p` tiles.
pub fn tiles(image: ArrayView2<'_, f64>, patch_size: usize) -> Result<Vec<Array2<f64>>> {
    let (rows, cols) = image.dim();
    check_tiling(rows, cols, patch_size)?;
    let mut out = Vec::with_capacity((rows / patch_size) * (cols / patch_size));
    for gr in 0..rows / patch_size {
        for gc in 0..cols / patch_size {
            let (r0, c0) = (gr * patch_size, gc * patch_size);
            out.push(image.slice(s![r0..r0 + patch_size, c0..c0 + patch_size]).to_owned());
        }
    }
    Ok(out)
}

/// Inverse of [`tiles`].
pub fn reassemble(tiles: &[Array2<f64>], grid_rows: usize, grid_cols: usize) -> Result<Array2<f64>> {
    if tiles.len() != grid_rows * grid_cols || tiles.is_empty() {
        return Err(Error::config(format!(
            "{} tiles cannot fill a {grid_rows}x{grid_cols} grid",
            tiles.len()
        )));
    }
    let (p, q) = tiles[0].dim();
    if tiles.iter().any(|t| t.dim() != (p, q)) {
        return Err(Error::config("tiles have differing shapes"));
    }
    let mut out = Array2::zeros((grid_rows * p, grid_cols * q));
    for (k, tile) in tiles.iter().enumerate() {
        let (gr, gc) = (k / grid_cols, k % grid_cols);
        out.slice_mut(s![gr * p..(gr + 1) * p, gc * q..(gc + 1) * q])
            .assign(tile);
    }
    Ok(out)
}

fn check_tiling(rows: usize, cols: usize, patch_size: usize) -> Result<()> {
    if patch_size == 0 || rows == 0 || cols == 0 || !rows.is_multiple_of(patch_size) || !cols.is_multiple_of(patch_size)
    {
        return Err(Error::config(format!(
            "image of H={rows}, W={cols} cannot be tiled by patches of p={patch_size}"
        )));
    }
    Ok(())
}

pub fn per_patch_spectra(image: ArrayView2<'_, f64>, patch_size: usize) -> Result<PatchSpectra> {
    let (rows, cols) = image.dim();
    check_tiling(rows, cols, patch_size)?;
    let patches = tiles(image, patch_size)?
        .iter()
        .map(|t| fft_magnitude_phase(t.view()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSpectra {
        patch_size,
        grid_rows: rows / patch_size,
        grid_cols: cols / patch_size,
        patches,
    })
}
