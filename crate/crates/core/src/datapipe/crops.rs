//! Eyes/eyebrows and lips/chin crops from face-part masks.

use std::io::Cursor;
use std::path::Path;

use image::{imageops, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::ensemble::{FacePart, FacePartsReport};
use crate::error::{Error, Result};
use crate::heads::checkpoint::write_atomic;
use crate::types::ImageSample;

/// Fraction of the tight box's height/width added on each side.
pub const CROP_PAD_FRACTION: f64 = 0.1;

/// Encodes a PNG in memory and writes it via temp file + rename.
pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_atomic(path, &buf.into_inner())
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn crop(&self, image: &RgbImage) -> RgbImage {
        imageops::crop_imm(
            image,
            self.left as u32,
            self.top as u32,
            self.width() as u32,
            self.height() as u32,
        )
        .to_image()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    DualCrop,
    FullImage,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CropResult {
    DualCrop {
        eyes: RgbImage,
        lips: RgbImage,
        eyes_box: CropBox,
        lips_box: CropBox,
    },
    FullImage,
}

impl CropResult {
    pub fn kind(&self) -> CropKind {
        match self {
            CropResult::DualCrop { .. } => CropKind::DualCrop,
            CropResult::FullImage => CropKind::FullImage,
        }
    }
}

/// Tight inclusive bounds `(rmin, rmax, cmin, cmax)` of the union of masks.
fn tight_bounds(
    report: &FacePartsReport,
    parts: &[FacePart],
    dims: (usize, usize),
) -> Result<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for &part in parts {
        let mask = report
            .mask(part)
            .ok_or_else(|| Error::Consistency(format!("report marks {part} present but carries no mask")))?;
        if mask.dim() != dims {
            return Err(Error::Consistency(format!(
                "{part} mask is {}x{} but the image is {}x{}",
                mask.nrows(),
                mask.ncols(),
                dims.0,
                dims.1
            )));
        }
        for ((r, c), &on) in mask.indexed_iter() {
            if on {
                b = Some(match b {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    b.ok_or_else(|| Error::Consistency("present parts have empty masks".into()))
}

/// Pads `[lo, hi]` by `pad` on each side, rounding inward, clamped to `[0, limit)`.
fn padded(lo: f64, hi: f64, pad: f64, limit: usize) -> (usize, usize) {
    let a = (lo - pad).ceil().max(0.0) as usize;
    let b = ((hi + pad).floor() as usize).min(limit - 1);
    (a, b)
}

/// Crop geometry, exposed for inspection: eyes box = padded union of eyebrow
/// and eye masks; lips box = union of lip masks extended down by its own
/// height, padded by 10% of the tight lip box.
pub fn crop_boxes(report: &FacePartsReport, rows: usize, cols: usize) -> Result<(CropBox, CropBox)> {
    let dims = (rows, cols);
    let boxed = |parts: &[FacePart], extend: bool| -> Result<CropBox> {
        let (r0, r1, c0, c1) = tight_bounds(report, parts, dims)?;
        let (h, w) = ((r1 - r0) as f64, (c1 - c0) as f64);
        let bottom = if extend { r1 as f64 + h } else { r1 as f64 };
        let (top, bottom) = padded(r0 as f64, bottom, h / 10.0, rows);
        let (left, right) = padded(c0 as f64, c1 as f64, w / 10.0, cols);
        Ok(CropBox {
            top,
            bottom,
            left,
            right,
        })
    };
    Ok((
        boxed(&FacePart::EYE_REGION, false)?,
        boxed(&FacePart::LIP_REGION, true)?,
    ))
}

/// Dual crop when all six parts are present, otherwise the full image.
pub fn extract_crops(image: &ImageSample, report: &FacePartsReport) -> Result<CropResult> {
    if !report.gate() {
        return Ok(CropResult::FullImage);
    }
    let px = image.pixels()?;
    let (eyes_box, lips_box) = crop_boxes(report, px.height() as usize, px.width() as usize)?;
    Ok(CropResult::DualCrop {
        eyes: eyes_box.crop(px),
        lips: lips_box.crop(px),
        eyes_box,
        lips_box,
    })
}
