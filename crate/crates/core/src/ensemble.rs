//! Part-gated routing between the paired transformer models and the SFnet
//! fallback, plus the dual-crop pipeline with its neutral default.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datapipe::crops::{extract_crops, CropResult};
use crate::error::{Error, Result};
use crate::heads::{ModelBundle, ModelKind};
use crate::types::{decide, DecisionPolicy, ImageSample, Label, Score};

/// The six parts whose joint presence opens the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacePart {
    LeftEyebrow,
    RightEyebrow,
    LeftEye,
    RightEye,
    UpperLip,
    LowerLip,
}

impl FacePart {
    pub const ALL: [FacePart; 6] = [
        FacePart::LeftEyebrow,
        FacePart::RightEyebrow,
        FacePart::LeftEye,
        FacePart::RightEye,
        FacePart::UpperLip,
        FacePart::LowerLip,
    ];

    pub const EYE_REGION: [FacePart; 4] = [
        FacePart::LeftEyebrow,
        FacePart::RightEyebrow,
        FacePart::LeftEye,
        FacePart::RightEye,
    ];

    pub const LIP_REGION: [FacePart; 2] = [FacePart::UpperLip, FacePart::LowerLip];

    pub fn as_str(self) -> &'static str {
        match self {
            FacePart::LeftEyebrow => "left_eyebrow",
            FacePart::RightEyebrow => "right_eyebrow",
            FacePart::LeftEye => "left_eye",
            FacePart::RightEye => "right_eye",
            FacePart::UpperLip => "upper_lip",
            FacePart::LowerLip => "lower_lip",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for FacePart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FacePart {
    type Err = Error;

    fn from_str(s: &str) -> Result<FacePart> {
        FacePart::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown face part `{s}`")))
    }
}

/// Binary `[rows, cols]` mask of one part.
pub type PartMask = Array2<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct FacePartsReport {
    presence: [bool; 6],
    masks: BTreeMap<FacePart, PartMask>,
    pub source: String,
    /// Set when the provider failed and the report was forced all-absent.
    pub error: Option<String>,
}

impl FacePartsReport {
    pub fn from_presence(source: impl Into<String>, present: &[FacePart]) -> FacePartsReport {
        let mut presence = [false; 6];
        for p in present {
            presence[p.index()] = true;
        }
        FacePartsReport {
            presence,
            masks: BTreeMap::new(),
            source: source.into(),
            error: None,
        }
    }

    /// A part is present iff its mask has at least one positive pixel.
    pub fn from_masks(source: impl Into<String>, masks: BTreeMap<FacePart, PartMask>) -> Result<FacePartsReport> {
        let mut dims = masks.values().map(|m| m.dim());
        if let Some(first) = dims.next() {
            if dims.any(|d| d != first) {
                return Err(Error::Consistency("part masks differ in size".into()));
            }
        }
        let mut presence = [false; 6];
        for (part, mask) in &masks {
            presence[part.index()] = mask.iter().any(|&v| v);
        }
        Ok(FacePartsReport {
            presence,
            masks,
            source: source.into(),
            error: None,
        })
    }

    pub fn absent(source: impl Into<String>, error: impl Into<String>) -> FacePartsReport {
        FacePartsReport {
            presence: [false; 6],
            masks: BTreeMap::new(),
            source: source.into(),
            error: Some(error.into()),
        }
    }

    pub fn is_present(&self, part: FacePart) -> bool {
        self.presence[part.index()]
    }

    pub fn present_parts(&self) -> Vec<FacePart> {
        FacePart::ALL.into_iter().filter(|&p| self.is_present(p)).collect()
    }

    pub fn mask(&self, part: FacePart) -> Option<&PartMask> {
        self.masks.get(&part)
    }

    pub fn has_masks(&self) -> bool {
        !self.masks.is_empty()
    }

    /// Conjunction of the six presence flags.
    pub fn gate(&self) -> bool {
        self.presence.iter().all(|&p| p)
    }

    /// Clears any presence flag whose provided mask is empty.
    fn normalize(mut self) -> FacePartsReport {
        for (part, mask) in &self.masks {
            if !mask.iter().any(|&v| v) {
                self.presence[part.index()] = false;
            }
        }
        self
    }
}

pub trait FacePartsProvider: Send + Sync {
    fn name(&self) -> &str;

    fn parse(&self, image: &ImageSample) -> Result<FacePartsReport>;
}

/// Runs the provider, failing closed: any provider error yields an
/// all-absent report carrying the error text.
pub fn detect_parts(provider: &dyn FacePartsProvider, image: &ImageSample) -> FacePartsReport {
    let attempt = image.pixels().and_then(|_| provider.parse(image));
    match attempt {
        Ok(report) => report.normalize(),
        Err(e) => {
            log::warn!("face parsing failed for `{}`: {e}", image.id);
            FacePartsReport::absent(provider.name(), e.to_string())
        }
    }
}

/// Deterministic stub: rectangular part masks at fixed fractions of the image.
#[derive(Debug, Clone, Default)]
pub struct LayoutProvider {
    missing: Vec<FacePart>,
}

impl LayoutProvider {
    pub fn full() -> LayoutProvider {
        LayoutProvider::default()
    }

    /// Same layout with the given part's mask left empty.
    pub fn without(mut self, part: FacePart) -> LayoutProvider {
        self.missing.push(part);
        self
    }

    /// Fractional `(top, bottom, left, right)` box of each part.
    fn layout(part: FacePart) -> (f64, f64, f64, f64) {
        match part {
            FacePart::LeftEyebrow => (0.25, 0.29, 0.20, 0.42),
            FacePart::RightEyebrow => (0.25, 0.29, 0.58, 0.80),
            FacePart::LeftEye => (0.33, 0.40, 0.24, 0.40),
            FacePart::RightEye => (0.33, 0.40, 0.60, 0.76),
            FacePart::UpperLip => (0.66, 0.71, 0.36, 0.64),
            FacePart::LowerLip => (0.71, 0.77, 0.36, 0.64),
        }
    }
}

impl FacePartsProvider for LayoutProvider {
    fn name(&self) -> &str {
        "layout-stub"
    }

    fn parse(&self, image: &ImageSample) -> Result<FacePartsReport> {
        let (w, h) = image.pixels()?.dimensions();
        let (h, w) = (h as usize, w as usize);
        let masks = FacePart::ALL
            .into_iter()
            .map(|part| {
                let mut mask = Array2::from_elem((h, w), false);
                if !self.missing.contains(&part) {
                    let (t, b, l, r) = LayoutProvider::layout(part);
                    let rows =
                        (t * h as f64) as usize..((b * h as f64) as usize).max((t * h as f64) as usize + 1).min(h);
                    let cols =
                        (l * w as f64) as usize..((r * w as f64) as usize).max((l * w as f64) as usize + 1).min(w);
                    for i in rows {
                        for j in cols.clone() {
                            mask[[i, j]] = true;
                        }
                    }
                }
                (part, mask)
            })
            .collect();
        FacePartsReport::from_masks(self.name(), masks)
    }
}

/// Stub returning a fixed presence set per sample id.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    by_id: HashMap<String, Vec<FacePart>>,
    default: Vec<FacePart>,
}

impl ScriptedProvider {
    /// Every image reports the same parts.
    pub fn constant(parts: &[FacePart]) -> ScriptedProvider {
        ScriptedProvider {
            by_id: HashMap::new(),
            default: parts.to_vec(),
        }
    }

    pub fn all_present() -> ScriptedProvider {
        ScriptedProvider::constant(&FacePart::ALL)
    }

    pub fn none_present() -> ScriptedProvider {
        ScriptedProvider::constant(&[])
    }

    pub fn with(mut self, id: impl Into<String>, parts: &[FacePart]) -> ScriptedProvider {
        self.by_id.insert(id.into(), parts.to_vec());
        self
    }
}

impl FacePartsProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted-stub"
    }

    fn parse(&self, image: &ImageSample) -> Result<FacePartsReport> {
        let parts = self.by_id.get(&image.id).unwrap_or(&self.default);
        Ok(FacePartsReport::from_presence(self.name(), parts))
    }
}

/// Always errors; exercises the fail-closed path.
#[derive(Debug, Clone, Default)]
pub struct FailingProvider;

impl FacePartsProvider for FailingProvider {
    fn name(&self) -> &str {
        "failing-stub"
    }

    fn parse(&self, _image: &ImageSample) -> Result<FacePartsReport> {
        Err(Error::Provider {
            provider: self.name().to_string(),
            message: "simulated parser crash".into(),
        })
    }
}

/// Production adapter: masks exported by an external face parser as
/// `<root>/<id>/<part>.png` (nonzero = part). A missing file is an absent part.
#[derive(Debug, Clone)]
pub struct MaskDirProvider {
    root: PathBuf,
}

impl MaskDirProvider {
    pub fn new(root: impl Into<PathBuf>) -> MaskDirProvider {
        MaskDirProvider { root: root.into() }
    }
}

impl FacePartsProvider for MaskDirProvider {
    fn name(&self) -> &str {
        "mask-dir"
    }

    fn parse(&self, image: &ImageSample) -> Result<FacePartsReport> {
        let dir = self.root.join(&image.id);
        if !dir.is_dir() {
            return Err(Error::Provider {
                provider: self.name().into(),
                message: format!("no mask directory {}", dir.display()),
            });
        }
        let mut masks = BTreeMap::new();
        for part in FacePart::ALL {
            let path = dir.join(format!("{part}.png"));
            if !path.exists() {
                continue;
            }
            let img = image::open(&path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?
                .to_luma8();
            let (w, h) = img.dimensions();
            let mask = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                img.get_pixel(c as u32, r as u32).0[0] > 0
            });
            masks.insert(part, mask);
        }
        FacePartsReport::from_masks(self.name(), masks)
    }
}

/// Production adapter: presence flags from a CSV with header
/// `id,left_eyebrow,right_eyebrow,left_eye,right_eye,upper_lip,lower_lip`
/// and `0`/`1` cells. Unknown ids are a provider failure.
#[derive(Debug, Clone)]
pub struct PresenceCsvProvider {
    rows: HashMap<String, Vec<FacePart>>,
}

impl PresenceCsvProvider {
    pub fn load(path: &Path) -> Result<PresenceCsvProvider> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let expected: Vec<&str> = std::iter::once("id")
            .chain(FacePart::ALL.iter().map(|p| p.as_str()))
            .collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Manifest(format!(
                "parts file header must be `{}`",
                expected.join(",")
            )));
        }
        let mut rows = HashMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let mut parts = Vec::new();
            for (part, cell) in FacePart::ALL.iter().zip(record.iter().skip(1)) {
                match cell {
                    "1" => parts.push(*part),
                    "0" => {}
                    other => {
                        return Err(Error::Ingestion {
                            row: i + 1,
                            message: format!("{part} must be 0 or 1, got `{other}`"),
                        })
                    }
                }
            }
            rows.insert(record[0].to_string(), parts);
        }
        Ok(PresenceCsvProvider { rows })
    }
}

impl FacePartsProvider for PresenceCsvProvider {
    fn name(&self) -> &str {
        "presence-csv"
    }

    fn parse(&self, image: &ImageSample) -> Result<FacePartsReport> {
        let parts = self.rows.get(&image.id).ok_or_else(|| Error::Provider {
            provider: self.name().into(),
            message: format!("no entry for `{}`", image.id),
        })?;
        Ok(FacePartsReport::from_presence(self.name(), parts))
    }
}

/// Anything that maps one image to a real-vs-fake score.
pub trait ImageScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, image: &ImageSample) -> Result<f64>;

    fn kind(&self) -> Option<ModelKind> {
        None
    }

    /// Input resolution `(rows, cols)` the scorer requires, if fixed.
    fn resolution(&self) -> Option<(usize, usize)> {
        None
    }

    fn ready(&self) -> Result<()> {
        Ok(())
    }
}

impl ImageScorer for ModelBundle {
    fn name(&self) -> &str {
        ModelBundle::name(self)
    }

    fn score(&self, image: &ImageSample) -> Result<f64> {
        self.score_one(image)
    }

    fn kind(&self) -> Option<ModelKind> {
        Some(ModelBundle::kind(self))
    }

    fn resolution(&self) -> Option<(usize, usize)> {
        Some(ModelBundle::resolution(self))
    }

    fn ready(&self) -> Result<()> {
        self.params().map(|_| ())
    }
}

/// Stub scorer returning a fixed score, optionally per sample id.
#[derive(Debug, Clone)]
pub struct ConstantScorer {
    name: String,
    value: f64,
    by_id: HashMap<String, f64>,
}

impl ConstantScorer {
    pub fn new(name: impl Into<String>, value: f64) -> Result<ConstantScorer> {
        Score::new(value)?;
        Ok(ConstantScorer {
            name: name.into(),
            value,
            by_id: HashMap::new(),
        })
    }

    pub fn with(mut self, id: impl Into<String>, value: f64) -> Result<ConstantScorer> {
        Score::new(value)?;
        self.by_id.insert(id.into(), value);
        Ok(self)
    }
}

impl ImageScorer for ConstantScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, image: &ImageSample) -> Result<f64> {
        Ok(*self.by_id.get(&image.id).unwrap_or(&self.value))
    }
}

/// Scorer that always fails; used to exercise pipeline errors.
#[derive(Debug, Clone)]
pub struct FailingScorer(pub String);

impl ImageScorer for FailingScorer {
    fn name(&self) -> &str {
        &self.0
    }

    fn score(&self, _image: &ImageSample) -> Result<f64> {
        Err(Error::State("simulated inference failure".into()))
    }
}

#[derive(Clone)]
pub struct EnsembleConfig {
    pub swinatten: Arc<dyn ImageScorer>,
    pub swinfusion: Arc<dyn ImageScorer>,
    pub sfnet: Arc<dyn ImageScorer>,
    pub policy: DecisionPolicy,
}

impl fmt::Debug for EnsembleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnsembleConfig")
            .field("swinatten", &self.swinatten.name())
            .field("swinfusion", &self.swinfusion.name())
            .field("sfnet", &self.sfnet.name())
            .field("policy", &self.policy)
            .finish()
    }
}

impl EnsembleConfig {
    /// Checks model roles, readiness and resolution compatibility.
    pub fn new(
        swinatten: Arc<dyn ImageScorer>,
        swinfusion: Arc<dyn ImageScorer>,
        sfnet: Arc<dyn ImageScorer>,
        policy: DecisionPolicy,
    ) -> Result<EnsembleConfig> {
        let slots = [
            (&swinatten, ModelKind::Swinatten),
            (&swinfusion, ModelKind::Swinfusion),
            (&sfnet, ModelKind::Sfnet),
        ];
        let mut resolution = None;
        for (scorer, expected) in slots {
            if let Some(kind) = scorer.kind() {
                if kind != expected {
                    return Err(Error::config(format!("{expected} slot holds a {kind} model")));
                }
            }
            scorer.ready().map_err(|e| pipeline(scorer.as_ref(), e))?;
            if let Some(r) = scorer.resolution() {
                match resolution {
                    None => resolution = Some(r),
                    Some(prev) if prev != r => {
                        return Err(Error::config(format!(
                            "ensemble resolutions differ: {prev:?} vs {r:?} ({})",
                            scorer.name()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(EnsembleConfig {
            swinatten,
            swinfusion,
            sfnet,
            policy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTaken {
    GatedPair,
    Fallback,
    Facecrop,
    FacecropDefault,
}

impl PathTaken {
    pub fn as_str(self) -> &'static str {
        match self {
            PathTaken::GatedPair => "gated_pair",
            PathTaken::Fallback => "fallback",
            PathTaken::Facecrop => "facecrop",
            PathTaken::FacecropDefault => "facecrop_default",
        }
    }
}

impl fmt::Display for PathTaken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathTaken {
    type Err = Error;

    fn from_str(s: &str) -> Result<PathTaken> {
        [
            PathTaken::GatedPair,
            PathTaken::Fallback,
            PathTaken::Facecrop,
            PathTaken::FacecropDefault,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown path `{s}`")))
    }
}

/// One routed prediction with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub path_taken: PathTaken,
    pub score_swinatten: Option<f64>,
    pub score_swinfusion: Option<f64>,
    pub score_sfnet: Option<f64>,
    pub score_fused: Score,
    pub verdict: Label,
    /// Provider failure that forced the fallback, if any.
    pub parts_error: Option<String>,
}

fn pipeline(scorer: &dyn ImageScorer, e: Error) -> Error {
    match e {
        Error::Pipeline { .. } => e,
        other => Error::Pipeline {
            bundle: scorer.name().to_string(),
            message: other.to_string(),
        },
    }
}

fn run(scorer: &dyn ImageScorer, image: &ImageSample) -> Result<f64> {
    let s = scorer.score(image).map_err(|e| pipeline(scorer, e))?;
    Score::new(s).map_err(|e| pipeline(scorer, e))?;
    Ok(s)
}

/// Gate open: mean of the two gate models; gate closed: the SFnet score.
/// Scores are averaged first and thresholded once.
pub fn final_pipeline_score(
    config: &EnsembleConfig,
    provider: &dyn FacePartsProvider,
    image: &ImageSample,
) -> Result<Prediction> {
    let report = detect_parts(provider, image);
    let mut prediction = if report.gate() {
        let (a, b) = rayon::join(
            || run(config.swinatten.as_ref(), image),
            || run(config.swinfusion.as_ref(), image),
        );
        let (a, b) = (a?, b?);
        let fused = Score::new(0.5 * (a + b))?;
        Prediction {
            id: image.id.clone(),
            path_taken: PathTaken::GatedPair,
            score_swinatten: Some(a),
            score_swinfusion: Some(b),
            score_sfnet: None,
            score_fused: fused,
            verdict: decide(fused, config.policy),
            parts_error: None,
        }
    } else {
        let s = Score::new(run(config.sfnet.as_ref(), image)?)?;
        Prediction {
            id: image.id.clone(),
            path_taken: PathTaken::Fallback,
            score_swinatten: None,
            score_swinfusion: None,
            score_sfnet: Some(s.value()),
            score_fused: s,
            verdict: decide(s, config.policy),
            parts_error: None,
        }
    };
    prediction.parts_error = report.error;
    Ok(prediction)
}

/// Neutral score assigned when a face part is missing.
pub const FACECROP_DEFAULT: f64 = 0.5;

/// Mean of the eyes-crop and lips-crop model scores when all parts are
/// present, exactly 0.5 otherwise.
pub fn facecrop_score(
    eyes_model: &dyn ImageScorer,
    lips_model: &dyn ImageScorer,
    provider: &dyn FacePartsProvider,
    image: &ImageSample,
    policy: DecisionPolicy,
) -> Result<Prediction> {
    let report = detect_parts(provider, image);
    let default = |error: Option<String>| -> Result<Prediction> {
        let s = Score::new(FACECROP_DEFAULT)?;
        Ok(Prediction {
            id: image.id.clone(),
            path_taken: PathTaken::FacecropDefault,
            score_swinatten: None,
            score_swinfusion: None,
            score_sfnet: None,
            score_fused: s,
            verdict: decide(s, policy),
            parts_error: error,
        })
    };
    if !report.gate() {
        return default(report.error);
    }
    let inconsistent = |message: String| Error::Pipeline {
        bundle: format!("facecrop ({})", report.source),
        message,
    };
    let (eyes, lips) = match extract_crops(image, &report) {
        Ok(CropResult::DualCrop { eyes, lips, .. }) => (eyes, lips),
        Ok(CropResult::FullImage) => return Err(inconsistent("gate is open but crops could not be extracted".into())),
        Err(e) => return Err(inconsistent(e.to_string())),
    };
    let eyes = crop_sample(image, "eyes", eyes, eyes_model.resolution())?;
    let lips = crop_sample(image, "lips", lips, lips_model.resolution())?;
    let (a, b) = rayon::join(|| run(eyes_model, &eyes), || run(lips_model, &lips));
    let fused = Score::new(0.5 * (a? + b?))?;
    Ok(Prediction {
        id: image.id.clone(),
        path_taken: PathTaken::Facecrop,
        score_swinatten: None,
        score_swinfusion: None,
        score_sfnet: None,
        score_fused: fused,
        verdict: decide(fused, policy),
        parts_error: None,
    })
}

fn crop_sample(
    image: &ImageSample,
    tag: &str,
    crop: RgbImage,
    resolution: Option<(usize, usize)>,
) -> Result<ImageSample> {
    let pixels = match resolution {
        Some((rows, cols)) if (crop.height() as usize, crop.width() as usize) != (rows, cols) => {
            imageops::resize(&crop, cols as u32, rows as u32, FilterType::Triangle)
        }
        _ => crop,
    };
    let mut sample = ImageSample::from_pixels(format!("{}#{tag}", image.id), pixels, image.label)?;
    sample.origin = image.origin.clone();
    Ok(sample)
}
