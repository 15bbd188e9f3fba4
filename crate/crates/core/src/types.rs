//! Shared domain types: labels, scores, the decision policy and the
//! attribute categories used to split a corpus.
//!
//! Scores follow one convention everywhere: a higher score means the image is
//! more likely real. Labels encode `real = 1`, `fake = 0` so a score can be
//! read as an estimate of the encoded label.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth or predicted class of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Numeric target used by the training objective.
    pub fn encode(self) -> u8 {
        match self {
            Label::Real => 1,
            Label::Fake => 0,
        }
    }

    pub fn decode(value: u8) -> Result<Label> {
        match value {
            1 => Ok(Label::Real),
            0 => Ok(Label::Fake),
            other => Err(Error::invalid(format!("label encoding must be 0 or 1, got {other}"))),
        }
    }

    pub fn target(self) -> f64 {
        f64::from(self.encode())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(Error::invalid(format!(
                "unknown label `{other}` (expected real or fake)"
            ))),
        }
    }
}

/// Model output in `[0, 1]`; higher means more likely real.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Score(f64);

impl Score {
    pub fn new(value: f64) -> Result<Score> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Score(value))
        } else {
            Err(Error::invalid(format!("score {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Score {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Score::new(value)
    }
}

impl From<Score> for f64 {
    fn from(s: Score) -> f64 {
        s.0
    }
}

/// Threshold rule turning a score into a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DecisionPolicy {
    threshold: f64,
}

impl DecisionPolicy {
    pub const DEFAULT_THRESHOLD: f64 = 0.3;
    /// Threshold used by the per-model comparison tables.
    pub const MIDPOINT_THRESHOLD: f64 = 0.5;

    pub fn new(threshold: f64) -> Result<DecisionPolicy> {
        if threshold.is_finite() && threshold > 0.0 && threshold < 1.0 {
            Ok(DecisionPolicy { threshold })
        } else {
            Err(Error::config(format!(
                "threshold {threshold} must lie strictly inside (0, 1)"
            )))
        }
    }

    pub fn midpoint() -> DecisionPolicy {
        DecisionPolicy {
            threshold: Self::MIDPOINT_THRESHOLD,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        DecisionPolicy {
            threshold: Self::DEFAULT_THRESHOLD,
        }
    }
}

impl TryFrom<f64> for DecisionPolicy {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        DecisionPolicy::new(value)
    }
}

impl From<DecisionPolicy> for f64 {
    fn from(p: DecisionPolicy) -> f64 {
        p.threshold
    }
}

/// Fake strictly below the threshold, real otherwise. A tie is not enough
/// evidence for fake.
pub fn decide(score: Score, policy: DecisionPolicy) -> Label {
    if score.value() < policy.threshold {
        Label::Fake
    } else {
        Label::Real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaceGroup {
    White,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionGroup {
    Happy,
    Negative,
    Neutral,
    Scared,
}

impl RaceGroup {
    pub const ALL: [RaceGroup; 2] = [RaceGroup::Other, RaceGroup::White];

    pub fn as_str(self) -> &'static str {
        match self {
            RaceGroup::White => "white",
            RaceGroup::Other => "other",
        }
    }
}

impl EmotionGroup {
    pub const ALL: [EmotionGroup; 4] = [
        EmotionGroup::Happy,
        EmotionGroup::Negative,
        EmotionGroup::Neutral,
        EmotionGroup::Scared,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionGroup::Happy => "happy",
            EmotionGroup::Negative => "negative",
            EmotionGroup::Neutral => "neutral",
            EmotionGroup::Scared => "scared",
        }
    }
}

impl FromStr for EmotionGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmotionGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown emotion group `{s}`")))
    }
}

/// One of the eight `race_emotion` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Category {
    pub race: RaceGroup,
    pub emotion: EmotionGroup,
}

impl Category {
    pub fn new(race: RaceGroup, emotion: EmotionGroup) -> Category {
        Category { race, emotion }
    }

    /// All eight categories, race-major in the order `other_*` then `white_*`.
    pub fn all() -> Vec<Category> {
        RaceGroup::ALL
            .iter()
            .flat_map(|&race| EmotionGroup::ALL.iter().map(move |&emotion| Category { race, emotion }))
            .collect()
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.race.as_str(), self.emotion.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (race, emotion) = s
            .split_once('_')
            .ok_or_else(|| Error::invalid(format!("category `{s}` is not of the form race_emotion")))?;
        let race = match race {
            "white" => RaceGroup::White,
            "other" => RaceGroup::Other,
            r => return Err(Error::invalid(format!("unknown race group `{r}`"))),
        };
        Ok(Category {
            race,
            emotion: emotion.parse()?,
        })
    }
}

impl Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One face crop and everything known about it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub path: PathBuf,
    pub pixels: Option<RgbImage>,
    pub label: Option<Label>,
    pub origin: String,
    pub category: Option<Category>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> ImageSample {
        ImageSample {
            id: id.into(),
            path: path.into(),
            pixels: None,
            label: None,
            origin: String::new(),
            category: None,
        }
    }

    /// In-memory sample, used by synthetic corpora and tests.
    pub fn from_pixels(id: impl Into<String>, pixels: RgbImage, label: Option<Label>) -> Result<ImageSample> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::invalid("image must have positive height and width"));
        }
        let id = id.into();
        Ok(ImageSample {
            path: PathBuf::from(format!("{id}.png")),
            id,
            pixels: Some(pixels),
            label,
            origin: "memory".to_string(),
            category: None,
        })
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = origin.into();
        self
    }

    pub fn pixels(&self) -> Result<&RgbImage> {
        self.pixels
            .as_ref()
            .ok_or_else(|| Error::State(format!("pixels for sample `{}` are not loaded", self.id)))
    }

    pub fn require_label(&self) -> Result<Label> {
        self.label
            .ok_or_else(|| Error::invalid(format!("sample `{}` has no label", self.id)))
    }

    /// Reads the pixel data from `path`, resolved against `root` when relative.
    pub fn load_pixels(&mut self, root: &Path) -> Result<()> {
        let path = if self.path.is_absolute() {
            self.path.clone()
        } else {
            root.join(&self.path)
        };
        let img = image::open(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        let rgb = img.to_rgb8();
        if rgb.width() == 0 || rgb.height() == 0 {
            return Err(Error::invalid(format!("{} has zero area", path.display())));
        }
        self.pixels = Some(rgb);
        Ok(())
    }

    /// Luminance grid in `[0, 1]`, ITU-R 601 weights.
    pub fn luminance(&self) -> Result<Array2<f64>> {
        Ok(luminance(self.pixels()?))
    }
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Converts an RGB image into a `[rows, cols]` luminance grid scaled to `[0, 1]`.
pub fn luminance(img: &RgbImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        let p = img.get_pixel(c as u32, r as u32).0;
        (LUMA_WEIGHTS[0] * f64::from(p[0]) + LUMA_WEIGHTS[1] * f64::from(p[1]) + LUMA_WEIGHTS[2] * f64::from(p[2]))
            / 255.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: f64) -> Score {
        Score::new(v).unwrap()
    }

    #[test]
    fn decide_follows_threshold_rule() {
        let p = DecisionPolicy::default();
        assert_eq!(p.threshold(), 0.3);
        assert_eq!(decide(s(0.25), p), Label::Fake);
        assert_eq!(decide(s(0.35), p), Label::Real);
        assert_eq!(decide(s(0.30), p), Label::Real);
    }

    #[test]
    fn policy_rejects_degenerate_thresholds() {
        for t in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(DecisionPolicy::new(t).is_err(), "{t}");
        }
        assert_eq!(DecisionPolicy::midpoint().threshold(), 0.5);
    }

    #[test]
    fn score_bounds() {
        assert!(Score::new(-1e-12).is_err());
        assert!(Score::new(1.0 + 1e-12).is_err());
        assert!(Score::new(f64::INFINITY).is_err());
        assert_eq!(s(0.0).value(), 0.0);
        assert_eq!(s(1.0).value(), 1.0);
    }

    #[test]
    fn label_encoding_is_invertible() {
        for l in [Label::Real, Label::Fake] {
            assert_eq!(Label::decode(l.encode()).unwrap(), l);
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
        }
        assert_eq!(Label::Real.encode(), 1);
        assert_eq!(Label::Fake.encode(), 0);
        assert!(Label::decode(2).is_err());
        assert!("reall".parse::<Label>().is_err());
    }

    #[test]
    fn eight_categories_round_trip() {
        let all = Category::all();
        assert_eq!(all.len(), 8);
        let names: std::collections::BTreeSet<String> = all.iter().map(|c| c.to_string()).collect();
        assert_eq!(names.len(), 8);
        for c in all {
            assert_eq!(c.to_string().parse::<Category>().unwrap(), c);
        }
        assert_eq!(Category::all()[0].to_string(), "other_happy");
        assert!("blue_happy".parse::<Category>().is_err());
        assert!("white".parse::<Category>().is_err());
    }

    #[test]
    fn luminance_uses_601_weights() {
        let img = RgbImage::from_pixel(2, 1, image::Rgb([255, 0, 0]));
        let l = luminance(&img);
        assert_eq!(l.dim(), (1, 2));
        assert!((l[[0, 0]] - 0.299).abs() < 1e-12);
        let white = luminance(&RgbImage::from_pixel(1, 1, image::Rgb([255, 255, 255])));
        assert!((white[[0, 0]] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decide_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.001f64..0.999) {
            let p = DecisionPolicy::new(t).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if decide(s(lo), p) == Label::Real {
                prop_assert_eq!(decide(s(hi), p), Label::Real);
            }
            prop_assert_eq!(decide(s(a), p) == Label::Real, a >= t);
        }
    }
}
