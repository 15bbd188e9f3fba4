//! Race/emotion attribute segmentation into eight categories.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};
use crate::types::{Category, EmotionGroup, ImageSample, Label, RaceGroup};

/// Raw attribute strings as emitted by an attribute model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAttributes {
    pub race: String,
    pub emotion: String,
}

impl RawAttributes {
    pub fn new(race: impl Into<String>, emotion: impl Into<String>) -> RawAttributes {
        RawAttributes {
            race: race.into(),
            emotion: emotion.into(),
        }
    }
}

pub trait AttributePredictor: Send + Sync {
    fn name(&self) -> &str;

    fn predict(&self, sample: &ImageSample) -> Result<RawAttributes>;
}

/// Raw emotion label → emotion group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionGrouping(BTreeMap<String, EmotionGroup>);

impl Default for EmotionGrouping {
    fn default() -> Self {
        let table = [
            ("happy", EmotionGroup::Happy),
            ("neutral", EmotionGroup::Neutral),
            ("angry", EmotionGroup::Negative),
            ("sad", EmotionGroup::Negative),
            ("disgust", EmotionGroup::Negative),
            ("fear", EmotionGroup::Scared),
            ("surprise", EmotionGroup::Scared),
        ];
        EmotionGrouping(table.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }
}

impl EmotionGrouping {
    pub fn from_map(map: BTreeMap<String, EmotionGroup>) -> EmotionGrouping {
        EmotionGrouping(map.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect())
    }

    /// Overrides or adds one entry.
    pub fn set(&mut self, raw: &str, group: EmotionGroup) {
        self.0.insert(raw.to_lowercase(), group);
    }

    pub fn group(&self, raw: &str) -> Option<EmotionGroup> {
        self.0.get(raw.trim().to_lowercase().as_str()).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Categorized {
    Category(Category),
    Uncategorized { reason: String },
}

impl Categorized {
    pub fn category(&self) -> Option<Category> {
        match self {
            Categorized::Category(c) => Some(*c),
            Categorized::Uncategorized { .. } => None,
        }
    }
}

/// Maps raw attributes into a category; anything unmappable is uncategorized.
pub fn map_attributes(raw: &RawAttributes, grouping: &EmotionGrouping) -> Categorized {
    let race = if raw.race.trim().eq_ignore_ascii_case("white") {
        RaceGroup::White
    } else {
        RaceGroup::Other
    };
    match grouping.group(&raw.emotion) {
        Some(emotion) => Categorized::Category(Category::new(race, emotion)),
        None => Categorized::Uncategorized {
            reason: format!("emotion `{}` has no group", raw.emotion),
        },
    }
}

pub fn categorize(predictor: &dyn AttributePredictor, sample: &ImageSample, grouping: &EmotionGrouping) -> Categorized {
    let raw = sample.pixels().and_then(|_| predictor.predict(sample));
    match raw {
        Ok(raw) => map_attributes(&raw, grouping),
        Err(e) => Categorized::Uncategorized { reason: e.to_string() },
    }
}

/// Categorizes every sample in parallel and stores the result on the manifest.
pub fn categorize_manifest(
    predictor: &dyn AttributePredictor,
    manifest: &mut Manifest,
    grouping: &EmotionGrouping,
) -> Result<Vec<Categorized>> {
    let results: Vec<Categorized> = manifest
        .samples()
        .par_iter()
        .map(|s| categorize(predictor, s, grouping))
        .collect();
    let cats: Vec<Option<Category>> = results.iter().map(Categorized::category).collect();
    manifest.set_categories(&cats)?;
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub real: usize,
    pub fake: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.real + self.fake
    }

    fn add(&mut self, label: Option<Label>) {
        match label {
            Some(Label::Real) => self.real += 1,
            Some(Label::Fake) => self.fake += 1,
            None => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: Category,
    pub train: SplitCounts,
    pub validation: SplitCounts,
}

/// Per-category train/validation counts, plus the uncategorized remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub rows: Vec<CategoryRow>,
    pub uncategorized_train: usize,
    pub uncategorized_validation: usize,
}

impl CategoryReport {
    pub fn build(train: &Manifest, validation: Option<&Manifest>) -> CategoryReport {
        let mut rows: BTreeMap<Category, CategoryRow> = Category::all()
            .into_iter()
            .map(|c| {
                (
                    c,
                    CategoryRow {
                        category: c,
                        train: SplitCounts::default(),
                        validation: SplitCounts::default(),
                    },
                )
            })
            .collect();
        let mut uncategorized = [0usize; 2];
        for (split, m) in [(0, Some(train)), (1, validation)] {
            for s in m.map(Manifest::samples).unwrap_or_default() {
                match s.category {
                    Some(c) => {
                        let row = rows.get_mut(&c).expect("all categories present");
                        if split == 0 {
                            row.train.add(s.label)
                        } else {
                            row.validation.add(s.label)
                        }
                    }
                    None => uncategorized[split] += 1,
                }
            }
        }
        let order = Category::all();
        CategoryReport {
            rows: order.iter().map(|c| rows[c].clone()).collect(),
            uncategorized_train: uncategorized[0],
            uncategorized_validation: uncategorized[1],
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record([
            "category",
            "train_real",
            "train_fake",
            "train_total",
            "val_real",
            "val_fake",
            "val_total",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.category.to_string(),
                r.train.real.to_string(),
                r.train.fake.to_string(),
                r.train.total().to_string(),
                r.validation.real.to_string(),
                r.validation.fake.to_string(),
                r.validation.total().to_string(),
            ])?;
        }
        w.write_record([
            "uncategorized".to_string(),
            String::new(),
            String::new(),
            self.uncategorized_train.to_string(),
            String::new(),
            String::new(),
            self.uncategorized_validation.to_string(),
        ])?;
        w.into_inner().map_err(|e| Error::Manifest(e.to_string()))
    }
}

/// Deterministic stand-in: race from mean luminance, emotion from a pixel hash.
#[derive(Debug, Clone, Default)]
pub struct StubAttributePredictor;

impl StubAttributePredictor {
    const EMOTIONS: [&'static str; 7] = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"];
}

impl AttributePredictor for StubAttributePredictor {
    fn name(&self) -> &str {
        "attribute-stub"
    }

    fn predict(&self, sample: &ImageSample) -> Result<RawAttributes> {
        let px = sample.pixels()?;
        let lum = crate::types::luminance(px);
        let mean = lum.mean().unwrap_or(0.0);
        let sum: u64 = px.as_raw().iter().map(|&v| u64::from(v)).sum();
        let race = if mean >= 0.5 { "white" } else { "asian" };
        Ok(RawAttributes::new(
            race,
            StubAttributePredictor::EMOTIONS[(sum % 7) as usize],
        ))
    }
}

/// Production adapter: attribute predictions exported as CSV `id,race,emotion`.
#[derive(Debug, Clone)]
pub struct FileAttributePredictor {
    rows: HashMap<String, RawAttributes>,
}

impl FileAttributePredictor {
    pub fn load(path: &Path) -> Result<FileAttributePredictor> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        if reader.headers()?.iter().collect::<Vec<_>>() != ["id", "race", "emotion"] {
            return Err(Error::Manifest(
                "attribute file header must be `id,race,emotion`".into(),
            ));
        }
        let mut rows = HashMap::new();
        for record in reader.records() {
            let r = record?;
            rows.insert(r[0].to_string(), RawAttributes::new(&r[1], &r[2]));
        }
        Ok(FileAttributePredictor { rows })
    }

    pub fn from_rows(rows: impl IntoIterator<Item = (String, RawAttributes)>) -> FileAttributePredictor {
        FileAttributePredictor {
            rows: rows.into_iter().collect(),
        }
    }
}

impl AttributePredictor for FileAttributePredictor {
    fn name(&self) -> &str {
        "attribute-file"
    }

    fn predict(&self, sample: &ImageSample) -> Result<RawAttributes> {
        self.rows.get(&sample.id).cloned().ok_or_else(|| Error::Provider {
            provider: self.name().into(),
            message: format!("no attributes for `{}`", sample.id),
        })
    }
}
