//! Manifest CSV: `id,path,label,origin,category`, UTF-8, LF line endings.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::checkpoint::write_atomic;
use crate::types::{Category, ImageSample, Label};

pub const MANIFEST_HEADER: [&str; 5] = ["id", "path", "label", "origin", "category"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub real: usize,
    pub fake: usize,
    pub unlabeled: usize,
}

impl LabelCounts {
    pub fn of(samples: &[ImageSample]) -> LabelCounts {
        let mut c = LabelCounts::default();
        for s in samples {
            match s.label {
                Some(Label::Real) => c.real += 1,
                Some(Label::Fake) => c.fake += 1,
                None => c.unlabeled += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.real + self.fake + self.unlabeled
    }
}

/// An ordered, id-unique list of samples with derived counts and checksum.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    samples: Vec<ImageSample>,
    counts: LabelCounts,
    checksum: String,
    root: PathBuf,
}

impl Manifest {
    pub fn new(samples: Vec<ImageSample>) -> Result<Manifest> {
        Manifest::with_root(samples, PathBuf::from("."))
    }

    /// `root` resolves relative sample paths.
    pub fn with_root(samples: Vec<ImageSample>, root: impl Into<PathBuf>) -> Result<Manifest> {
        if samples.is_empty() {
            return Err(Error::Manifest("empty manifest".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.id.is_empty() {
                return Err(Error::Manifest("sample with empty id".into()));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id `{}`", s.id)));
            }
        }
        let checksum = hex::encode(Sha256::digest(render(&samples)?));
        Ok(Manifest {
            counts: LabelCounts::of(&samples),
            samples,
            checksum,
            root: root.into(),
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ImageSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        self.counts
    }

    /// SHA-256 of the canonical CSV rendering.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(move |s| s.label == Some(label))
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Reads every sample's pixels, in parallel.
    pub fn load_pixels(&mut self) -> Result<()> {
        let root = self.root.clone();
        self.samples
            .par_iter_mut()
            .filter(|s| s.pixels.is_none())
            .try_for_each(|s| s.load_pixels(&root))
    }

    /// Replaces per-sample categories; checksum is recomputed.
    pub fn set_categories(&mut self, categories: &[Option<Category>]) -> Result<()> {
        if categories.len() != self.samples.len() {
            return Err(Error::Consistency(format!(
                "{} categories for {} samples",
                categories.len(),
                self.samples.len()
            )));
        }
        for (s, c) in self.samples.iter_mut().zip(categories) {
            s.category = *c;
        }
        self.checksum = hex::encode(Sha256::digest(render(&self.samples)?));
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        render(&self.samples)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Manifest> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let header = match records.next() {
            None => return Err(Error::Manifest("empty manifest".into())),
            Some(h) => h?,
        };
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "header must be `{}`",
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut samples = Vec::new();
        for (i, record) in records.enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| Error::Ingestion {
                row,
                message: e.to_string(),
            })?;
            if record.len() != MANIFEST_HEADER.len() {
                return Err(Error::Ingestion {
                    row,
                    message: format!("expected {} fields, found {}", MANIFEST_HEADER.len(), record.len()),
                });
            }
            let bad = |message: String| Error::Ingestion { row, message };
            let id = &record[0];
            if id.is_empty() {
                return Err(bad("empty id".into()));
            }
            if record[1].is_empty() {
                return Err(bad("empty path".into()));
            }
            let mut sample = ImageSample::new(id, &record[1]);
            if !record[2].is_empty() {
                sample.label = Some(
                    record[2]
                        .parse()
                        .map_err(|_| bad(format!("unknown label `{}`", &record[2])))?,
                );
            }
            sample.origin = record[3].to_string();
            if !record[4].is_empty() {
                sample.category = Some(record[4].parse().map_err(|e: Error| bad(e.to_string()))?);
            }
            samples.push(sample);
        }
        Manifest::with_root(samples, root)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Manifest::parse(&text, root)
}

fn render(samples: &[ImageSample]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for s in samples {
        let path = s.path.to_string_lossy();
        let label = s.label.map(Label::as_str).unwrap_or("");
        let category = s.category.map(|c| c.to_string()).unwrap_or_default();
        w.write_record([s.id.as_str(), &path, label, &s.origin, &category])?;
    }
    w.into_inner().map_err(|e| Error::Manifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EmotionGroup, RaceGroup};

    const TWO: &str = "id,path,label,origin,category\na,img/a.png,real,celebdf,white_happy\nb,img/b.png,fake,ff++,\n";

    #[test]
    fn parses_two_rows() {
        let m = Manifest::parse(TWO, ".").unwrap();
        assert_eq!(
            m.counts(),
            LabelCounts {
                real: 1,
                fake: 1,
                unlabeled: 0
            }
        );
        assert_eq!(
            m.samples()[0].category,
            Some(Category::new(RaceGroup::White, EmotionGroup::Happy))
        );
        assert_eq!(m.samples()[1].origin, "ff++");
        assert_eq!(m.to_csv().unwrap(), TWO.as_bytes());
    }

    #[test]
    fn bad_label_names_row() {
        let text = "id,path,label,origin,category\na,a.png,real,x,\nb,b.png,reall,x,\n";
        match Manifest::parse(text, ".") {
            Err(Error::Ingestion { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("reall"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_is_empty() {
        let err = Manifest::parse("id,path,label,origin,category\n", ".").unwrap_err();
        assert!(err.to_string().contains("empty manifest"));
        assert!(Manifest::parse("", ".")
            .unwrap_err()
            .to_string()
            .contains("empty manifest"));
    }

    #[test]
    fn rejects_bad_header_and_duplicates() {
        assert!(Manifest::parse("id,path,label\na,b,real\n", ".").is_err());
        let dup = "id,path,label,origin,category\na,a.png,real,x,\na,b.png,fake,x,\n";
        assert!(matches!(Manifest::parse(dup, "."), Err(Error::Manifest(_))));
        let short = "id,path,label,origin,category\na,a.png,real\n";
        assert!(matches!(
            Manifest::parse(short, "."),
            Err(Error::Ingestion { row: 1, .. })
        ));
    }

    #[test]
    fn write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = Manifest::parse(TWO, ".").unwrap();
        m.write(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.samples(), m.samples());
        assert_eq!(back.root(), dir.path());
        assert!(matches!(
            load_manifest(&dir.path().join("nope.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn quoting_survives_round_trip() {
        let mut s = ImageSample::new("x,1", "dir with space/a \"b\".png").with_label(Label::Fake);
        s.origin = "multi\nline".into();
        let m = Manifest::new(vec![s]).unwrap();
        let back = Manifest::parse(std::str::from_utf8(&m.to_csv().unwrap()).unwrap(), ".").unwrap();
        assert_eq!(back.samples(), m.samples());
    }
}
