//! Artifact writing (atomic, with a meta sidecar) and the score-file format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfanet_core::ensemble::{PathTaken, Prediction};
use sfanet_core::heads::checkpoint::write_atomic;
use sfanet_core::{Error, Label, Result};

pub const SCORE_HEADER: [&str; 7] = [
    "id",
    "path_taken",
    "score_swinatten",
    "score_swinfusion",
    "score_sfnet",
    "score_fused",
    "verdict",
];

/// Provenance written next to every artifact as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl ArtifactMeta {
    pub fn new(command: &str, config_hash: &str, details: serde_json::Value) -> ArtifactMeta {
        ArtifactMeta {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            details,
        }
    }
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn read_meta(artifact: &Path) -> Result<Option<ArtifactMeta>> {
    let path = meta_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Writes `bytes` and its sidecar, each via temp file + rename.
pub fn write_artifact(path: &Path, bytes: &[u8], meta: &ArtifactMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    write_atomic(path, bytes)?;
    write_atomic(&meta_path(path), &serde_json::to_vec_pretty(meta)?)
}

/// One score-file row; absent per-model scores are empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub path_taken: PathTaken,
    pub score_swinatten: Option<f64>,
    pub score_swinfusion: Option<f64>,
    pub score_sfnet: Option<f64>,
    pub score_fused: f64,
    pub verdict: Label,
}

impl From<&Prediction> for ScoreRow {
    fn from(p: &Prediction) -> ScoreRow {
        ScoreRow {
            id: p.id.clone(),
            path_taken: p.path_taken,
            score_swinatten: p.score_swinatten,
            score_swinfusion: p.score_swinfusion,
            score_sfnet: p.score_sfnet,
            score_fused: p.score_fused.value(),
            verdict: p.verdict,
        }
    }
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(SCORE_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Consistency(e.to_string()))
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    if reader.headers()?.iter().collect::<Vec<_>>() != SCORE_HEADER {
        return Err(Error::Ingestion {
            row: 0,
            message: format!("score file header must be `{}`", SCORE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = rec.map_err(|e| Error::Ingestion {
            row: i + 1,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&row.score_fused) {
            return Err(Error::Ingestion {
                row: i + 1,
                message: format!("score_fused {} outside [0, 1]", row.score_fused),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            message: "empty score file".into(),
        });
    }
    Ok(rows)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scores(&text)
}
