//! Ingestion, attribute segmentation, fake-set clustering and crop extraction.

pub mod categorize;
pub mod cluster;
pub mod crops;
pub mod embed;
pub mod manifest;

pub use categorize::{
    categorize, categorize_manifest, map_attributes, AttributePredictor, Categorized, CategoryReport, EmotionGrouping,
    FileAttributePredictor, RawAttributes, StubAttributePredictor,
};
pub use cluster::{build_folds, cluster_fakes, ClusterAssignment, Fold};
pub use crops::{crop_boxes, extract_crops, save_png, CropBox, CropKind, CropResult};
pub use embed::{embed_all, DownsampleEmbedder, Embedder, FileEmbedder};
pub use manifest::{load_manifest, LabelCounts, Manifest};
