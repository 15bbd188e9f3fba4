//! Spatial-frequency deepfake detection.
//!
//! Scores follow one convention throughout: higher means more likely real.

pub mod datapipe;
pub mod ensemble;
pub mod error;
pub mod freqfeat;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod trainsched;
pub mod types;

pub use error::{Error, Result};
pub use types::{decide, Category, DecisionPolicy, EmotionGroup, ImageSample, Label, RaceGroup, Score};
