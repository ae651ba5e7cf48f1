//! Deterministic synthetic dataset of captioned lesion scenes.
//!
//! Every image holds one caption-identified target blob plus up to two
//! distractor blobs that differ from the target in at least one named
//! attribute, so the caption is always sufficient to pick the target and
//! image-only models face genuine ambiguity. Samples group into patients
//! that share a background texture seed, which makes patient-level
//! splitting meaningful. The on-disk layout is designed so a real
//! caption-plus-mask export drops in unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::BinaryMask;

pub mod generate;
pub mod grammar;
pub mod io;
pub mod splits;

pub use generate::{
    generate_dataset, generate_sample, generate_scene, GenerationConfig, LesionSpec, RenderedBlob,
    Scene,
};
pub use grammar::{Attenuation, AttributeTuple, CaptionGrammar, LesionKind, Location, SizeClass};
pub use io::{load_dataset, write_dataset, DatasetManifest, SplitCounts};
pub use splits::{fnv1a64, make_splits, SplitAssignment};

/// Number of consecutive samples sharing one background texture seed.
pub const SAMPLES_PER_PATIENT: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("could not place non-overlapping blobs for seed {seed} after bounded re-seeding")]
    PlacementFailure { seed: u64 },
    #[error("need at least {needed} patients, got {got}")]
    TooFewPatients { needed: usize, got: usize },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("generated scene violated an invariant: {0}")]
    GenerationInvariant(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("checksum mismatch for {file}")]
    ChecksumMismatch { file: String },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One captioned scene. The image is stored at its on-disk 8-bit
/// quantization so write/load round-trips are bit-exact; `image_f32`
/// rescales to [0, 1] for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub patient_id: String,
    /// Gray levels, row-major, one byte per pixel.
    pub image: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// Target blob only; distractors are never part of the label.
    pub mask: BinaryMask,
    pub caption: String,
    pub split: Split,
    pub fold: u8,
}

impl Sample {
    pub fn image_f32(&self) -> Vec<f32> {
        self.image.iter().map(|&g| g as f32 / 255.0).collect()
    }

    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask
            .bits()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}
