//! Text-conditioned Mamba U-Net: a five-stage convolutional encoder
//! whose blocks mix channels through four-directional selective scans,
//! and a transposed-convolution decoder with skip connections that can
//! fuse a caption embedding at each of its five stages.
//!
//! All feature maps are channel-first [B, C, h, w]. The encoder halves
//! resolution and doubles width per stage; the decoder mirrors it back
//! to full resolution and ends in a two-channel (background, lesion)
//! softmax head.

mod blocks;
mod net;
pub mod scan;

pub use blocks::{init_stage_params, patch_embed, ss2d, vss_block};
pub use net::{
    decode, encode, init_model_params, segment, EncoderPyramid, Segmentation, LESION_CHANNEL,
    SEG_CLASSES,
};
pub use scan::{selective_scan, ScanParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionError, FusionMode, FUSION_STAGES};
use crate::tensor::TensorError;

/// Spatial flattening orders per scan: row-major forward and backward,
/// column-major forward and backward.
pub const SCAN_DIRECTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("fusion mode `{0}` requires a text embedding")]
    MissingText(FusionMode),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

pub type Result<V, E = BackboneError> = std::result::Result<V, E>;

/// Architecture hyperparameters. `widths[s]` is the channel count of
/// encoder feature E_s; `blocks[s]` is the number of VSS blocks refining
/// E_s for s in 0..4 (E_4 is the plain downsampled bottleneck).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub widths: [usize; 5],
    pub blocks: [usize; 4],
    pub state_dim: usize,
    pub scan_directions: usize,
    pub d_text: usize,
    pub fusion: FusionMode,
}

impl ModelConfig {
    /// Desk-scale default: trains a real segmenter on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            widths: [16, 32, 64, 128, 256],
            blocks: [2, 2, 2, 2],
            state_dim: 8,
            scan_directions: SCAN_DIRECTIONS,
            d_text: 32,
            fusion: FusionMode::StageAdd,
        }
    }

    /// Smallest valid geometry, used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            widths: [4, 8, 16, 32, 64],
            blocks: [1, 1, 1, 1],
            state_dim: 2,
            scan_directions: SCAN_DIRECTIONS,
            d_text: 8,
            fusion: FusionMode::StageAdd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.image_size;
        if h < 32 || !h.is_power_of_two() {
            return Err(BackboneError::InvalidConfig(format!(
                "image_size must be a power of two >= 32, got {h}"
            )));
        }
        if !self.widths.windows(2).all(|w| w[0] < w[1]) {
            return Err(BackboneError::InvalidConfig(format!(
                "widths must be strictly increasing, got {:?}",
                self.widths
            )));
        }
        if self.widths[0] == 0 {
            return Err(BackboneError::InvalidConfig(
                "widths must be positive".into(),
            ));
        }
        if self.blocks.contains(&0) {
            return Err(BackboneError::InvalidConfig(format!(
                "every stage needs at least one block, got {:?}",
                self.blocks
            )));
        }
        if self.state_dim == 0 {
            return Err(BackboneError::InvalidConfig(
                "state_dim must be >= 1".into(),
            ));
        }
        if self.scan_directions != SCAN_DIRECTIONS {
            return Err(BackboneError::InvalidConfig(format!(
                "scan_directions is fixed at {SCAN_DIRECTIONS}, got {}",
                self.scan_directions
            )));
        }
        if self.fusion.requires_text() && self.d_text == 0 {
            return Err(BackboneError::InvalidConfig(format!(
                "fusion mode `{}` needs d_text >= 1",
                self.fusion
            )));
        }
        Ok(())
    }

    /// Channel width of the decoder feature at fusion stage s (1-based),
    /// mirroring the encoder: stages 1..=4 land on widths[3] down to
    /// widths[0]; the final full-resolution stage keeps widths[0].
    pub fn decoder_widths(&self) -> [usize; FUSION_STAGES] {
        [
            self.widths[3],
            self.widths[2],
            self.widths[1],
            self.widths[0],
            self.widths[0],
        ]
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}
