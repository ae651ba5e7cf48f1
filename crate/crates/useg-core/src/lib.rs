//! Text-conditioned segmentation on the CPU, end to end: a define-by-run
//! autodiff substrate, a four-direction selective-scan U-Net backbone, a
//! transformer text tower with stage-wise fusion, overlap and boundary
//! metrics with paired statistics, a synthetic captioned dataset, and
//! the training harness tying them together.

pub mod backbone;
pub mod data;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod tensor;
pub mod text;
