//! Learned invisible image watermarking: an embedder/extractor pair trained
//! through a differentiable noise model, resolution-independent inference,
//! a watermark remover and an evaluation harness.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod noise;
pub mod optim;
pub mod removal;
pub mod scaling;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use eval::AttackConfig;
pub use image::{ImageArray, PixelRange, WatermarkPayload};
pub use losses::{GpMode, LossWeights};
pub use metrics::EvalRecord;
pub use nets::{CodecConfig, CodecModel, ExtractorFamily};
pub use noise::{NoiseSpec, Severity};
pub use removal::{RemovalConfig, RemovalModel};
pub use scaling::{InterpMode, ScaleParams};
pub use train::{TrainConfig, Trainer};
