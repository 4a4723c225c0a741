//! Fixtures shared by the benchmarks.

use imprint_core::synth::SyntheticImages;
use imprint_core::{CodecConfig, CodecModel, ImageArray, PixelRange, WatermarkPayload};

/// Untrained toy codec; timing does not depend on the weights.
pub fn toy_codec() -> CodecModel {
    CodecModel::new(CodecConfig::toy(), 1).expect("toy config is valid")
}

pub fn cover(height: usize, width: usize) -> ImageArray {
    SyntheticImages::new(64, 3).render(0, height, width)
}

pub fn native_cover() -> ImageArray {
    cover(64, 64).to_range(PixelRange::UnitSigned)
}

pub fn payload(bits: usize) -> WatermarkPayload {
    WatermarkPayload::from_bits((0..bits).map(|i| (i % 3 == 0) as u8).collect()).expect("non-empty")
}
