//! Image and payload containers shared by every stage of the pipeline.
//!
//! Pixels are stored interleaved (`H x W x 3`, row-major) as `f32`. Two value
//! conventions exist: [`PixelRange::UnitSigned`] (`[-1, 1]`, what the networks
//! consume) and [`PixelRange::Byte`] (`[0, 255]`, what files and metrics use).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelRange {
    UnitSigned,
    Byte,
}

impl PixelRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            PixelRange::UnitSigned => (-1.0, 1.0),
            PixelRange::Byte => (0.0, 255.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    range: PixelRange,
    data: Vec<f32>,
}

impl ImageArray {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, range: PixelRange, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(&v) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::OutOfRange { range, value: v });
        }
        Ok(Self {
            height,
            width,
            range,
            data,
        })
    }

    /// Builds an image by clamping every value into the declared range.
    pub fn from_clamped(height: usize, width: usize, range: PixelRange, mut data: Vec<f32>) -> Result<Self> {
        let (lo, hi) = range.bounds();
        for v in &mut data {
            *v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
        }
        Self::new(height, width, range, data)
    }

    pub fn filled(height: usize, width: usize, range: PixelRange, value: f32) -> Result<Self> {
        Self::new(height, width, range, vec![value; height * width * Self::CHANNELS])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        range: PixelRange,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, range, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> PixelRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn same_shape(&self, other: &ImageArray) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_comparable(&self, other: &ImageArray) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        if self.range != other.range {
            return Err(Error::RangeMismatch {
                left: self.range,
                right: other.range,
            });
        }
        Ok(())
    }

    /// Converts between value conventions. Byte values are not rounded here;
    /// use [`ImageArray::quantized`] for that.
    pub fn to_range(&self, range: PixelRange) -> ImageArray {
        if range == self.range {
            return self.clone();
        }
        let f: fn(f32) -> f32 = match range {
            PixelRange::UnitSigned => |v| (v / 127.5 - 1.0).clamp(-1.0, 1.0),
            PixelRange::Byte => |v| ((v + 1.0) * 127.5).clamp(0.0, 255.0),
        };
        ImageArray {
            height: self.height,
            width: self.width,
            range,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Byte-range copy with every value rounded half away from zero.
    pub fn quantized(&self) -> ImageArray {
        let mut out = self.to_range(PixelRange::Byte);
        for v in &mut out.data {
            *v = v.round().clamp(0.0, 255.0);
        }
        out
    }

    /// `1 x 3 x H x W` float tensor, values unchanged.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data)
            .view([self.height as i64, self.width as i64, 3])
            .permute([2, 0, 1])
            .unsqueeze(0)
            .contiguous()
    }

    /// Reads a `3 x H x W` or `1 x 3 x H x W` tensor, clamping into `range`.
    pub fn from_tensor(t: &Tensor, range: PixelRange) -> Result<Self> {
        let t = match t.dim() {
            4 if t.size()[0] == 1 => t.squeeze_dim(0),
            3 => t.shallow_clone(),
            _ => return Err(Error::Shape(format!("cannot read image from tensor {:?}", t.size()))),
        };
        let size = t.size();
        if size[0] != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", size[0])));
        }
        let (h, w) = (size[1] as usize, size[2] as usize);
        let hwc = t
            .to_device(Device::Cpu)
            .to_kind(Kind::Float)
            .permute([1, 2, 0])
            .contiguous()
            .view([-1]);
        let data: Vec<f32> = Vec::<f32>::try_from(&hwc)?;
        Self::from_clamped(h, w, range, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(f32::from).collect();
        Self::new(h as usize, w as usize, PixelRange::Byte, data)
    }

    /// Writes a PNG (or JPEG, chosen by extension) after byte quantisation.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let q = self.quantized();
        let raw: Vec<u8> = q.data.iter().map(|&v| v as u8).collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Shape("buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }

    /// Saves as JPEG at the given quality (1..=100).
    pub fn save_jpeg(&self, path: impl AsRef<Path>, quality: u8) -> Result<()> {
        let q = self.quantized();
        let raw: Vec<u8> = q.data.iter().map(|&v| v as u8).collect();
        let file = std::fs::File::create(path)?;
        let mut enc = ::image::codecs::jpeg::JpegEncoder::new_with_quality(file, quality.clamp(1, 100));
        enc.encode(
            &raw,
            self.width as u32,
            self.height as u32,
            ::image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }
}

/// Stacks same-sized images into an `N x 3 x H x W` tensor.
pub fn stack_images(images: &[&ImageArray]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    if let Some(bad) = images.iter().find(|im| !im.same_shape(first)) {
        return Err(Error::Shape(format!(
            "batch mixes {}x{} and {}x{}",
            first.height, first.width, bad.height, bad.width
        )));
    }
    let ts: Vec<Tensor> = images.iter().map(|im| im.to_tensor()).collect();
    Ok(Tensor::cat(&ts, 0))
}

/// Binary secret of `l` bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WatermarkPayload {
    bits: Vec<u8>,
}

impl WatermarkPayload {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Payload("empty payload".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Payload("bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        Self {
            bits: (0..len).map(|_| rng.gen_range(0..=1u8)).collect(),
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { bits: vec![1; len] }
    }

    /// Parses a `0`/`1` string.
    pub fn from_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Payload(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_bits(bits)
    }

    /// Parses hex into exactly `len` bits. Extra leading bits produced by the
    /// last nibble's padding must be zero.
    pub fn from_hex(s: &str, len: usize) -> Result<Self> {
        let s = s.trim().trim_start_matches("0x");
        let mut bits = Vec::with_capacity(s.len() * 4);
        for c in s.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| Error::Payload(format!("invalid hex digit {c:?}")))?;
            for shift in (0..4).rev() {
                bits.push(((v >> shift) & 1) as u8);
            }
        }
        if bits.len() < len || bits.len() - len >= 4 {
            return Err(Error::PayloadLength {
                expected: len,
                got: bits.len(),
            });
        }
        let pad = bits.len() - len;
        if bits[..pad].iter().any(|&b| b != 0) {
            return Err(Error::Payload("hex value does not fit in payload length".into()));
        }
        Self::from_bits(bits[pad..].to_vec())
    }

    /// Accepts a bit string when every character is 0/1 and the length
    /// matches, hex otherwise.
    pub fn parse(s: &str, len: usize) -> Result<Self> {
        let t = s.trim();
        if t.len() == len && t.chars().all(|c| c == '0' || c == '1') {
            return Self::from_bit_string(t);
        }
        Self::from_hex(t, len)
    }

    pub fn from_probabilities(probs: &[f32]) -> Self {
        Self {
            bits: probs.iter().map(|&p| u8::from(p >= 0.5)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    /// `1 x l` float tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let v: Vec<f32> = self.bits.iter().map(|&b| f32::from(b)).collect();
        Tensor::from_slice(&v).unsqueeze(0)
    }
}

pub fn stack_payloads(payloads: &[&WatermarkPayload]) -> Result<Tensor> {
    let first = payloads.first().ok_or_else(|| Error::Payload("empty batch".into()))?;
    if let Some(bad) = payloads.iter().find(|p| p.len() != first.len()) {
        return Err(Error::PayloadLength {
            expected: first.len(),
            got: bad.len(),
        });
    }
    let ts: Vec<Tensor> = payloads.iter().map(|p| p.to_tensor()).collect();
    Ok(Tensor::cat(&ts, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range_and_bad_shape() {
        assert!(ImageArray::new(1, 1, PixelRange::UnitSigned, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageArray::new(2, 1, PixelRange::Byte, vec![0.0; 3]).is_err());
        assert!(ImageArray::new(0, 1, PixelRange::Byte, vec![]).is_err());
    }

    #[test]
    fn tensor_round_trip_keeps_layout() {
        let img = ImageArray::from_fn(2, 3, PixelRange::Byte, |y, x, c| (y * 100 + x * 10 + c) as f32).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.size(), vec![1, 3, 2, 3]);
        assert_eq!(t.double_value(&[0, 2, 1, 2]), 122.0);
        let back = ImageArray::from_tensor(&t, PixelRange::Byte).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn payload_parsing() {
        let p = WatermarkPayload::parse("0101", 4).unwrap();
        assert_eq!(p.bits(), &[0, 1, 0, 1]);
        let h = WatermarkPayload::parse("a5", 8).unwrap();
        assert_eq!(h.to_bit_string(), "10100101");
        let short = WatermarkPayload::from_hex("5", 3).unwrap();
        assert_eq!(short.to_bit_string(), "101");
        assert!(WatermarkPayload::from_hex("f", 3).is_err());
        assert!(WatermarkPayload::parse("a5", 16).is_err());
        assert!(WatermarkPayload::from_bit_string("012").is_err());
    }

    proptest! {
        #[test]
        fn byte_unit_byte_round_trip(vals in proptest::collection::vec(0u8..=255, 12)) {
            let data: Vec<f32> = vals.iter().map(|&v| f32::from(v)).collect();
            let img = ImageArray::new(2, 2, PixelRange::Byte, data.clone()).unwrap();
            let back = img.to_range(PixelRange::UnitSigned).to_range(PixelRange::Byte).quantized();
            for (a, b) in back.data().iter().zip(&data) {
                prop_assert!((a - b).abs() <= 0.5);
            }
        }
    }
}
