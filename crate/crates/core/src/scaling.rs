//! Arbitrary-resolution embedding and removal through residual interpolation.
//!
//! A fixed-resolution operator runs on a downsampled copy of the image; only
//! its residual `op(x_small) - x_small` is interpolated back to full size and
//! added, scaled by `lambda`, to the untouched full-resolution cover.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::image::{ImageArray, PixelRange, WatermarkPayload};
use crate::metrics;
use crate::nets::CodecModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    #[default]
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for InterpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            other => Err(Error::Config(format!("unknown interpolation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub lambda_strength: f64,
    pub interp_mode: InterpMode,
    /// Drops the residual entirely (the `lambda -> 0` limit).
    #[serde(default)]
    pub identity_check: bool,
}

impl Default for ScaleParams {
    fn default() -> Self {
        Self {
            lambda_strength: 1.0,
            interp_mode: InterpMode::Bilinear,
            identity_check: false,
        }
    }
}

impl ScaleParams {
    pub const RECOMMENDED_LAMBDA: (f64, f64) = (0.75, 1.5);

    pub fn with_lambda(lambda_strength: f64) -> Self {
        Self {
            lambda_strength,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_strength > 0.0 && self.lambda_strength.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda_strength
            )));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.identity_check {
            0.0
        } else {
            self.lambda_strength
        }
    }
}

/// An image-to-image operator that only works at one square resolution.
/// Inputs and outputs are `1 x 3 x n x n` tensors in `[-1, 1]`.
pub trait FixedResolutionOp {
    fn native_size(&self) -> usize;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

/// Embedding of a fixed payload with a trained codec.
pub struct EmbedOp<'a> {
    pub model: &'a CodecModel,
    pub payload: &'a WatermarkPayload,
}

impl FixedResolutionOp for EmbedOp<'_> {
    fn native_size(&self) -> usize {
        self.model.config().image_size
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.payload.len() != self.model.config().bit_length {
            return Err(Error::PayloadLength {
                expected: self.model.config().bit_length,
                got: self.payload.len(),
            });
        }
        let kind = self.model.kind();
        let w = self.payload.to_tensor().to_kind(kind);
        Ok(tch::no_grad(|| self.model.embed_tensor(&x.to_kind(kind), &w)).to_kind(Kind::Float))
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> FixedResolutionOp for (usize, F) {
    fn native_size(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        (self.1)(x)
    }
}

/// Resamples `N x C x H x W` to `h x w`: antialiased when shrinking.
pub fn resize(t: &Tensor, h: usize, w: usize, mode: InterpMode) -> Tensor {
    let s = t.size();
    let (h, w) = (h as i64, w as i64);
    if s[2] == h && s[3] == w {
        return t.shallow_clone();
    }
    let shrinking = h < s[2] || w < s[3];
    match (mode, shrinking) {
        (InterpMode::Bilinear, true) => t.internal_upsample_bilinear2d_aa([h, w], false, None, None),
        (InterpMode::Bilinear, false) => t.upsample_bilinear2d([h, w], false, None, None),
        (InterpMode::Bicubic, true) => t.internal_upsample_bicubic2d_aa([h, w], false, None, None),
        (InterpMode::Bicubic, false) => t.upsample_bicubic2d([h, w], false, None, None),
    }
}

/// Resamples an image, keeping its pixel range.
pub fn resize_image(img: &ImageArray, h: usize, w: usize, mode: InterpMode) -> Result<ImageArray> {
    let range = img.range();
    let t = resize(&img.to_range(PixelRange::UnitSigned).to_tensor(), h, w, mode);
    let out = ImageArray::from_tensor(&t, PixelRange::UnitSigned)?.to_range(range);
    Ok(if range == PixelRange::Byte {
        out.quantized()
    } else {
        out
    })
}

fn check_native(op: &dyn FixedResolutionOp, x: &Tensor) -> Result<()> {
    let n = op.native_size() as i64;
    let s = x.size();
    if s[2] != n || s[3] != n {
        return Err(Error::Resolution {
            expected: n as usize,
            got_h: s[2] as usize,
            got_w: s[3] as usize,
        });
    }
    Ok(())
}

/// `op(x) - x` at native resolution, values in `[-2, 2]`.
pub fn residual_tensor(op: &dyn FixedResolutionOp, x: &Tensor) -> Result<Tensor> {
    check_native(op, x)?;
    let out = op.apply(x)?;
    if out.size() != x.size() {
        return Err(Error::Shape(format!(
            "operator returned {:?} for input {:?}",
            out.size(),
            x.size()
        )));
    }
    Ok(out.to_kind(Kind::Float) - x.to_kind(Kind::Float))
}

/// Residual of `op` on a native-resolution `[-1, 1]` image. The result is
/// returned as raw values (not an [`ImageArray`], whose range is `[-1, 1]`).
pub fn residual(op: &dyn FixedResolutionOp, x: &ImageArray) -> Result<Vec<f32>> {
    let t = x.to_range(PixelRange::UnitSigned).to_tensor();
    let r = residual_tensor(op, &t)?;
    Ok(Vec::<f32>::try_from(&r.permute([0, 2, 3, 1]).contiguous().view([-1]))?)
}

/// Applies `op` to an image of any size: downsample, take the residual,
/// upsample it, add `lambda` times it to the full-resolution cover, clamp
/// and quantise to bytes (round half away from zero).
pub fn scale_apply(op: &dyn FixedResolutionOp, x: &ImageArray, params: &ScaleParams) -> Result<ImageArray> {
    if !params.identity_check {
        params.validate()?;
    }
    let n = op.native_size();
    let (h, w) = (x.height(), x.width());
    let xs = x
        .to_range(PixelRange::Byte)
        .quantized()
        .to_range(PixelRange::UnitSigned)
        .to_tensor();
    let lambda = params.effective_lambda();
    let y = if lambda == 0.0 {
        xs.shallow_clone()
    } else if h == n && w == n {
        // Same formula with identity interpolations, arranged so that
        // lambda = 1 returns the operator output bit-exactly.
        let out = op.apply(&xs)?;
        if out.size() != xs.size() {
            return Err(Error::Shape(format!(
                "operator returned {:?} for input {:?}",
                out.size(),
                xs.size()
            )));
        }
        out.to_kind(Kind::Float) * lambda + &xs * (1.0 - lambda)
    } else {
        let small = resize(&xs, n, n, params.interp_mode).clamp(-1.0, 1.0);
        let r = residual_tensor(op, &small)?;
        &xs + resize(&r, h, w, params.interp_mode) * lambda
    };
    to_bytes(&y.clamp(-1.0, 1.0))
}

fn to_bytes(y: &Tensor) -> Result<ImageArray> {
    Ok(ImageArray::from_tensor(y, PixelRange::UnitSigned)?
        .to_range(PixelRange::Byte)
        .quantized())
}

/// Per-bit probabilities from an image of any size (downsampled to native).
pub fn extract_scaled(model: &CodecModel, y: &ImageArray, mode: InterpMode) -> Result<Vec<f32>> {
    let n = model.config().image_size;
    let t = y.to_range(PixelRange::UnitSigned).to_tensor();
    let small = resize(&t, n, n, mode).clamp(-1.0, 1.0);
    let p = tch::no_grad(|| model.extract_tensor(&small.to_kind(model.kind())));
    Ok(Vec::<f32>::try_from(&p.to_kind(Kind::Float).view([-1]))?)
}

pub fn decode_scaled(model: &CodecModel, y: &ImageArray, mode: InterpMode) -> Result<WatermarkPayload> {
    Ok(WatermarkPayload::from_probabilities(&extract_scaled(model, y, mode)?))
}

/// Embeds `w` into an image of any size.
pub fn embed_scaled(
    model: &CodecModel,
    x: &ImageArray,
    w: &WatermarkPayload,
    params: &ScaleParams,
) -> Result<ImageArray> {
    scale_apply(&EmbedOp { model, payload: w }, x, params)
}

/// One row of [`compare_interpolation_baselines`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineRow {
    pub height: usize,
    pub width: usize,
    pub residual_psnr: f64,
    pub bilinear_psnr: f64,
    pub bicubic_psnr: f64,
    pub residual_acc: f64,
    pub bilinear_acc: f64,
    pub bicubic_acc: f64,
}

/// Residual scaling versus interpolating the whole encoded output, per image
/// (averaged), for covers of any resolution.
pub fn compare_interpolation_baselines(
    model: &CodecModel,
    images: &[ImageArray],
    payloads: &[WatermarkPayload],
) -> Result<Vec<BaselineRow>> {
    if images.len() != payloads.len() {
        return Err(Error::Config("one payload per image is required".into()));
    }
    let n = model.config().image_size;
    let mut rows = Vec::with_capacity(images.len());
    for (x, w) in images.iter().zip(payloads) {
        let x = x.to_range(PixelRange::Byte).quantized();
        let (h, wd) = (x.height(), x.width());
        let ours = embed_scaled(model, &x, w, &ScaleParams::default())?;
        let xt = x.to_range(PixelRange::UnitSigned).to_tensor();
        let whole = |mode: InterpMode| -> Result<ImageArray> {
            let small = resize(&xt, n, n, InterpMode::Bilinear).clamp(-1.0, 1.0);
            let out = EmbedOp { model, payload: w }.apply(&small)?;
            to_bytes(&resize(&out, h, wd, mode).clamp(-1.0, 1.0))
        };
        let bl = whole(InterpMode::Bilinear)?;
        let bc = whole(InterpMode::Bicubic)?;
        let acc = |y: &ImageArray| -> Result<f64> {
            metrics::bit_accuracy(w, &decode_scaled(model, y, InterpMode::Bilinear)?)
        };
        rows.push(BaselineRow {
            height: h,
            width: wd,
            residual_psnr: metrics::report_psnr(metrics::psnr(&x, &ours)?),
            bilinear_psnr: metrics::report_psnr(metrics::psnr(&x, &bl)?),
            bicubic_psnr: metrics::report_psnr(metrics::psnr(&x, &bc)?),
            residual_acc: acc(&ours)?,
            bilinear_acc: acc(&bl)?,
            bicubic_acc: acc(&bc)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::CodecConfig;
    use crate::synth::SyntheticImages;
    use proptest::prelude::*;

    fn shift_op(n: usize, c: f64) -> (usize, impl Fn(&Tensor) -> Result<Tensor>) {
        (n, move |x: &Tensor| Ok((x + c).clamp(-1.0, 1.0)))
    }

    fn cover(h: usize, w: usize) -> ImageArray {
        SyntheticImages::new(64, 21).render(1, h, w)
    }

    #[test]
    fn identity_check_returns_input_exactly() {
        let x = cover(90, 130);
        let op = shift_op(32, 0.3);
        let p = ScaleParams {
            identity_check: true,
            ..ScaleParams::default()
        };
        assert_eq!(scale_apply(&op, &x, &p).unwrap(), x.quantized());
    }

    #[test]
    fn native_resolution_lambda_one_equals_operator() {
        let x = cover(32, 32).quantized();
        let model = CodecModel::new(
            CodecConfig {
                image_size: 32,
                bit_length: 8,
                internal_dim: 8,
                extractor_width: 8,
                critic_width: 4,
                ..CodecConfig::toy()
            },
            1,
        )
        .unwrap();
        let w = WatermarkPayload::from_bit_string("10110010").unwrap();
        let direct = model.embed_fixed(&x.to_range(PixelRange::UnitSigned), &w).unwrap();
        let scaled = embed_scaled(&model, &x, &w, &ScaleParams::default()).unwrap();
        assert_eq!(scaled, direct.to_range(PixelRange::Byte).quantized());
    }

    #[test]
    fn residual_of_identity_and_constant_ops() {
        let x = cover(16, 16).to_range(PixelRange::UnitSigned);
        let id = (16usize, |t: &Tensor| Ok(t.shallow_clone()));
        assert!(residual(&id, &x).unwrap().iter().all(|&v| v == 0.0));
        let c = 0.25f32;
        let plus = (16usize, move |t: &Tensor| Ok(t + f64::from(c)));
        assert!(residual(&plus, &x).unwrap().iter().all(|&v| (v - c).abs() < 1e-6));
        assert!(matches!(
            residual(&id, &cover(8, 8).to_range(PixelRange::UnitSigned)),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn wrong_operator_shape_is_error() {
        let bad = (16usize, |t: &Tensor| Ok(t.narrow(2, 0, 8)));
        assert!(matches!(
            scale_apply(&bad, &cover(40, 40), &ScaleParams::default()),
            Err(Error::Shape(_))
        ));
        assert!(scale_apply(&bad, &cover(40, 40), &ScaleParams::with_lambda(0.0)).is_err());
    }

    #[test]
    fn constant_residual_is_added_everywhere() {
        // A constant residual interpolates to the same constant at any size.
        let x = ImageArray::filled(50, 70, PixelRange::Byte, 100.0).unwrap();
        let out = scale_apply(&shift_op(16, 0.2), &x, &ScaleParams::default()).unwrap();
        let expected = ((100.0f64 / 127.5 - 1.0 + 0.2 + 1.0) * 127.5).round() as f32;
        assert!(out.data().iter().all(|&v| v == expected), "{}", out.data()[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shape_and_range_preserved(h in 1usize..80, w in 1usize..80, c in -0.5f64..0.5, lambda in 0.1f64..2.0) {
            let x = cover(h, w);
            let out = scale_apply(&shift_op(16, c), &x, &ScaleParams::with_lambda(lambda)).unwrap();
            prop_assert_eq!((out.height(), out.width(), out.range()), (h, w, PixelRange::Byte));
            prop_assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
        }

        #[test]
        fn larger_lambda_moves_further(h in 20usize..60, w in 20usize..60, seed in 0u64..50) {
            // Small residual so nothing saturates at the clamp.
            let x = SyntheticImages::new(64, seed).render(0, h, w).to_range(PixelRange::Byte);
            let x = ImageArray::from_fn(h, w, PixelRange::Byte, |y, xx, ch| 40.0 + 0.6 * x.get(y, xx, ch)).unwrap();
            let op = (16usize, |t: &Tensor| Ok(t + t.flip([3]) * 0.05));
            let dist = |l: f64| metrics::mse(&x.quantized(), &scale_apply(&op, &x, &ScaleParams::with_lambda(l)).unwrap()).unwrap();
            let (a, b, c) = (dist(0.5), dist(1.0), dist(1.5));
            prop_assert!(a <= b && b <= c, "{} {} {}", a, b, c);
        }
    }

    #[test]
    fn byte_round_trip_within_half_unit() {
        let x = cover(33, 47).to_range(PixelRange::Byte);
        let back = to_bytes(&x.to_range(PixelRange::UnitSigned).to_tensor()).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 + 1e-4);
        }
    }

    #[test]
    fn resize_shrinks_with_antialiasing() {
        // A 1-pixel checkerboard averages to grey when shrunk by 4.
        let img = ImageArray::from_fn(64, 64, PixelRange::UnitSigned, |y, x, _| {
            if (x + y) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .unwrap();
        let small = resize_image(&img, 16, 16, InterpMode::Bilinear).unwrap();
        // Interior pixels only: the filter is renormalised where it is truncated.
        for y in 1..15 {
            for x in 1..15 {
                assert!(small.get(y, x, 0).abs() < 1e-5, "{}", small.get(y, x, 0));
            }
        }
    }
}
