//! Evaluation harness: per-noise robustness, adversarial attack, bit-length
//! sweep and the resolution dependence of PSNR.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::image::{ImageArray, PixelRange, WatermarkPayload};
use crate::metrics::{self, EvalRecord};
use crate::nets::CodecModel;
use crate::noise::{NoiseSpec, Severity, Transform, BASE_TRANSFORMS, OPTIONAL_TRANSFORMS};
use crate::scaling::{decode_scaled, embed_scaled, resize, InterpMode, ScaleParams};
use crate::train::mix;

const STREAM_PAYLOAD: u64 = 21;
const STREAM_NOISE: u64 = 23;

/// All noise sources in sweep order: base geometric transforms first.
pub fn noise_sources() -> Vec<&'static str> {
    BASE_TRANSFORMS
        .iter()
        .chain(OPTIONAL_TRANSFORMS.iter())
        .copied()
        .collect()
}

/// How sweeps embed and decode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub seed: u64,
    /// Run the codec directly; images must be at native resolution.
    pub native: bool,
    pub scale: ScaleParams,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            native: false,
            scale: ScaleParams::default(),
        }
    }
}

fn payload_for(seed: u64, index: usize, bits: usize) -> WatermarkPayload {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, STREAM_PAYLOAD, index as u64));
    WatermarkPayload::random(bits, &mut rng)
}

fn encode(codec: &CodecModel, x: &ImageArray, w: &WatermarkPayload, opts: &SweepOptions) -> Result<ImageArray> {
    if opts.native {
        Ok(codec.embed_fixed(x, w)?.to_range(PixelRange::Byte).quantized())
    } else {
        embed_scaled(codec, x, w, &opts.scale)
    }
}

fn decode(codec: &CodecModel, y: &ImageArray, opts: &SweepOptions) -> Result<WatermarkPayload> {
    if opts.native {
        codec.decode(&y.to_range(PixelRange::UnitSigned))
    } else {
        decode_scaled(codec, y, opts.scale.interp_mode)
    }
}

#[derive(Default)]
struct Mean {
    psnr: f64,
    ssim: f64,
    acc: f64,
    n: f64,
}

impl Mean {
    fn add(&mut self, cover: &ImageArray, y: &ImageArray, acc: f64) -> Result<()> {
        let a = cover.to_range(PixelRange::UnitSigned);
        let b = y.to_range(PixelRange::UnitSigned);
        self.psnr += metrics::report_psnr(metrics::psnr(&a, &b)?);
        self.ssim += metrics::ssim(&a, &b)?;
        self.acc += acc;
        self.n += 1.0;
        Ok(())
    }

    fn record(&self, method: &str, source: &str, severity: &str) -> Result<EvalRecord> {
        EvalRecord::new(
            method,
            source,
            severity,
            self.psnr / self.n,
            self.ssim / self.n,
            self.acc / self.n,
        )
    }
}

/// Encodes every image with its own random payload, then applies each
/// noise source alone at each severity and records mean PSNR/SSIM against
/// the cover and mean bit accuracy. The first row is the clean one; an
/// `off` severity reproduces it exactly.
pub fn robustness_sweep(
    codec: &CodecModel,
    method_id: &str,
    images: &[ImageArray],
    severities: &[Severity],
    opts: &SweepOptions,
) -> Result<Vec<EvalRecord>> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to evaluate".into()));
    }
    let bits = codec.config().bit_length;
    let mut encoded = Vec::with_capacity(images.len());
    let mut clean = Mean::default();
    for (i, x) in images.iter().enumerate() {
        let w = payload_for(opts.seed, i, bits);
        let y = encode(codec, x, &w, opts)?;
        clean.add(x, &y, metrics::bit_accuracy(&w, &decode(codec, &y, opts)?)?)?;
        encoded.push((w, y));
    }
    let mut rows = vec![clean.record(method_id, "clean", "off")?];
    let sources = noise_sources();
    for &sev in severities {
        let spec = NoiseSpec::new(sev);
        for (si, &name) in sources.iter().enumerate() {
            if spec.is_off() {
                rows.push(clean.record(method_id, name, "off")?);
                continue;
            }
            let table = spec.table.as_ref().expect("non-off severity has a table");
            let mut m = Mean::default();
            for (i, (x, (w, y))) in images.iter().zip(&encoded).enumerate() {
                let stream = (si as u64) << 32 | i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.seed ^ sev as u64, STREAM_NOISE, stream));
                let t = Transform::sample(name, table, &spec.base, &mut rng)?;
                let noised = apply_to_image(&t, y)?;
                m.add(x, &noised, metrics::bit_accuracy(w, &decode(codec, &noised, opts)?)?)?;
            }
            rows.push(m.record(method_id, name, &sev.to_string())?);
        }
    }
    Ok(rows)
}

/// Applies a transform to a byte image and re-quantises.
pub fn apply_to_image(t: &Transform, y: &ImageArray) -> Result<ImageArray> {
    let out = t.apply(&y.to_range(PixelRange::UnitSigned).to_tensor());
    Ok(ImageArray::from_tensor(&out, PixelRange::UnitSigned)?
        .to_range(PixelRange::Byte)
        .quantized())
}

/// Sign-gradient attack on the extractor with an L-infinity budget.
/// `epsilon` and `step_size` are in `[0, 1]` pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub max_iters: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::with_epsilon(8.0 / 255.0)
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 10.0,
            max_iters: 5000,
        }
    }

    /// Bit accuracy below which the attack counts as a success.
    pub fn success_threshold(&self) -> f64 {
        0.5 + self.epsilon / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        // A zero budget is allowed as the degenerate no-op attack.
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        if !(self.step_size >= 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::Config(format!(
                "step_size {} must lie in [0, epsilon]",
                self.step_size
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub image: ImageArray,
    /// Iterations run: the successful one, or `max_iters`.
    pub iterations: u64,
    pub success: bool,
    pub final_bit_acc: f64,
    /// Largest absolute perturbation in `[0, 1]` units.
    pub linf: f64,
}

/// I-FGSM: starting from zero, repeatedly steps the perturbation along the
/// sign of the recovery-loss gradient, projects it into the epsilon ball and
/// the valid pixel range, and stops once the decoded accuracy drops below
/// the success threshold. Images off the native size are decoded through
/// the (differentiable) downsampler.
pub fn ifgsm_attack(
    codec: &CodecModel,
    y: &ImageArray,
    w: &WatermarkPayload,
    cfg: &AttackConfig,
    interp: InterpMode,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let bits = codec.config().bit_length;
    if w.len() != bits {
        return Err(Error::PayloadLength {
            expected: bits,
            got: w.len(),
        });
    }
    let n = codec.config().image_size as i64;
    let kind = codec.kind();
    // Pixels in [0, 1] so that epsilon is in its usual units.
    let base = ((y.to_range(PixelRange::UnitSigned).to_tensor() + 1.0) * 0.5).to_kind(kind);
    let target = w.to_tensor().to_kind(kind);
    let (h, wd) = (base.size()[2], base.size()[3]);
    let forward = |img01: &Tensor| -> Tensor {
        let small = if h == n && wd == n {
            img01.shallow_clone()
        } else {
            resize(img01, n as usize, n as usize, interp)
        };
        codec.extract_tensor(&(small * 2.0 - 1.0))
    };
    let accuracy = |p: &Tensor| -> f64 {
        p.ge(0.5)
            .to_kind(Kind::Double)
            .eq_tensor(&target.to_kind(Kind::Double))
            .to_kind(Kind::Double)
            .mean(Kind::Double)
            .double_value(&[])
    };
    codec.set_trainable(false);
    let result = (|| -> Result<AttackOutcome> {
        let mut delta = base.zeros_like();
        let threshold = cfg.success_threshold();
        let mut acc = accuracy(&tch::no_grad(|| forward(&base)));
        let mut it = 0;
        let mut success = false;
        while it < cfg.max_iters {
            it += 1;
            let d = delta.detach().set_requires_grad(true);
            let p = forward(&(&base + &d));
            let loss = p
                .clamp(1e-7, 1.0 - 1e-7)
                .binary_cross_entropy::<Tensor>(&target, None, tch::Reduction::Mean);
            let g = Tensor::f_run_backward(&[loss], &[&d], false, false)?.pop();
            let g = match g {
                Some(g) if g.defined() => g,
                _ => return Err(Error::Config("extractor path is not differentiable".into())),
            };
            delta = tch::no_grad(|| {
                let step = &delta + g.sign() * cfg.step_size;
                let step = step.clamp(-cfg.epsilon, cfg.epsilon);
                (&base + step).clamp(0.0, 1.0) - &base
            });
            acc = accuracy(&tch::no_grad(|| forward(&(&base + &delta))));
            if acc < threshold {
                success = true;
                break;
            }
        }
        let adv = &base + &delta;
        let linf = delta.abs().max().double_value(&[]);
        Ok(AttackOutcome {
            image: ImageArray::from_tensor(&(adv.to_kind(Kind::Float) * 2.0 - 1.0), PixelRange::UnitSigned)?,
            iterations: it,
            success,
            final_bit_acc: acc,
            linf,
        })
    })();
    codec.set_trainable(true);
    result
}

/// Aggregate of [`attack_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub iterations: Vec<u64>,
    pub successes: Vec<bool>,
    pub max_linf: f64,
}

impl AttackSummary {
    /// Fraction of images broken within `iters` iterations.
    pub fn success_rate_within(&self, iters: u64) -> f64 {
        let ok = self
            .iterations
            .iter()
            .zip(&self.successes)
            .filter(|(&n, &s)| s && n <= iters)
            .count();
        ok as f64 / self.iterations.len().max(1) as f64
    }

    /// Median iteration count; failures count as `max_iters`.
    pub fn median_iterations(&self) -> f64 {
        let mut v = self.iterations.clone();
        v.sort_unstable();
        let n = v.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        }
    }
}

/// Encodes each image with a random payload and attacks it.
pub fn attack_sweep(
    codec: &CodecModel,
    images: &[ImageArray],
    cfg: &AttackConfig,
    opts: &SweepOptions,
) -> Result<AttackSummary> {
    let bits = codec.config().bit_length;
    let mut s = AttackSummary {
        iterations: Vec::new(),
        successes: Vec::new(),
        max_linf: 0.0,
    };
    for (i, x) in images.iter().enumerate() {
        let w = payload_for(opts.seed, i, bits);
        let y = encode(codec, x, &w, opts)?;
        let out = ifgsm_attack(codec, &y, &w, cfg, opts.scale.interp_mode)?;
        s.iterations.push(out.iterations);
        s.successes.push(out.success);
        s.max_linf = s.max_linf.max(out.linf);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BitLengthRow {
    pub bit_length: usize,
    pub psnr_db: f64,
    pub clean_bit_acc: f64,
    pub noised_bit_acc: f64,
}

/// Runs `train_fn` once per payload length. `train_fn` returns
/// `(psnr_db, clean_acc, noised_acc)` of the codec it trained.
pub fn bitlength_sweep<F>(mut train_fn: F, lengths: &[usize]) -> Result<Vec<BitLengthRow>>
where
    F: FnMut(usize) -> Result<(f64, f64, f64)>,
{
    lengths
        .iter()
        .map(|&l| {
            let (psnr_db, clean_bit_acc, noised_bit_acc) = train_fn(l)?;
            Ok(BitLengthRow {
                bit_length: l,
                psnr_db,
                clean_bit_acc,
                noised_bit_acc,
            })
        })
        .collect()
}

/// PSNR of two image pairs after resampling to several sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsnrStudy {
    /// `(height, width, psnr_similar, psnr_different)`.
    pub rows: Vec<(usize, usize, f64, f64)>,
    pub spread_similar: f64,
    pub spread_different: f64,
}

fn resample(img: &ImageArray, h: usize, w: usize, mode: InterpMode) -> Result<ImageArray> {
    if img.height() == h && img.width() == w {
        return Ok(img.clone());
    }
    let t = resize(&img.to_range(PixelRange::UnitSigned).to_tensor(), h, w, mode);
    ImageArray::from_tensor(&t, PixelRange::UnitSigned)
}

/// Resamples both pairs to each `factor` of their shared size and reports
/// the PSNR of each pair and the max-min spread across factors.
pub fn psnr_resolution_study(
    pair_similar: (&ImageArray, &ImageArray),
    pair_different: (&ImageArray, &ImageArray),
    factors: &[f64],
    mode: InterpMode,
) -> Result<PsnrStudy> {
    let (h0, w0) = (pair_similar.0.height(), pair_similar.0.width());
    for img in [pair_similar.1, pair_different.0, pair_different.1] {
        if img.height() != h0 || img.width() != w0 {
            return Err(Error::Shape("all study images must share one size".into()));
        }
    }
    if factors.is_empty() || factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::Config("factors must be positive".into()));
    }
    let mut rows = Vec::new();
    for &f in factors {
        let h = ((h0 as f64 * f).round() as usize).max(1);
        let w = ((w0 as f64 * f).round() as usize).max(1);
        let p = |(a, b): (&ImageArray, &ImageArray)| -> Result<f64> {
            let a = resample(a, h, w, mode)?.to_range(PixelRange::Byte).quantized();
            let b = resample(b, h, w, mode)?.to_range(PixelRange::Byte).quantized();
            metrics::psnr(&a, &b)
        };
        rows.push((h, w, p(pair_similar)?, p(pair_different)?));
    }
    let spread = |sel: fn(&(usize, usize, f64, f64)) -> f64| {
        let v: Vec<f64> = rows.iter().map(sel).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let spread_similar = spread(|r| r.2);
    let spread_different = spread(|r| r.3);
    Ok(PsnrStudy {
        rows,
        spread_similar,
        spread_different,
    })
}

/// Mean spectral magnitude of the residual `encoded - cover` (unit-signed
/// scale, orthonormal 2D FFT per channel) over frequencies whose larger
/// normalised axis frequency `max(|fu|, |fv|) / 0.5` is at least
/// `1 - fraction`.
pub fn outer_band_magnitude(cover: &ImageArray, encoded: &ImageArray, fraction: f64) -> Result<f64> {
    cover.check_comparable(encoded)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "band fraction must be in (0, 1], got {fraction}"
        )));
    }
    let to_t = |img: &ImageArray| img.to_range(PixelRange::UnitSigned).to_tensor().to_kind(Kind::Double);
    let r = to_t(encoded) - to_t(cover);
    let mag = r.fft_fft2(None::<&[i64]>, [-2i64, -1].as_slice(), "ortho").abs();
    let freq = |n: usize| Tensor::fft_fftfreq(n as i64, 1.0, (Kind::Double, tch::Device::Cpu)).abs() / 0.5;
    let (h, w) = (cover.height(), cover.width());
    let radius = freq(h).view([h as i64, 1]).maximum(&freq(w).view([1, w as i64]));
    let mask = radius.ge(1.0 - fraction - 1e-12).to_kind(Kind::Double);
    let count = mask.sum(Kind::Double).double_value(&[]) * 3.0;
    if count == 0.0 {
        return Err(Error::Config("image too small for the requested band".into()));
    }
    Ok((mag * mask.view([1, 1, h as i64, w as i64]))
        .sum(Kind::Double)
        .double_value(&[])
        / count)
}

/// Writes `gain * |encoded - cover|` as a PNG.
pub fn save_residual_png(cover: &ImageArray, encoded: &ImageArray, gain: f32, path: impl AsRef<Path>) -> Result<()> {
    let a = cover.to_range(PixelRange::Byte);
    let b = encoded.to_range(PixelRange::Byte);
    a.check_comparable(&b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((y - x).abs() * gain).min(255.0))
        .collect();
    ImageArray::new(a.height(), a.width(), PixelRange::Byte, data)?.save(path)
}
