//! Training objectives.
//!
//! `total = alpha * quality + recovery` where
//! `quality = b_yuv * yuv + b_lpips * perceptual + b_ffl * ffl + b_gan * gan`.
//! Every function takes `B x 3 x H x W` tensors in `[-1, 1]`; the `*_images`
//! wrappers accept [`ImageArray`]s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::image::{ImageArray, PixelRange, WatermarkPayload};
use crate::nets::Discriminator;

/// Probability clamp used by the recovery loss.
pub const BCE_EPS: f64 = 1e-7;

/// Smallest side accepted by the perceptual feature net.
pub const PERCEPTUAL_MIN_SIZE: usize = 8;

/// Rows of the RGB -> YUV (BT.601) matrix.
pub const RGB_TO_YUV: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51499, -0.10001],
];

/// Where the gradient penalty is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GpMode {
    /// At the encoded images themselves.
    #[default]
    Encoded,
    /// At random interpolates between cover and encoded images.
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub alpha_max: f64,
    pub beta_yuv: f64,
    pub beta_lpips: f64,
    pub beta_ffl: f64,
    pub beta_gan: f64,
    pub gp_lambda: f64,
    #[serde(default)]
    pub gp_mode: GpMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            alpha_max: 20.0,
            beta_yuv: 1.5,
            beta_lpips: 1.0,
            beta_ffl: 1.5,
            beta_gan: 1.0,
            gp_lambda: 10.0,
            gp_mode: GpMode::Encoded,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("alpha_max", self.alpha_max),
            ("beta_yuv", self.beta_yuv),
            ("beta_lpips", self.beta_lpips),
            ("beta_ffl", self.beta_ffl),
            ("beta_gan", self.beta_gan),
            ("gp_lambda", self.gp_lambda),
        ];
        if let Some((name, v)) = all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weight {name} must be finite and >= 0, got {v}"
            )));
        }
        if self.alpha > self.alpha_max {
            return Err(Error::Config(format!(
                "alpha {} exceeds alpha_max {}",
                self.alpha, self.alpha_max
            )));
        }
        Ok(())
    }
}

/// Scalar value of every term, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub yuv: f64,
    pub lpips: f64,
    pub ffl: f64,
    pub gan: f64,
    pub recovery: f64,
    pub quality: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.yuv,
            self.lpips,
            self.ffl,
            self.gan,
            self.recovery,
            self.quality,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "yuv={:.6e} lpips={:.6e} ffl={:.6e} gan={:.6e} recovery={:.6e} quality={:.6e} total={:.6e}",
            self.yuv, self.lpips, self.ffl, self.gan, self.recovery, self.quality, self.total
        )
    }
}

/// Anything that maps a `B x 3 x H x W` batch to `B` scores.
pub trait Critic {
    fn score(&self, images: &Tensor) -> Tensor;
}

impl Critic for Discriminator {
    fn score(&self, images: &Tensor) -> Tensor {
        self.forward(images)
    }
}

impl<F: Fn(&Tensor) -> Tensor> Critic for F {
    fn score(&self, images: &Tensor) -> Tensor {
        self(images)
    }
}

fn check_same(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.size() != y.size() || x.dim() != 4 || x.size()[1] != 3 {
        return Err(Error::Shape(format!(
            "expected matching B x 3 x H x W, got {:?} and {:?}",
            x.size(),
            y.size()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `w_hat` against bits `w`
/// (both `B x l`), with probabilities clamped to `[eps, 1 - eps]`.
pub fn loss_recovery(w: &Tensor, w_hat: &Tensor) -> Result<Tensor> {
    if w.size() != w_hat.size() {
        return Err(Error::PayloadLength {
            expected: w.numel(),
            got: w_hat.numel(),
        });
    }
    let p = w_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let w = w.to_kind(p.kind());
    let ll = &w * p.log() + (-&w + 1.0) * (-&p + 1.0).log();
    Ok(-ll.mean(p.kind()))
}

/// Recovery loss of one payload against per-bit probabilities.
pub fn loss_recovery_bits(w: &WatermarkPayload, w_hat: &[f64]) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::PayloadLength {
            expected: w.len(),
            got: w_hat.len(),
        });
    }
    let p = Tensor::from_slice(w_hat).view([1, -1]);
    Ok(loss_recovery(&w.to_tensor().to_kind(Kind::Double), &p)?.double_value(&[]))
}

fn rgb_to_yuv(x: &Tensor) -> Tensor {
    let flat: Vec<f64> = RGB_TO_YUV.iter().flatten().copied().collect();
    let m = Tensor::from_slice(&flat).to_kind(x.kind()).view([3, 3, 1, 1]);
    x.conv2d(&m, None::<Tensor>, [1, 1], [0, 0], [1, 1], 1)
}

/// Mean squared error after the linear RGB -> YUV map.
pub fn loss_yuv(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_same(x, y)?;
    Ok((rgb_to_yuv(y) - rgb_to_yuv(x)).square().mean(x.kind()))
}

/// Per-bin focal-frequency contributions `rho * |F(y) - F(x)|^2`
/// (`B x 3 x H x W`), using the orthonormal 2D DFT. `rho` is
/// `|F(y) - F(x)|` scaled to a maximum of one per image and channel and is
/// held constant for differentiation.
pub fn ffl_map(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_same(x, y)?;
    let fd = y.fft_fft2(None::<&[i64]>, [-2i64, -1].as_slice(), "ortho")
        - x.fft_fft2(None::<&[i64]>, [-2i64, -1].as_slice(), "ortho");
    let re = fd.real();
    let im = fd.imag();
    let sq = re.square() + im.square();
    let rho = tch::no_grad(|| {
        let mag = sq.sqrt();
        let max = mag.amax([-2i64, -1].as_slice(), true);
        (mag / max).nan_to_num(0.0, 0.0, 0.0).clamp(0.0, 1.0)
    });
    Ok(rho * sq)
}

/// Focal frequency loss: mean of [`ffl_map`].
pub fn loss_ffl(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(ffl_map(x, y)?.mean(x.kind()))
}

/// Gradient of `sum(critic(points))` with respect to `points`, kept in the
/// graph so the penalty can be backpropagated into the critic. A critic whose
/// output does not depend on its input has zero gradient.
fn critic_input_grad(critic: &dyn Critic, points: &Tensor) -> Result<(Tensor, Tensor)> {
    let p = points.detach().set_requires_grad(true);
    let scores = critic.score(&p);
    if scores.size() != [points.size()[0]] {
        return Err(Error::Shape(format!(
            "critic must return one score per image, got {:?}",
            scores.size()
        )));
    }
    if !scores.requires_grad() {
        return Ok((scores, p.zeros_like()));
    }
    match Tensor::f_run_backward(&[scores.sum(scores.kind())], &[&p], true, true) {
        Ok(mut g) => Ok((scores, g.remove(0))),
        Err(e) if e.to_string().contains("not have been used in the graph") => Ok((scores, p.zeros_like())),
        Err(e) => Err(Error::Config(format!("critic is not differentiable: {e}"))),
    }
}

/// Adversarial terms for one batch.
#[derive(Debug)]
pub struct GanTerms {
    /// `-E[D(y)]`, minimised by the embedder.
    pub generator: Tensor,
    /// `E[D(y)] - E[D(x)] + lambda * E[(|grad D| - 1)^2]`, minimised by the critic.
    pub critic: Tensor,
    /// The penalty alone, unweighted by lambda.
    pub gradient_penalty: Tensor,
}

/// Wasserstein critic and generator losses with gradient penalty.
/// `seed` drives the interpolation weights in [`GpMode::Interpolated`].
pub fn loss_gan_gp(
    x: &Tensor,
    y: &Tensor,
    critic: &dyn Critic,
    gp_lambda: f64,
    mode: GpMode,
    seed: u64,
) -> Result<GanTerms> {
    check_same(x, y)?;
    let b = x.size()[0];
    let d_real = critic.score(x);
    let d_fake = critic.score(y);
    let points = match mode {
        GpMode::Encoded => y.detach(),
        GpMode::Interpolated => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
            let e = Tensor::from_slice(&eps).to_kind(x.kind()).view([b, 1, 1, 1]);
            (&e * x.detach() + (-&e + 1.0) * y.detach()).detach()
        }
    };
    let (_, grad) = critic_input_grad(critic, &points)?;
    // The tiny offset keeps the norm differentiable at a zero gradient.
    let norm = (grad
        .view([b, -1])
        .square()
        .sum_dim_intlist([1i64].as_slice(), false, grad.kind())
        + 1e-20)
        .sqrt();
    let gp = (norm - 1.0).square().mean(grad.kind());
    let wasserstein = d_fake.mean(d_fake.kind()) - d_real.mean(d_real.kind());
    Ok(GanTerms {
        generator: -d_fake.mean(d_fake.kind()),
        critic: wasserstein + &gp * gp_lambda,
        gradient_penalty: gp,
    })
}

/// Fixed random multi-scale feature extractor used as a perceptual distance.
/// Features of each stage are unit-normalised across channels and compared
/// with squared distance, averaged over positions and summed over stages.
#[derive(Debug)]
pub struct PerceptualNet {
    layers: Vec<(Tensor, Tensor, i64)>,
}

impl PerceptualNet {
    pub const DEFAULT_SEED: u64 = 0x1b1b_5eed;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(3i64, 16i64, 1i64), (16, 32, 2), (32, 48, 2)];
        let layers = spec
            .iter()
            .map(|&(cin, cout, stride)| {
                let fan_in = (cin * 9) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
                let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect();
                (
                    Tensor::from_slice(&w).view([cout, cin, 3, 3]),
                    Tensor::from_slice(&b),
                    stride,
                )
            })
            .collect();
        Self { layers }
    }

    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.shallow_clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            let w = w.to_kind(x.kind());
            let b = b.to_kind(x.kind());
            h = h.conv2d(&w, Some(&b), [*stride, *stride], [1, 1], [1, 1], 1).silu();
            let norm = (h.square().sum_dim_intlist([1i64].as_slice(), true, h.kind()) + 1e-10).sqrt();
            out.push(&h / norm);
        }
        out
    }

    pub fn distance(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        check_same(x, y)?;
        let s = x.size();
        if (s[2] as usize) < PERCEPTUAL_MIN_SIZE || (s[3] as usize) < PERCEPTUAL_MIN_SIZE {
            return Err(Error::Resolution {
                expected: PERCEPTUAL_MIN_SIZE,
                got_h: s[2] as usize,
                got_w: s[3] as usize,
            });
        }
        let fx = self.features(x);
        let fy = self.features(y);
        let mut total = Tensor::zeros([], (x.kind(), x.device()));
        for (a, b) in fx.iter().zip(&fy) {
            total += (a - b)
                .square()
                .sum_dim_intlist([1i64].as_slice(), false, a.kind())
                .mean(a.kind());
        }
        Ok(total)
    }
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

/// Perceptual distance with the default fixed feature net.
pub fn loss_perceptual(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    PerceptualNet::default().distance(x, y)
}

/// All quality and recovery terms of one batch.
#[derive(Debug)]
pub struct TotalLoss {
    pub total: Tensor,
    pub quality: Tensor,
    pub recovery: Tensor,
    pub breakdown: LossBreakdown,
}

/// Loss evaluator holding the fixed perceptual net.
#[derive(Debug, Default)]
pub struct Objectives {
    perceptual: PerceptualNet,
}

impl Objectives {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn perceptual(&self) -> &PerceptualNet {
        &self.perceptual
    }

    /// `alpha * quality + recovery`. The GAN term enters the quality
    /// composite only when a critic is given; terms whose weight is zero are
    /// not evaluated and contribute exactly zero.
    pub fn loss_total(
        &self,
        x: &Tensor,
        y: &Tensor,
        w: &Tensor,
        w_hat: &Tensor,
        weights: &LossWeights,
        critic: Option<&dyn Critic>,
    ) -> Result<TotalLoss> {
        weights.validate()?;
        check_same(x, y)?;
        let kind = y.kind();
        let zero = || Tensor::zeros([], (kind, y.device()));
        let weighted = |beta: f64, f: &dyn Fn() -> Result<Tensor>| -> Result<Tensor> {
            if beta == 0.0 {
                Ok(zero())
            } else {
                f()
            }
        };
        let yuv = weighted(weights.beta_yuv, &|| loss_yuv(x, y))?;
        let lpips = weighted(weights.beta_lpips, &|| self.perceptual.distance(x, y))?;
        let ffl = weighted(weights.beta_ffl, &|| loss_ffl(x, y))?;
        let gan = match critic {
            Some(c) if weights.beta_gan != 0.0 => -c.score(y).mean(kind),
            _ => zero(),
        };
        let recovery = loss_recovery(w, w_hat)?;
        let quality =
            &yuv * weights.beta_yuv + &lpips * weights.beta_lpips + &ffl * weights.beta_ffl + &gan * weights.beta_gan;
        let total = if weights.alpha == 0.0 {
            recovery.shallow_clone()
        } else {
            &quality * weights.alpha + &recovery
        };
        let breakdown = LossBreakdown {
            yuv: yuv.double_value(&[]),
            lpips: lpips.double_value(&[]),
            ffl: ffl.double_value(&[]),
            gan: gan.double_value(&[]),
            recovery: recovery.double_value(&[]),
            quality: quality.double_value(&[]),
            total: total.double_value(&[]),
        };
        Ok(TotalLoss {
            total,
            quality,
            recovery,
            breakdown,
        })
    }

    /// [`Objectives::loss_total`] on single images and a payload.
    pub fn loss_total_images(
        &self,
        x: &ImageArray,
        y: &ImageArray,
        w: &WatermarkPayload,
        w_hat: &[f64],
        weights: &LossWeights,
        critic: Option<&dyn Critic>,
    ) -> Result<LossBreakdown> {
        x.check_comparable(y)?;
        if w.len() != w_hat.len() {
            return Err(Error::PayloadLength {
                expected: w.len(),
                got: w_hat.len(),
            });
        }
        let xt = x.to_range(PixelRange::UnitSigned).to_tensor().to_kind(Kind::Double);
        let yt = y.to_range(PixelRange::UnitSigned).to_tensor().to_kind(Kind::Double);
        let wt = w.to_tensor().to_kind(Kind::Double);
        let pt = Tensor::from_slice(w_hat).view([1, -1]);
        Ok(tch::no_grad(|| self.loss_total(&xt, &yt, &wt, &pt, weights, critic))?.breakdown)
    }
}
