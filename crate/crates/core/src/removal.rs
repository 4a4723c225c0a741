//! Watermark removal: a restoration network trained against a frozen codec
//! to map encoded images back to their covers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Kind, Tensor};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::image::{ImageArray, PixelRange, WatermarkPayload};
use crate::losses::{loss_gan_gp, GpMode};
use crate::metrics::{self, EvalRecord};
use crate::nets::{conv, init_parameters, CodecModel, Discriminator, ResBlock};
use crate::optim::{AdamW, AdamWConfig};
use crate::scaling::{decode_scaled, embed_scaled, scale_apply, FixedResolutionOp, ScaleParams};
use crate::train::{cached, learning_rate, mix, sample_payloads, Dataset, LrSchedule};

pub const REMOVAL_KIND: &str = "remover";

const STREAM_ORDER: u64 = 11;
const STREAM_PAYLOAD: u64 = 12;
const STREAM_GP: u64 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestorationBackbone {
    /// Encoder-decoder of kernel-basis attention blocks.
    KbnetStyle,
    /// Encoder-decoder of plain residual blocks.
    UnetSmall,
}

/// What the extractor should see on a restored image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityTarget {
    /// Every bit probability at 0.5.
    Chance,
    /// The extractor's response to the cover itself.
    Cover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemovalConfig {
    pub n_payloads_per_cover: usize,
    pub backbone: RestorationBackbone,
    pub width: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub kernel_bases: usize,
    pub critic_width: usize,
    pub w_mse: f64,
    pub w_gan: f64,
    pub w_similarity: f64,
    pub similarity_target: SimilarityTarget,
    pub gp_lambda: f64,
    pub gp_mode: GpMode,
    pub epochs: usize,
    /// Covers per batch; the network sees `batch_size * n_payloads_per_cover` inputs.
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub max_iters: Option<u64>,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RemovalConfig {
    pub fn toy() -> Self {
        Self {
            n_payloads_per_cover: 3,
            backbone: RestorationBackbone::UnetSmall,
            width: 16,
            levels: 2,
            blocks_per_level: 1,
            kernel_bases: 8,
            critic_width: 16,
            w_mse: 1.0,
            // Same scale problem as the toy codec: a unit-weight critic
            // term swamps the pixel loss at 64px.
            w_gan: 0.001,
            w_similarity: 0.01,
            similarity_target: SimilarityTarget::Chance,
            gp_lambda: 10.0,
            gp_mode: GpMode::Interpolated,
            epochs: 30,
            batch_size: 8,
            base_lr: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            max_iters: None,
            seed: 0,
            log_every: 25,
        }
    }

    pub fn full() -> Self {
        Self {
            backbone: RestorationBackbone::KbnetStyle,
            width: 32,
            levels: 3,
            blocks_per_level: 2,
            critic_width: 32,
            w_gan: 1.0,
            w_similarity: 0.1,
            gp_mode: GpMode::Encoded,
            epochs: 100,
            base_lr: 2e-5,
            ..Self::toy()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_payloads_per_cover < 1 {
            return bad("n_payloads_per_cover must be >= 1".into());
        }
        if self.width == 0 || self.levels == 0 || self.blocks_per_level == 0 || self.critic_width == 0 {
            return bad("network sizes must be positive".into());
        }
        if self.backbone == RestorationBackbone::KbnetStyle && self.kernel_bases == 0 {
            return bad("kernel_bases must be positive".into());
        }
        for (name, v) in [
            ("w_mse", self.w_mse),
            ("w_gan", self.w_gan),
            ("w_similarity", self.w_similarity),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        Ok(())
    }
}

/// Kernel-basis attention block. A small set of learned depthwise kernels
/// is mixed per pixel by predicted coefficients, fused with a channel
/// attention branch, followed by a gated feed-forward layer.
#[derive(Debug)]
struct KbaBlock {
    ch: i64,
    bases: i64,
    norm1: nn::GroupNorm,
    basis: nn::Conv2D,
    coeff: nn::Conv2D,
    value: nn::Conv2D,
    channel: nn::Conv2D,
    proj: nn::Conv2D,
    norm2: nn::GroupNorm,
    ffn_in: nn::Conv2D,
    res_out: nn::Conv2D,
}

impl KbaBlock {
    fn new(p: nn::Path, ch: i64, bases: i64) -> Self {
        let dw = nn::ConvConfig {
            padding: 1,
            groups: ch,
            ..Default::default()
        };
        Self {
            ch,
            bases,
            norm1: nn::group_norm(&p / "norm1", 1, ch, Default::default()),
            basis: nn::conv2d(&p / "basis", ch, ch * bases, 3, dw),
            coeff: conv(&p / "coeff", ch, bases, 3, 1),
            value: conv(&p / "value", ch, ch, 1, 1),
            channel: conv(&p / "channel", ch, ch, 1, 1),
            proj: conv(&p / "proj", ch, ch, 1, 1),
            norm2: nn::group_norm(&p / "norm2", 1, ch, Default::default()),
            ffn_in: conv(&p / "ffn_in", ch, 4 * ch, 1, 1),
            res_out: conv(&p / "res_out", 2 * ch, ch, 1, 1),
        }
    }
}

impl Module for KbaBlock {
    fn forward(&self, xs: &Tensor) -> Tensor {
        let s = xs.size();
        let (b, h, w) = (s[0], s[2], s[3]);
        let u = xs.apply(&self.norm1);
        // Per-pixel mixture of basis kernels equals the mixture of the
        // basis responses, since convolution is linear in the kernel.
        let responses = u.apply(&self.basis).view([b, self.ch, self.bases, h, w]);
        let a = u.apply(&self.coeff).softmax(1, u.kind()).view([b, 1, self.bases, h, w]);
        let spatial = (responses * a).sum_dim_intlist([2i64].as_slice(), false, u.kind());
        let pooled = u.mean_dim([2i64, 3].as_slice(), true, u.kind());
        let gate = pooled.apply(&self.channel).sigmoid();
        let fused = spatial * u.apply(&self.value) * gate;
        let x1 = xs + fused.apply(&self.proj);
        let f = x1.apply(&self.norm2).apply(&self.ffn_in).chunk(2, 1);
        &x1 + (&f[0] * f[1].gelu("none")).apply(&self.res_out)
    }
}

fn block(p: nn::Path, ch: i64, cfg: &RemovalConfig) -> Box<dyn Module> {
    match cfg.backbone {
        RestorationBackbone::UnetSmall => Box::new(ResBlock::new(p, ch)),
        RestorationBackbone::KbnetStyle => Box::new(KbaBlock::new(p, ch, cfg.kernel_bases as i64)),
    }
}

fn stack(p: &nn::Path, ch: i64, cfg: &RemovalConfig) -> Vec<Box<dyn Module>> {
    (0..cfg.blocks_per_level).map(|i| block(p / i, ch, cfg)).collect()
}

fn run(blocks: &[Box<dyn Module>], xs: Tensor) -> Tensor {
    blocks.iter().fold(xs, |h, b| b.forward(&h))
}

/// Encoder-decoder with skip connections predicting a residual that is
/// added to the input. The last layer starts at zero, so an untrained
/// network is the identity.
#[derive(Debug)]
struct Restorer {
    stem: nn::Conv2D,
    enc: Vec<Vec<Box<dyn Module>>>,
    down: Vec<nn::Conv2D>,
    mid: Vec<Box<dyn Module>>,
    up: Vec<nn::Conv2D>,
    merge: Vec<nn::Conv2D>,
    dec: Vec<Vec<Box<dyn Module>>>,
    head: nn::Conv2D,
}

impl Restorer {
    fn new(p: nn::Path, cfg: &RemovalConfig) -> Self {
        let c = cfg.width as i64;
        let levels = cfg.levels;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels {
            let ch = c << l;
            enc.push(stack(&(&p / format!("enc{l}")), ch, cfg));
            down.push(conv(&p / format!("down{l}"), ch, 2 * ch, 3, 2));
        }
        let mid = stack(&(&p / "mid"), c << levels, cfg);
        let mut up = Vec::new();
        let mut merge = Vec::new();
        let mut dec = Vec::new();
        for l in (0..levels).rev() {
            let ch = c << l;
            up.push(conv(&p / format!("up{l}"), 2 * ch, ch, 3, 1));
            merge.push(conv(&p / format!("merge{l}"), 2 * ch, ch, 1, 1));
            dec.push(stack(&(&p / format!("dec{l}")), ch, cfg));
        }
        Self {
            stem: conv(&p / "stem", 3, c, 3, 1),
            enc,
            down,
            mid,
            up,
            merge,
            dec,
            head: conv(&p / "head", c, 3, 3, 1),
        }
    }
}

impl Module for Restorer {
    fn forward(&self, xs: &Tensor) -> Tensor {
        let mut h = xs.apply(&self.stem);
        let mut skips = Vec::new();
        for (blocks, down) in self.enc.iter().zip(&self.down) {
            h = run(blocks, h);
            skips.push(h.shallow_clone());
            h = h.apply(down).silu();
        }
        h = run(&self.mid, h);
        for ((up, merge), blocks) in self.up.iter().zip(&self.merge).zip(&self.dec) {
            let skip = skips.pop().expect("one skip per level");
            let s = skip.size();
            h = h.upsample_nearest2d([s[2], s[3]], None, None).apply(up).silu();
            h = Tensor::cat(&[h, skip], 1).apply(merge);
            h = run(blocks, h);
        }
        xs + h.silu().apply(&self.head)
    }
}

/// Restoration network, its critic, and the digest of the codec it was
/// trained against.
pub struct RemovalModel {
    config: RemovalConfig,
    image_size: usize,
    pub codec_hash: u64,
    pub codec_path: Option<String>,
    pub vs: nn::VarStore,
    pub critic_vs: nn::VarStore,
    net: Restorer,
    critic: Discriminator,
}

impl std::fmt::Debug for RemovalModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemovalModel")
            .field("config", &self.config)
            .field("image_size", &self.image_size)
            .finish_non_exhaustive()
    }
}

impl RemovalModel {
    pub fn new(config: RemovalConfig, image_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let factor = 1usize << config.levels;
        if image_size == 0 || image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {image_size} must be a multiple of {factor}"
            )));
        }
        let vs = nn::VarStore::new(tch::Device::Cpu);
        let critic_vs = nn::VarStore::new(tch::Device::Cpu);
        let net = Restorer::new(vs.root() / "restorer", &config);
        let critic = Discriminator::new(critic_vs.root() / "critic", config.critic_width);
        init_parameters(&vs, seed);
        init_parameters(&critic_vs, seed ^ 0x5eed_c0de);
        tch::no_grad(|| {
            let _ = net.head.ws.shallow_clone().zero_();
            // Norm layers start as the identity affine map.
            for (name, mut v) in vs.variables() {
                if name.contains("norm") && name.ends_with("weight") {
                    let _ = v.fill_(1.0);
                }
            }
        });
        Ok(Self {
            config,
            image_size,
            codec_hash: 0,
            codec_path: None,
            vs,
            critic_vs,
            net,
            critic,
        })
    }

    pub fn config(&self) -> &RemovalConfig {
        &self.config
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// `B x 3 x n x n` in `[-1, 1]` to restored images in `[-1, 1]`.
    pub fn remove_tensor(&self, y: &Tensor) -> Tensor {
        self.net.forward(y).clamp(-1.0, 1.0)
    }

    pub fn remove_fixed(&self, y: &ImageArray) -> Result<ImageArray> {
        let n = self.image_size;
        if y.height() != n || y.width() != n {
            return Err(Error::Resolution {
                expected: n,
                got_h: y.height(),
                got_w: y.width(),
            });
        }
        let t = y.to_range(PixelRange::UnitSigned).to_tensor();
        let out = tch::no_grad(|| self.remove_tensor(&t));
        ImageArray::from_tensor(&out, PixelRange::UnitSigned)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(REMOVAL_KIND);
        a.set_meta("removal", self.config.to_toml()?);
        a.set_meta("image_size", self.image_size);
        a.set_meta("codec_hash", format!("{:016x}", self.codec_hash));
        if let Some(p) = &self.codec_path {
            a.set_meta("codec_path", p);
        }
        a.add_store("restorer/", &self.vs);
        a.add_store("critic/", &self.critic_vs);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(REMOVAL_KIND)?;
        let config = RemovalConfig::from_toml_str(a.meta("removal")?)?;
        let size = a
            .meta("image_size")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad image_size".into()))?;
        let mut m = Self::new(config, size, 0)?;
        m.codec_hash =
            u64::from_str_radix(a.meta("codec_hash")?, 16).map_err(|_| Error::Checkpoint("bad codec_hash".into()))?;
        m.codec_path = a.meta("codec_path").ok().map(str::to_string);
        a.load_store("restorer/", &m.vs)?;
        a.load_store("critic/", &m.critic_vs)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Errors unless `codec` matches the one used in training.
    pub fn check_codec(&self, codec: &CodecModel) -> Result<()> {
        if codec.config().image_size != self.image_size {
            return Err(Error::Resolution {
                expected: self.image_size,
                got_h: codec.config().image_size,
                got_w: codec.config().image_size,
            });
        }
        Ok(())
    }
}

impl FixedResolutionOp for RemovalModel {
    fn native_size(&self) -> usize {
        self.image_size
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(tch::no_grad(|| self.remove_tensor(&x.to_kind(Kind::Float))))
    }
}

/// Mean squared distance between extractor probabilities and the target.
pub fn similarity_loss(probs: &Tensor, target: &Tensor) -> Tensor {
    (probs - target).square().mean(probs.kind())
}

/// Validation numbers for a remover: covers vs encoded and vs restored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalMetrics {
    pub psnr_encoded: f64,
    pub psnr_removed: f64,
    pub mse_encoded: f64,
    pub mse_removed: f64,
    pub acc_encoded: f64,
    pub acc_removed: f64,
}

fn quantize(t: &Tensor) -> Tensor {
    ((t.clamp(-1.0, 1.0) + 1.0) * 127.5).round() / 127.5 - 1.0
}

fn bit_acc(p: &Tensor, w: &Tensor) -> f64 {
    p.ge(0.5)
        .to_kind(Kind::Float)
        .eq_tensor(&w.to_kind(Kind::Float))
        .to_kind(Kind::Double)
        .mean(Kind::Double)
        .double_value(&[])
}

/// Encodes each cover with a random payload, restores it, and averages
/// PSNR, MSE (byte units) and bit accuracy over byte-quantised images.
pub fn evaluate_removal(
    remover: &RemovalModel,
    codec: &CodecModel,
    covers: &Tensor,
    seed: u64,
) -> Result<RemovalMetrics> {
    remover.check_codec(codec)?;
    let n = covers.size()[0];
    let kind = codec.kind();
    let bits = codec.config().bit_length;
    let mut acc = [0.0f64; 6];
    let mut start = 0;
    while start < n {
        let len = 16.min(n - start);
        let x = covers.narrow(0, start, len).to_kind(Kind::Float);
        let w = sample_payloads(mix(seed, STREAM_PAYLOAD, u64::MAX), start as u64, len as usize, bits);
        let y = quantize(&tch::no_grad(|| codec.embed_tensor(&x.to_kind(kind), &w.to_kind(kind))).to_kind(Kind::Float));
        let r = quantize(&tch::no_grad(|| remover.remove_tensor(&y)));
        for i in 0..len {
            let xi = ImageArray::from_tensor(&x.narrow(0, i, 1), PixelRange::UnitSigned)?;
            let yi = ImageArray::from_tensor(&y.narrow(0, i, 1), PixelRange::UnitSigned)?;
            let ri = ImageArray::from_tensor(&r.narrow(0, i, 1), PixelRange::UnitSigned)?;
            acc[0] += metrics::report_psnr(metrics::psnr(&xi, &yi)?);
            acc[1] += metrics::report_psnr(metrics::psnr(&xi, &ri)?);
            acc[2] += metrics::mse(&xi, &yi)?;
            acc[3] += metrics::mse(&xi, &ri)?;
        }
        let py = tch::no_grad(|| codec.extract_tensor(&y.to_kind(kind)));
        let pr = tch::no_grad(|| codec.extract_tensor(&r.to_kind(kind)));
        acc[4] += bit_acc(&py, &w) * len as f64;
        acc[5] += bit_acc(&pr, &w) * len as f64;
        start += len;
    }
    let n = n as f64;
    Ok(RemovalMetrics {
        psnr_encoded: acc[0] / n,
        psnr_removed: acc[1] / n,
        mse_encoded: acc[2] / n,
        mse_removed: acc[3] / n,
        acc_encoded: acc[4] / n,
        acc_removed: acc[5] / n,
    })
}

/// Losses of one removal step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemovalStep {
    pub iteration: u64,
    pub mse: f64,
    pub gan: f64,
    pub similarity: f64,
    pub total: f64,
    pub critic: f64,
}

/// Result of [`train_removal`].
#[derive(Debug)]
pub struct RemovalOutcome {
    pub model: RemovalModel,
    pub checkpoint: Option<PathBuf>,
    pub metrics: RemovalMetrics,
    pub codec_hash_before: u64,
    pub codec_hash_after: u64,
    pub iterations: u64,
}

/// Trains a remover against `codec`, which is left untouched. Writes
/// `removal_loss.csv` and `remover.safetensors` when `out_dir` is given.
pub fn train_removal(
    config: RemovalConfig,
    codec: &CodecModel,
    train_set: &Dataset,
    val_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RemovalOutcome> {
    config.validate()?;
    let size = codec.config().image_size;
    for set in [train_set, val_set] {
        let s = set.tensor().size();
        if s[2] as usize != size || s[3] as usize != size {
            return Err(Error::Resolution {
                expected: size,
                got_h: s[2] as usize,
                got_w: s[3] as usize,
            });
        }
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("empty removal dataset".into()));
    }
    let hash_before = codec.parameter_hash();
    let kind = codec.kind();
    let mut model = RemovalModel::new(config.clone(), size, config.seed)?;
    model.codec_hash = hash_before;
    let opt_cfg = AdamWConfig::default();
    let mut opt = AdamW::new(&model.vs, opt_cfg);
    let mut critic_opt = AdamW::new(&model.critic_vs, opt_cfg);
    let covers = config.batch_size.min(train_set.len());
    let per_epoch = (train_set.len() / covers).max(1) as u64;
    let total = config.max_iters.unwrap_or(per_epoch * config.epochs as u64);
    let peak = config.base_lr * (covers * config.n_payloads_per_cover) as f64;
    let n_rep = config.n_payloads_per_cover as i64;
    let bits = codec.config().bit_length;

    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let mut f = BufWriter::new(File::create(d.join("removal_loss.csv"))?);
            writeln!(f, "iter,L_mse,L_gan,L_similarity,L_total,L_critic")?;
            Some(f)
        }
        None => None,
    };

    // The codec only provides inputs and gradients with respect to images.
    codec.set_trainable(false);
    let result = (|| -> Result<()> {
        let mut order: Vec<usize> = Vec::new();
        for it in 0..total {
            let epoch = it / per_epoch;
            if it % per_epoch == 0 {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_ORDER, epoch)));
            }
            let k = (it % per_epoch) as usize * covers;
            let x = train_set.batch(&order[k..k + covers]).to_kind(Kind::Float);
            let x = x.repeat_interleave_self_int(n_rep, Some(0), None);
            let w = sample_payloads(mix(config.seed, STREAM_PAYLOAD, 0), it, x.size()[0] as usize, bits);
            let y =
                quantize(&tch::no_grad(|| codec.embed_tensor(&x.to_kind(kind), &w.to_kind(kind))).to_kind(Kind::Float));
            let lr = learning_rate(config.lr_schedule, peak, it, total);

            let mut critic_loss = 0.0;
            if config.w_gan > 0.0 {
                let out = tch::no_grad(|| model.remove_tensor(&y));
                let terms = loss_gan_gp(
                    &x,
                    &out,
                    &model.critic,
                    config.gp_lambda,
                    config.gp_mode,
                    mix(config.seed, STREAM_GP, it),
                )?;
                critic_opt.zero_grad();
                terms.critic.backward();
                critic_opt.step(lr);
                critic_loss = terms.critic.double_value(&[]);
            }

            let out = model.remove_tensor(&y);
            let mse = (&out - &x).square().mean(Kind::Float);
            let gan = if config.w_gan > 0.0 {
                -model.critic.forward(&out).mean(Kind::Float)
            } else {
                Tensor::zeros([], (Kind::Float, tch::Device::Cpu))
            };
            let sim = if config.w_similarity > 0.0 {
                let p = codec.extract_tensor(&out.to_kind(kind)).to_kind(Kind::Float);
                let target = match config.similarity_target {
                    SimilarityTarget::Chance => p.full_like(0.5),
                    SimilarityTarget::Cover => {
                        tch::no_grad(|| codec.extract_tensor(&x.to_kind(kind))).to_kind(Kind::Float)
                    }
                };
                similarity_loss(&p, &target)
            } else {
                Tensor::zeros([], (Kind::Float, tch::Device::Cpu))
            };
            let total_loss = &mse * config.w_mse + &gan * config.w_gan + &sim * config.w_similarity;
            let step = RemovalStep {
                iteration: it,
                mse: mse.double_value(&[]),
                gan: gan.double_value(&[]),
                similarity: sim.double_value(&[]),
                total: total_loss.double_value(&[]),
                critic: critic_loss,
            };
            if !(step.total.is_finite() && step.critic.is_finite()) {
                return Err(Error::NonFinite {
                    iteration: it,
                    breakdown: format!("{step:?}"),
                });
            }
            opt.zero_grad();
            total_loss.backward();
            opt.step(lr);
            if let Some(f) = log.as_mut() {
                writeln!(
                    f,
                    "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                    it, step.mse, step.gan, step.similarity, step.total, step.critic
                )?;
            }
            if config.log_every > 0 && it % config.log_every == 0 {
                info!("removal it {it} lr {lr:.2e} {step:?}");
            }
        }
        Ok(())
    })();
    codec.set_trainable(true);
    result?;

    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    let metrics = evaluate_removal(&model, codec, val_set.tensor(), config.seed)?;
    let hash_after = codec.parameter_hash();
    if hash_after != hash_before {
        return Err(Error::Checkpoint("frozen codec changed during removal training".into()));
    }
    let checkpoint = match out_dir {
        Some(d) => {
            let p = d.join("remover.safetensors");
            model.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(RemovalOutcome {
        model,
        checkpoint,
        metrics,
        codec_hash_before: hash_before,
        codec_hash_after: hash_after,
        iterations: total,
    })
}

/// Summary of a finished removal run kept next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalSummary {
    pub checkpoint: PathBuf,
    pub metrics: RemovalMetrics,
    pub iterations: u64,
}

/// [`train_removal`] under `root/<name>-<digest>`, keyed by the removal
/// configuration and the codec's parameter hash, reusing a finished run.
pub fn train_removal_cached(
    config: &RemovalConfig,
    codec: &CodecModel,
    train_set: &Dataset,
    val_set: &Dataset,
    root: impl AsRef<Path>,
    name: &str,
) -> Result<RemovalSummary> {
    let key = format!("codec_hash = {}\n{}", codec.parameter_hash(), config.to_toml()?);
    cached(root.as_ref(), name, &key, |dir| {
        std::fs::create_dir_all(dir)?;
        let out = train_removal(config.clone(), codec, train_set, val_set, Some(dir))?;
        let checkpoint = out.checkpoint.expect("output directory was given");
        Ok(RemovalSummary {
            checkpoint,
            metrics: out.metrics,
            iterations: out.iterations,
        })
    })
}

/// Re-watermarks `x` once per payload, optionally restoring the previous
/// round's image first. Each record holds PSNR and SSIM against the
/// original and the accuracy of that round's payload; the round number
/// (from 1) is stored in `severity`.
pub fn rewatermark(
    codec: &CodecModel,
    remover: Option<&RemovalModel>,
    x: &ImageArray,
    payloads: &[WatermarkPayload],
    params: &ScaleParams,
) -> Result<Vec<EvalRecord>> {
    if payloads.is_empty() {
        return Err(Error::Payload("at least one payload is required".into()));
    }
    if let Some(r) = remover {
        r.check_codec(codec)?;
    }
    let original = x.to_range(PixelRange::Byte).quantized();
    let method = if remover.is_some() {
        "with-remover"
    } else {
        "without-remover"
    };
    let mut current = original.clone();
    let mut out = Vec::with_capacity(payloads.len());
    for (k, w) in payloads.iter().enumerate() {
        if let Some(r) = remover {
            current = scale_apply(r, &current, params)?;
        }
        current = embed_scaled(codec, &current, w, params)?;
        let acc = metrics::bit_accuracy(w, &decode_scaled(codec, &current, params.interp_mode)?)?;
        let a = original.to_range(PixelRange::UnitSigned);
        let b = current.to_range(PixelRange::UnitSigned);
        out.push(EvalRecord::new(
            method,
            "rewatermark",
            (k + 1).to_string(),
            metrics::psnr(&a, &b)?,
            metrics::ssim(&a, &b)?,
            acc,
        )?);
    }
    Ok(out)
}
