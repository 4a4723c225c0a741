//! Embedder, extractor and critic networks.
//!
//! The embedder is `post(backbone(pre(x, w)))`: an early fusion of the cover
//! and the spatially replicated payload, an encoder/decoder backbone built
//! from normalisation-free residual blocks with skip connections, and a stack
//! of 1x1 convolutions ending in `tanh`. It emits the encoded image directly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Device, Kind, Tensor};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::image::{ImageArray, PixelRange, WatermarkPayload};

/// Payload grid side before nearest-neighbour replication onto the image.
const PAYLOAD_GRID: i64 = 16;

/// Archive kind tag of a trained codec.
pub const CODEC_KIND: &str = "codec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorFamily {
    ResnetSmall,
    ResnetLarge,
    Densenet,
    Regnet,
    Resnext,
}

impl ExtractorFamily {
    pub const ALL: [ExtractorFamily; 5] = [
        ExtractorFamily::ResnetSmall,
        ExtractorFamily::ResnetLarge,
        ExtractorFamily::Densenet,
        ExtractorFamily::Regnet,
        ExtractorFamily::Resnext,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub image_size: usize,
    pub bit_length: usize,
    /// Channel count `d` of the fused pre-process output.
    pub internal_dim: usize,
    /// Number of down/up sampling levels in the backbone.
    pub backbone_depth: usize,
    pub res_blocks_per_level: usize,
    /// Number of 1x1 convolutions in the post-process stack.
    pub post_layers: usize,
    pub extractor_family: ExtractorFamily,
    pub extractor_width: usize,
    pub critic_width: usize,
    /// Ablation switch: replace the 1x1 stack by one 3-channel projection.
    #[serde(default)]
    pub single_projection_post: bool,
}

impl CodecConfig {
    /// Desk-scale preset: 64x64 images, 16 bits.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            bit_length: 16,
            internal_dim: 32,
            backbone_depth: 2,
            res_blocks_per_level: 1,
            post_layers: 3,
            extractor_family: ExtractorFamily::ResnetSmall,
            extractor_width: 32,
            critic_width: 16,
            single_projection_post: false,
        }
    }

    pub fn full() -> Self {
        Self {
            image_size: 256,
            bit_length: 100,
            internal_dim: 64,
            backbone_depth: 4,
            res_blocks_per_level: 2,
            post_layers: 3,
            extractor_family: ExtractorFamily::ResnetLarge,
            extractor_width: 64,
            critic_width: 32,
            single_projection_post: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            ));
        }
        if self.bit_length == 0 {
            return fail("bit_length must be at least 1".into());
        }
        if self.internal_dim < 8 {
            return fail(format!("internal_dim {} must be at least 8", self.internal_dim));
        }
        if !self.single_projection_post && self.post_layers < 2 {
            return fail(format!("post_layers {} must be at least 2", self.post_layers));
        }
        if self.image_size >> self.backbone_depth < 2 {
            return fail(format!(
                "backbone_depth {} too deep for {}px images",
                self.backbone_depth, self.image_size
            ));
        }
        if self.extractor_width < 4 || self.critic_width < 2 {
            return fail("extractor/critic width too small".into());
        }
        Ok(())
    }

    fn level_width(&self, level: usize) -> i64 {
        let d = self.internal_dim as i64;
        if level < 2 {
            d
        } else {
            2 * d
        }
    }
}

pub(crate) fn conv(p: nn::Path, cin: i64, cout: i64, k: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding: (k - 1) / 2,
        ..Default::default()
    };
    nn::conv2d(p, cin, cout, k, cfg)
}

fn conv_grouped(p: nn::Path, cin: i64, cout: i64, k: i64, stride: i64, groups: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding: k / 2,
        groups,
        ..Default::default()
    };
    nn::conv2d(p, cin, cout, k, cfg)
}

/// `x + conv(silu(conv(silu(x))))`, no normalisation.
#[derive(Debug)]
pub(crate) struct ResBlock {
    conv1: nn::Conv2D,
    res_out: nn::Conv2D,
}

impl ResBlock {
    pub(crate) fn new(p: nn::Path, ch: i64) -> Self {
        Self {
            conv1: conv(&p / "conv1", ch, ch, 3, 1),
            res_out: conv(&p / "res_out", ch, ch, 3, 1),
        }
    }
}

impl Module for ResBlock {
    fn forward(&self, xs: &Tensor) -> Tensor {
        xs + xs.silu().apply(&self.conv1).silu().apply(&self.res_out)
    }
}

/// Early image/payload fusion.
#[derive(Debug)]
pub struct PreFusion {
    proj: nn::Linear,
    conv: nn::Conv2D,
    grid: i64,
}

impl PreFusion {
    fn new(p: nn::Path, cfg: &CodecConfig) -> Self {
        let grid = PAYLOAD_GRID.min(cfg.image_size as i64);
        Self {
            proj: nn::linear(&p / "proj", cfg.bit_length as i64, 3 * grid * grid, Default::default()),
            conv: conv(&p / "conv", 6, cfg.internal_dim as i64, 3, 1),
            grid,
        }
    }

    /// `x`: `B x 3 x H x W` in `[-1, 1]`; `w`: `B x l` of zeros and ones.
    pub fn forward(&self, x: &Tensor, w: &Tensor) -> Tensor {
        let size = x.size();
        let (b, h, wd) = (size[0], size[2], size[3]);
        let m = (w * 2.0 - 1.0)
            .apply(&self.proj)
            .view([b, 3, self.grid, self.grid])
            .upsample_nearest2d([h, wd], None, None);
        Tensor::cat(&[x.shallow_clone(), m], 1).apply(&self.conv)
    }
}

/// Encoder/decoder over residual blocks with additive skips per level.
#[derive(Debug)]
struct Backbone {
    downs: Vec<(nn::Conv2D, Vec<ResBlock>)>,
    mid: Vec<ResBlock>,
    ups: Vec<(nn::Conv2D, Vec<ResBlock>)>,
}

impl Backbone {
    fn new(p: nn::Path, cfg: &CodecConfig) -> Self {
        let nres = cfg.res_blocks_per_level;
        let depth = cfg.backbone_depth;
        let mut downs = Vec::new();
        for lvl in 0..depth {
            let q = &p / "down" / lvl;
            let (cin, cout) = (cfg.level_width(lvl), cfg.level_width(lvl + 1));
            let c = conv(&q / "conv", cin, cout, 4, 2);
            let blocks = (0..nres).map(|i| ResBlock::new(&q / "res" / i, cout)).collect();
            downs.push((c, blocks));
        }
        let bottom = cfg.level_width(depth);
        let mid = (0..nres.max(1) * 2)
            .map(|i| ResBlock::new(&p / "mid" / i, bottom))
            .collect();
        let mut ups = Vec::new();
        for lvl in (0..depth).rev() {
            let q = &p / "up" / lvl;
            let (cin, cout) = (cfg.level_width(lvl + 1), cfg.level_width(lvl));
            let c = conv(&q / "conv", cin, cout, 3, 1);
            // Full-resolution features only pass through the fusion skip.
            let n = if lvl == 0 { 0 } else { nres };
            let blocks = (0..n).map(|i| ResBlock::new(&q / "res" / i, cout)).collect();
            ups.push((c, blocks));
        }
        Self { downs, mid, ups }
    }

    fn forward(&self, xs: &Tensor) -> Tensor {
        let mut h = xs.shallow_clone();
        let mut skips = vec![h.shallow_clone()];
        for (c, blocks) in &self.downs {
            h = h.apply(c).silu();
            for b in blocks {
                h = h.apply(b);
            }
            skips.push(h.shallow_clone());
        }
        skips.pop();
        for b in &self.mid {
            h = h.apply(b);
        }
        for (c, blocks) in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            let s = skip.size();
            h = h.upsample_nearest2d([s[2], s[3]], None, None).apply(c).silu() + skip;
            for b in blocks {
                h = h.apply(b);
            }
        }
        h
    }
}

/// Channel-wise 1x1 convolution stack separated by SiLU, closed by `tanh`.
#[derive(Debug)]
pub struct PostProcess {
    layers: Vec<nn::Conv2D>,
    in_channels: i64,
}

impl PostProcess {
    fn new(p: nn::Path, cfg: &CodecConfig, in_channels: i64) -> Self {
        let n = if cfg.single_projection_post { 1 } else { cfg.post_layers };
        let mut layers = Vec::with_capacity(n);
        let mut cin = in_channels;
        for i in 0..n {
            let cout = if i + 1 == n { 3 } else { in_channels };
            layers.push(conv(&p / i, cin, cout, 1, 1));
            cin = cout;
        }
        Self { layers, in_channels }
    }

    pub fn in_channels(&self) -> i64 {
        self.in_channels
    }

    pub fn forward(&self, xs: &Tensor) -> Tensor {
        let mut h = xs.shallow_clone();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.silu();
            }
            h = h.apply(l);
        }
        h.tanh()
    }
}

#[derive(Debug)]
pub struct Embedder {
    pre: PreFusion,
    backbone: Backbone,
    post: PostProcess,
}

impl Embedder {
    fn new(p: nn::Path, cfg: &CodecConfig) -> Self {
        Self {
            pre: PreFusion::new(&p / "pre", cfg),
            backbone: Backbone::new(&p / "backbone", cfg),
            post: PostProcess::new(&p / "post", cfg, cfg.level_width(0)),
        }
    }

    pub fn forward(&self, x: &Tensor, w: &Tensor) -> Tensor {
        let f = self.pre.forward(x, w);
        self.post.forward(&self.backbone.forward(&f))
    }
}

#[derive(Debug)]
struct BasicBlock {
    conv1: nn::Conv2D,
    res_out: nn::Conv2D,
    shortcut: Option<nn::Conv2D>,
}

impl BasicBlock {
    fn new(p: nn::Path, cin: i64, cout: i64, stride: i64) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| conv(&p / "shortcut", cin, cout, 1, stride));
        Self {
            conv1: conv(&p / "conv1", cin, cout, 3, stride),
            res_out: conv(&p / "res_out", cout, cout, 3, 1),
            shortcut,
        }
    }
}

impl Module for BasicBlock {
    fn forward(&self, xs: &Tensor) -> Tensor {
        let sc = match &self.shortcut {
            Some(c) => xs.apply(c),
            None => xs.shallow_clone(),
        };
        sc + xs.apply(&self.conv1).relu().apply(&self.res_out)
    }
}

/// 1x1 -> (grouped) 3x3 -> 1x1 bottleneck, optionally with squeeze-excitation.
#[derive(Debug)]
struct Bottleneck {
    reduce: nn::Conv2D,
    spatial: nn::Conv2D,
    se: Option<(nn::Conv2D, nn::Conv2D)>,
    res_out: nn::Conv2D,
    shortcut: Option<nn::Conv2D>,
}

impl Bottleneck {
    fn new(p: nn::Path, cin: i64, mid: i64, cout: i64, stride: i64, groups: i64, se: bool) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| conv(&p / "shortcut", cin, cout, 1, stride));
        let se = se.then(|| {
            let r = (mid / 4).max(1);
            (
                conv(&p / "se_reduce", mid, r, 1, 1),
                conv(&p / "se_expand", r, mid, 1, 1),
            )
        });
        Self {
            reduce: conv(&p / "reduce", cin, mid, 1, 1),
            spatial: conv_grouped(&p / "spatial", mid, mid, 3, stride, groups),
            se,
            res_out: conv(&p / "res_out", mid, cout, 1, 1),
            shortcut,
        }
    }
}

impl Module for Bottleneck {
    fn forward(&self, xs: &Tensor) -> Tensor {
        let sc = match &self.shortcut {
            Some(c) => xs.apply(c),
            None => xs.shallow_clone(),
        };
        let mut h = xs.apply(&self.reduce).relu().apply(&self.spatial).relu();
        if let Some((r, e)) = &self.se {
            let s = h
                .mean_dim([2i64, 3].as_slice(), true, Kind::Float)
                .apply(r)
                .relu()
                .apply(e)
                .sigmoid();
            h = h * s;
        }
        sc + h.apply(&self.res_out)
    }
}

/// Densely connected block: every layer sees the concatenation of all
/// previous feature maps.
#[derive(Debug)]
struct DenseBlock {
    layers: Vec<nn::Conv2D>,
}

impl DenseBlock {
    fn new(p: nn::Path, cin: i64, growth: i64, n: usize) -> (Self, i64) {
        let mut layers = Vec::new();
        let mut c = cin;
        for i in 0..n {
            layers.push(conv(&p / i, c, growth, 3, 1));
            c += growth;
        }
        (Self { layers }, c)
    }
}

impl Module for DenseBlock {
    fn forward(&self, xs: &Tensor) -> Tensor {
        let mut feats = vec![xs.shallow_clone()];
        for l in &self.layers {
            let inp = Tensor::cat(&feats, 1);
            feats.push(inp.relu().apply(l));
        }
        Tensor::cat(&feats, 1)
    }
}

/// Residual-family classifier with an `l`-way sigmoid head.
#[derive(Debug)]
pub struct Extractor {
    stem: nn::Conv2D,
    body: nn::Sequential,
    fc: nn::Linear,
}

impl Extractor {
    fn new(p: nn::Path, cfg: &CodecConfig) -> Self {
        let c = cfg.extractor_width as i64;
        let stem = conv(&p / "stem", 3, c, 3, 2);
        let b = &p / "body";
        let mut body = nn::seq();
        let out = match cfg.extractor_family {
            ExtractorFamily::ResnetSmall => {
                body = body
                    .add(BasicBlock::new(&b / 0, c, c, 1))
                    .add(BasicBlock::new(&b / 1, c, 2 * c, 2))
                    .add(BasicBlock::new(&b / 2, 2 * c, 4 * c, 2));
                4 * c
            }
            ExtractorFamily::ResnetLarge => {
                let widths = [(c, 4 * c, 1), (4 * c, 8 * c, 2), (8 * c, 16 * c, 2)];
                let mut i = 0;
                for (cin, cout, stride) in widths {
                    body = body.add(Bottleneck::new(&b / i, cin, cout / 4, cout, stride, 1, false));
                    body = body.add(Bottleneck::new(&b / (i + 1), cout, cout / 4, cout, 1, 1, false));
                    i += 2;
                }
                16 * c
            }
            ExtractorFamily::Resnext => {
                let widths = [(c, 2 * c, 1), (2 * c, 4 * c, 2), (4 * c, 8 * c, 2)];
                for (i, (cin, cout, stride)) in widths.into_iter().enumerate() {
                    body = body.add(Bottleneck::new(&b / i, cin, cout / 2, cout, stride, 4, false));
                }
                8 * c
            }
            ExtractorFamily::Regnet => {
                let widths = [(c, c, 1), (c, 2 * c, 2), (2 * c, 4 * c, 2)];
                for (i, (cin, cout, stride)) in widths.into_iter().enumerate() {
                    let groups = (cout / 8).max(1);
                    body = body.add(Bottleneck::new(&b / i, cin, cout, cout, stride, groups, true));
                }
                4 * c
            }
            ExtractorFamily::Densenet => {
                let growth = (c / 2).max(4);
                let mut ch = c;
                for i in 0..3 {
                    let (blk, out) = DenseBlock::new(&b / format!("dense{i}"), ch, growth, 3);
                    body = body.add(blk);
                    if i < 2 {
                        let half = out / 2;
                        body = body
                            .add(conv(&b / format!("trans{i}"), out, half, 1, 1))
                            .add_fn(|x| x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>));
                        ch = half;
                    } else {
                        ch = out;
                    }
                }
                ch
            }
        };
        let fc = nn::linear(&p / "fc", out, cfg.bit_length as i64, Default::default());
        Self { stem, body, fc }
    }

    /// Returns pre-sigmoid logits, `B x l`.
    pub fn logits(&self, y: &Tensor) -> Tensor {
        y.apply(&self.stem)
            .relu()
            .apply(&self.body)
            .relu()
            .mean_dim([2i64, 3].as_slice(), false, Kind::Float)
            .apply(&self.fc)
    }

    pub fn forward(&self, y: &Tensor) -> Tensor {
        self.logits(y).sigmoid()
    }
}

/// Strided convolutional critic without normalisation; unbounded score.
#[derive(Debug)]
pub struct Discriminator {
    convs: Vec<nn::Conv2D>,
}

impl Discriminator {
    pub fn new(p: nn::Path, width: usize) -> Self {
        let c = width as i64;
        let convs = vec![
            conv(&p / 0, 3, c, 4, 2),
            conv(&p / 1, c, 2 * c, 4, 2),
            conv(&p / 2, 2 * c, 4 * c, 4, 2),
            conv(&p / 3, 4 * c, 1, 3, 1),
        ];
        Self { convs }
    }

    /// `B x 3 x H x W` -> `B` scores.
    pub fn forward(&self, xs: &Tensor) -> Tensor {
        let n = self.convs.len();
        let mut h = xs.shallow_clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = h.apply(c);
            if i + 1 < n {
                h = h.leaky_relu();
            }
        }
        h.mean_dim([1i64, 2, 3].as_slice(), false, h.kind())
    }
}

/// Deterministic parameter initialisation from a seed, independent of the
/// torch global generator. Weights use a fan-in scaled uniform; the last
/// layer of every residual branch (`res_out`) starts at a tenth of that.
pub fn init_parameters(vs: &nn::VarStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars: BTreeMap<String, Tensor> = vs.variables().into_iter().collect();
    tch::no_grad(|| {
        for (name, var) in vars {
            let size = var.size();
            let numel: i64 = size.iter().product();
            let mut var = var;
            if name.ends_with("bias") {
                let _ = var.zero_();
                continue;
            }
            let fan_in: i64 = size.iter().skip(1).product::<i64>().max(1);
            let mut bound = (3.0 / fan_in as f64).sqrt();
            if name.contains("res_out") {
                bound *= 0.1;
            }
            let vals: Vec<f32> = (0..numel).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            let t = Tensor::from_slice(&vals).view(size.as_slice()).to_kind(var.kind());
            var.copy_(&t);
        }
    });
}

/// Embedder, extractor and critic with their parameter stores.
pub struct CodecModel {
    config: CodecConfig,
    /// Embedder and extractor parameters.
    pub gen_vs: nn::VarStore,
    pub critic_vs: nn::VarStore,
    embedder: Embedder,
    extractor: Extractor,
    critic: Discriminator,
}

impl std::fmt::Debug for CodecModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CodecModel")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl CodecModel {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let gen_vs = nn::VarStore::new(Device::Cpu);
        let critic_vs = nn::VarStore::new(Device::Cpu);
        let root = gen_vs.root();
        let embedder = Embedder::new(&root / "embedder", &config);
        let extractor = Extractor::new(&root / "extractor", &config);
        let critic = Discriminator::new(critic_vs.root() / "critic", config.critic_width);
        init_parameters(&gen_vs, seed);
        init_parameters(&critic_vs, seed ^ 0x5eed_c0de);
        Ok(Self {
            config,
            gen_vs,
            critic_vs,
            embedder,
            extractor,
            critic,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn critic(&self) -> &Discriminator {
        &self.critic
    }

    /// Archive holding both parameter stores and the configuration.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(CODEC_KIND);
        a.set_meta("codec", toml::to_string(&self.config)?);
        a.add_store("gen/", &self.gen_vs);
        a.add_store("critic/", &self.critic_vs);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(CODEC_KIND)?;
        let config: CodecConfig = toml::from_str(a.meta("codec")?)?;
        let model = Self::new(config, 0)?;
        a.load_store("gen/", &model.gen_vs)?;
        a.load_store("critic/", &model.critic_vs)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Order-independent digest of the embedder and extractor parameters.
    pub fn parameter_hash(&self) -> u64 {
        let vars: BTreeMap<String, Tensor> = self.gen_vs.variables().into_iter().collect();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in vars {
            let bytes = name.bytes().chain(
                Vec::<f64>::try_from(&t.detach().to_kind(Kind::Double).view([-1]))
                    .unwrap_or_default()
                    .into_iter()
                    .flat_map(|v| v.to_le_bytes()),
            );
            for b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Converts every parameter to `f64` (used by gradient checks).
    pub fn to_double(&mut self) {
        self.gen_vs.double();
        self.critic_vs.double();
    }

    pub fn set_trainable(&self, trainable: bool) {
        for v in self.gen_vs.trainable_variables() {
            let _ = v.set_requires_grad(trainable);
        }
    }

    fn check_image(&self, img: &ImageArray) -> Result<()> {
        let n = self.config.image_size;
        if img.height() != n || img.width() != n {
            return Err(Error::Resolution {
                expected: n,
                got_h: img.height(),
                got_w: img.width(),
            });
        }
        Ok(())
    }

    fn check_payload(&self, w: &WatermarkPayload) -> Result<()> {
        if w.len() != self.config.bit_length {
            return Err(Error::PayloadLength {
                expected: self.config.bit_length,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn unit_tensor(&self, img: &ImageArray) -> Result<Tensor> {
        self.check_image(img)?;
        Ok(img.to_range(PixelRange::UnitSigned).to_tensor().to_kind(self.kind()))
    }

    pub fn kind(&self) -> Kind {
        self.gen_vs
            .variables()
            .values()
            .next()
            .map(|t| t.kind())
            .unwrap_or(Kind::Float)
    }

    /// Batched embedding on tensors (`B x 3 x n x n`, `B x l`).
    pub fn embed_tensor(&self, x: &Tensor, w: &Tensor) -> Tensor {
        self.embedder.forward(x, w)
    }

    pub fn extract_tensor(&self, y: &Tensor) -> Tensor {
        self.extractor.forward(y)
    }

    pub fn critic_tensor(&self, img: &Tensor) -> Tensor {
        self.critic.forward(img)
    }

    /// Encodes `w` into `x` at native resolution.
    pub fn embed_fixed(&self, x: &ImageArray, w: &WatermarkPayload) -> Result<ImageArray> {
        self.check_payload(w)?;
        let xt = self.unit_tensor(x)?;
        let y = tch::no_grad(|| self.embed_tensor(&xt, &w.to_tensor().to_kind(self.kind())));
        ImageArray::from_tensor(&y, PixelRange::UnitSigned)
    }

    /// `E_pre(x, w)` as a `1 x d x n x n` tensor.
    pub fn preprocess_fuse(&self, x: &ImageArray, w: &WatermarkPayload, d: usize) -> Result<Tensor> {
        if d != self.config.internal_dim {
            return Err(Error::Config(format!(
                "requested d = {d}, model configured with {}",
                self.config.internal_dim
            )));
        }
        self.check_payload(w)?;
        let xt = self.unit_tensor(x)?;
        Ok(tch::no_grad(|| {
            self.embedder.pre.forward(&xt, &w.to_tensor().to_kind(self.kind()))
        }))
    }

    /// Applies the post-process stack to a `1 x n_ch x H x W` feature map.
    pub fn postprocess(&self, features: &Tensor) -> Result<ImageArray> {
        let size = features.size();
        if size.len() != 4 || size[1] != self.embedder.post.in_channels() {
            return Err(Error::Shape(format!(
                "post-process expects {} channels, got shape {:?}",
                self.embedder.post.in_channels(),
                size
            )));
        }
        let out = tch::no_grad(|| self.embedder.post.forward(&features.to_kind(self.kind())));
        ImageArray::from_tensor(&out, PixelRange::UnitSigned)
    }

    /// Per-bit probabilities recovered from `y`.
    pub fn extract(&self, y: &ImageArray) -> Result<Vec<f32>> {
        let yt = self.unit_tensor(y)?;
        let p = tch::no_grad(|| self.extract_tensor(&yt))
            .to_kind(Kind::Float)
            .view([-1]);
        Ok(Vec::<f32>::try_from(&p)?)
    }

    pub fn decode(&self, y: &ImageArray) -> Result<WatermarkPayload> {
        Ok(WatermarkPayload::from_probabilities(&self.extract(y)?))
    }

    pub fn discriminate(&self, img: &ImageArray) -> Result<f64> {
        let t = self.unit_tensor(img)?;
        Ok(tch::no_grad(|| self.critic_tensor(&t)).double_value(&[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticImages;

    fn small() -> CodecConfig {
        CodecConfig {
            image_size: 32,
            bit_length: 8,
            internal_dim: 8,
            extractor_width: 8,
            critic_width: 4,
            ..CodecConfig::toy()
        }
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::toy().validate().is_ok());
        assert!(CodecConfig::full().validate().is_ok());
        assert!(CodecConfig {
            image_size: 60,
            ..CodecConfig::toy()
        }
        .validate()
        .is_err());
        assert!(CodecConfig {
            bit_length: 0,
            ..CodecConfig::toy()
        }
        .validate()
        .is_err());
        assert!(CodecConfig {
            internal_dim: 4,
            ..CodecConfig::toy()
        }
        .validate()
        .is_err());
        assert!(CodecConfig {
            post_layers: 1,
            ..CodecConfig::toy()
        }
        .validate()
        .is_err());
        assert!(CodecConfig {
            post_layers: 1,
            single_projection_post: true,
            ..CodecConfig::toy()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn embed_shapes_and_bounds() {
        let m = CodecModel::new(small(), 1).unwrap();
        let x = SyntheticImages::new(32, 3).image(0).to_range(PixelRange::UnitSigned);
        let w = WatermarkPayload::random(8, &mut ChaCha8Rng::seed_from_u64(2));
        let y = m.embed_fixed(&x, &w).unwrap();
        assert_eq!((y.height(), y.width()), (32, 32));
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let psnr = crate::metrics::psnr(&x, &y).unwrap();
        assert!(psnr.is_finite() && psnr > 0.0);
    }

    #[test]
    fn wrong_resolution_and_payload_rejected() {
        let m = CodecModel::new(small(), 1).unwrap();
        let x = ImageArray::filled(16, 16, PixelRange::UnitSigned, 0.0).unwrap();
        let w = WatermarkPayload::zeros(8);
        assert!(matches!(m.embed_fixed(&x, &w), Err(Error::Resolution { .. })));
        assert!(matches!(m.extract(&x), Err(Error::Resolution { .. })));
        assert!(matches!(m.discriminate(&x), Err(Error::Resolution { .. })));
        let x = ImageArray::filled(32, 32, PixelRange::UnitSigned, 0.0).unwrap();
        assert!(matches!(
            m.embed_fixed(&x, &WatermarkPayload::zeros(7)),
            Err(Error::PayloadLength { .. })
        ));
        assert!(m.preprocess_fuse(&x, &w, 9).is_err());
    }

    #[test]
    fn fusion_depends_on_payload_everywhere() {
        let m = CodecModel::new(small(), 4).unwrap();
        let x = SyntheticImages::new(32, 3).image(1).to_range(PixelRange::UnitSigned);
        let f0 = m.preprocess_fuse(&x, &WatermarkPayload::zeros(8), 8).unwrap();
        let f1 = m.preprocess_fuse(&x, &WatermarkPayload::ones(8), 8).unwrap();
        assert_eq!(f0.size(), vec![1, 8, 32, 32]);
        let diff = (&f0 - &f1).abs();
        assert!(diff.sum(Kind::Float).double_value(&[]) > 0.0);
        // Payload tiles are 2x2 at 32px with a 16x16 grid.
        let per_tile =
            diff.amax([1i64].as_slice(), false)
                .unsqueeze(1)
                .max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false);
        assert!(per_tile.min().double_value(&[]) > 0.0);
    }

    #[test]
    fn postprocess_contract() {
        let m = CodecModel::new(small(), 5).unwrap();
        let feats = Tensor::from_slice(&(0..8 * 5 * 7).map(|i| (i as f32 - 100.0) * 50.0).collect::<Vec<_>>())
            .view([1, 8, 5, 7]);
        let out = m.postprocess(&feats).unwrap();
        assert_eq!((out.height(), out.width()), (5, 7));
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(m
            .postprocess(&Tensor::zeros([1, 5, 4, 4], (Kind::Float, Device::Cpu)))
            .is_err());
    }

    #[test]
    fn extractor_families_build_and_emit_probabilities() {
        let x = SyntheticImages::new(32, 3).image(2).to_range(PixelRange::UnitSigned);
        for fam in ExtractorFamily::ALL {
            let m = CodecModel::new(
                CodecConfig {
                    extractor_family: fam,
                    ..small()
                },
                3,
            )
            .unwrap();
            let p = m.extract(&x).unwrap();
            assert_eq!(p.len(), 8, "{fam:?}");
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{fam:?}");
        }
    }

    #[test]
    fn critic_is_deterministic() {
        let m = CodecModel::new(small(), 6).unwrap();
        let x = SyntheticImages::new(32, 3).image(3).to_range(PixelRange::UnitSigned);
        assert_eq!(m.discriminate(&x).unwrap(), m.discriminate(&x).unwrap());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = CodecModel::new(small(), 9).unwrap();
        let b = CodecModel::new(small(), 9).unwrap();
        for (name, t) in a.gen_vs.variables() {
            let u = &b.gen_vs.variables()[&name];
            assert!(t.equal(u), "{name}");
        }
    }

    #[test]
    fn archive_round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.safetensors");
        let a = CodecModel::new(small(), 4).unwrap();
        a.save(&path).unwrap();
        let b = CodecModel::load(&path).unwrap();
        assert_eq!(a.config(), b.config());
        assert_eq!(a.parameter_hash(), b.parameter_hash());
        let x = SyntheticImages::new(32, 2).image(0).to_range(PixelRange::UnitSigned);
        let w = WatermarkPayload::ones(8);
        assert_eq!(a.embed_fixed(&x, &w).unwrap(), b.embed_fixed(&x, &w).unwrap());
        assert_ne!(
            a.parameter_hash(),
            CodecModel::new(small(), 5).unwrap().parameter_hash()
        );
    }
}
