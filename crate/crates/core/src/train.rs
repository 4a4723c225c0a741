//! Accuracy-triggered training curriculum for the codec.
//!
//! Stage 0 trains on one fixed image batch with fresh payloads, stage 1 on
//! random batches, stage 2 adds the noise model, stage 3 adds the critic and
//! ramps `alpha` linearly to `alpha_max`. A stage advances once the batch bit
//! accuracy reaches its threshold on `patience` consecutive batches.
//!
//! Randomness for batch order, payloads and noise is derived from the master
//! seed and the iteration or epoch index, so a resumed run replays the same
//! sequence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::image::{ImageArray, PixelRange, WatermarkPayload};
use crate::losses::{loss_gan_gp, Critic, GpMode, LossBreakdown, LossWeights, Objectives};
use crate::metrics;
use crate::nets::{CodecConfig, CodecModel, CODEC_KIND};
use crate::noise::{perturb_tensor, NoiseSpec, Severity, SeverityConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::synth::SyntheticImages;

pub const STAGE_THRESHOLDS: [f64; 3] = [0.90, 0.95, 0.98];
pub const ALPHA_INIT: f64 = 0.05;
pub const FINAL_STAGE: u8 = 3;

/// Curriculum position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: u8,
    pub iteration: u64,
    pub alpha: f64,
    pub alpha_max: f64,
    pub thresholds: [f64; 3],
    pub ramp_iters: u64,
    /// Stage-3 iterations completed, which drives the ramp.
    pub ramp_done: u64,
    pub patience: u32,
    /// Consecutive batches at or above the next threshold.
    pub streak: u32,
    pub epoch: u64,
    pub best_val_acc: f64,
}

impl TrainState {
    pub fn new(alpha_max: f64, ramp_iters: u64, patience: u32) -> Self {
        Self {
            stage: 0,
            iteration: 0,
            alpha: ALPHA_INIT,
            alpha_max: alpha_max.max(ALPHA_INIT),
            thresholds: STAGE_THRESHOLDS,
            ramp_iters: ramp_iters.max(1),
            ramp_done: 0,
            patience: patience.max(1),
            streak: 0,
            epoch: 0,
            best_val_acc: 0.0,
        }
    }

    pub fn uses_fixed_batch(&self) -> bool {
        self.stage == 0
    }

    pub fn noise_enabled(&self) -> bool {
        self.stage >= 2
    }

    pub fn gan_enabled(&self) -> bool {
        self.stage >= FINAL_STAGE
    }

    /// State after observing one batch accuracy: counts toward the next
    /// threshold below stage 3, advances the alpha ramp in stage 3.
    pub fn advance_stage(&self, batch_bit_acc: f64) -> TrainState {
        let mut s = self.clone();
        if s.stage >= FINAL_STAGE {
            s.ramp_done = (s.ramp_done + 1).min(s.ramp_iters);
            s.alpha = ALPHA_INIT + (s.alpha_max - ALPHA_INIT) * s.ramp_done as f64 / s.ramp_iters as f64;
            return s;
        }
        if batch_bit_acc >= s.thresholds[s.stage as usize] {
            s.streak += 1;
            if s.streak >= s.patience {
                s.stage += 1;
                s.streak = 0;
            }
        } else {
            s.streak = 0;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// How the best checkpoint is chosen among per-epoch validations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BestBy {
    /// Highest clean bit accuracy.
    Accuracy,
    /// Highest PSNR among epochs whose clean accuracy reaches the floor,
    /// falling back to accuracy while none does.
    PsnrAboveAccuracy { floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Learning rate per image; the optimiser uses `base_lr * batch_size`.
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub alpha_max: f64,
    pub noise_severity: Severity,
    pub dataset_dir: Option<PathBuf>,
    pub toy_preset: bool,
    pub seed: u64,
    pub codec: CodecConfig,
    /// Loss term weights; `alpha` and `alpha_max` here are ignored.
    pub weights: LossWeights,
    pub thresholds: [f64; 3],
    pub ramp_iters: u64,
    pub patience: u32,
    /// Covers generated when no dataset folder is given.
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    /// Validation share of a dataset folder.
    pub val_fraction: f64,
    /// Hard cap on iterations; the cosine schedule spans `min(cap, epochs * iters_per_epoch)`.
    pub max_iters: Option<u64>,
    pub weight_decay: f64,
    pub severity_table: Option<PathBuf>,
    pub best_by: BestBy,
    /// Loss CSV row interval.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale acceptance preset.
    pub fn toy() -> Self {
        Self {
            epochs: 80,
            batch_size: 16,
            base_lr: 6.25e-5,
            lr_schedule: LrSchedule::Cosine,
            alpha_max: 15.0,
            noise_severity: Severity::Medium,
            dataset_dir: None,
            toy_preset: true,
            seed: 0,
            codec: CodecConfig::toy(),
            // An unscaled critic term overwhelms the small quality terms of
            // a 64px run and wrecks image quality once it switches on.
            weights: LossWeights {
                beta_gan: 0.01,
                gp_mode: GpMode::Interpolated,
                ..LossWeights::default()
            },
            thresholds: STAGE_THRESHOLDS,
            ramp_iters: 1000,
            patience: 3,
            synthetic_train: 500,
            synthetic_val: 50,
            val_fraction: 0.01,
            max_iters: None,
            weight_decay: 0.01,
            severity_table: None,
            best_by: BestBy::PsnrAboveAccuracy { floor: 0.95 },
            log_every: 1,
        }
    }

    /// Full-scale recipe: 256px, 100 bits, batch 32, 150 epochs.
    pub fn full() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            base_lr: 4e-6,
            alpha_max: 20.0,
            toy_preset: false,
            codec: CodecConfig::full(),
            ramp_iters: 10_000,
            weights: LossWeights::default(),
            ..Self::toy()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.alpha_max < ALPHA_INIT {
            return Err(Error::Config(format!("alpha_max must be at least {ALPHA_INIT}")));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        self.loss_weights(ALPHA_INIT).validate()?;
        self.codec.validate()
    }

    pub fn loss_weights(&self, alpha: f64) -> LossWeights {
        LossWeights {
            alpha,
            alpha_max: self.alpha_max,
            ..self.weights
        }
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        let table = match &self.severity_table {
            Some(p) => SeverityConfig::load(p)?,
            None => SeverityConfig::builtin(),
        };
        Ok(NoiseSpec::from_config(&table, self.noise_severity))
    }
}

/// Cosine-annealed learning rate at `iteration` of `total`.
pub fn learning_rate(schedule: LrSchedule, peak: f64, iteration: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => peak,
        LrSchedule::Cosine => {
            let t = (iteration as f64 / total.max(1) as f64).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

pub(crate) fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_ORDER: u64 = 1;
const STREAM_PAYLOAD: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_GP: u64 = 4;
const STREAM_FIXED: u64 = 5;

/// `B x l` uniformly random bits for one iteration.
pub fn sample_payloads(seed: u64, iteration: u64, batch: usize, bits: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, STREAM_PAYLOAD, iteration));
    let v: Vec<f32> = (0..batch * bits)
        .map(|_| f32::from(u8::from(rng.gen::<bool>())))
        .collect();
    Tensor::from_slice(&v).view([batch as i64, bits as i64])
}

/// Native-resolution covers as one `M x 3 x n x n` tensor in `[-1, 1]`.
#[derive(Debug)]
pub struct Dataset {
    images: Tensor,
}

impl Dataset {
    pub fn from_images(images: &[ImageArray], size: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("no images".into()));
        }
        let ts: Vec<Tensor> = images
            .iter()
            .map(|im| fit_square(&im.to_range(PixelRange::UnitSigned).to_tensor(), size))
            .collect();
        Ok(Self {
            images: Tensor::cat(&ts, 0),
        })
    }

    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        let s = SyntheticImages::new(size, seed);
        Self::from_images(&s.take(count), size)
    }

    pub fn len(&self) -> usize {
        self.images.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.images
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let idx: Vec<i64> = indices.iter().map(|&i| i as i64).collect();
        self.images.index_select(0, &Tensor::from_slice(&idx))
    }

    pub fn image(&self, i: usize) -> Result<ImageArray> {
        ImageArray::from_tensor(&self.images.narrow(0, i as i64, 1), PixelRange::UnitSigned)
    }
}

/// Centre-crops to a square and resamples to `size` with antialiasing.
fn fit_square(t: &Tensor, size: usize) -> Tensor {
    let s = t.size();
    let (h, w) = (s[2], s[3]);
    let side = h.min(w);
    let c = t.narrow(2, (h - side) / 2, side).narrow(3, (w - side) / 2, side);
    if side as usize == size {
        c
    } else {
        c.internal_upsample_bilinear2d_aa([size as i64, size as i64], false, None, None)
            .clamp(-1.0, 1.0)
    }
}

/// Sorted image files (png, jpg, jpeg) directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Train and validation sets for a configuration.
pub fn load_datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let n = config.codec.image_size;
    match &config.dataset_dir {
        None => Ok((
            Dataset::synthetic(config.synthetic_train, n, config.seed)?,
            Dataset::synthetic(config.synthetic_val, n, config.seed.wrapping_add(0x7a1))?,
        )),
        Some(dir) => {
            let files = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("no images in {}", dir.display())));
            }
            let n_val = ((files.len() as f64 * config.val_fraction).round() as usize)
                .max(1)
                .min(files.len() - 1);
            let images = files.iter().map(ImageArray::load).collect::<Result<Vec<_>>>()?;
            let (val, train) = images.split_at(n_val);
            if train.len() < config.batch_size {
                return Err(Error::Dataset(format!(
                    "{} training images, batch size {}",
                    train.len(),
                    config.batch_size
                )));
            }
            Ok((Dataset::from_images(train, n)?, Dataset::from_images(val, n)?))
        }
    }
}

/// Diagnostics of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iteration: u64,
    pub stage: u8,
    pub alpha: f64,
    pub lr: f64,
    pub batch_bit_acc: f64,
    pub breakdown: LossBreakdown,
    pub critic_loss: Option<f64>,
    pub noise_applied: bool,
    /// Whether the extractor saw exactly the embedder output.
    pub extractor_saw_encoded: bool,
    pub stage_changed: Option<(u8, u8)>,
}

/// Validation metrics on a fixed image set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub psnr_db: f64,
    pub clean_acc: f64,
    pub noised_acc: f64,
}

/// Mean PSNR (byte-quantised encoded images), clean and noised bit accuracy
/// of `model` on `images` with payloads and noise drawn from `seed`.
pub fn evaluate_codec(model: &CodecModel, images: &Tensor, spec: &NoiseSpec, seed: u64) -> Result<ValMetrics> {
    let n = images.size()[0];
    let bits = model.config().bit_length;
    let kind = model.kind();
    let chunk = 25;
    let (mut psnr_sum, mut clean, mut noised) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let x = images.narrow(0, start, len).to_kind(kind);
        let w = sample_payloads(seed, start as u64, len as usize, bits).to_kind(kind);
        let y = tch::no_grad(|| model.embed_tensor(&x, &w));
        // Quantise to bytes as a saved image would be.
        let yq = ((&y + 1.0) * 127.5).round() / 127.5 - 1.0;
        for i in 0..len {
            let a = ImageArray::from_tensor(&x.narrow(0, i, 1), PixelRange::UnitSigned)?;
            let b = ImageArray::from_tensor(&yq.narrow(0, i, 1), PixelRange::UnitSigned)?;
            psnr_sum += metrics::report_psnr(metrics::psnr(&a, &b)?);
        }
        let acc = |p: &Tensor| -> f64 {
            p.ge(0.5)
                .to_kind(Kind::Float)
                .eq_tensor(&w.to_kind(Kind::Float))
                .to_kind(Kind::Double)
                .mean(Kind::Double)
                .double_value(&[])
        };
        clean += acc(&tch::no_grad(|| model.extract_tensor(&yq))) * len as f64;
        let yn = if spec.is_off() {
            yq.shallow_clone()
        } else {
            perturb_tensor(&yq, spec, mix(seed, STREAM_NOISE, start as u64))?.0
        };
        noised += acc(&tch::no_grad(|| model.extract_tensor(&yn))) * len as f64;
        start += len;
    }
    let n = n as f64;
    Ok(ValMetrics {
        psnr_db: psnr_sum / n,
        clean_acc: clean / n,
        noised_acc: noised / n,
    })
}

/// Files written by [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub val_csv: PathBuf,
    pub stage_log: PathBuf,
    pub final_metrics: ValMetrics,
    pub best_metrics: ValMetrics,
    pub final_state: TrainState,
}

const TRAIN_KIND_KEY: &str = "train_state";

/// Owns the model, optimisers and curriculum state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CodecModel,
    pub state: TrainState,
    gen_opt: AdamW,
    critic_opt: AdamW,
    objectives: Objectives,
    noise: NoiseSpec,
    train_set: Dataset,
    val_set: Dataset,
    fixed_batch: Vec<usize>,
    best_score: f64,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train_set, val_set) = load_datasets(&config)?;
        Self::with_datasets(config, train_set, val_set)
    }

    pub fn with_datasets(config: TrainConfig, train_set: Dataset, val_set: Dataset) -> Result<Self> {
        config.validate()?;
        if train_set.len() < config.batch_size {
            return Err(Error::Dataset(format!(
                "{} training images, batch size {}",
                train_set.len(),
                config.batch_size
            )));
        }
        let model = CodecModel::new(config.codec.clone(), config.seed)?;
        let opt_cfg = AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let gen_opt = AdamW::new(&model.gen_vs, opt_cfg);
        let critic_opt = AdamW::new(&model.critic_vs, opt_cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_FIXED, 0)));
        order.truncate(config.batch_size);
        Ok(Self {
            state: TrainState::new(config.alpha_max, config.ramp_iters, config.patience),
            noise: config.noise_spec()?,
            model,
            gen_opt,
            critic_opt,
            objectives: Objectives::new(),
            train_set,
            val_set,
            fixed_batch: order,
            best_score: f64::NEG_INFINITY,
            config,
        })
    }

    pub fn iters_per_epoch(&self) -> u64 {
        (self.train_set.len() / self.config.batch_size).max(1) as u64
    }

    pub fn total_iters(&self) -> u64 {
        let by_epochs = self.config.epochs * self.iters_per_epoch();
        self.config.max_iters.map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn validation_set(&self) -> &Dataset {
        &self.val_set
    }

    pub fn noise_spec(&self) -> &NoiseSpec {
        &self.noise
    }

    /// Image indices of the batch for `iteration` given the current stage.
    pub fn batch_indices(&self, iteration: u64) -> Vec<usize> {
        if self.state.uses_fixed_batch() {
            return self.fixed_batch.clone();
        }
        let ipe = self.iters_per_epoch();
        let epoch = iteration / ipe;
        let pos = (iteration % ipe) as usize;
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            self.config.seed,
            STREAM_ORDER,
            epoch,
        )));
        let b = self.config.batch_size;
        order[pos * b..(pos + 1) * b].to_vec()
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(
            self.config.lr_schedule,
            self.config.base_lr * self.config.batch_size as f64,
            self.state.iteration,
            self.total_iters(),
        )
    }

    /// One curriculum step: critic update (stage 3), generator update,
    /// stage bookkeeping.
    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        let seed = self.config.seed;
        let kind = self.model.kind();
        let x = self.train_set.batch(&self.batch_indices(it)).to_kind(kind);
        let b = x.size()[0] as usize;
        let w = sample_payloads(seed, it, b, self.config.codec.bit_length).to_kind(kind);
        let lr = self.current_lr();
        let weights = self.config.loss_weights(self.state.alpha);
        let gan = self.state.gan_enabled() && weights.beta_gan > 0.0;

        let mut critic_loss = None;
        if gan {
            let y = tch::no_grad(|| self.model.embed_tensor(&x, &w));
            self.critic_opt.zero_grad();
            let terms = loss_gan_gp(
                &x,
                &y,
                self.model.critic(),
                weights.gp_lambda,
                weights.gp_mode,
                mix(seed, STREAM_GP, it),
            )?;
            terms.critic.backward();
            let v = terms.critic.double_value(&[]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    iteration: it,
                    breakdown: format!("critic loss {v}"),
                });
            }
            self.critic_opt.step(lr);
            critic_loss = Some(v);
        }

        self.gen_opt.zero_grad();
        let y = self.model.embed_tensor(&x, &w);
        let noise_applied = self.state.noise_enabled() && !self.noise.is_off();
        let y_in = if noise_applied {
            perturb_tensor(&y, &self.noise, mix(seed, STREAM_NOISE, it))?.0
        } else {
            y.shallow_clone()
        };
        let extractor_saw_encoded = !noise_applied;
        let w_hat = self.model.extract_tensor(&y_in);
        let critic: Option<&dyn Critic> = if gan { Some(self.model.critic()) } else { None };
        let loss = self.objectives.loss_total(&x, &y, &w, &w_hat, &weights, critic)?;
        if !loss.breakdown.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                breakdown: loss.breakdown.to_string(),
            });
        }
        let batch_bit_acc = tch::no_grad(|| {
            w_hat
                .ge(0.5)
                .to_kind(Kind::Float)
                .eq_tensor(&w.to_kind(Kind::Float))
                .to_kind(Kind::Double)
                .mean(Kind::Double)
                .double_value(&[])
        });
        loss.total.backward();
        self.gen_opt.step(lr);
        if gan {
            // Generator backprop also reaches the critic; discard it.
            self.critic_opt.zero_grad();
        }

        let before = self.state.stage;
        let alpha = self.state.alpha;
        let mut next = self.state.advance_stage(batch_bit_acc);
        next.iteration = it + 1;
        next.epoch = (it + 1) / self.iters_per_epoch();
        let stage_changed = (next.stage != before).then_some((before, next.stage));
        self.state = next;
        Ok(StepReport {
            iteration: it,
            stage: before,
            alpha,
            lr,
            batch_bit_acc,
            breakdown: loss.breakdown,
            critic_loss,
            noise_applied,
            extractor_saw_encoded,
            stage_changed,
        })
    }

    pub fn validate(&self) -> Result<ValMetrics> {
        evaluate_codec(
            &self.model,
            self.val_set.tensor(),
            &self.noise,
            self.config.seed ^ 0x5a1,
        )
    }

    /// Full training state: model, optimisers, curriculum and config.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = self.model.to_archive()?;
        a.set_meta("train_config", self.config.to_toml()?);
        a.set_meta(TRAIN_KIND_KEY, toml::to_string(&self.state)?);
        a.set_meta("gen_opt_steps", self.gen_opt.steps_taken());
        a.set_meta("critic_opt_steps", self.critic_opt.steps_taken());
        a.set_meta("best_score", self.best_score);
        a.add(self.gen_opt.state_tensors("opt_gen/"));
        a.add(self.critic_opt.state_tensors("opt_critic/"));
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let a = Archive::load(path)?;
        a.expect_kind(CODEC_KIND)?;
        let config = TrainConfig::from_toml_str(a.meta("train_config")?)?;
        let (train_set, val_set) = load_datasets(&config)?;
        let mut t = Self::with_datasets(config, train_set, val_set)?;
        a.load_store("gen/", &t.model.gen_vs)?;
        a.load_store("critic/", &t.model.critic_vs)?;
        let steps = |k: &str| -> Result<u64> { a.meta(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad {k}"))) };
        t.gen_opt.load_state(&a.tensors, "opt_gen/", steps("gen_opt_steps")?)?;
        t.critic_opt
            .load_state(&a.tensors, "opt_critic/", steps("critic_opt_steps")?)?;
        t.state = toml::from_str(a.meta(TRAIN_KIND_KEY)?)?;
        t.best_score = a.meta("best_score")?.parse().unwrap_or(f64::NEG_INFINITY);
        Ok(t)
    }

    fn score(&self, m: &ValMetrics) -> f64 {
        match self.config.best_by {
            BestBy::Accuracy => m.clean_acc,
            BestBy::PsnrAboveAccuracy { floor } => {
                if m.clean_acc >= floor {
                    // Only checkpoints from the final stage compete on PSNR.
                    if self.state.stage >= FINAL_STAGE {
                        2.0 + m.psnr_db
                    } else {
                        1.0 + m.clean_acc
                    }
                } else {
                    m.clean_acc
                }
            }
        }
    }

    /// Runs the curriculum until the iteration budget is spent, writing logs
    /// and checkpoints into `out_dir`.
    pub fn run(&mut self, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
        let out = out_dir.as_ref();
        std::fs::create_dir_all(out)?;
        let paths = TrainOutcome {
            best_checkpoint: out.join("best.safetensors"),
            last_checkpoint: out.join("last.safetensors"),
            loss_csv: out.join("loss.csv"),
            val_csv: out.join("validation.csv"),
            stage_log: out.join("stages.log"),
            final_metrics: ValMetrics {
                psnr_db: 0.0,
                clean_acc: 0.0,
                noised_acc: 0.0,
            },
            best_metrics: ValMetrics {
                psnr_db: 0.0,
                clean_acc: 0.0,
                noised_acc: 0.0,
            },
            final_state: self.state.clone(),
        };
        let resuming = self.state.iteration > 0;
        let open = |p: &Path, header: &str| -> Result<BufWriter<File>> {
            let exists = resuming && p.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(exists)
                .write(true)
                .truncate(!exists)
                .open(p)?;
            let mut w = BufWriter::new(f);
            if !exists {
                writeln!(w, "{header}")?;
            }
            Ok(w)
        };
        let mut loss_csv = open(
            &paths.loss_csv,
            "iter,stage,alpha,L_yuv,L_lpips,L_ffl,L_gan,L_recovery,L_total",
        )?;
        let mut val_csv = open(
            &paths.val_csv,
            "epoch,iter,stage,alpha,psnr_db,clean_bit_acc,noised_bit_acc",
        )?;
        let mut stage_log = open(&paths.stage_log, "# stage transitions")?;

        let total = self.total_iters();
        let ipe = self.iters_per_epoch();
        let mut best = paths.best_metrics;
        let mut last = best;
        while self.state.iteration < total {
            let r = self.step()?;
            if r.iteration % self.config.log_every.max(1) == 0 {
                let b = &r.breakdown;
                writeln!(
                    loss_csv,
                    "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                    r.iteration, r.stage, r.alpha, b.yuv, b.lpips, b.ffl, b.gan, b.recovery, b.total
                )?;
            }
            if let Some((from, to)) = r.stage_changed {
                writeln!(
                    stage_log,
                    "iteration {} stage {from} -> {to} batch_bit_acc {:.4}",
                    r.iteration, r.batch_bit_acc
                )?;
                stage_log.flush()?;
                info!("iteration {}: stage {from} -> {to}", r.iteration);
                self.save(out.join(format!("stage{to}.safetensors")))?;
            }
            let done = self.state.iteration;
            if done % ipe == 0 || done == total {
                let m = self.validate()?;
                last = m;
                self.state.best_val_acc = self.state.best_val_acc.max(m.clean_acc);
                writeln!(
                    val_csv,
                    "{},{},{},{},{:.4},{:.4},{:.4}",
                    self.state.epoch, done, self.state.stage, self.state.alpha, m.psnr_db, m.clean_acc, m.noised_acc
                )?;
                val_csv.flush()?;
                loss_csv.flush()?;
                info!(
                    "epoch {} iter {done} stage {} alpha {:.3}: psnr {:.2} acc {:.4} noised {:.4}",
                    self.state.epoch, self.state.stage, self.state.alpha, m.psnr_db, m.clean_acc, m.noised_acc
                );
                let score = self.score(&m);
                if score >= self.best_score {
                    self.best_score = score;
                    best = m;
                    self.save(&paths.best_checkpoint)?;
                }
                self.save(&paths.last_checkpoint)?;
            }
        }
        loss_csv.flush()?;
        if !paths.best_checkpoint.exists() {
            self.save(&paths.best_checkpoint)?;
        }
        Ok(TrainOutcome {
            final_metrics: last,
            best_metrics: best,
            final_state: self.state.clone(),
            ..paths
        })
    }
}

/// Trains from scratch with `config`, writing into `out_dir`.
pub fn train(config: TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    Trainer::new(config)?.run(out_dir)
}

/// Encodes each validation image with a random payload.
pub fn encode_batch(
    model: &CodecModel,
    images: &[ImageArray],
    seed: u64,
) -> Result<Vec<(ImageArray, WatermarkPayload)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|x| {
            let w = WatermarkPayload::random(model.config().bit_length, &mut rng);
            Ok((model.embed_fixed(x, &w)?, w))
        })
        .collect()
}

/// Summary of a finished run kept next to its checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best: ValMetrics,
    pub last: ValMetrics,
    pub final_stage: u8,
    pub iterations: u64,
}

fn config_digest(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Runs `f` in `root/<name>-<digest of key>` unless a `summary.toml` from an
/// earlier call with the same key is already there. A file lock serialises
/// concurrent callers asking for the same run.
pub(crate) fn cached<T: Serialize + DeserializeOwned>(
    root: &Path,
    name: &str,
    key: &str,
    f: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    let tag = format!("{name}-{:016x}", config_digest(key));
    std::fs::create_dir_all(root)?;
    let lock = File::create(root.join(format!("{tag}.lock")))?;
    lock.lock()?;
    let dir = root.join(&tag);
    let summary_path = dir.join("summary.toml");
    if summary_path.exists() {
        return Ok(toml::from_str(&std::fs::read_to_string(&summary_path)?)?);
    }
    let summary = f(&dir)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("key.toml"), key)?;
    std::fs::write(&summary_path, toml::to_string(&summary)?)?;
    Ok(summary)
}

/// Trains `config` under `root/<name>-<digest>` unless a finished run with
/// the same configuration is already there.
pub fn train_cached(config: &TrainConfig, root: impl AsRef<Path>, name: &str) -> Result<RunSummary> {
    cached(root.as_ref(), name, &config.to_toml()?, |dir| {
        let out = train(config.clone(), dir)?;
        Ok(RunSummary {
            best_checkpoint: out.best_checkpoint,
            last_checkpoint: out.last_checkpoint,
            best: out.best_metrics,
            last: out.final_metrics,
            final_stage: out.final_state.stage,
            iterations: out.final_state.iteration,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            synthetic_train: 8,
            synthetic_val: 4,
            epochs: 2,
            codec: CodecConfig {
                image_size: 16,
                bit_length: 4,
                internal_dim: 8,
                backbone_depth: 1,
                extractor_width: 8,
                critic_width: 4,
                ..CodecConfig::toy()
            },
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn stage_triggers() {
        let s = TrainState::new(20.0, 10_000, 1);
        assert_eq!(s.advance_stage(0.91).stage, 1);
        assert_eq!(s.advance_stage(0.89).stage, 0);
        let s2 = TrainState { stage: 2, ..s.clone() };
        assert_eq!(s2.advance_stage(0.94).stage, 2);
        assert_eq!(s2.advance_stage(0.98).stage, 3);
        let s1 = TrainState { stage: 1, ..s };
        assert_eq!(s1.advance_stage(0.95).stage, 2);
        assert_eq!(s1.advance_stage(0.949).stage, 1);
    }

    #[test]
    fn patience_requires_consecutive_batches() {
        let mut s = TrainState::new(20.0, 10_000, 3);
        for acc in [0.95, 0.95, 0.5, 0.95, 0.95] {
            s = s.advance_stage(acc);
            assert_eq!(s.stage, 0);
        }
        s = s.advance_stage(0.99);
        assert_eq!(s.stage, 1);
        assert_eq!(s.streak, 0);
    }

    #[test]
    fn alpha_ramp_is_linear_and_clamped() {
        let mut s = TrainState {
            stage: 3,
            ..TrainState::new(20.0, 10_000, 3)
        };
        let step = (20.0 - 0.05) / 10_000.0;
        let mut prev = s.alpha;
        for _ in 0..5000 {
            s = s.advance_stage(0.0);
            assert!((s.alpha - prev - step).abs() < 1e-9);
            prev = s.alpha;
        }
        assert!((s.alpha - (0.05 + 0.5 * (20.0 - 0.05))).abs() < 1e-12);
        for _ in 0..6000 {
            s = s.advance_stage(1.0);
        }
        assert_eq!(s.alpha, 20.0);
        assert_eq!(s.stage, 3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(learning_rate(LrSchedule::Cosine, 1e-3, 0, 100), 1e-3);
        assert!((learning_rate(LrSchedule::Cosine, 1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(learning_rate(LrSchedule::Cosine, 1e-3, 100, 100).abs() < 1e-15);
        assert_eq!(learning_rate(LrSchedule::Constant, 1e-3, 70, 100), 1e-3);
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let c = TrainConfig::toy();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml().unwrap()).unwrap(), c);
        let partial = TrainConfig::from_toml_str("epochs = 3\nalpha_max = 5.0\n").unwrap();
        assert_eq!((partial.epochs, partial.alpha_max, partial.batch_size), (3, 5.0, 16));
        assert!(TrainConfig::from_toml_str("epochs = 0").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 0").is_err());
        let f = TrainConfig::full();
        assert_eq!(
            (f.epochs, f.batch_size, f.base_lr, f.ramp_iters),
            (150, 32, 4e-6, 10_000)
        );
    }

    #[test]
    fn payload_bits_are_uniform() {
        // Chi-square over 10^4 bits, one degree of freedom: p > 0.01 <=> stat < 6.635.
        // A fair source fails a single test 1% of the time, so 20 independent
        // iterations may see at most 2 rejections (binomial tail < 0.1%).
        let n = 10_000.0;
        let rejections = (0..20)
            .filter(|&it| {
                let ones = sample_payloads(3, it, 625, 16).sum(Kind::Double).double_value(&[]);
                2.0 * (ones - n / 2.0).powi(2) / (n / 2.0) >= 6.635
            })
            .count();
        assert!(rejections <= 2, "{rejections}");
        assert!(!sample_payloads(3, 0, 4, 16).equal(&sample_payloads(3, 1, 4, 16)));
    }

    #[test]
    fn empty_dataset_folder_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig {
            dataset_dir: Some(dir.path().to_path_buf()),
            ..tiny_config()
        };
        assert!(matches!(Trainer::new(c), Err(Error::Dataset(_))));
    }

    #[test]
    fn gating_before_noise_and_gan_stages() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let critic_before = t.model.critic_vs.variables()["critic.0.weight"].copy();
        for _ in 0..3 {
            let r = t.step().unwrap();
            if r.stage < 2 {
                assert!(r.extractor_saw_encoded && !r.noise_applied);
            }
            if r.stage < 3 {
                assert_eq!(r.breakdown.gan, 0.0);
                assert!(r.critic_loss.is_none());
            }
        }
        assert!(t.model.critic_vs.variables()["critic.0.weight"].equal(&critic_before));
    }

    #[test]
    fn forced_stages_switch_noise_and_gan_on() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.state.stage = 2;
        let r = t.step().unwrap();
        assert!(r.noise_applied && !r.extractor_saw_encoded && r.critic_loss.is_none());
        t.state.stage = 3;
        let critic_before = t.model.critic_vs.variables()["critic.0.weight"].copy();
        let r = t.step().unwrap();
        assert!(r.critic_loss.is_some() && r.breakdown.gan != 0.0);
        assert!(!t.model.critic_vs.variables()["critic.0.weight"].equal(&critic_before));
    }

    #[test]
    fn resume_reproduces_next_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(tiny_config()).unwrap();
        a.state.stage = 3;
        for _ in 0..2 {
            a.step().unwrap();
        }
        let path = dir.path().join("ckpt.safetensors");
        a.save(&path).unwrap();
        let mut b = Trainer::resume(&path).unwrap();
        assert_eq!(a.state, b.state);
        let ra = a.step().unwrap();
        let rb = b.step().unwrap();
        assert!(
            (ra.breakdown.total - rb.breakdown.total).abs() <= 1e-5,
            "{} vs {}",
            ra.breakdown,
            rb.breakdown
        );
    }

    #[test]
    fn run_writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(tiny_config(), dir.path()).unwrap();
        for p in [
            &out.best_checkpoint,
            &out.last_checkpoint,
            &out.loss_csv,
            &out.val_csv,
            &out.stage_log,
        ] {
            assert!(p.exists(), "{}", p.display());
        }
        let loss = std::fs::read_to_string(&out.loss_csv).unwrap();
        assert_eq!(
            loss.lines().next().unwrap(),
            "iter,stage,alpha,L_yuv,L_lpips,L_ffl,L_gan,L_recovery,L_total"
        );
        assert_eq!(loss.lines().count(), 1 + 4);
        CodecModel::load(&out.best_checkpoint).unwrap();
    }

    #[test]
    fn cached_run_is_reused_and_keyed_by_config() {
        let dir = tempfile::tempdir().unwrap();
        let a = train_cached(&tiny_config(), dir.path(), "t").unwrap();
        let stamp = std::fs::metadata(&a.last_checkpoint).unwrap().modified().unwrap();
        let again = train_cached(&tiny_config(), dir.path(), "t").unwrap();
        assert_eq!(a, again);
        assert_eq!(
            std::fs::metadata(&a.last_checkpoint).unwrap().modified().unwrap(),
            stamp
        );
        let other = train_cached(
            &TrainConfig {
                seed: 1,
                ..tiny_config()
            },
            dir.path(),
            "t",
        )
        .unwrap();
        assert_ne!(other.last_checkpoint.parent(), a.last_checkpoint.parent());
    }
}
