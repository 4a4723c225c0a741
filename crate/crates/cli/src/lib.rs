//! Command-line workflows over `imprint-core`.
//!
//! Settings resolve as flags, then the `--config` file, then the toy
//! defaults. Exit codes: 0 ok, 2 usage, 3 I/O, 4 numerical failure.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use imprint_core::eval::{self, AttackConfig, SweepOptions};
use imprint_core::metrics;
use imprint_core::removal::{self, RemovalConfig, RemovalModel};
use imprint_core::scaling::{self, InterpMode, ScaleParams};
use imprint_core::train::{self, TrainConfig, Trainer};
use imprint_core::{CodecModel, Error, ImageArray, PixelRange, Severity, WatermarkPayload};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "imprint", version, about = "Invisible image watermarking")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with defaults for this run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Codec checkpoint (remover checkpoint for `remove`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Residual strength for embedding and removal.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a codec.
    Train(TrainArgs),
    /// Train a watermark remover against a frozen codec.
    TrainRm(TrainRmArgs),
    /// Embed a payload into an image of any size.
    Encode(EncodeArgs),
    /// Recover the payload from an image.
    Decode(DecodeArgs),
    /// Strip a watermark with a trained remover.
    Remove(RemoveArgs),
    /// Repeatedly re-watermark one image.
    Rewatermark(RewatermarkArgs),
    /// Evaluation studies.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    #[arg(long)]
    pub severity: Option<Severity>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub bit_length: Option<usize>,
    /// Use the full-scale preset instead of the toy one.
    #[arg(long)]
    pub full: bool,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainRmArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Payload as a 0/1 string of the model's length, or hex.
    #[arg(long)]
    pub payload: String,
    /// Also write the residual amplified 20 times.
    #[arg(long)]
    pub residual: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Report bit accuracy against this payload.
    #[arg(long)]
    pub reference: Option<String>,
}

#[derive(Debug, Args)]
pub struct RemoveArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct RewatermarkArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub use_remover: Toggle,
    /// Remover checkpoint, required with `--use-remover on`.
    #[arg(long)]
    pub remover: Option<PathBuf>,
    /// Per-round CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for each round's image and amplified residual.
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Bit accuracy under each noise source and severity.
    Robustness(RobustnessArgs),
    /// I-FGSM attack on encoded images.
    Attack(AttackArgs),
    /// Train one codec per payload length.
    Bitlength(BitlengthArgs),
    /// PSNR of a similar and an unrelated pair across resolutions.
    PsnrStudy(PsnrStudyArgs),
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated severities.
    #[arg(long, value_delimiter = ',', default_values_t = [Severity::Low, Severity::Medium, Severity::High])]
    pub severity: Vec<Severity>,
    /// Run the codec directly on native-size images.
    #[arg(long)]
    pub native: bool,
    #[arg(long, default_value = "robustness")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// L-infinity budget in [0, 1] pixel units.
    #[arg(long, default_value_t = 8.0 / 255.0)]
    pub epsilon: f64,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: u64,
    #[arg(long)]
    pub native: bool,
}

#[derive(Debug, Args)]
pub struct BitlengthArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32])]
    pub lengths: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the trained codecs.
    #[arg(long)]
    pub work_dir: PathBuf,
    #[arg(long)]
    pub max_iters: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PsnrStudyArgs {
    /// Original image.
    #[arg(long)]
    pub image: PathBuf,
    /// Watermarked version of `--image`.
    #[arg(long)]
    pub watermarked: PathBuf,
    /// Unrelated image of the same size.
    #[arg(long)]
    pub other: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.125, 0.25, 0.5, 0.75, 1.0])]
    pub factors: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional settings file. Missing keys fall back to the toy presets.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub interp_mode: Option<InterpMode>,
    pub train: Option<TrainConfig>,
    pub removal: Option<RemovalConfig>,
}

/// A failure mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Io(_) => EXIT_IO,
            Failure::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io(_) | Error::Image(_) | Error::Csv(_) | Error::Checkpoint(_) | Error::Dataset(_) => Failure::Io(m),
            Error::NonFinite { .. } | Error::Torch(_) => Failure::Numerical(m),
            _ => Failure::Usage(m),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name), runs the command and
/// returns the exit code. Output lines go to `out`, errors to stderr.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

/// Settings after merging flags, file and defaults.
#[derive(Debug)]
struct Resolved {
    seed: u64,
    lambda: f64,
    interp: InterpMode,
    checkpoint: Option<PathBuf>,
    train: TrainConfig,
    removal: RemovalConfig,
}

fn resolve(cli: &Cli) -> CliResult<Resolved> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let lambda = cli
        .lambda
        .or(file.lambda)
        .unwrap_or(ScaleParams::default().lambda_strength);
    let mut train = file.train.unwrap_or_else(TrainConfig::toy);
    train.seed = seed;
    let mut removal = file.removal.unwrap_or_else(RemovalConfig::toy);
    removal.seed = seed;
    Ok(Resolved {
        seed,
        lambda,
        interp: file.interp_mode.unwrap_or(InterpMode::Bilinear),
        checkpoint: cli.checkpoint.clone().or(file.checkpoint),
        train,
        removal,
    })
}

impl Resolved {
    fn scale(&self) -> CliResult<ScaleParams> {
        let p = ScaleParams {
            lambda_strength: self.lambda,
            interp_mode: self.interp,
            identity_check: false,
        };
        p.validate()?;
        Ok(p)
    }

    fn checkpoint(&self) -> CliResult<&Path> {
        let p = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| Failure::Usage("--checkpoint is required".into()))?;
        if !p.exists() {
            return Err(Failure::Io(format!("checkpoint {} not found", p.display())));
        }
        Ok(p)
    }

    fn codec(&self) -> CliResult<CodecModel> {
        Ok(CodecModel::load(self.checkpoint()?)?)
    }
}

fn load_image(p: &Path) -> CliResult<ImageArray> {
    if !p.exists() {
        return Err(Failure::Io(format!("image {} not found", p.display())));
    }
    Ok(ImageArray::load(p)?)
}

fn load_dir(p: &Path) -> CliResult<Vec<ImageArray>> {
    let files = train::list_images(p)?;
    if files.is_empty() {
        return Err(Failure::Io(format!("no images in {}", p.display())));
    }
    files.iter().map(|f| Ok(ImageArray::load(f)?)).collect()
}

fn bits_string(w: &WatermarkPayload) -> String {
    w.bits().iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
}

fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let r = resolve(&cli)?;
    match cli.command {
        Command::Train(a) => cmd_train(&r, a, out),
        Command::TrainRm(a) => cmd_train_rm(&r, a, out),
        Command::Encode(a) => {
            let codec = r.codec()?;
            let x = load_image(&a.image)?;
            let w = WatermarkPayload::parse(&a.payload, codec.config().bit_length)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let y = scaling::embed_scaled(&codec, &x, &w, &r.scale()?)?;
            y.save(&a.out)?;
            if let Some(p) = &a.residual {
                eval::save_residual_png(&x, &y, 20.0, p)?;
            }
            let psnr = metrics::psnr(&x.to_range(PixelRange::Byte).quantized(), &y)?;
            writeln!(
                out,
                "wrote {} psnr_db {:.3}",
                a.out.display(),
                metrics::report_psnr(psnr)
            )?;
            Ok(())
        }
        Command::Decode(a) => {
            let codec = r.codec()?;
            let y = load_image(&a.image)?;
            let w = scaling::decode_scaled(&codec, &y, r.interp)?;
            writeln!(out, "{}", bits_string(&w))?;
            if let Some(s) = &a.reference {
                let reference =
                    WatermarkPayload::parse(s, codec.config().bit_length).map_err(|e| Failure::Usage(e.to_string()))?;
                writeln!(out, "bit_accuracy {:.4}", metrics::bit_accuracy(&reference, &w)?)?;
            }
            Ok(())
        }
        Command::Remove(a) => {
            let rm = RemovalModel::load(r.checkpoint()?)?;
            let y = load_image(&a.image)?;
            let restored = scaling::scale_apply(&rm, &y, &r.scale()?)?;
            restored.save(&a.out)?;
            writeln!(out, "wrote {}", a.out.display())?;
            Ok(())
        }
        Command::Rewatermark(a) => cmd_rewatermark(&r, a, out),
        Command::Eval(e) => cmd_eval(&r, e, out),
    }
}

fn cmd_train(r: &Resolved, a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Io(format!("checkpoint {} not found", p.display())));
            }
            Trainer::resume(p)?
        }
        None => {
            let mut c = if a.full {
                TrainConfig {
                    seed: r.seed,
                    ..TrainConfig::full()
                }
            } else {
                r.train.clone()
            };
            if let Some(v) = a.dataset {
                c.dataset_dir = Some(v);
            }
            if let Some(v) = a.epochs {
                c.epochs = v;
            }
            if let Some(v) = a.max_iters {
                c.max_iters = Some(v);
            }
            if let Some(v) = a.severity {
                c.noise_severity = v;
            }
            if let Some(v) = a.alpha_max {
                c.alpha_max = v;
            }
            if let Some(v) = a.bit_length {
                c.codec.bit_length = v;
            }
            c.validate()?;
            Trainer::new(c)?
        }
    };
    let o = trainer.run(&a.out)?;
    let m = o.best_metrics;
    writeln!(
        out,
        "best {} psnr_db {:.3} clean_bit_acc {:.4} noised_bit_acc {:.4}",
        o.best_checkpoint.display(),
        m.psnr_db,
        m.clean_acc,
        m.noised_acc
    )?;
    Ok(())
}

fn cmd_train_rm(r: &Resolved, a: TrainRmArgs, out: &mut dyn Write) -> CliResult<()> {
    let codec_path = r.checkpoint()?;
    let codec = CodecModel::load(codec_path)?;
    let mut c = if a.full {
        RemovalConfig {
            seed: r.seed,
            ..RemovalConfig::full()
        }
    } else {
        r.removal.clone()
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.max_iters {
        c.max_iters = Some(v);
    }
    c.validate()?;
    let mut data_cfg = r.train.clone();
    data_cfg.codec.image_size = codec.config().image_size;
    data_cfg.dataset_dir = a.dataset;
    let (train_set, val_set) = train::load_datasets(&data_cfg)?;
    let mut o = removal::train_removal(c, &codec, &train_set, &val_set, Some(&a.out))?;
    o.model.codec_path = Some(codec_path.display().to_string());
    let ckpt = a.out.join("remover.safetensors");
    o.model.save(&ckpt)?;
    let m = o.metrics;
    writeln!(
        out,
        "wrote {} psnr_encoded {:.3} psnr_removed {:.3} bit_acc_encoded {:.4} bit_acc_removed {:.4}",
        ckpt.display(),
        m.psnr_encoded,
        m.psnr_removed,
        m.acc_encoded,
        m.acc_removed
    )?;
    Ok(())
}

fn cmd_rewatermark(r: &Resolved, a: RewatermarkArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.rounds == 0 {
        return Err(Failure::Usage("--rounds must be at least 1".into()));
    }
    let codec = r.codec()?;
    let remover = match (a.use_remover, &a.remover) {
        (Toggle::Off, _) => None,
        (Toggle::On, None) => return Err(Failure::Usage("--use-remover on needs --remover".into())),
        (Toggle::On, Some(p)) => {
            if !p.exists() {
                return Err(Failure::Io(format!("remover {} not found", p.display())));
            }
            Some(RemovalModel::load(p)?)
        }
    };
    let x = load_image(&a.image)?;
    let payloads = train::sample_payloads(r.seed, 0, a.rounds, codec.config().bit_length);
    let payloads: Vec<WatermarkPayload> = (0..a.rounds as i64)
        .map(|i| {
            let v = Vec::<f32>::try_from(&payloads.get(i)).map_err(|e| Failure::Numerical(e.to_string()))?;
            Ok(WatermarkPayload::from_probabilities(&v))
        })
        .collect::<CliResult<_>>()?;
    let scale = r.scale()?;
    let rows = removal::rewatermark(&codec, remover.as_ref(), &x, &payloads, &scale)?;
    metrics::write_records_file(&a.out, &rows)?;
    if let Some(dir) = &a.image_dir {
        std::fs::create_dir_all(dir)?;
        let mut current = x.to_range(PixelRange::Byte).quantized();
        for (k, w) in payloads.iter().enumerate() {
            if let Some(rm) = &remover {
                current = scaling::scale_apply(rm, &current, &scale)?;
            }
            current = scaling::embed_scaled(&codec, &current, w, &scale)?;
            current.save(dir.join(format!("round{:02}.png", k + 1)))?;
            eval::save_residual_png(&x, &current, 20.0, dir.join(format!("round{:02}_residual.png", k + 1)))?;
        }
    }
    for row in &rows {
        writeln!(
            out,
            "round {} psnr_db {:.3} bit_acc {:.4}",
            row.severity, row.psnr_db, row.bit_acc
        )?;
    }
    Ok(())
}

fn cmd_eval(r: &Resolved, e: EvalCommand, out: &mut dyn Write) -> CliResult<()> {
    match e {
        EvalCommand::Robustness(a) => {
            let codec = r.codec()?;
            let images = load_dir(&a.images)?;
            let opts = SweepOptions {
                seed: r.seed,
                native: a.native,
                scale: r.scale()?,
            };
            let rows = eval::robustness_sweep(&codec, &a.method, &images, &a.severity, &opts)?;
            metrics::write_records_file(&a.out, &rows)?;
            writeln!(out, "wrote {} rows to {}", rows.len(), a.out.display())?;
        }
        EvalCommand::Attack(a) => {
            let codec = r.codec()?;
            let images = load_dir(&a.images)?;
            let mut cfg = AttackConfig::with_epsilon(a.epsilon);
            cfg.max_iters = a.max_iters;
            if let Some(s) = a.step_size {
                cfg.step_size = s;
            }
            cfg.validate()?;
            let opts = SweepOptions {
                seed: r.seed,
                native: a.native,
                scale: r.scale()?,
            };
            let s = eval::attack_sweep(&codec, &images, &cfg, &opts)?;
            let mut f = std::fs::File::create(&a.out)?;
            writeln!(f, "image,iterations,success")?;
            for (i, (n, ok)) in s.iterations.iter().zip(&s.successes).enumerate() {
                writeln!(f, "{i},{n},{ok}")?;
            }
            writeln!(
                out,
                "success_within_50 {:.4} median_iterations {} max_linf {:.6}",
                s.success_rate_within(50),
                s.median_iterations(),
                s.max_linf
            )?;
        }
        EvalCommand::Bitlength(a) => {
            let base = r.train.clone();
            let rows = eval::bitlength_sweep(
                |l| {
                    let mut c = base.clone();
                    c.codec.bit_length = l;
                    if let Some(m) = a.max_iters {
                        c.max_iters = Some(m);
                    }
                    let o = train::train(c, a.work_dir.join(format!("l{l}")))?;
                    Ok((
                        o.best_metrics.psnr_db,
                        o.best_metrics.clean_acc,
                        o.best_metrics.noised_acc,
                    ))
                },
                &a.lengths,
            )?;
            let mut f = std::fs::File::create(&a.out)?;
            writeln!(f, "bit_length,psnr_db,clean_bit_acc,noised_bit_acc")?;
            for row in &rows {
                writeln!(
                    f,
                    "{},{:.4},{:.4},{:.4}",
                    row.bit_length, row.psnr_db, row.clean_bit_acc, row.noised_bit_acc
                )?;
            }
            writeln!(out, "wrote {} rows to {}", rows.len(), a.out.display())?;
        }
        EvalCommand::PsnrStudy(a) => {
            let x = load_image(&a.image)?;
            let xw = load_image(&a.watermarked)?;
            let other = load_image(&a.other)?;
            let s = eval::psnr_resolution_study((&x, &xw), (&x, &other), &a.factors, InterpMode::Bicubic)?;
            let mut f = std::fs::File::create(&a.out)?;
            writeln!(f, "height,width,psnr_similar,psnr_different")?;
            for (h, w, p1, p2) in &s.rows {
                writeln!(f, "{h},{w},{p1:.4},{p2:.4}")?;
            }
            writeln!(
                out,
                "spread_similar {:.4} spread_different {:.4}",
                s.spread_similar, s.spread_different
            )?;
        }
    }
    Ok(())
}
