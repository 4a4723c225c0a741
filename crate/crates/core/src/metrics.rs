//! Imperceptibility and recovery metrics, and the report row type.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageArray, PixelRange, WatermarkPayload};

/// PSNR written to report tables for identical images.
pub const PSNR_IDENTICAL_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn byte_values(img: &ImageArray) -> Vec<f64> {
    match img.range() {
        PixelRange::Byte => img.data().iter().map(|&v| f64::from(v)).collect(),
        PixelRange::UnitSigned => img.data().iter().map(|&v| (f64::from(v) + 1.0) * 127.5).collect(),
    }
}

/// Mean squared error over all channels, in byte units.
pub fn mse(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    a.check_comparable(b)?;
    let (va, vb) = (byte_values(a), byte_values(b));
    let sum: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / va.len() as f64)
}

/// Peak signal-to-noise ratio on joint RGB MSE with `MAX = 255`.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / m).log10())
}

/// Finite PSNR for tables: the identical-image case maps to
/// [`PSNR_IDENTICAL_DB`].
pub fn report_psnr(db: f64) -> f64 {
    if db.is_finite() {
        db
    } else {
        PSNR_IDENTICAL_DB
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over 11x11 Gaussian windows (sigma 1.5), computed per channel
/// in byte units and averaged.
pub fn ssim(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    a.check_comparable(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let k = gaussian_window();
    let (va, vb) = (byte_values(a), byte_values(b));
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w).map(|i| va[i * 3 + c]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| vb[i * 3 + c]).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let (mu_a, _, _) = filter_valid(&pa, h, w, &k);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &k);
        let (s_aa, _, _) = filter_valid(&aa, h, w, &k);
        let (s_bb, _, _) = filter_valid(&bb, h, w, &k);
        let (s_ab, _, _) = filter_valid(&ab, h, w, &k);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = s_aa[i] - ma * ma;
            let var_b = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += acc / n as f64;
    }
    Ok((total / 3.0).clamp(-1.0, 1.0))
}

/// Fraction of positions where the two payloads agree.
pub fn bit_accuracy(w: &WatermarkPayload, w_hat: &WatermarkPayload) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::PayloadLength {
            expected: w.len(),
            got: w_hat.len(),
        });
    }
    let same = w.bits().iter().zip(w_hat.bits()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / w.len() as f64)
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method_id: String,
    pub noise_source: String,
    pub severity: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bit_acc: f64,
}

impl EvalRecord {
    pub const HEADER: [&'static str; 6] = ["method_id", "noise_source", "severity", "psnr_db", "ssim", "bit_acc"];

    pub fn new(
        method_id: impl Into<String>,
        noise_source: impl Into<String>,
        severity: impl Into<String>,
        psnr_db: f64,
        ssim: f64,
        bit_acc: f64,
    ) -> Result<Self> {
        let psnr_db = report_psnr(psnr_db);
        if psnr_db.is_nan() || psnr_db < 0.0 {
            return Err(Error::Config(format!("psnr {psnr_db} must be >= 0")));
        }
        if !(-1.0..=1.0).contains(&ssim) {
            return Err(Error::Config(format!("ssim {ssim} outside [-1, 1]")));
        }
        if !(0.0..=1.0).contains(&bit_acc) {
            return Err(Error::Config(format!("bit accuracy {bit_acc} outside [0, 1]")));
        }
        Ok(Self {
            method_id: method_id.into(),
            noise_source: noise_source.into(),
            severity: severity.into(),
            psnr_db,
            ssim,
            bit_acc,
        })
    }
}

/// Writes records as CSV with a fixed header row.
pub fn write_records<W: Write>(out: W, records: &[EvalRecord]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    wtr.write_record(EvalRecord::HEADER)?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_records_file(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    write_records(std::fs::File::create(path)?, records)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        out.push(r?);
    }
    Ok(out)
}
