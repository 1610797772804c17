//! PSNR and SSIM on luminance with the benchmark border-cropping convention,
//! plus timing capture and report export.
//!
//! PSNR is computed on 8-bit-quantized planes (each value clamped to [0,1]
//! and rounded to the 1/255 grid before the MSE), matching how benchmark
//! frameworks score saved images. Identical images report an infinite PSNR
//! sentinel, which is excluded from dataset means with a warning rather than
//! silently capped.

use std::path::Path;
use std::time::Instant;

use crate::data::{make_ilr, ImageY};
use crate::error::{Error, Result};
use crate::network::{reconstruct, VdsrModel};

/// Removes `pixels` rows/columns from each side.
pub fn crop_border(img: &ImageY, pixels: usize) -> Result<ImageY> {
    let (h, w) = (img.height(), img.width());
    if 2 * pixels >= h.min(w) {
        return Err(Error::Range(format!(
            "cannot crop {pixels} px per side from a {h}x{w} image"
        )));
    }
    let (nh, nw) = (h - 2 * pixels, w - 2 * pixels);
    let mut y = Vec::with_capacity(nh * nw);
    for row in 0..nh {
        let start = (row + pixels) * w + pixels;
        y.extend_from_slice(&img.y()[start..start + nw]);
    }
    ImageY::from_luma(nh, nw, y)
}

#[inline]
fn quantize(v: f32) -> f64 {
    ((v as f64).clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Peak signal-to-noise ratio in dB over quantized [0,1] luminance
/// (peak = 1). Identical images yield `f64::INFINITY`, never an error.
pub fn psnr(a: &ImageY, b: &ImageY) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "psnr of {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut sum = 0.0f64;
    for (&x, &y) in a.y().iter().zip(b.y()) {
        let d = quantize(x) - quantize(y);
        sum += d * d;
    }
    let mse = sum / a.y().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM with the given dynamic range: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, averaged over window positions that fit
/// entirely inside the image.
pub fn ssim_with_dynamic_range(a: &ImageY, b: &ImageY, dynamic_range: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("ssim of differently sized images".into()));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Range(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let (pa, pb) = (a.y(), b.y());

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..SSIM_WINDOW {
                let row = (y0 + i) * w + x0;
                for j in 0..SSIM_WINDOW {
                    let wt = win[i * SSIM_WINDOW + j];
                    mu_a += wt * pa[row + j] as f64;
                    mu_b += wt * pb[row + j] as f64;
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..SSIM_WINDOW {
                let row = (y0 + i) * w + x0;
                for j in 0..SSIM_WINDOW {
                    let wt = win[i * SSIM_WINDOW + j];
                    let da = pa[row + j] as f64 - mu_a;
                    let db = pb[row + j] as f64 - mu_b;
                    var_a += wt * da * da;
                    var_b += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM at the [0,1] working dynamic range.
pub fn ssim(a: &ImageY, b: &ImageY) -> Result<f64> {
    ssim_with_dynamic_range(a, b, 1.0)
}

/// How many border pixels to shave before scoring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CropPolicy {
    /// Crop `ceil(scale)` pixels per side (the common benchmark convention).
    ScalePixels,
    /// Crop a fixed amount regardless of scale.
    Fixed(usize),
}

impl CropPolicy {
    pub fn pixels(&self, scale: f64) -> usize {
        match self {
            CropPolicy::ScalePixels => scale.ceil() as usize,
            CropPolicy::Fixed(px) => *px,
        }
    }
}

/// One scored image.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub name: String,
    pub scale: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub seconds: f64,
}

/// Per-image records plus per-scale aggregates.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub records: Vec<ImageEval>,
    pub warnings: Vec<String>,
}

/// (scale, mean psnr, mean ssim, mean seconds, images counted)
pub type ScaleSummary = (f64, f64, f64, f64, usize);

impl EvalReport {
    /// Arithmetic means per scale. Infinite-PSNR records are excluded from
    /// the PSNR mean (with a warning recorded at insertion time).
    pub fn per_scale_means(&self) -> Vec<ScaleSummary> {
        let mut scales: Vec<f64> = self.records.iter().map(|r| r.scale).collect();
        scales.sort_by(f64::total_cmp);
        scales.dedup();
        scales
            .into_iter()
            .map(|s| {
                let rows: Vec<&ImageEval> =
                    self.records.iter().filter(|r| r.scale == s).collect();
                let finite: Vec<&&ImageEval> =
                    rows.iter().filter(|r| r.psnr_db.is_finite()).collect();
                let psnr = if finite.is_empty() {
                    f64::INFINITY
                } else {
                    finite.iter().map(|r| r.psnr_db).sum::<f64>() / finite.len() as f64
                };
                let ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
                let secs = rows.iter().map(|r| r.seconds).sum::<f64>() / rows.len() as f64;
                (s, psnr, ssim, secs, rows.len())
            })
            .collect()
    }

    /// CSV with columns image, scale, psnr_db, ssim, seconds. Infinite PSNR
    /// is written as `inf`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "image,scale,psnr_db,ssim,seconds")?;
        for r in &self.records {
            let psnr = if r.psnr_db.is_finite() {
                format!("{:.6}", r.psnr_db)
            } else {
                "inf".to_string()
            };
            writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                r.name, r.scale, psnr, r.ssim, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Human-readable per-scale table: average PSNR/SSIM/time per scale.
    pub fn format_table(&self, title: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!("{title}\n"));
        s.push_str("scale |  PSNR (dB) |   SSIM  | time (s) | images\n");
        s.push_str("------+------------+---------+----------+-------\n");
        for (scale, psnr, ssim, secs, n) in self.per_scale_means() {
            let p = if psnr.is_finite() {
                format!("{psnr:10.2}")
            } else {
                format!("{:>10}", "inf")
            };
            s.push_str(&format!(
                "x{scale:<4} | {p} | {ssim:7.4} | {secs:8.3} | {n:5}\n"
            ));
        }
        for w in &self.warnings {
            s.push_str(&format!("note: {w}\n"));
        }
        s
    }
}

/// Scores a model over a dataset at each scale: ILR synthesis, luminance
/// forward pass, reconstruction, border crop on both sides of the
/// comparison, then PSNR/SSIM and wall-clock seconds of the SR computation.
///
/// `residual_mode=false` scores a network that models the HR image directly
/// (no reconstruction add).
pub fn benchmark_run(
    model: &VdsrModel<f32>,
    dataset: &[(String, ImageY)],
    scales: &[f64],
    crop: CropPolicy,
    residual_mode: bool,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    if scales.is_empty() {
        return Err(Error::Config("no evaluation scales".into()));
    }
    let mut report = EvalReport::default();
    for &scale in scales {
        for (name, hr) in dataset {
            let ilr = make_ilr(hr, scale)?;
            let input = ilr.to_tensor();
            let start = Instant::now();
            let predicted = model.predict(&input)?;
            let sr_tensor = if residual_mode {
                reconstruct(&input, &predicted)?
            } else {
                predicted
            };
            let seconds = start.elapsed().as_secs_f64();
            let sr = ilr.with_y(sr_tensor.data().to_vec())?;

            let px = crop.pixels(scale);
            let sr_c = crop_border(&sr, px)?;
            let hr_c = crop_border(hr, px)?;
            let p = psnr(&sr_c, &hr_c)?;
            let s = ssim(&sr_c, &hr_c)?;
            if !p.is_finite() {
                report.warnings.push(format!(
                    "{name} at x{scale}: identical images, PSNR sentinel excluded from mean"
                ));
            }
            report.records.push(ImageEval {
                name: name.clone(),
                scale,
                psnr_db: p,
                ssim: s,
                seconds,
            });
        }
    }
    Ok(report)
}
