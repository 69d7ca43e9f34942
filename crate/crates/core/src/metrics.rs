//! Image quality metrics and training losses on [0, 1] intensities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Grid;
use crate::registration::fft_plan;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const FREQUENCY_WEIGHT: f64 = 0.01;

fn same_dims(a: &Grid<f64>, b: &Grid<f64>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "metric inputs differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.data().is_empty() {
        return Err(Error::invalid("metric inputs are empty"));
    }
    Ok(())
}

fn mse(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// Peak signal-to-noise ratio for peak 1; identical inputs give `+inf`.
pub fn psnr(a: &Grid<f64>, b: &Grid<f64>) -> Result<f64> {
    same_dims(a, b)?;
    let m = mse(a, b);
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the SSIM Gaussian.
fn filter_valid(g: &Grid<f64>, k: &[f64]) -> Grid<f64> {
    let (w, h) = g.dims();
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let rows = Grid::from_fn(ow, h, |x, y| {
        k.iter().enumerate().map(|(i, kv)| kv * g[(x + i, y)]).sum::<f64>()
    });
    Grid::from_fn(ow, oh, |x, y| {
        k.iter().enumerate().map(|(i, kv)| kv * rows[(x, y + i)]).sum::<f64>()
    })
}

/// Mean SSIM and mean contrast-structure term.
fn ssim_terms(a: &Grid<f64>, b: &Grid<f64>) -> (f64, f64) {
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&Grid::from_fn(a.width(), a.height(), |x, y| a[(x, y)] * a[(x, y)]), &k);
    let bb = filter_valid(&Grid::from_fn(a.width(), a.height(), |x, y| b[(x, y)] * b[(x, y)]), &k);
    let ab = filter_valid(&Grid::from_fn(a.width(), a.height(), |x, y| a[(x, y)] * b[(x, y)]), &k);
    let n = mu_a.data().len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.data().len() {
        let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
        let va = aa.data()[i] - ma * ma;
        let vb = bb.data()[i] - mb * mb;
        let cov = ab.data()[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    (s_sum / n, cs_sum / n)
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &Grid<f64>, b: &Grid<f64>) -> Result<f64> {
    same_dims(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
        )));
    }
    Ok(ssim_terms(a, b).0)
}

fn halve(g: &Grid<f64>) -> Grid<f64> {
    Grid::from_fn(g.width() / 2, g.height() / 2, |x, y| {
        0.25 * (g[(2 * x, 2 * y)] + g[(2 * x + 1, 2 * y)] + g[(2 * x, 2 * y + 1)] + g[(2 * x + 1, 2 * y + 1)])
    })
}

/// Smallest side accepted by [`ms_ssim`].
pub fn ms_ssim_min_size() -> usize {
    SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1)
}

/// Five-scale MS-SSIM with 2x2 mean pooling between scales.
///
/// Negative contrast-structure terms are clamped to zero before the
/// fractional powers are taken.
pub fn ms_ssim(a: &Grid<f64>, b: &Grid<f64>) -> Result<f64> {
    same_dims(a, b)?;
    let min = ms_ssim_min_size();
    if a.width() < min || a.height() < min {
        return Err(Error::invalid(format!("MS-SSIM needs at least {min}x{min} pixels")));
    }
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut value = 1.0;
    let last = MS_SSIM_WEIGHTS.len() - 1;
    for (scale, w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (s, cs) = ssim_terms(&a, &b);
        let term = if scale == last { s } else { cs };
        value *= term.max(0.0).powf(*w);
        if scale != last {
            a = halve(&a);
            b = halve(&b);
        }
    }
    Ok(value)
}

/// Mean of `sqrt((a - b)^2 + eps^2)`.
pub fn charbonnier(a: &Grid<f64>, b: &Grid<f64>, eps: f64) -> Result<f64> {
    same_dims(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y).powi(2) + eps * eps).sqrt())
        .sum::<f64>()
        / a.data().len() as f64)
}

/// Mean modulus of the spectral difference, DFT scaled by `1 / sqrt(H W)`.
pub fn frequency_l1(a: &Grid<f64>, b: &Grid<f64>) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let spectrum = fft_plan(w, h).forward_real(&diff);
    let n = (w * h) as f64;
    Ok(spectrum.iter().map(|c| c.norm()).sum::<f64>() / n.sqrt() / n)
}

/// Charbonnier plus weighted frequency L1.
pub fn joint_loss(a: &Grid<f64>, b: &Grid<f64>, lambda: f64) -> Result<f64> {
    Ok(charbonnier(a, b, CHARBONNIER_EPS)? + lambda * frequency_l1(a, b)?)
}

/// Scores for one restored frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when the frame is too small for five scales.
    pub ms_ssim: Option<f64>,
}

pub fn frame_metrics(restored: &Grid<f64>, reference: &Grid<f64>) -> Result<FrameMetrics> {
    let min = ms_ssim_min_size();
    let ms = if restored.width() >= min && restored.height() >= min {
        Some(ms_ssim(restored, reference)?)
    } else {
        None
    };
    Ok(FrameMetrics {
        psnr: psnr(restored, reference)?,
        ssim: ssim(restored, reference)?,
        ms_ssim: ms,
    })
}

/// Per-frame scores with their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    /// Mean over finite values; `+inf` when every frame is a perfect match.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ms_ssim: Option<f64>,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn new(frames: Vec<FrameMetrics>) -> Self {
        let mean_psnr = finite_mean(frames.iter().map(|f| f.psnr)).unwrap_or(if frames.is_empty() {
            f64::NAN
        } else {
            f64::INFINITY
        });
        let mean_ssim = finite_mean(frames.iter().map(|f| f.ssim)).unwrap_or(f64::NAN);
        let mean_ms_ssim = finite_mean(frames.iter().filter_map(|f| f.ms_ssim));
        MetricReport {
            frames,
            mean_psnr,
            mean_ssim,
            mean_ms_ssim,
        }
    }
}
