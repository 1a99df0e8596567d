//! Focus measures.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Variance of the 4-neighbour Laplacian response over interior pixels.
pub fn laplacian_sharpness(img: &GrayImage) -> Result<f64> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::Shape(format!("laplacian needs at least 3x3, got {w}x{h}")));
    }
    let p = img.pixels();
    let n = ((w - 2) * (h - 2)) as f64;
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let v = f64::from(p[i - w]) + f64::from(p[i + w]) + f64::from(p[i - 1]) + f64::from(p[i + 1])
                - 4.0 * f64::from(p[i]);
            sum += v;
            sum_sq += v * v;
        }
    }
    let mean = sum / n;
    Ok((sum_sq / n - mean * mean).max(0.0))
}

/// Fraction of non-DC spectral power outside the centered low-pass disk of
/// radius `min(W, H) / 8`, measured on the periodic component of the image.
pub fn fft_sharpness(img: &GrayImage) -> Result<f64> {
    let (w, h) = (img.width(), img.height());
    if w < 16 || h < 16 {
        return Err(Error::Shape(format!("fft sharpness needs at least 16x16, got {w}x{h}")));
    }
    let power = power_spectrum(img);
    let radius = w.min(h) as f64 / 8.0;
    let (mut total, mut high) = (0.0, 0.0);
    for v in 0..h {
        let fy = signed_freq(v, h);
        for u in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let p = power[v * w + u];
            total += p;
            if fy.hypot(signed_freq(u, w)) > radius {
                high += p;
            }
        }
    }
    // The mean carries no power once DC is dropped; rounding can leave dust.
    if total <= 1e-9 * (w * h) as f64 {
        return Ok(0.0);
    }
    Ok((high / total).clamp(0.0, 1.0))
}

#[inline]
fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Power spectrum of the periodic component of the image. Removing the
/// smooth component first keeps the seams of the DFT's periodic extension
/// from showing up as high-frequency power.
fn power_spectrum(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let u: Vec<f64> = img.pixels().iter().map(|&p| f64::from(p)).collect();

    // Boundary jump image of the periodic-plus-smooth decomposition.
    let mut v = vec![Complex::new(0.0, 0.0); w * h];
    for x in 0..w {
        let d = u[(h - 1) * w + x] - u[x];
        v[x].re += d;
        v[(h - 1) * w + x].re -= d;
    }
    for y in 0..h {
        let d = u[y * w + w - 1] - u[y * w];
        v[y * w].re += d;
        v[y * w + w - 1].re -= d;
    }

    let mut data: Vec<Complex<f64>> = u.iter().map(|&p| Complex::new(p, 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    fft2(&mut planner, &mut data, w, h);
    fft2(&mut planner, &mut v, w, h);

    let tau = std::f64::consts::TAU;
    let mut out = vec![0.0; w * h];
    for q in 0..h {
        let cq = (tau * q as f64 / h as f64).cos();
        for r in 0..w {
            let i = q * w + r;
            let denom = 2.0 * cq + 2.0 * (tau * r as f64 / w as f64).cos() - 4.0;
            let smooth = if i == 0 { Complex::new(0.0, 0.0) } else { v[i] / denom };
            out[i] = (data[i] - smooth).norm_sqr();
        }
    }
    out
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], w: usize, h: usize) {
    planner.plan_fft_forward(w).process(data);
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// 9x9 integer Laplacian-of-Gaussian used for the ISO-scale sharpness.
pub const LOG_KERNEL: [[i32; 9]; 9] = [
    [0, 1, 1, 2, 2, 2, 1, 1, 0],
    [1, 2, 4, 5, 5, 5, 4, 2, 1],
    [1, 4, 5, 3, 0, 3, 5, 4, 1],
    [2, 5, 3, -12, -24, -12, 3, 5, 2],
    [2, 5, 0, -24, -40, -24, 0, 5, 2],
    [2, 5, 3, -12, -24, -12, 3, 5, 2],
    [1, 4, 5, 3, 0, 3, 5, 4, 1],
    [1, 2, 4, 5, 5, 5, 4, 2, 1],
    [0, 1, 1, 2, 2, 2, 1, 1, 0],
];

/// Saturation constant of the sharpness mapping.
pub const SHARPNESS_C: f64 = 1800.0;

/// Grid step of the LoG evaluation, as in the ISO reference method.
pub const LOG_STRIDE: usize = 4;

/// Mean squared LoG response, sampled every [`LOG_STRIDE`] pixels.
pub fn log_power(img: &GrayImage) -> f64 {
    let (w, h) = (img.width(), img.height());
    if w < 9 || h < 9 {
        return 0.0;
    }
    let p = img.pixels();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in (0..=h - 9).step_by(LOG_STRIDE) {
        for x in (0..=w - 9).step_by(LOG_STRIDE) {
            let mut acc = 0i64;
            for (ky, krow) in LOG_KERNEL.iter().enumerate() {
                let row = &p[(y + ky) * w + x..(y + ky) * w + x + 9];
                for (k, &v) in krow.iter().zip(row) {
                    acc += i64::from(*k) * i64::from(v);
                }
            }
            sum += (acc as f64) * (acc as f64);
            n += 1;
        }
    }
    sum / n as f64
}

/// Sharpness on a 0 to 100 scale: `100 P / (P + c^2)`.
pub fn iso_sharpness(img: &GrayImage) -> f64 {
    let p = log_power(img);
    100.0 * p / (p + SHARPNESS_C * SHARPNESS_C)
}

/// The two pre-checks run on the raw eye image before segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessPrecheck {
    pub laplacian_variance: f64,
    pub fft_high_ratio: f64,
}

pub fn precheck(img: &GrayImage) -> Result<SharpnessPrecheck> {
    Ok(SharpnessPrecheck {
        laplacian_variance: laplacian_sharpness(img)?,
        fft_high_ratio: fft_sharpness(img)?,
    })
}
