//! Sharpness pre-checks and ISO-style eye image quality metrics with
//! threshold gating.

mod sharpness;

pub use sharpness::{
    fft_sharpness, iso_sharpness, laplacian_sharpness, log_power, precheck, SharpnessPrecheck, LOG_KERNEL,
    SHARPNESS_C,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Circle, IrisBoundaries};
use crate::imaging::{EyeImage, GrayImage, MaskImage};

/// Upper end of the grayscale utilization scale (bits of an 8-bit histogram).
pub const GRAYSCALE_MAX_BITS: f64 = 8.0;

/// Number of rays used to trace the pupil boundary.
pub const CIRCULARITY_RAYS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub overall_quality: f64,
    pub grayscale_utilization: f64,
    pub iris_pupil_contrast: f64,
    pub iris_pupil_concentricity: f64,
    pub iris_pupil_ratio: f64,
    pub iris_sclera_contrast: f64,
    pub margin_adequacy: f64,
    pub pupil_boundary_circularity: f64,
    pub sharpness: f64,
    pub usable_iris_area: f64,
}

impl QualityReport {
    /// `(name, value)` pairs in declaration order.
    pub fn metrics(&self) -> [(&'static str, f64); 10] {
        [
            ("overall_quality", self.overall_quality),
            ("grayscale_utilization", self.grayscale_utilization),
            ("iris_pupil_contrast", self.iris_pupil_contrast),
            ("iris_pupil_concentricity", self.iris_pupil_concentricity),
            ("iris_pupil_ratio", self.iris_pupil_ratio),
            ("iris_sclera_contrast", self.iris_sclera_contrast),
            ("margin_adequacy", self.margin_adequacy),
            ("pupil_boundary_circularity", self.pupil_boundary_circularity),
            ("sharpness", self.sharpness),
            ("usable_iris_area", self.usable_iris_area),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityThresholds {
    pub overall_quality: f64,
    pub grayscale_utilization: f64,
    pub iris_pupil_contrast: f64,
    pub iris_pupil_concentricity: f64,
    /// Lower bound of the recommended dilation band.
    pub iris_pupil_ratio: f64,
    /// Optional upper bound; the recommended band ends at 70 but the gate
    /// only enforces the lower bound unless this is set.
    pub iris_pupil_ratio_upper: Option<f64>,
    pub iris_sclera_contrast: f64,
    pub margin_adequacy: f64,
    pub pupil_boundary_circularity: f64,
    pub sharpness: f64,
    pub usable_iris_area: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            overall_quality: 70.0,
            grayscale_utilization: 6.0,
            iris_pupil_contrast: 30.0,
            iris_pupil_concentricity: 90.0,
            iris_pupil_ratio: 20.0,
            iris_pupil_ratio_upper: None,
            iris_sclera_contrast: 5.0,
            margin_adequacy: 80.0,
            pupil_boundary_circularity: 70.0,
            sharpness: 80.0,
            usable_iris_area: 70.0,
        }
    }
}

/// Recommended dilation band used when normalizing the ratio.
pub const RATIO_BAND: (f64, f64) = (20.0, 70.0);

impl QualityThresholds {
    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Config(format!("thresholds: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.overall_quality,
            self.grayscale_utilization,
            self.iris_pupil_contrast,
            self.iris_pupil_concentricity,
            self.iris_pupil_ratio,
            self.iris_sclera_contrast,
            self.margin_adequacy,
            self.pupil_boundary_circularity,
            self.sharpness,
            self.usable_iris_area,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        if let Some(u) = self.iris_pupil_ratio_upper {
            if !(u > self.iris_pupil_ratio) {
                return Err(Error::Config(format!(
                    "ratio upper bound {u} must exceed lower bound {}",
                    self.iris_pupil_ratio
                )));
            }
        }
        Ok(())
    }

    fn minimums(&self) -> [f64; 10] {
        [
            self.overall_quality,
            self.grayscale_utilization,
            self.iris_pupil_contrast,
            self.iris_pupil_concentricity,
            self.iris_pupil_ratio,
            self.iris_sclera_contrast,
            self.margin_adequacy,
            self.pupil_boundary_circularity,
            self.sharpness,
            self.usable_iris_area,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFailure {
    pub metric: String,
    pub value: f64,
    /// Human-readable requirement such as `> 80`.
    pub requirement: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub passed: bool,
    pub failures: Vec<GateFailure>,
}

impl GateResult {
    pub fn into_result(self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::QualityGate(self.failures))
        }
    }
}

/// Strict comparison of every metric against its threshold.
pub fn gate(report: &QualityReport, thr: &QualityThresholds) -> GateResult {
    let mut failures = Vec::new();
    for ((name, value), min) in report.metrics().into_iter().zip(thr.minimums()) {
        if !(value > min) {
            failures.push(GateFailure {
                metric: name.to_string(),
                value,
                requirement: format!("> {min}"),
                threshold: min,
            });
        }
        if name == "iris_pupil_ratio" {
            if let Some(upper) = thr.iris_pupil_ratio_upper {
                if !(value < upper) {
                    failures.push(GateFailure {
                        metric: name.to_string(),
                        value,
                        requirement: format!("< {upper}"),
                        threshold: upper,
                    });
                }
            }
        }
    }
    GateResult {
        passed: failures.is_empty(),
        failures,
    }
}

/// Computes all ten metrics. `mask` marks usable iris pixels.
pub fn compute_metrics(eye: &EyeImage, bounds: &IrisBoundaries, mask: &MaskImage) -> Result<QualityReport> {
    compute_metrics_with(eye, bounds, mask, &QualityThresholds::default())
}

/// As [`compute_metrics`]; `thr` supplies the reference points used to
/// normalize metrics for the overall score.
pub fn compute_metrics_with(
    eye: &EyeImage,
    bounds: &IrisBoundaries,
    mask: &MaskImage,
    thr: &QualityThresholds,
) -> Result<QualityReport> {
    let img = eye.image();
    if !mask.same_extent(img) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            img.width(),
            img.height()
        )));
    }
    bounds.validate_in_image(img.width(), img.height())?;
    let (p, i) = (&bounds.pupil, &bounds.iris);

    let mut r = QualityReport {
        overall_quality: 0.0,
        grayscale_utilization: grayscale_entropy(img, mask),
        iris_pupil_contrast: pupil_contrast(img, mask, p),
        iris_pupil_concentricity: 100.0 * (1.0 - (p.cx - i.cx).hypot(p.cy - i.cy) / i.r).max(0.0),
        iris_pupil_ratio: (100.0 * p.r / i.r).clamp(0.0, 100.0),
        iris_sclera_contrast: sclera_contrast(img, mask, i),
        margin_adequacy: margin(img.width(), img.height(), i),
        pupil_boundary_circularity: circularity(mask, p, i),
        sharpness: iso_sharpness(img),
        usable_iris_area: usable_area(mask, p, i),
    };
    r.overall_quality = overall(&r, thr);
    Ok(r)
}

/// Product of the nine constituent metrics, each scaled to [0, 1] against
/// its gate threshold so that an eye meeting every threshold scores 100.
pub fn overall(r: &QualityReport, thr: &QualityThresholds) -> f64 {
    let rel = |v: f64, t: f64| if t > 0.0 { (v / t).clamp(0.0, 1.0) } else { f64::from(u8::from(v > 0.0)) };
    let ratio = {
        let (lo, hi) = RATIO_BAND;
        let v = r.iris_pupil_ratio;
        if v < lo {
            (v / lo).clamp(0.0, 1.0)
        } else if v > hi {
            ((100.0 - v) / (100.0 - hi)).clamp(0.0, 1.0)
        } else {
            1.0
        }
    };
    let prod = rel(r.grayscale_utilization, thr.grayscale_utilization)
        * rel(r.iris_pupil_contrast, thr.iris_pupil_contrast)
        * rel(r.iris_pupil_concentricity, thr.iris_pupil_concentricity)
        * ratio
        * rel(r.iris_sclera_contrast, thr.iris_sclera_contrast)
        * rel(r.margin_adequacy, thr.margin_adequacy)
        * rel(r.pupil_boundary_circularity, thr.pupil_boundary_circularity)
        * rel(r.sharpness, thr.sharpness)
        * rel(r.usable_iris_area, thr.usable_iris_area);
    100.0 * prod
}

fn grayscale_entropy(img: &GrayImage, mask: &MaskImage) -> f64 {
    let mut hist = [0u64; 256];
    let mut n = 0u64;
    for (&p, &on) in img.pixels().iter().zip(mask.bits()) {
        if on {
            hist[p as usize] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n as f64;
            -q * q.log2()
        })
        .sum();
    h.clamp(0.0, GRAYSCALE_MAX_BITS)
}

/// Pixels whose distance to `c` lies in `[lo, hi]` (in units of `c.r`) and
/// that pass `keep`.
fn ring_values(
    img: &GrayImage,
    c: &Circle,
    lo: f64,
    hi: f64,
    mut keep: impl FnMut(usize, usize, f64, f64) -> bool,
) -> Vec<u8> {
    let (rlo, rhi) = (lo * c.r, hi * c.r);
    let x0 = (c.cx - rhi).floor().max(0.0) as usize;
    let y0 = (c.cy - rhi).floor().max(0.0) as usize;
    let x1 = ((c.cx + rhi).ceil() as i64).clamp(-1, img.width() as i64 - 1);
    let y1 = ((c.cy + rhi).ceil() as i64).clamp(-1, img.height() as i64 - 1);
    let mut out = Vec::new();
    if x1 < 0 || y1 < 0 {
        return out;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let (dx, dy) = (x as f64 - c.cx, y as f64 - c.cy);
            let d = dx.hypot(dy);
            if d >= rlo && d <= rhi && keep(x, y, dx, dy) {
                out.push(img.get(x, y));
            }
        }
    }
    out
}

fn median(mut v: Vec<u8>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        f64::from(v[n / 2])
    } else {
        (f64::from(v[n / 2 - 1]) + f64::from(v[n / 2])) / 2.0
    })
}

fn contrast(inner: Option<f64>, outer: Option<f64>, brighter_outside: bool) -> f64 {
    match (inner, outer) {
        (Some(a), Some(b)) => {
            let (hi, lo) = if brighter_outside { (b, a) } else { (a, b) };
            100.0 * ((hi - lo) / (hi + lo + 1.0)).clamp(0.0, 1.0)
        }
        _ => 0.0,
    }
}

fn pupil_contrast(img: &GrayImage, mask: &MaskImage, p: &Circle) -> f64 {
    let pupil = median(ring_values(img, p, 0.5, 0.9, |_, _, _, _| true));
    let iris = median(ring_values(img, p, 1.1, 1.3, |x, y, _, _| mask.get(x, y)));
    contrast(pupil, iris, true)
}

fn sclera_contrast(img: &GrayImage, mask: &MaskImage, i: &Circle) -> f64 {
    let iris = median(ring_values(img, i, 0.8, 0.95, |x, y, _, _| mask.get(x, y)));
    let wedge = (30.0f64).to_radians();
    let sclera = median(ring_values(img, i, 1.05, 1.2, |_, _, dx, dy| {
        let a = (-dy).atan2(dx).abs();
        a <= wedge || a >= PI - wedge
    }));
    contrast(iris, sclera, true)
}

fn margin(w: usize, h: usize, i: &Circle) -> f64 {
    let left = (i.cx - i.r) / (0.6 * i.r);
    let right = (w as f64 - (i.cx + i.r)) / (0.6 * i.r);
    let top = (i.cy - i.r) / (0.2 * i.r);
    let bottom = (h as f64 - (i.cy + i.r)) / (0.2 * i.r);
    100.0 * left.min(right).min(top).min(bottom).clamp(0.0, 1.0)
}

/// Traces rays from the pupil center to the first usable iris pixel.
fn circularity(mask: &MaskImage, p: &Circle, i: &Circle) -> f64 {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let limit = i.r + (p.cx - i.cx).hypot(p.cy - i.cy);
    let mut radii = Vec::with_capacity(CIRCULARITY_RAYS);
    for k in 0..CIRCULARITY_RAYS {
        let (s, c) = (2.0 * PI * k as f64 / CIRCULARITY_RAYS as f64).sin_cos();
        let mut r = 0.0;
        while r <= limit {
            let (x, y) = ((p.cx + r * c).round(), (p.cy - r * s).round());
            if x < 0.0 || y < 0.0 || x >= w || y >= h {
                break;
            }
            if mask.get(x as usize, y as usize) {
                radii.push(r);
                break;
            }
            r += 0.5;
        }
    }
    // Too few rays reach the iris to say anything about shape.
    if radii.len() < CIRCULARITY_RAYS / 8 {
        return 0.0;
    }
    let n = radii.len() as f64;
    let mean = radii.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return 0.0;
    }
    let sd = (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    100.0 * (1.0 - 2.0 * sd / mean).clamp(0.0, 1.0)
}

/// Share of the pupil-to-limbus annulus that the mask marks usable.
fn usable_area(mask: &MaskImage, p: &Circle, i: &Circle) -> f64 {
    let (w, h) = (mask.width(), mask.height());
    let x0 = (i.cx - i.r).floor().max(0.0) as usize;
    let y0 = (i.cy - i.r).floor().max(0.0) as usize;
    let x1 = ((i.cx + i.r).ceil().max(0.0) as usize).min(w - 1);
    let y1 = ((i.cy + i.r).ceil().max(0.0) as usize).min(h - 1);
    let (mut total, mut on) = (0usize, 0usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if in_annulus(x, y, p, i) {
                total += 1;
                on += usize::from(mask.get(x, y));
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    100.0 * on as f64 / total as f64
}

/// Outside the pupil circle and inside the iris circle.
pub fn in_annulus(x: usize, y: usize, p: &Circle, i: &Circle) -> bool {
    let (xf, yf) = (x as f64, y as f64);
    (xf - p.cx).hypot(yf - p.cy) >= p.r && (xf - i.cx).hypot(yf - i.cy) <= i.r
}
