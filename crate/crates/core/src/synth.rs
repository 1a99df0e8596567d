//! Synthetic eye corpus: per-identity band-limited iris textures rendered
//! with per-sample rotation, sensor noise and defocus.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{write_manifest, DatasetRecord, Distance, Eye, IrisColor, Spectrum};
use crate::geometry::{IrisBoundaries, NORM_WIDTH};
use crate::imaging::{gaussian_blur, save_gray, EyeImage, GrayImage, EYE_HEIGHT, EYE_WIDTH};

pub const PUPIL_LEVEL: f64 = 20.0;
pub const IRIS_MEAN: f64 = 110.0;
pub const IRIS_SPREAD: f64 = 45.0;
pub const SKIN_MEAN: f64 = 225.0;
/// Skin is a fine two-level check pattern at `SKIN_MEAN +- SKIN_SPREAD`,
/// bright enough to stay above the segmentation band.
pub const SKIN_SPREAD: f64 = 30.0;
/// Check size in pixels.
pub const SKIN_CHECK: usize = 5;
pub const HIGHLIGHT_RADIUS: f64 = 5.0;
const TEXTURE_TERMS: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub samples: usize,
    pub seed: u64,
    /// Largest per-sample rotation, in normalized columns.
    pub max_rotation_cols: i64,
    pub noise_sigma: f64,
    pub max_blur_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            samples: 4,
            seed: 1,
            max_rotation_cols: 4,
            noise_sigma: 4.0,
            max_blur_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    amp: f64,
    /// Whole cycles per turn, so the texture is continuous across theta = 0.
    angular: f64,
    /// Cycles across the annulus from pupil to limbus.
    radial: f64,
    phase: f64,
}

/// One synthetic iris: geometry plus a polar texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub bounds: IrisBoundaries,
    waves: Vec<Wave>,
    norm: f64,
}

impl Identity {
    pub fn random(rng: &mut impl Rng) -> Self {
        let cx = 320.0 + rng.random_range(-20.0..20.0);
        let cy = 240.0 + rng.random_range(-15.0..15.0);
        let iris_r = rng.random_range(100.0..120.0);
        let pupil_r = rng.random_range(30.0..45.0);
        let bounds = IrisBoundaries::concentric(cx, cy, pupil_r, iris_r).expect("radii ordered");
        let waves: Vec<Wave> = (0..TEXTURE_TERMS)
            .map(|_| Wave {
                amp: rng.random_range(0.3..1.0),
                angular: f64::from(rng.random_range(3..40u32)),
                radial: rng.random_range(0.2..3.0),
                phase: rng.random_range(0.0..TAU),
            })
            .collect();
        // scale so the texture stays inside IRIS_MEAN +- IRIS_SPREAD
        let norm = waves.iter().map(|w| w.amp * w.amp / 2.0).sum::<f64>().sqrt() * 2.5;
        Self { bounds, waves, norm }
    }

    /// Texture in [-1, 1] at angle `theta` and normalized radius `rho`.
    pub fn texture(&self, theta: f64, rho: f64) -> f64 {
        let v: f64 = self
            .waves
            .iter()
            .map(|w| w.amp * (w.angular * theta + TAU * w.radial * rho + w.phase).sin())
            .sum();
        (v / self.norm).clamp(-1.0, 1.0)
    }

    /// Renders the eye rotated counter-clockwise by `rotation_cols`
    /// normalized columns, before noise and blur.
    pub fn render_clean(&self, rotation_cols: f64, skin: &mut impl Rng) -> GrayImage {
        let phase = (skin.random_range(0..2 * SKIN_CHECK), skin.random_range(0..2 * SKIN_CHECK));
        let b = self.bounds;
        let (p, i) = (b.pupil, b.iris);
        let offset = TAU * rotation_cols / NORM_WIDTH as f64;
        // specular highlight in the upper-right iris, mid radius
        let hr = 0.5 * (p.r + i.r);
        let hl = (i.cx + hr * FRAC_1_SQRT_2, i.cy - hr * FRAC_1_SQRT_2);
        GrayImage::from_fn(EYE_WIDTH, EYE_HEIGHT, |x, y| {
            let (dx, dy) = (x as f64 - i.cx, i.cy - y as f64);
            let d = dx.hypot(dy);
            let v = if (x as f64 - hl.0).hypot(y as f64 - hl.1) <= HIGHLIGHT_RADIUS {
                255.0
            } else if d < p.r {
                PUPIL_LEVEL
            } else if d <= i.r {
                let theta = dy.atan2(dx) - offset;
                let rho = (d - p.r) / (i.r - p.r);
                IRIS_MEAN + IRIS_SPREAD * self.texture(theta, rho)
            } else {
                let check = ((x + phase.0) / SKIN_CHECK + (y + phase.1) / SKIN_CHECK) % 2;
                SKIN_MEAN + if check == 0 { SKIN_SPREAD } else { -SKIN_SPREAD }
            };
            v.round().clamp(0.0, 255.0) as u8
        })
        .expect("fixed extents")
    }
}

/// Additive Gaussian noise then Gaussian blur.
pub fn degrade(img: &GrayImage, noise_sigma: f64, blur_sigma: f64, rng: &mut impl Rng) -> GrayImage {
    let noisy = if noise_sigma > 0.0 {
        let n = Normal::new(0.0, noise_sigma).expect("positive sigma");
        let v: Vec<f64> = img.pixels().iter().map(|&p| f64::from(p) + n.sample(rng)).collect();
        GrayImage::from_f64(img.width(), img.height(), &v).expect("same extents")
    } else {
        img.clone()
    };
    gaussian_blur(&noisy, blur_sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub identity: usize,
    pub index: usize,
    pub rotation_cols: i64,
    pub blur_sigma: f64,
    pub eye: EyeImage,
    pub record: DatasetRecord,
}

fn color_for(identity: usize) -> IrisColor {
    [IrisColor::Blue, IrisColor::Brown, IrisColor::Gray][identity % 3]
}

/// Generates the corpus in memory. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<Identity>, Vec<Sample>)> {
    if cfg.identities == 0 || cfg.samples == 0 {
        return Err(Error::Config("synthetic corpus needs at least one identity and one sample".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.max_blur_sigma >= 0.0) || cfg.max_rotation_cols < 0 {
        return Err(Error::Config("noise, blur and rotation bounds must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let identities: Vec<Identity> = (0..cfg.identities).map(|_| Identity::random(&mut rng)).collect();
    let mut samples = Vec::with_capacity(cfg.identities * cfg.samples);
    for (id, ident) in identities.iter().enumerate() {
        for k in 0..cfg.samples {
            let rotation_cols = rng.random_range(-cfg.max_rotation_cols..=cfg.max_rotation_cols);
            let blur_sigma = if cfg.max_blur_sigma > 0.0 { rng.random_range(0.0..=cfg.max_blur_sigma) } else { 0.0 };
            let clean = ident.render_clean(rotation_cols as f64, &mut rng);
            let img = degrade(&clean, cfg.noise_sigma, blur_sigma, &mut rng);
            let trial = k as u32 + 1;
            let record = DatasetRecord {
                subject_id: format!("s{id:03}"),
                eye: Eye::Left,
                spoof: "none".into(),
                session_id: "1".into(),
                trial,
                spectrum: Spectrum::Vis,
                capture_distance_cm: if k < cfg.samples.div_ceil(2) { Distance::Cm25 } else { Distance::Cm50 },
                iris_color: color_for(id),
                template_path: PathBuf::new(),
            };
            samples.push(Sample {
                identity: id,
                index: k,
                rotation_cols,
                blur_sigma,
                eye: EyeImage::new(img)?,
                record,
            });
        }
    }
    Ok((identities, samples))
}

/// Writes every sample as a graymap plus `manifest.csv` into `dir`.
/// Returns the manifest path.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        save_gray(dir.join(format!("{}.pgm", s.record.file_stem())), s.eye.image())?;
    }
    let manifest = dir.join("manifest.csv");
    let file = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let records: Vec<DatasetRecord> = samples.iter().map(|s| s.record.clone()).collect();
    write_manifest(file, &records, |r| format!("{}.pgm", r.file_stem()))?;
    Ok(manifest)
}

/// Rotation angle in radians for a normalized column shift.
pub fn cols_to_radians(cols: f64) -> f64 {
    2.0 * PI * cols / NORM_WIDTH as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig {
            identities: 2,
            samples: 3,
            ..SynthConfig::default()
        };
        let (ids, a) = generate(&cfg).unwrap();
        let (_, b) = generate(&cfg).unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        for s in &a {
            assert!(s.rotation_cols.abs() <= 4);
            assert!((0.0..=1.0).contains(&s.blur_sigma));
        }
        assert_eq!(a[4].record.file_stem(), "s001-left-none-1-2");
        assert!(generate(&SynthConfig { identities: 0, ..cfg }).is_err());
    }

    #[test]
    fn texture_stays_in_band_and_wraps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = Identity::random(&mut rng);
        for k in 0..400 {
            let rho = k as f64 / 400.0;
            assert!((id.texture(0.0, rho) - id.texture(TAU, rho)).abs() < 1e-9);
        }
        let img = id.render_clean(0.0, &mut rng);
        let (cx, cy) = (id.bounds.iris.cx.round() as usize, id.bounds.iris.cy.round() as usize);
        assert_eq!(img.get(cx - 10, cy + 10), PUPIL_LEVEL as u8);
        assert!(img.get(cx + 5, 5) >= 190);
        let ring = img.get(cx + 75, cy);
        assert!((65..=155).contains(&ring));
    }

    #[test]
    fn rotation_moves_texture_counter_clockwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let id = Identity::random(&mut rng);
        let a = id.render_clean(0.0, &mut rng);
        let b = id.render_clean(8.0, &mut rng);
        let i = id.bounds.iris;
        let r = 0.5 * (id.bounds.pupil.r + i.r);
        let at = |img: &GrayImage, t: f64| {
            let (x, y) = (i.cx + r * t.cos(), i.cy - r * t.sin());
            img.get(x.round() as usize, y.round() as usize)
        };
        let mut same = 0;
        for k in 0..64 {
            let t = TAU * k as f64 / 64.0;
            if at(&a, t).abs_diff(at(&b, t + cols_to_radians(8.0))) <= 6 {
                same += 1;
            }
        }
        assert!(same >= 60, "{same}");
    }
}
