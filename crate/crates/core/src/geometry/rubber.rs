//! Rubber-sheet unwrapping of the iris annulus onto a fixed 512x64 grid.
//!
//! Column `j` samples angle `2 pi j / 512` (counter-clockwise as displayed,
//! starting at +x). Row `k` samples `t = (k + 0.5) / 64` along the segment
//! from the pupil boundary point to the limbic boundary point at that angle,
//! each taken about its own circle center, so non-concentric boundaries are
//! handled by linear interpolation between the two loci.

use std::f64::consts::PI;

use super::{IrisBoundaries, NORM_HEIGHT, NORM_WIDTH};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_sample, quantize, GrayImage, MaskImage};

/// Normalized iris texture: 64 rows (pupil side first) by 512 columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedIris(GrayImage);

impl NormalizedIris {
    pub fn new(image: GrayImage) -> Result<Self> {
        if image.width() != NORM_WIDTH || image.height() != NORM_HEIGHT {
            return Err(Error::Shape(format!(
                "normalized iris must be {NORM_WIDTH}x{NORM_HEIGHT}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(Self(image))
    }

    pub fn image(&self) -> &GrayImage {
        &self.0
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.0.get(col, row)
    }
}

/// Validity of each normalized sample, aligned with [`NormalizedIris`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedMask(MaskImage);

impl NormalizedMask {
    pub fn new(mask: MaskImage) -> Result<Self> {
        if mask.width() != NORM_WIDTH || mask.height() != NORM_HEIGHT {
            return Err(Error::Shape(format!(
                "normalized mask must be {NORM_WIDTH}x{NORM_HEIGHT}, got {}x{}",
                mask.width(),
                mask.height()
            )));
        }
        Ok(Self(mask))
    }

    pub fn full() -> Self {
        Self(MaskImage::from_fn(NORM_WIDTH, NORM_HEIGHT, |_, _| true).expect("fixed extents"))
    }

    pub fn mask(&self) -> &MaskImage {
        &self.0
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.0.get(col, row)
    }

    pub fn on_fraction(&self) -> f64 {
        self.0.count_on() as f64 / (NORM_WIDTH * NORM_HEIGHT) as f64
    }
}

/// Image-space location of normalized sample (`col`, `row`).
#[inline]
pub fn sample_point(b: &IrisBoundaries, col: usize, row: usize) -> (f64, f64) {
    let theta = 2.0 * PI * col as f64 / NORM_WIDTH as f64;
    let t = (row as f64 + 0.5) / NORM_HEIGHT as f64;
    let (px, py) = b.pupil.point_at(theta);
    let (ix, iy) = b.iris.point_at(theta);
    ((1.0 - t) * px + t * ix, (1.0 - t) * py + t * iy)
}

/// Unwraps the iris with bilinear sampling; samples outside the image are 0.
pub fn rubber_sheet(eye: &GrayImage, b: &IrisBoundaries) -> Result<NormalizedIris> {
    b.validate()?;
    let img = GrayImage::from_fn(NORM_WIDTH, NORM_HEIGHT, |col, row| {
        let (x, y) = sample_point(b, col, row);
        bilinear_sample(eye, x, y).map_or(0, quantize)
    })?;
    NormalizedIris::new(img)
}

/// Unwraps the mask with nearest-neighbour sampling. A sample is off when
/// it leaves the image or lands on an off pixel.
pub fn rubber_sheet_mask(mask: &MaskImage, b: &IrisBoundaries) -> Result<NormalizedMask> {
    b.validate()?;
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let m = MaskImage::from_fn(NORM_WIDTH, NORM_HEIGHT, |col, row| {
        let (x, y) = sample_point(b, col, row);
        let (xr, yr) = (x.round(), y.round());
        xr >= 0.0 && yr >= 0.0 && xr < w && yr < h && mask.get(xr as usize, yr as usize)
    })?;
    NormalizedMask::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Circle;

    fn centered() -> IrisBoundaries {
        IrisBoundaries::concentric(320.0, 240.0, 40.0, 110.0).unwrap()
    }

    fn annulus_mask(b: &IrisBoundaries) -> MaskImage {
        MaskImage::from_fn(640, 480, |x, y| {
            let d = (x as f64 - b.iris.cx).hypot(y as f64 - b.iris.cy);
            d <= b.iris.r + 1.0 && d >= b.pupil.r - 1.0
        })
        .unwrap()
    }

    #[test]
    fn constant_image() {
        let eye = GrayImage::filled(640, 480, 77).unwrap();
        let n = rubber_sheet(&eye, &centered()).unwrap();
        assert!(n.image().pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn radial_gradient_rows_are_constant() {
        let b = centered();
        let eye = GrayImage::from_fn(640, 480, |x, y| {
            ((x as f64 - 320.0).hypot(y as f64 - 240.0)).round().min(255.0) as u8
        })
        .unwrap();
        let n = rubber_sheet(&eye, &b).unwrap();
        for row in 0..NORM_HEIGHT {
            let t = (row as f64 + 0.5) / NORM_HEIGHT as f64;
            let expect = 40.0 + t * 70.0;
            for col in 0..NORM_WIDTH {
                assert!((f64::from(n.get(col, row)) - expect).abs() <= 1.5, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn full_annulus_mask_is_all_on() {
        let b = centered();
        let n = rubber_sheet_mask(&annulus_mask(&b), &b).unwrap();
        assert_eq!(n.on_fraction(), 1.0);
    }

    #[test]
    fn top_half_removed() {
        let b = centered();
        let mut m = annulus_mask(&b);
        for y in 0..240 {
            for x in 0..640 {
                m.set(x, y, false);
            }
        }
        let n = rubber_sheet_mask(&m, &b).unwrap();
        assert!((n.on_fraction() - 0.5).abs() <= 0.02, "{}", n.on_fraction());
        // Columns in (0, pi) look upward and must be fully off.
        for col in 8..248 {
            assert!((0..NORM_HEIGHT).all(|row| !n.get(col, row)));
        }
    }

    #[test]
    fn mid_radius_ring_turns_off_middle_rows() {
        let b = centered();
        let mut m = annulus_mask(&b);
        for y in 0..480 {
            for x in 0..640 {
                let d = (x as f64 - 320.0).hypot(y as f64 - 240.0);
                if (70.0..=80.0).contains(&d) {
                    m.set(x, y, false);
                }
            }
        }
        let n = rubber_sheet_mask(&m, &b).unwrap();
        for row in 0..NORM_HEIGHT {
            let r = 40.0 + (row as f64 + 0.5) / 64.0 * 70.0;
            let off = (0..NORM_WIDTH).filter(|&c| !n.get(c, row)).count();
            if (70.6..=79.4).contains(&r) {
                assert_eq!(off, NORM_WIDTH, "row {row} radius {r}");
            } else if !(69.0..=81.0).contains(&r) {
                assert_eq!(off, 0, "row {row} radius {r}");
            }
        }
    }

    #[test]
    fn out_of_image_samples_are_zero_and_masked() {
        let b = IrisBoundaries::concentric(20.0, 240.0, 30.0, 90.0).unwrap();
        let eye = GrayImage::filled(640, 480, 200).unwrap();
        let mask = MaskImage::from_fn(640, 480, |_, _| true).unwrap();
        let n = rubber_sheet(&eye, &b).unwrap();
        let nm = rubber_sheet_mask(&mask, &b).unwrap();
        // Column 256 points along -x, outside the image for large t.
        assert_eq!(n.get(256, 63), 0);
        assert!(!nm.get(256, 63));
        assert!(nm.get(0, 63));
    }

    #[test]
    fn non_concentric_sampling_hits_both_boundaries() {
        let b = IrisBoundaries::new(Circle::new(300.0, 240.0, 30.0), Circle::new(320.0, 240.0, 100.0)).unwrap();
        // Column 0 runs along +x from x = 330 to x = 420.
        let (x0, _) = sample_point(&b, 0, 0);
        let (x1, _) = sample_point(&b, 0, 63);
        assert!((x0 - (330.0 + 90.0 * 0.5 / 64.0)).abs() < 1e-9);
        assert!((x1 - (330.0 + 90.0 * 63.5 / 64.0)).abs() < 1e-9);
    }

    #[test]
    fn rejects_inverted_radii() {
        let eye = GrayImage::filled(640, 480, 1).unwrap();
        let bad = IrisBoundaries {
            pupil: Circle::new(320.0, 240.0, 120.0),
            iris: Circle::new(320.0, 240.0, 100.0),
        };
        assert!(matches!(rubber_sheet(&eye, &bad), Err(Error::Geometry(_))));
    }
}
