//! Iris boundary fitting and rubber-sheet normalization.

mod hough;
mod rubber;

pub use hough::{fit_boundaries, fit_boundaries_with, HoughConfig};
pub use rubber::{rubber_sheet, rubber_sheet_mask, sample_point, NormalizedIris, NormalizedMask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::PixelPoint;

/// Angular samples per normalized row.
pub const NORM_WIDTH: usize = 512;
/// Radial samples (rows) of the normalized iris.
pub const NORM_HEIGHT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    pub fn new(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, r }
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(self.cx, self.cy)
    }

    /// Point on the circle at angle `theta`, measured counter-clockwise as
    /// displayed (y axis pointing down) from the +x axis.
    #[inline]
    pub fn point_at(&self, theta: f64) -> (f64, f64) {
        let (s, c) = theta.sin_cos();
        (self.cx + self.r * c, self.cy - self.r * s)
    }

    /// Whether any part of the disk overlaps a `width` x `height` image.
    pub fn intersects_image(&self, width: usize, height: usize) -> bool {
        let nx = self.cx.clamp(0.0, width as f64);
        let ny = self.cy.clamp(0.0, height as f64);
        (self.cx - nx).hypot(self.cy - ny) < self.r
    }
}

/// Pupillary and limbic circles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrisBoundaries {
    pub pupil: Circle,
    pub iris: Circle,
}

impl IrisBoundaries {
    pub fn new(pupil: Circle, iris: Circle) -> Result<Self> {
        let b = Self { pupil, iris };
        b.validate()?;
        Ok(b)
    }

    /// Concentric boundaries.
    pub fn concentric(cx: f64, cy: f64, pupil_r: f64, iris_r: f64) -> Result<Self> {
        Self::new(Circle::new(cx, cy, pupil_r), Circle::new(cx, cy, iris_r))
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.pupil.cx, self.pupil.cy, self.pupil.r, self.iris.cx, self.iris.cy, self.iris.r];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite boundary parameters".into()));
        }
        if self.pupil.r <= 0.0 {
            return Err(Error::Geometry(format!("pupil radius {} must be positive", self.pupil.r)));
        }
        if self.pupil.r >= self.iris.r {
            return Err(Error::Geometry(format!(
                "pupil radius {:.2} must be smaller than iris radius {:.2}",
                self.pupil.r, self.iris.r
            )));
        }
        Ok(())
    }

    /// `validate` plus both circles overlapping the image.
    pub fn validate_in_image(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        for (name, c) in [("pupil", &self.pupil), ("iris", &self.iris)] {
            if !c.intersects_image(width, height) {
                return Err(Error::Geometry(format!("{name} circle lies entirely outside the image")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text).map_err(|e| Error::Geometry(format!("bounds json: {e}")))?;
        b.validate()?;
        Ok(b)
    }
}
