//! Capture-loop math driven by detection streams instead of a live camera.
//!
//! Detections arrive in the detector's resized frame (416x416), are mapped
//! back to sensor pixels, and drive a small zoom/focus state machine that
//! ends by requesting a 640x480 eye crop.

mod controller;
mod detections;

pub use controller::{
    crop_eye, simulate, step, write_trace, Command, ControllerConfig, ControllerState, Phase, Simulation,
    TraceRow,
};
pub use detections::{
    parse_detections, read_detections, DetectionFrame, Detector, ReplayDetector, SyntheticDetector,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, PixelPoint};

/// Detector input side length.
pub const DETECTOR_INPUT: f64 = 416.0;

/// Maps resized-frame coordinates back to sensor coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateMapper {
    pub original_width: f64,
    pub original_height: f64,
    pub resized_width: f64,
    pub resized_height: f64,
}

impl CoordinateMapper {
    pub fn new(original_width: f64, original_height: f64, resized_width: f64, resized_height: f64) -> Result<Self> {
        let dims = [original_width, original_height, resized_width, resized_height];
        if dims.iter().any(|d| !d.is_finite() || *d < 1.0) {
            return Err(Error::Domain(format!("mapper dimensions must be >= 1, got {dims:?}")));
        }
        Ok(Self {
            original_width,
            original_height,
            resized_width,
            resized_height,
        })
    }

    /// Mapper for a sensor of the given size feeding a 416x416 detector.
    pub fn for_sensor(width: f64, height: f64) -> Result<Self> {
        Self::new(width, height, DETECTOR_INPUT, DETECTOR_INPUT)
    }

    pub fn scale_x(&self) -> f64 {
        self.original_width / self.resized_width
    }

    pub fn scale_y(&self) -> f64 {
        self.original_height / self.resized_height
    }

    pub fn map_point(&self, p: PixelPoint) -> Result<PixelPoint> {
        let inside = p.x.is_finite()
            && p.y.is_finite()
            && (0.0..=self.resized_width).contains(&p.x)
            && (0.0..=self.resized_height).contains(&p.y);
        if !inside {
            return Err(Error::OutOfRange(format!(
                "point ({}, {}) outside the {}x{} resized frame",
                p.x, p.y, self.resized_width, self.resized_height
            )));
        }
        Ok(PixelPoint::new(p.x * self.scale_x(), p.y * self.scale_y()))
    }

    pub fn map_box(&self, b: &BoundingBox) -> Result<BoundingBox> {
        b.validate()?;
        let lo = self.map_point(PixelPoint::new(b.x_min, b.y_min))?;
        let hi = self.map_point(PixelPoint::new(b.x_max, b.y_max))?;
        BoundingBox::new(lo.x, lo.y, hi.x, hi.y)
    }
}

/// Zoom ratio that would bring the eye box to the target width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoomCommand {
    pub zoom_factor: f64,
    pub target_width_bbox: f64,
}

pub fn compute_zoom(eye_box_sensor: &BoundingBox, target_width_bbox: f64) -> Result<ZoomCommand> {
    let width = eye_box_sensor.width();
    if !(width > 0.0) || !(target_width_bbox > 0.0) {
        return Err(Error::Domain(format!(
            "zoom needs positive widths, got box {width} and target {target_width_bbox}"
        )));
    }
    Ok(ZoomCommand {
        zoom_factor: target_width_bbox / width,
        target_width_bbox,
    })
}

/// Focus point: the iris box center.
pub fn focus_target(iris_box_sensor: &BoundingBox) -> PixelPoint {
    iris_box_sensor.center()
}
