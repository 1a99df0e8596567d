//! Detection streams: sidecar-file replay and a synthetic camera model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CoordinateMapper, DETECTOR_INPUT};
use crate::error::{Error, Result};
use crate::imaging::BoundingBox;

/// One detector output, in resized (416x416) coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame_index: u64,
    pub eye_box: Option<BoundingBox>,
    pub iris_box: Option<BoundingBox>,
    pub confidence: f64,
}

impl DetectionFrame {
    pub fn empty(frame_index: u64) -> Self {
        Self {
            frame_index,
            eye_box: None,
            iris_box: None,
            confidence: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Domain(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        for b in self.eye_box.iter().chain(self.iris_box.iter()) {
            b.validate()?;
        }
        if let (Some(eye), Some(iris)) = (&self.eye_box, &self.iris_box) {
            if !eye.contains_box(iris, 1.0) {
                return Err(Error::Domain(format!(
                    "frame {}: iris box lies outside the eye box",
                    self.frame_index
                )));
            }
        }
        Ok(())
    }

    /// Both boxes present.
    pub fn detected(&self) -> bool {
        self.eye_box.is_some() && self.iris_box.is_some()
    }
}

/// Parses the whitespace-separated sidecar format:
/// `frame_index eye_xmin eye_ymin eye_xmax eye_ymax iris_xmin iris_ymin iris_xmax iris_ymax confidence`.
/// A missing box is written as four `-` tokens. Blank lines and `#` comments are ignored.
pub fn parse_detections(text: &str) -> Result<Vec<DetectionFrame>> {
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("detections line {}: {what}", lineno + 1));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 10 {
            return Err(bad(&format!("expected 10 fields, found {}", tokens.len())));
        }
        let frame_index: u64 = tokens[0].parse().map_err(|_| bad("bad frame index"))?;
        let parse_box = |t: &[&str]| -> Result<Option<BoundingBox>> {
            if t.iter().all(|s| *s == "-") {
                return Ok(None);
            }
            let v: Vec<f64> = t
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad box coordinate"))?;
            BoundingBox::new(v[0], v[1], v[2], v[3]).map(Some)
        };
        let eye_box = parse_box(&tokens[1..5])?;
        let iris_box = parse_box(&tokens[5..9])?;
        let confidence = if tokens[9] == "-" {
            0.0
        } else {
            tokens[9].parse().map_err(|_| bad("bad confidence"))?
        };
        let frame = DetectionFrame {
            frame_index,
            eye_box,
            iris_box,
            confidence,
        };
        frame.validate()?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionFrame>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}

/// Source of detection frames. `current_zoom` lets simulated cameras react
/// to the controller; replayed streams ignore it.
pub trait Detector {
    fn next_frame(&mut self, current_zoom: f64) -> Option<DetectionFrame>;
}

pub struct ReplayDetector {
    frames: std::vec::IntoIter<DetectionFrame>,
}

impl ReplayDetector {
    pub fn new(frames: Vec<DetectionFrame>) -> Self {
        Self {
            frames: frames.into_iter(),
        }
    }
}

impl Detector for ReplayDetector {
    fn next_frame(&mut self, _current_zoom: f64) -> Option<DetectionFrame> {
        self.frames.next()
    }
}

/// A digital-zoom camera looking at a single eye.
///
/// At zoom 1 the eye occupies `eye_width` sensor pixels centered at
/// `eye_center`; zoom `z` magnifies about the sensor center. Detections are
/// reported in resized coordinates with Gaussian corner jitter.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    pub mapper: CoordinateMapper,
    pub eye_center: (f64, f64),
    pub eye_width: f64,
    /// Eye box height / width.
    pub eye_aspect: f64,
    /// Iris box width / eye box width.
    pub iris_fraction: f64,
    pub jitter: f64,
    /// Probability that a frame has no detection.
    pub dropout: f64,
    pub frames: u64,
    next_index: u64,
    rng: ChaCha8Rng,
}

impl SyntheticDetector {
    pub fn new(mapper: CoordinateMapper, eye_center: (f64, f64), eye_width: f64, frames: u64, seed: u64) -> Self {
        Self {
            mapper,
            eye_center,
            eye_width,
            eye_aspect: 0.55,
            iris_fraction: 0.4,
            jitter: 0.0,
            dropout: 0.0,
            frames,
            next_index: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn noisy(&mut self, v: f64) -> f64 {
        if self.jitter > 0.0 {
            let n: f64 = self.rng.sample(rand_distr::StandardNormal);
            v + self.jitter * n
        } else {
            v
        }
    }
}

impl Detector for SyntheticDetector {
    fn next_frame(&mut self, current_zoom: f64) -> Option<DetectionFrame> {
        if self.next_index >= self.frames {
            return None;
        }
        let frame_index = self.next_index;
        self.next_index += 1;
        if self.dropout > 0.0 && self.rng.random_bool(self.dropout) {
            return Some(DetectionFrame::empty(frame_index));
        }
        let (sw, sh) = (self.mapper.original_width, self.mapper.original_height);
        let cx = sw / 2.0 + (self.eye_center.0 - sw / 2.0) * current_zoom;
        let cy = sh / 2.0 + (self.eye_center.1 - sh / 2.0) * current_zoom;
        let ew = self.eye_width * current_zoom;
        let eh = ew * self.eye_aspect;
        let iw = ew * self.iris_fraction;
        let to_resized = |x: f64, y: f64| (x / self.mapper.scale_x(), y / self.mapper.scale_y());
        let (ex0, ey0) = to_resized(cx - ew / 2.0, cy - eh / 2.0);
        let (ex1, ey1) = to_resized(cx + ew / 2.0, cy + eh / 2.0);
        let (ix0, iy0) = to_resized(cx - iw / 2.0, cy - iw / 2.0);
        let (ix1, iy1) = to_resized(cx + iw / 2.0, cy + iw / 2.0);
        let inside = |v: f64| (0.0..=DETECTOR_INPUT).contains(&v);
        if ![ex0, ey0, ex1, ey1].into_iter().all(inside) {
            // Eye partly out of frame: the detector misses it.
            return Some(DetectionFrame::empty(frame_index));
        }
        let (ex0, ey0, ex1, ey1) = (self.noisy(ex0), self.noisy(ey0), self.noisy(ex1), self.noisy(ey1));
        let clampr = |v: f64| v.clamp(0.0, DETECTOR_INPUT);
        let eye = BoundingBox::new(clampr(ex0), clampr(ey0), clampr(ex1), clampr(ey1)).ok();
        let iris = BoundingBox::new(ix0, iy0, ix1, iy1).ok();
        Some(DetectionFrame {
            frame_index,
            eye_box: eye,
            iris_box: iris,
            confidence: 0.9,
        })
    }
}
