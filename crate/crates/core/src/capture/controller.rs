use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{compute_zoom, focus_target, CoordinateMapper, DetectionFrame, Detector, ZoomCommand};
use crate::error::{Error, Result};
use crate::imaging::{crop, resize_bilinear, BoundingBox, EyeImage, GrayImage, PixelPoint, EYE_HEIGHT, EYE_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Searching,
    Adjusting,
    Settling,
    Captured,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Searching => "Searching",
            Phase::Adjusting => "Adjusting",
            Phase::Settling => "Settling",
            Phase::Captured => "Captured",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub mapper: CoordinateMapper,
    /// Desired eye-box width in sensor pixels.
    pub target_width_bbox: f64,
    pub max_zoom: f64,
    /// Frames with `|zoom_factor - 1| <= zoom_deadband` count as well framed.
    pub zoom_deadband: f64,
    pub settle_frames: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            mapper: CoordinateMapper::for_sensor(4000.0, 3000.0).expect("valid dimensions"),
            target_width_bbox: 600.0,
            max_zoom: 10.0,
            zoom_deadband: 0.1,
            settle_frames: 3,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_width_bbox > 0.0) {
            return Err(Error::Config("target_width_bbox must be positive".into()));
        }
        if !(self.max_zoom >= 1.0) {
            return Err(Error::Config("max_zoom must be at least 1".into()));
        }
        if !(self.zoom_deadband >= 0.0) {
            return Err(Error::Config("zoom_deadband must be non-negative".into()));
        }
        if self.settle_frames == 0 {
            return Err(Error::Config("settle_frames must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub phase: Phase,
    pub current_zoom: f64,
    /// Last focus point, sensor space.
    pub focus_point: PixelPoint,
    /// Consecutive well-framed detections.
    pub settle_count: u32,
    pub last_frame_index: Option<u64>,
}

impl ControllerState {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            phase: Phase::Searching,
            current_zoom: 1.0,
            focus_point: PixelPoint::new(cfg.mapper.original_width / 2.0, cfg.mapper.original_height / 2.0),
            settle_count: 0,
            last_frame_index: None,
        }
    }

    /// The captured image failed quality checks: resume adjusting with the
    /// current zoom. No effect outside `Captured`.
    pub fn on_quality_failure(mut self) -> Self {
        if self.phase == Phase::Captured {
            self.phase = Phase::Adjusting;
            self.settle_count = 0;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Command {
    Zoom(ZoomCommand),
    FocusAt(PixelPoint),
    /// Crop the current frame under this sensor-space eye box.
    CropRequest(BoundingBox),
}

/// Advances the capture state machine by one detection frame.
///
/// Transitions: `Searching <-> Adjusting -> Settling -> Captured`, with
/// `Settling -> Adjusting` when a frame leaves the zoom deadband. Every
/// detection outside `Captured` emits a zoom and a focus command; the
/// `Settling -> Captured` step additionally emits the crop request.
pub fn step(
    state: &ControllerState,
    frame: &DetectionFrame,
    cfg: &ControllerConfig,
) -> Result<(ControllerState, Vec<Command>)> {
    if let Some(prev) = state.last_frame_index {
        if frame.frame_index <= prev {
            return Err(Error::Sequencing {
                previous: prev,
                got: frame.frame_index,
            });
        }
    }
    let mut next = *state;
    next.last_frame_index = Some(frame.frame_index);
    let mut commands = Vec::new();

    if state.phase == Phase::Captured {
        return Ok((next, commands));
    }

    let (Some(eye), Some(iris)) = (&frame.eye_box, &frame.iris_box) else {
        next.phase = Phase::Searching;
        next.settle_count = 0;
        return Ok((next, commands));
    };

    let eye_sensor = cfg.mapper.map_box(eye)?;
    let iris_sensor = cfg.mapper.map_box(iris)?;
    let zoom = compute_zoom(&eye_sensor, cfg.target_width_bbox)?;
    let focus = focus_target(&iris_sensor);
    next.current_zoom = (state.current_zoom * zoom.zoom_factor).clamp(1.0, cfg.max_zoom);
    next.focus_point = focus;
    commands.push(Command::Zoom(zoom));
    commands.push(Command::FocusAt(focus));

    let framed = (zoom.zoom_factor - 1.0).abs() <= cfg.zoom_deadband;
    next.settle_count = if framed { state.settle_count + 1 } else { 0 };
    next.phase = match (state.phase, framed) {
        (Phase::Searching, _) => Phase::Adjusting,
        (_, false) => Phase::Adjusting,
        (Phase::Adjusting, true) => Phase::Settling,
        (Phase::Settling, true) if next.settle_count >= cfg.settle_frames => {
            commands.push(Command::CropRequest(eye_sensor));
            Phase::Captured
        }
        (phase, true) => phase,
    };
    Ok((next, commands))
}

/// Crops the sensor frame under the eye box and resamples to 640x480.
pub fn crop_eye(frame_image: &GrayImage, eye_box_sensor: &BoundingBox) -> Result<EyeImage> {
    let region = crop(frame_image, eye_box_sensor)?;
    EyeImage::new(resize_bilinear(&region, EYE_WIDTH, EYE_HEIGHT))
}

/// One line of the per-frame controller trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub frame_index: u64,
    pub phase: Phase,
    pub zoom: f64,
    pub settle_count: u32,
    pub commands: Vec<Command>,
}

impl TraceRow {
    pub fn new(state: &ControllerState, frame_index: u64, commands: Vec<Command>) -> Self {
        Self {
            frame_index,
            phase: state.phase,
            zoom: state.current_zoom,
            settle_count: state.settle_count,
            commands,
        }
    }

    fn commands_field(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.commands.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            match c {
                Command::Zoom(z) => write!(out, "zoom:{:.4}", z.zoom_factor),
                Command::FocusAt(p) => write!(out, "focus:{:.2}/{:.2}", p.x, p.y),
                Command::CropRequest(b) => {
                    write!(out, "crop:{:.2}/{:.2}/{:.2}/{:.2}", b.x_min, b.y_min, b.x_max, b.y_max)
                }
            }
            .expect("writing to a String");
        }
        out
    }
}

/// Writes the trace as CSV: `frame_index,phase,zoom,settle_count,commands`.
pub fn write_trace(w: &mut impl Write, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "frame_index,phase,zoom,settle_count,commands")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.4},{},{}",
            r.frame_index,
            r.phase.as_str(),
            r.zoom,
            r.settle_count,
            r.commands_field()
        )?;
    }
    Ok(())
}

/// Outcome of driving the controller over a detection stream.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub trace: Vec<TraceRow>,
    pub final_state: ControllerState,
    /// Frame index and sensor eye box of the accepted capture, if any.
    pub capture: Option<(u64, BoundingBox)>,
}

/// Runs the controller until the stream ends or a capture is accepted.
///
/// `on_capture` plays the role of the downstream quality check: returning
/// `false` sends the controller back to `Adjusting`.
pub fn simulate(
    detector: &mut dyn Detector,
    cfg: &ControllerConfig,
    mut on_capture: impl FnMut(u64, &BoundingBox) -> Result<bool>,
) -> Result<Simulation> {
    cfg.validate()?;
    let mut state = ControllerState::new(cfg);
    let mut trace = Vec::new();
    while let Some(frame) = detector.next_frame(state.current_zoom) {
        let (next, commands) = step(&state, &frame, cfg)?;
        let crop_box = commands.iter().find_map(|c| match c {
            Command::CropRequest(b) => Some(*b),
            _ => None,
        });
        trace.push(TraceRow::new(&next, frame.frame_index, commands));
        state = next;
        if let Some(b) = crop_box {
            if on_capture(frame.frame_index, &b)? {
                return Ok(Simulation {
                    trace,
                    final_state: state,
                    capture: Some((frame.frame_index, b)),
                });
            }
            state = state.on_quality_failure();
        }
    }
    Ok(Simulation {
        trace,
        final_state: state,
        capture: None,
    })
}
