//! Raster types shared by every pipeline stage.
//!
//! All images use a top-left origin with x increasing rightward and y
//! increasing downward, the same convention as detector pixel coordinates.

pub(crate) mod filter;
mod io;

pub use filter::{bilinear_sample, gaussian_blur, resize_bilinear, rotate_about};
pub use io::{load_gray, load_mask, save_gray, save_mask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the cropped eye image handed to segmentation.
pub const EYE_WIDTH: usize = 640;
/// Height of the cropped eye image handed to segmentation.
pub const EYE_HEIGHT: usize = 480;

/// 8-bit single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image extents {width}x{height} must be positive")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "buffer of {} bytes for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Pixel values as `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    /// Rounds and saturates a real-valued buffer into an image.
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| quantize(v)).collect())
    }
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// 8-bit RGB raster, row-major with interleaved R, G, B bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image extents {width}x{height} must be positive")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "buffer of {} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Red channel of an RGB image. Visible-light iris texture has the best
/// contrast in red, so every color input goes through here rather than luma.
pub fn extract_red_channel(img: &RgbImage) -> GrayImage {
    let red = img.pixels.chunks_exact(3).map(|px| px[0]).collect();
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: red,
    }
}

/// A grayscale image of exactly 640x480, the segmentation input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EyeImage(GrayImage);

impl EyeImage {
    pub fn new(image: GrayImage) -> Result<Self> {
        if image.width != EYE_WIDTH || image.height != EYE_HEIGHT {
            return Err(Error::Shape(format!(
                "eye image must be {EYE_WIDTH}x{EYE_HEIGHT}, got {}x{}",
                image.width, image.height
            )));
        }
        Ok(Self(image))
    }

    pub fn image(&self) -> &GrayImage {
        &self.0
    }

    pub fn into_image(self) -> GrayImage {
        self.0
    }
}

impl AsRef<GrayImage> for EyeImage {
    fn as_ref(&self) -> &GrayImage {
        &self.0
    }
}

/// Binary raster: `true` marks iris pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("mask extents {width}x{height} must be positive")));
        }
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "buffer of {} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count_on(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mask as a 0/255 grayscale image, the on-disk representation.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Pixels at or above 128 become on.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|&p| p >= 128).collect(),
        }
    }

    pub fn same_extent(&self, img: &GrayImage) -> bool {
        self.width == img.width && self.height == img.height
    }
}

/// A point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box with real-valued corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::Domain(format!("degenerate bounding box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Whether `other` lies inside this box, allowing `tolerance` pixels of overhang.
    pub fn contains_box(&self, other: &BoundingBox, tolerance: f64) -> bool {
        other.x_min >= self.x_min - tolerance
            && other.y_min >= self.y_min - tolerance
            && other.x_max <= self.x_max + tolerance
            && other.y_max <= self.y_max + tolerance
    }

    /// Integer pixel range `[x0, x1) x [y0, y1)` after rounding and clamping
    /// to a `width` x `height` image, or `None` if nothing remains.
    pub fn pixel_range(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let clamp = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        let x0 = clamp(self.x_min, width);
        let x1 = clamp(self.x_max, width);
        let y0 = clamp(self.y_min, height);
        let y1 = clamp(self.y_max, height);
        (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
    }
}

/// Copies the pixels under `bbox` (rounded to integers, clamped to the image)
/// without resampling.
pub fn crop(img: &GrayImage, bbox: &BoundingBox) -> Result<GrayImage> {
    let (x0, y0, x1, y1) = bbox.pixel_range(img.width, img.height).ok_or(Error::EmptyCrop)?;
    let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        pixels.extend_from_slice(&img.row(y)[x0..x1]);
    }
    GrayImage::new(x1 - x0, y1 - y0, pixels)
}
