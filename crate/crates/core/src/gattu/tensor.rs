use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Feature map in HWC order: row-major pixels, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("tensor value at {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    t.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        t
    }

    /// Single-channel tensor with pixel values scaled to [0, 1].
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: 1,
            data: img.pixels().iter().map(|&p| f32::from(p) / 255.0).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_spatial(&self, other: &Tensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// 2x2 max pooling with stride 2; extents must be even.
    pub fn max_pool2(&self) -> Result<Tensor> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "max pool needs even extents, got {}x{}",
                self.height, self.width
            )));
        }
        let (h, w, c) = (self.height / 2, self.width / 2, self.channels);
        let mut out = Tensor::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let o = (y * w + x) * c;
                let i00 = ((2 * y) * self.width + 2 * x) * c;
                let i01 = i00 + c;
                let i10 = i00 + self.width * c;
                let i11 = i10 + c;
                for k in 0..c {
                    out.data[o + k] = self.data[i00 + k]
                        .max(self.data[i01 + k])
                        .max(self.data[i10 + k])
                        .max(self.data[i11 + k]);
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Tensor {
        let (h, w, c) = (self.height * 2, self.width * 2, self.channels);
        let mut out = Tensor::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let src = ((y / 2) * self.width + x / 2) * c;
                let dst = (y * w + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    /// Channel concatenation `[self, other]`.
    pub fn concat(&self, other: &Tensor) -> Result<Tensor> {
        if !self.same_spatial(other) {
            return Err(Error::Shape(format!(
                "concat of {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let (a, b) = (self.channels, other.channels);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for p in 0..self.height * self.width {
            data.extend_from_slice(&self.data[p * a..(p + 1) * a]);
            data.extend_from_slice(&other.data[p * b..(p + 1) * b]);
        }
        Ok(Tensor {
            height: self.height,
            width: self.width,
            channels: a + b,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(
            (self.height, self.width, self.channels),
            (other.height, other.width, other.channels)
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
