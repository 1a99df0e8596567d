//! Row-wise complex Gabor filtering of the normalized iris into a two-plane
//! phase code, plus the packed template type and its file format.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NormalizedIris, NormalizedMask, NORM_HEIGHT, NORM_WIDTH};

pub const DEFAULT_WAVELENGTH: f64 = 18.0;

/// One complex kernel, taps at offsets `-half_width ..= half_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaborFilter {
    pub wavelength: f64,
    pub sigma: f64,
    pub half_width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl GaborFilter {
    pub fn new(wavelength: f64) -> Result<Self> {
        if !(wavelength > 0.0 && wavelength <= 256.0) {
            return Err(Error::Config(format!("wavelength must be in (0, 256], got {wavelength}")));
        }
        let sigma = 0.5 * wavelength;
        let half_width = (2.0 * sigma).ceil() as usize;
        let offsets = || (0..=2 * half_width).map(|t| t as f64 - half_width as f64);
        let env: Vec<f64> = offsets().map(|x| (-x * x / (2.0 * sigma * sigma)).exp()).collect();
        let carrier = |x: f64| 2.0 * PI * x / wavelength;
        let kappa = offsets().zip(&env).map(|(x, g)| carrier(x).cos() * g).sum::<f64>() / env.iter().sum::<f64>();
        let re = offsets().zip(&env).map(|(x, g)| (carrier(x).cos() - kappa) * g).collect();
        let im = offsets().zip(&env).map(|(x, g)| carrier(x).sin() * g).collect();
        Ok(Self {
            wavelength,
            sigma,
            half_width,
            re,
            im,
        })
    }

    pub fn taps(&self) -> usize {
        2 * self.half_width + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaborBank {
    pub filters: Vec<GaborFilter>,
}

impl Default for GaborBank {
    fn default() -> Self {
        build_bank(&[DEFAULT_WAVELENGTH]).expect("default wavelength is valid")
    }
}

pub fn build_bank(wavelengths: &[f64]) -> Result<GaborBank> {
    if wavelengths.is_empty() {
        return Err(Error::Config("filter bank needs at least one wavelength".into()));
    }
    let filters = wavelengths.iter().map(|&l| GaborFilter::new(l)).collect::<Result<Vec<_>>>()?;
    Ok(GaborBank { filters })
}

/// Bit-packed code and mask planes. Bit `(plane, row, col)` sits at index
/// `(plane * height + row) * width + col`, least significant bit first
/// within each u64 word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrisTemplate {
    planes: usize,
    width: usize,
    height: usize,
    code: Vec<u64>,
    mask: Vec<u64>,
}

pub const TEMPLATE_MAGIC: &[u8; 4] = b"IRT1";
pub const TEMPLATE_VERSION: u32 = 1;

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl IrisTemplate {
    /// All-zero code with an all-off mask.
    pub fn empty(planes: usize, width: usize, height: usize) -> Result<Self> {
        if planes == 0 || width == 0 || height == 0 {
            return Err(Error::Template(format!("degenerate geometry {planes}x{height}x{width}")));
        }
        let n = words_for(planes * width * height);
        Ok(Self {
            planes,
            width,
            height,
            code: vec![0; n],
            mask: vec![0; n],
        })
    }

    pub fn from_words(planes: usize, width: usize, height: usize, code: Vec<u64>, mask: Vec<u64>) -> Result<Self> {
        let mut t = Self::empty(planes, width, height)?;
        if code.len() != t.code.len() || mask.len() != t.mask.len() {
            return Err(Error::Template(format!(
                "expected {} code and mask words, got {} and {}",
                t.code.len(),
                code.len(),
                mask.len()
            )));
        }
        t.code = code;
        t.mask = mask;
        t.clear_padding();
        Ok(t)
    }

    /// Builds a template from per-bit closures.
    pub fn from_fn(
        planes: usize,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> (bool, bool),
    ) -> Result<Self> {
        let mut t = Self::empty(planes, width, height)?;
        for p in 0..planes {
            for r in 0..height {
                for c in 0..width {
                    let (code, mask) = f(p, r, c);
                    t.set(p, r, c, code, mask);
                }
            }
        }
        Ok(t)
    }

    fn clear_padding(&mut self) {
        let bits = self.bit_len();
        if !bits.is_multiple_of(64) {
            let keep = (1u64 << (bits % 64)) - 1;
            *self.code.last_mut().expect("non-empty") &= keep;
            *self.mask.last_mut().expect("non-empty") &= keep;
        }
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_len(&self) -> usize {
        self.planes * self.width * self.height
    }

    pub fn code_words(&self) -> &[u64] {
        &self.code
    }

    pub fn mask_words(&self) -> &[u64] {
        &self.mask
    }

    pub fn same_geometry(&self, other: &IrisTemplate) -> bool {
        (self.planes, self.width, self.height) == (other.planes, other.width, other.height)
    }

    #[inline]
    fn index(&self, plane: usize, row: usize, col: usize) -> usize {
        (plane * self.height + row) * self.width + col
    }

    #[inline]
    pub fn code_bit(&self, plane: usize, row: usize, col: usize) -> bool {
        let i = self.index(plane, row, col);
        self.code[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn mask_bit(&self, plane: usize, row: usize, col: usize) -> bool {
        let i = self.index(plane, row, col);
        self.mask[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, plane: usize, row: usize, col: usize, code: bool, mask: bool) {
        let i = self.index(plane, row, col);
        let bit = 1u64 << (i % 64);
        if code {
            self.code[i / 64] |= bit;
        } else {
            self.code[i / 64] &= !bit;
        }
        if mask {
            self.mask[i / 64] |= bit;
        } else {
            self.mask[i / 64] &= !bit;
        }
    }

    pub fn mask_count(&self) -> u64 {
        self.mask.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    /// Circularly shifts every row `s` columns to the right:
    /// `out[col] = self[(col - s) mod width]`.
    pub fn shift_columns(&self, s: i64) -> IrisTemplate {
        let w = self.width as i64;
        let s = s.rem_euclid(w) as usize;
        if s == 0 {
            return self.clone();
        }
        if self.width.is_multiple_of(64) {
            let mut out = self.clone();
            let per_row = self.width / 64;
            for row in 0..self.planes * self.height {
                let words = row * per_row..(row + 1) * per_row;
                rotate_row(&self.code[words.clone()], &mut out.code[words.clone()], s);
                rotate_row(&self.mask[words.clone()], &mut out.mask[words], s);
            }
            return out;
        }
        let mut out = Self::empty(self.planes, self.width, self.height).expect("geometry already valid");
        for p in 0..self.planes {
            for r in 0..self.height {
                for c in 0..self.width {
                    let src = (c + self.width - s) % self.width;
                    out.set(p, r, c, self.code_bit(p, r, src), self.mask_bit(p, r, src));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 16 * self.code.len());
        out.extend_from_slice(TEMPLATE_MAGIC);
        for v in [TEMPLATE_VERSION, self.planes as u32, self.width as u32, self.height as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for w in self.code.iter().chain(&self.mask) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != TEMPLATE_MAGIC {
            return Err(Error::Template("not an IRT1 template".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = field(0);
        if version != TEMPLATE_VERSION {
            return Err(Error::Template(format!("unsupported template version {version}")));
        }
        let (planes, width, height) = (field(1) as usize, field(2) as usize, field(3) as usize);
        let n = planes
            .checked_mul(width)
            .and_then(|v| v.checked_mul(height))
            .map(words_for)
            .ok_or_else(|| Error::Template("template extents overflow".into()))?;
        let body = &bytes[20..];
        if body.len() != 16 * n {
            return Err(Error::Template(format!(
                "expected {} payload bytes, found {}",
                16 * n,
                body.len()
            )));
        }
        let words: Vec<u64> = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (code, mask) = words.split_at(n);
        Self::from_words(planes, width, height, code.to_vec(), mask.to_vec())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Rotates a little-endian multi-word bit row right by `s` bit positions
/// (toward higher column indices).
fn rotate_row(src: &[u64], dst: &mut [u64], s: usize) {
    let n = src.len();
    let (q, r) = (s / 64, s % 64);
    for (i, d) in dst.iter_mut().enumerate() {
        let lo = src[(i + n - q) % n];
        *d = if r == 0 {
            lo
        } else {
            let prev = src[(i + 2 * n - q - 1) % n];
            (lo << r) | (prev >> (64 - r))
        };
    }
}

/// Filter responses for one row of samples, mean removed first.
/// Returns `(re, im)` per column.
pub(crate) fn filter_row(row: &[u8], f: &GaborFilter) -> (Vec<f64>, Vec<f64>) {
    let w = row.len();
    let sum: u64 = row.iter().map(|&v| u64::from(v)).sum();
    let mean = sum as f64 / w as f64;
    let v: Vec<f64> = row.iter().map(|&p| f64::from(p) - mean).collect();
    let hw = f.half_width;
    let at = |j: usize, d: isize| v[(j as isize + d).rem_euclid(w as isize) as usize];
    let mut re = vec![0.0; w];
    let mut im = vec![0.0; w];
    for j in 0..w {
        // response[j] = sum_x k(x) v[j - x]; the real kernel is even and the
        // imaginary kernel odd, so taps are folded in pairs.
        let mut r = f.re[hw] * v[j];
        let mut i = 0.0;
        for x in 1..=hw {
            let (minus, plus) = (at(j, -(x as isize)), at(j, x as isize));
            r += f.re[hw + x] * (minus + plus);
            i += f.im[hw + x] * (minus - plus);
        }
        re[j] = r;
        im[j] = i;
    }
    (re, im)
}

/// Phase-quantizes the normalized iris. Planes are `[re, im]` per filter.
pub fn encode(iris: &NormalizedIris, mask: &NormalizedMask, bank: &GaborBank) -> Result<IrisTemplate> {
    let (w, h) = (NORM_WIDTH, NORM_HEIGHT);
    let img = iris.image();
    let m = mask.mask();
    if img.width() != w || img.height() != h || m.width() != w || m.height() != h {
        return Err(Error::Shape("iris and mask must both be 512x64".into()));
    }
    let mut t = IrisTemplate::empty(2 * bank.filters.len(), w, h)?;
    for (fi, f) in bank.filters.iter().enumerate() {
        if f.taps() > w {
            return Err(Error::Config(format!("kernel of {} taps exceeds row width {w}", f.taps())));
        }
        for row in 0..h {
            let (re, im) = filter_row(img.row(row), f);
            let valid = support_mask(&(0..w).map(|c| m.get(c, row)).collect::<Vec<_>>(), f.half_width);
            for col in 0..w {
                t.set(2 * fi, row, col, re[col] >= 0.0, valid[col]);
                t.set(2 * fi + 1, row, col, im[col] >= 0.0, valid[col]);
            }
        }
    }
    Ok(t)
}

/// On where every sample within `half_width` (circularly) is on.
fn support_mask(row: &[bool], half_width: usize) -> Vec<bool> {
    let w = row.len();
    (0..w)
        .map(|j| (0..=2 * half_width).all(|t| row[(j + w + t - half_width) % w]))
        .collect()
}
