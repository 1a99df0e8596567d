//! Binary graymap (P5) read/write and 8-bit PNG read.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{extract_red_channel, GrayImage, MaskImage, RgbImage};
use crate::error::{Error, Result};

/// Loads an 8-bit grayscale image from a P5 graymap or a PNG file.
///
/// Color PNGs are reduced to their red channel.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(&bytes)
    } else {
        Err(Error::Format(format!(
            "{}: neither a binary graymap (P5) nor a PNG",
            path.display()
        )))
    }
}

/// Writes a binary P5 graymap with maxval 255.
pub fn save_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_pgm(&mut w, img)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    load_gray(path).map(|g| MaskImage::from_gray(&g))
}

/// Writes a mask as a P5 graymap with values {0, 255}.
pub fn save_mask(path: impl AsRef<Path>, mask: &MaskImage) -> Result<()> {
    save_gray(path, &mask.to_gray())
}

pub(crate) fn encode_pgm(w: &mut impl Write, img: &GrayImage) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width(), img.height())?;
    w.write_all(img.pixels())
}

pub(crate) fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 2;
    let width = header_field(bytes, &mut pos, "width")?;
    let height = header_field(bytes, &mut pos, "height")?;
    let maxval = header_field(bytes, &mut pos, "maxval")?;
    if maxval > 255 {
        return Err(Error::UnsupportedBitDepth(format!("graymap maxval {maxval} implies 16-bit samples")));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("graymap maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after graymap header".into()));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format(format!("invalid graymap extents {width}x{height}")))?;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format(format!("truncated graymap: expected {n} bytes of pixel data")))?;
    GrayImage::new(width, height, payload.to_vec())
}

fn header_field(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("graymap header: missing {name}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("graymap header: bad {name}")))
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let png_err = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedBitDepth("16-bit PNG".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(frame.buffer_size());
    let (w, h) = (frame.width as usize, frame.height as usize);
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("png: palette was not expanded".into())),
    };
    let stride = frame.line_size;
    let mut packed = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(stride).take(h) {
        packed.extend_from_slice(&row[..w * channels]);
    }
    match channels {
        1 => GrayImage::new(w, h, packed),
        2 => GrayImage::new(w, h, packed.chunks_exact(2).map(|p| p[0]).collect()),
        3 => RgbImage::new(w, h, packed).map(|rgb| extract_red_channel(&rgb)),
        _ => {
            let rgb = packed.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
            RgbImage::new(w, h, rgb).map(|rgb| extract_red_channel(&rgb))
        }
    }
}
