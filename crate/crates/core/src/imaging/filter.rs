use super::{quantize, GrayImage, PixelPoint};

/// Separable Gaussian blur with edge replication. `sigma <= 0` returns a copy.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let blurred = gaussian_blur_f64(&img.to_f64(), img.width(), img.height(), sigma);
    GrayImage::from_f64(img.width(), img.height(), &blurred).expect("extents preserved")
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

pub(crate) fn gaussian_blur_f64(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * row[clampi(x as isize + i as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[clampi(y as isize + i as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Bilinear interpolation with pixel centers at integer coordinates.
/// Returns `None` when `(x, y)` falls outside the convex hull of pixel centers.
#[inline]
pub fn bilinear_sample(img: &GrayImage, x: f64, y: f64) -> Option<f64> {
    let (w, h) = (img.width(), img.height());
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p = |xx, yy| f64::from(img.get(xx, yy));
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Resamples to `new_w` x `new_h` with bilinear interpolation, aligning pixel
/// centers (`src = (dst + 0.5) * scale - 0.5`, clamped to the border).
pub fn resize_bilinear(img: &GrayImage, new_w: usize, new_h: usize) -> GrayImage {
    if img.width() == new_w && img.height() == new_h {
        return img.clone();
    }
    let sx = img.width() as f64 / new_w as f64;
    let sy = img.height() as f64 / new_h as f64;
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    GrayImage::from_fn(new_w, new_h, |x, y| {
        let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        quantize(bilinear_sample(img, src_x, src_y).expect("clamped inside"))
    })
    .expect("positive extents")
}

/// Rotates counter-clockwise (as displayed, y pointing down) by `angle`
/// radians about `center`. Pixels mapping outside the source get `fill`.
pub fn rotate_about(img: &GrayImage, center: PixelPoint, angle: f64, fill: u8) -> GrayImage {
    let (s, c) = angle.sin_cos();
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let dx = x as f64 - center.x;
        let dy = y as f64 - center.y;
        // Inverse of a displayed CCW rotation: (dx, dy) -> (c dx - s dy, s dx + c dy).
        let src_x = center.x + c * dx - s * dy;
        let src_y = center.y + s * dx + c * dy;
        bilinear_sample(img, src_x, src_y).map_or(fill, quantize)
    })
    .expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_keeps_constants() {
        let img = GrayImage::filled(20, 10, 77).unwrap();
        assert_eq!(gaussian_blur(&img, 2.0), img);
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(1.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.len(), 2 * 4 + 1);
    }

    #[test]
    fn bilinear_hits_pixels_and_midpoints() {
        let img = GrayImage::new(2, 2, vec![0, 100, 50, 150]).unwrap();
        assert_eq!(bilinear_sample(&img, 0.0, 0.0), Some(0.0));
        assert_eq!(bilinear_sample(&img, 1.0, 1.0), Some(150.0));
        assert_eq!(bilinear_sample(&img, 0.5, 0.5), Some(75.0));
        assert_eq!(bilinear_sample(&img, 1.01, 0.0), None);
        assert_eq!(bilinear_sample(&img, -0.01, 0.0), None);
    }

    #[test]
    fn quarter_turn_rotation_moves_pixels() {
        let img = GrayImage::from_fn(5, 5, |x, y| if x == 4 && y == 2 { 200 } else { 0 }).unwrap();
        // CCW on screen: the +x neighbour moves to the -y neighbour.
        let r = rotate_about(&img, PixelPoint::new(2.0, 2.0), std::f64::consts::FRAC_PI_2, 0);
        assert_eq!(r.get(2, 0), 200);
    }
}
