//! Layer kernels. 3x3 convolutions run as nine shifted GEMMs over a
//! zero-padded band of input rows, so no im2col buffer is built.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output rows per convolution band; bounds scratch memory at full resolution.
const BAND_ROWS: usize = 32;

/// Inference-mode batch norm parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub const BN_EPS: f32 = 1e-5;

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - BN_EPS; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// Batch norm followed by ReLU, in place.
pub fn bn_relu(t: &mut Tensor, bn: &BatchNorm) {
    let c = t.channels();
    debug_assert_eq!(c, bn.channels());
    let (scale, shift) = bn.affine();
    for px in t.data_mut().chunks_exact_mut(c) {
        for ((v, s), b) in px.iter_mut().zip(&scale).zip(&shift) {
            *v = (*v * s + b).max(0.0);
        }
    }
}

/// Same-padded 3x3 convolution over the channel concatenation of `parts`.
/// `weight` is `[out, in, 3, 3]` row-major.
pub fn conv3x3(parts: &[&Tensor], weight: &[f32], bias: &[f32]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Shape("conv3x3 needs an input".into()))?;
    let (h, w) = (first.height(), first.width());
    if parts.iter().any(|p| !p.same_spatial(first)) {
        return Err(Error::Shape("conv3x3 inputs differ in spatial extents".into()));
    }
    let cin: usize = parts.iter().map(|p| p.channels()).sum();
    let cout = bias.len();
    if weight.len() != cout * cin * 9 {
        return Err(Error::Shape(format!(
            "conv3x3 weight has {} values, expected {cout}x{cin}x3x3",
            weight.len()
        )));
    }
    let pw = w + 2;
    let mut out = Tensor::zeros(h, w, cout);
    let mut padded = vec![0.0f32; (BAND_ROWS.min(h) + 2) * pw * cin];
    let mut acc = vec![0.0f32; BAND_ROWS.min(h) * pw * cout];

    for y0 in (0..h).step_by(BAND_ROWS) {
        let rows = BAND_ROWS.min(h - y0);
        // Padded band holds input rows y0-1 ..= y0+rows.
        padded[..(rows + 2) * pw * cin].fill(0.0);
        for by in 0..rows + 2 {
            let Some(sy) = (y0 + by).checked_sub(1).filter(|&sy| sy < h) else {
                continue;
            };
            for x in 0..w {
                let dst = (by * pw + x + 1) * cin;
                let mut off = 0;
                for p in parts {
                    let c = p.channels();
                    let src = (sy * w + x) * c;
                    padded[dst + off..dst + off + c].copy_from_slice(&p.data()[src..src + c]);
                    off += c;
                }
            }
        }
        // Output computed on the padded width; the last two columns of each
        // row are discarded.
        let m = rows * pw - 2;
        for row in acc[..m * cout].chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        for ky in 0..3 {
            for kx in 0..3 {
                let a_off = (ky * pw + kx) * cin;
                // SAFETY: A spans rows a_off/cin .. a_off/cin + m of the padded
                // band, the last being (rows + 2) * pw - 1 at most. B indexes
                // weight[o][i][ky][kx] for o < cout, i < cin. C has m rows.
                unsafe {
                    matrixmultiply::sgemm(
                        m,
                        cin,
                        cout,
                        1.0,
                        padded.as_ptr().add(a_off),
                        cin as isize,
                        1,
                        weight.as_ptr().add(ky * 3 + kx),
                        9,
                        (cin * 9) as isize,
                        1.0,
                        acc.as_mut_ptr(),
                        cout as isize,
                        1,
                    );
                }
            }
        }
        let od = out.data_mut();
        for r in 0..rows {
            let src = r * pw * cout;
            let dst = (y0 + r) * w * cout;
            od[dst..dst + w * cout].copy_from_slice(&acc[src..src + w * cout]);
        }
    }
    Ok(out)
}

/// Same-padded depthwise 3x3 convolution; `weight` is `[c, 1, 3, 3]`.
pub fn depthwise3x3(input: &Tensor, weight: &[f32], bias: &[f32]) -> Result<Tensor> {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    if bias.len() != c || weight.len() != c * 9 {
        return Err(Error::Shape(format!(
            "depthwise weight {} / bias {} for {c} channels",
            weight.len(),
            bias.len()
        )));
    }
    // Tap-major copy of the kernel so the channel loop is contiguous.
    let mut taps = vec![0.0f32; 9 * c];
    for ch in 0..c {
        for t in 0..9 {
            taps[t * c + ch] = weight[ch * 9 + t];
        }
    }
    let src = input.data();
    let mut out = Tensor::zeros(h, w, c);
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * c;
            od[o..o + c].copy_from_slice(bias);
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let i = (sy * w + sx) * c;
                    let k = &taps[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    for ((acc, v), kv) in od[o..o + c].iter_mut().zip(&src[i..i + c]).zip(k) {
                        *acc += v * kv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 1x1 convolution; `weight` is `[out, in, 1, 1]`.
pub fn conv1x1(input: &Tensor, weight: &[f32], bias: &[f32]) -> Result<Tensor> {
    let (h, w, cin) = (input.height(), input.width(), input.channels());
    let cout = bias.len();
    if weight.len() != cout * cin {
        return Err(Error::Shape(format!(
            "conv1x1 weight has {} values, expected {cout}x{cin}",
            weight.len()
        )));
    }
    let n = h * w;
    let mut out = Tensor::zeros(h, w, cout);
    let od = out.data_mut();
    for row in od.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    if n > 0 && cin > 0 && cout > 0 {
        // SAFETY: A is n x cin, B is weight[o][i] read as cin x cout, C is n x cout.
        unsafe {
            matrixmultiply::sgemm(
                n,
                cin,
                cout,
                1.0,
                input.data().as_ptr(),
                cin as isize,
                1,
                weight.as_ptr(),
                1,
                cin as isize,
                1.0,
                od.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Nested-loop reference layers.
    use super::*;

    pub fn conv3x3(input: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
        let (h, w, cin) = (input.height(), input.width(), input.channels());
        let cout = bias.len();
        Tensor::from_fn(h, w, cout, |y, x, o| {
            let mut acc = f64::from(bias[o]);
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                        continue;
                    }
                    for i in 0..cin {
                        acc += f64::from(weight[((o * cin + i) * 3 + ky) * 3 + kx])
                            * f64::from(input.get(sy as usize, sx as usize, i));
                    }
                }
            }
            acc as f32
        })
    }

    pub fn depthwise3x3(input: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
        let (h, w, c) = (input.height(), input.width(), input.channels());
        Tensor::from_fn(h, w, c, |y, x, ch| {
            let mut acc = f64::from(bias[ch]);
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                        continue;
                    }
                    acc += f64::from(weight[ch * 9 + ky * 3 + kx]) * f64::from(input.get(sy as usize, sx as usize, ch));
                }
            }
            acc as f32
        })
    }

    pub fn conv1x1(input: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
        let cin = input.channels();
        Tensor::from_fn(input.height(), input.width(), bias.len(), |y, x, o| {
            let mut acc = f64::from(bias[o]);
            for i in 0..cin {
                acc += f64::from(weight[o * cin + i]) * f64::from(input.get(y, x, i));
            }
            acc as f32
        })
    }

    pub fn bn_relu(t: &Tensor, bn: &BatchNorm) -> Tensor {
        Tensor::from_fn(t.height(), t.width(), t.channels(), |y, x, c| {
            let v = (f64::from(t.get(y, x, c)) - f64::from(bn.mean[c])) / (f64::from(bn.var[c]) + f64::from(BN_EPS)).sqrt()
                * f64::from(bn.gamma[c])
                + f64::from(bn.beta[c]);
            v.max(0.0) as f32
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv3x3_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w, cin, cout) in [(5, 7, 3, 4), (1, 1, 1, 1), (40, 9, 2, 5), (70, 3, 6, 2)] {
            let x = rand_tensor(&mut rng, h, w, cin);
            let wt = rand_vec(&mut rng, cout * cin * 9);
            let b = rand_vec(&mut rng, cout);
            let got = conv3x3(&[&x], &wt, &b).unwrap();
            assert!(got.max_abs_diff(&oracle::conv3x3(&x, &wt, &b)) < 1e-5);
        }
    }

    #[test]
    fn conv3x3_over_parts_equals_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 6, 5, 2);
        let b = rand_tensor(&mut rng, 6, 5, 3);
        let wt = rand_vec(&mut rng, 4 * 5 * 9);
        let bias = rand_vec(&mut rng, 4);
        let split = conv3x3(&[&a, &b], &wt, &bias).unwrap();
        let joined = conv3x3(&[&a.concat(&b).unwrap()], &wt, &bias).unwrap();
        assert_eq!(split, joined);
        assert!(conv3x3(&[&a], &wt, &bias).is_err());
    }

    #[test]
    fn depthwise_and_pointwise_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 7, 6, 5);
        let wt = rand_vec(&mut rng, 5 * 9);
        let b = rand_vec(&mut rng, 5);
        assert!(depthwise3x3(&x, &wt, &b).unwrap().max_abs_diff(&oracle::depthwise3x3(&x, &wt, &b)) < 1e-5);
        let w1 = rand_vec(&mut rng, 3 * 5);
        let b1 = rand_vec(&mut rng, 3);
        assert!(conv1x1(&x, &w1, &b1).unwrap().max_abs_diff(&oracle::conv1x1(&x, &w1, &b1)) < 1e-5);
    }

    #[test]
    fn bn_relu_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 3, 4, 3);
        let bn = BatchNorm {
            gamma: rand_vec(&mut rng, 3),
            beta: rand_vec(&mut rng, 3),
            mean: rand_vec(&mut rng, 3),
            var: (0..3).map(|_| rng.random_range(0.1..2.0)).collect(),
        };
        let mut got = x.clone();
        bn_relu(&mut got, &bn);
        assert!(got.max_abs_diff(&oracle::bn_relu(&x, &bn)) < 1e-5);
        let mut id = x.clone();
        bn_relu(&mut id, &BatchNorm::identity(3));
        for (a, b) in id.data().iter().zip(x.data()) {
            assert!((a - b.max(0.0)).abs() < 1e-6);
        }
    }
}
