//! Forward-only ghost-attention U-Net: a U-Net whose blocks are ghost modules and whose
//! skip connections pass through attention gates.

mod ops;
mod tensor;
mod weights;

pub use ops::{bn_relu, conv1x1, conv3x3, depthwise3x3, sigmoid, BatchNorm, BN_EPS};
pub use tensor::Tensor;
pub use weights::{
    decode_gauw, encode_gauw, AttentionParams, Conv, DecoderStage, GhostParams, NamedTensor, NetworkWeights,
    Topology,
};

use crate::error::{Error, Result};
use crate::imaging::{EyeImage, GrayImage, MaskImage};

/// Probability above which a pixel is iris.
pub const MASK_THRESHOLD: f32 = 0.5;

/// Intensity band used by the hand-set segmentation weights.
pub const BAND_LOW: f32 = 45.0;
pub const BAND_HIGH: f32 = 185.0;

/// Width of the hand-set band network.
pub const BAND_TOPOLOGY: Topology = Topology { depth: 4, base: 4 };

/// conv3x3 -> BN -> ReLU for half the channels, depthwise3x3 -> BN -> ReLU
/// on those for the other half, concatenated.
pub fn ghost_forward(input: &Tensor, p: &GhostParams) -> Result<Tensor> {
    ghost_forward_parts(&[input], p)
}

fn ghost_forward_parts(parts: &[&Tensor], p: &GhostParams) -> Result<Tensor> {
    let cin: usize = parts.iter().map(|t| t.channels()).sum();
    if cin != p.in_channels() {
        return Err(Error::Shape(format!(
            "ghost module expects {} input channels, got {cin}",
            p.in_channels()
        )));
    }
    let mut primary = conv3x3(parts, &p.primary.weight, &p.primary.bias)?;
    bn_relu(&mut primary, &p.bn1);
    let mut ghost = depthwise3x3(&primary, &p.ghost.weight, &p.ghost.bias)?;
    bn_relu(&mut ghost, &p.bn2);
    primary.concat(&ghost)
}

/// Per-pixel attention coefficients `sigmoid(psi(relu(Wx skip + Wg gate)))`.
pub fn attention_coefficients(skip: &Tensor, gate: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    if !skip.same_spatial(gate) {
        return Err(Error::Shape(format!(
            "attention skip {}x{} vs gate {}x{}",
            skip.height(),
            skip.width(),
            gate.height(),
            gate.width()
        )));
    }
    if skip.channels() != p.wx.in_ch || gate.channels() != p.wg.in_ch {
        return Err(Error::Shape(format!(
            "attention expects skip/gate channels {}/{}, got {}/{}",
            p.wx.in_ch,
            p.wg.in_ch,
            skip.channels(),
            gate.channels()
        )));
    }
    let mut inter = conv1x1(skip, &p.wx.weight, &p.wx.bias)?;
    let g = conv1x1(gate, &p.wg.weight, &p.wg.bias)?;
    for (a, b) in inter.data_mut().iter_mut().zip(g.data()) {
        *a = (*a + b).max(0.0);
    }
    let mut alpha = conv1x1(&inter, &p.psi.weight, &p.psi.bias)?;
    for v in alpha.data_mut() {
        *v = sigmoid(*v);
    }
    Ok(alpha)
}

/// Skip connection scaled per pixel by its attention coefficient.
pub fn attention_forward(skip: &Tensor, gate: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let alpha = attention_coefficients(skip, gate, p)?;
    let c = skip.channels();
    let mut out = skip.clone();
    for (px, a) in out.data_mut().chunks_exact_mut(c).zip(alpha.data()) {
        for v in px {
            *v *= a;
        }
    }
    Ok(out)
}

/// Runs the network on a single-channel tensor and returns the
/// single-channel probability map.
pub fn forward_tensor(input: &Tensor, w: &NetworkWeights) -> Result<Tensor> {
    let t = w.topology;
    let div = 1usize << t.depth;
    if input.channels() != 1 || !input.height().is_multiple_of(div) || !input.width().is_multiple_of(div) {
        return Err(Error::Shape(format!(
            "network input must be single-channel with extents divisible by {div}, got {}x{}x{}",
            input.height(),
            input.width(),
            input.channels()
        )));
    }
    let mut skips = Vec::with_capacity(t.depth);
    let mut x = input.clone();
    for (k, stage) in w.encoder.iter().enumerate() {
        let a = ghost_forward(&x, &stage[0]).map_err(|e| layer(e, format!("enc{}.ghost1", k + 1)))?;
        let b = ghost_forward(&a, &stage[1]).map_err(|e| layer(e, format!("enc{}.ghost2", k + 1)))?;
        x = b.max_pool2()?;
        skips.push(b);
    }
    x = ghost_forward(&x, &w.bottleneck).map_err(|e| layer(e, "bottleneck".into()))?;
    for (k, stage) in w.decoder.iter().enumerate() {
        let skip = skips.pop().expect("one skip per stage");
        let up = x.upsample2();
        let att = attention_forward(&skip, &up, &stage.attention).map_err(|e| layer(e, format!("dec{}.att", k + 1)))?;
        drop(skip);
        let a = ghost_forward_parts(&[&att, &up], &stage.ghosts[0])
            .map_err(|e| layer(e, format!("dec{}.ghost1", k + 1)))?;
        drop((att, up));
        x = ghost_forward(&a, &stage.ghosts[1]).map_err(|e| layer(e, format!("dec{}.ghost2", k + 1)))?;
    }
    let mut out = conv1x1(&x, &w.final_conv.weight, &w.final_conv.bias)?;
    for v in out.data_mut() {
        *v = sigmoid(*v);
    }
    Ok(out)
}

fn layer(e: Error, name: String) -> Error {
    Error::Weights(format!("layer {name}: {e}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    width: usize,
    height: usize,
    probability: Vec<f32>,
    mask: MaskImage,
}

impl SegmentationOutput {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major probabilities in [0, 1].
    pub fn probability(&self) -> &[f32] {
        &self.probability
    }

    pub fn mask(&self) -> &MaskImage {
        &self.mask
    }

    pub fn into_mask(self) -> MaskImage {
        self.mask
    }

    /// Probability map scaled to 0-255 for inspection.
    pub fn probability_image(&self) -> GrayImage {
        let px = self.probability.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        GrayImage::new(self.width, self.height, px).expect("extents match")
    }
}

/// Segments a 640x480 eye image.
pub fn forward(eye: &EyeImage, w: &NetworkWeights) -> Result<SegmentationOutput> {
    let img = eye.image();
    let prob = forward_tensor(&Tensor::from_gray(img), w)?;
    let (width, height) = (img.width(), img.height());
    let probability = prob.into_data();
    let mask = MaskImage::new(width, height, probability.iter().map(|&p| p > MASK_THRESHOLD).collect())?;
    Ok(SegmentationOutput {
        width,
        height,
        probability,
        mask,
    })
}

/// Human-readable layer listing with parameter counts.
pub fn describe(w: &NetworkWeights) -> String {
    let t = w.topology;
    let mut s = format!("topology: depth {} base {}\n", t.depth, t.base);
    for (k, stage) in w.encoder.iter().enumerate() {
        s += &format!(
            "enc{}: ghost {}->{}, ghost {}->{}  params {}\n",
            k + 1,
            stage[0].in_channels(),
            stage[0].out_channels(),
            stage[1].in_channels(),
            stage[1].out_channels(),
            stage[0].param_count() + stage[1].param_count()
        );
    }
    s += &format!(
        "bottleneck: ghost {}->{}  params {}\n",
        w.bottleneck.in_channels(),
        w.bottleneck.out_channels(),
        w.bottleneck.param_count()
    );
    for (k, d) in w.decoder.iter().enumerate() {
        s += &format!(
            "dec{}: attention skip {} gate {} inter {}, ghost {}->{}, ghost {}->{}  params {}\n",
            k + 1,
            d.attention.wx.in_ch,
            d.attention.wg.in_ch,
            d.attention.wx.out_ch,
            d.ghosts[0].in_channels(),
            d.ghosts[0].out_channels(),
            d.ghosts[1].in_channels(),
            d.ghosts[1].out_channels(),
            d.attention.param_count() + d.ghosts.iter().map(GhostParams::param_count).sum::<usize>()
        );
    }
    s += &format!("final: 1x1 {}->1  params {}\n", w.final_conv.in_ch, w.final_conv.param_count());
    s += &format!("param_count: {}\n", w.param_count());
    s
}
