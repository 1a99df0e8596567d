//! GAUW weight files and the structured parameter set they describe.
//!
//! Layout (little-endian): magic `GAUW`, version u32 = 1, tensor count u32,
//! then per tensor: name length u16, UTF-8 name, dtype u8 (0 = f32), rank u8,
//! extents u32 x rank, f32 payload in row-major order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::BatchNorm;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GAUW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_gauw(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Weights(format!("name too long: {}", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Weights(format!("{}: shape {:?} does not match payload", t.name, t.shape)));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(u8::try_from(t.shape.len()).map_err(|_| Error::Weights(format!("{}: rank too large", t.name)))?);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Weights(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_gauw(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Weights("bad magic, expected GAUW".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Weights(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Weights(format!("{name}: extents overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Weights(format!("{name}: too large")))?, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Weights(format!("{name}: non-finite value")));
        }
        out.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Weights(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Convolution parameters; weight is `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Sets the center tap connecting input `i` to output `o`.
    pub(crate) fn set_center(&mut self, o: usize, i: usize, v: f32) {
        let k = self.kernel;
        self.weight[((o * self.in_ch + i) * k + k / 2) * k + k / 2] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhostParams {
    /// Standard 3x3 conv, `in -> C/2`.
    pub primary: Conv,
    pub bn1: BatchNorm,
    /// Depthwise 3x3 conv over the `C/2` primary channels.
    pub ghost: Conv,
    pub bn2: BatchNorm,
}

impl GhostParams {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        let half = out_ch / 2;
        Self {
            primary: Conv::zeros(half, in_ch, 3),
            bn1: BatchNorm::identity(half),
            ghost: Conv::zeros(half, 1, 3),
            bn2: BatchNorm::identity(half),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.primary.in_ch
    }

    pub fn out_channels(&self) -> usize {
        2 * self.primary.out_ch
    }

    /// Learnable entries: convolutions plus batch-norm scale and shift.
    pub fn param_count(&self) -> usize {
        self.primary.param_count() + self.ghost.param_count() + 2 * self.bn1.channels() + 2 * self.bn2.channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wx: Conv,
    pub wg: Conv,
    pub psi: Conv,
}

impl AttentionParams {
    pub fn zeros(skip_ch: usize, gate_ch: usize) -> Self {
        let inter = (skip_ch / 2).max(1);
        Self {
            wx: Conv::zeros(inter, skip_ch, 1),
            wg: Conv::zeros(inter, gate_ch, 1),
            psi: Conv::zeros(1, inter, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.wx.param_count() + self.wg.param_count() + self.psi.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub attention: AttentionParams,
    pub ghosts: [GhostParams; 2],
}

/// Depth (number of pooling stages) and first-stage width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub depth: usize,
    pub base: usize,
}

impl Topology {
    /// 64-128-256-512 encoder, 512 bottleneck.
    pub const DEFAULT: Topology = Topology { depth: 4, base: 64 };

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base < 2 || !self.base.is_multiple_of(2) {
            return Err(Error::Weights(format!(
                "topology needs depth >= 1 and an even base >= 2, got depth {} base {}",
                self.depth, self.base
            )));
        }
        Ok(())
    }

    /// Output channels of encoder stage `k` (0-based).
    pub fn encoder_channels(&self, k: usize) -> usize {
        self.base << k
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels(self.depth - 1)
    }

    /// Output channels of decoder stage `k` (0-based, deepest first).
    pub fn decoder_channels(&self, k: usize) -> usize {
        self.encoder_channels(self.depth - 1 - k)
    }

    /// Closed-form parameter count of the topology.
    pub fn param_count(&self) -> usize {
        let ghost = |i: usize, c: usize| 9 * i * (c / 2) + c / 2 + 9 * (c / 2) + c / 2 + 4 * (c / 2);
        let att = |s: usize, g: usize| {
            let inter = (s / 2).max(1);
            s * inter + inter + g * inter + inter + inter + 1
        };
        let mut total = 0;
        let mut prev = 1;
        for k in 0..self.depth {
            let c = self.encoder_channels(k);
            total += ghost(prev, c) + ghost(c, c);
            prev = c;
        }
        total += ghost(prev, self.bottleneck_channels());
        prev = self.bottleneck_channels();
        for k in 0..self.depth {
            let s = self.decoder_channels(k);
            total += att(s, prev) + ghost(s + prev, s) + ghost(s, s);
            prev = s;
        }
        total + self.base + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub topology: Topology,
    pub encoder: Vec<[GhostParams; 2]>,
    pub bottleneck: GhostParams,
    pub decoder: Vec<DecoderStage>,
    pub final_conv: Conv,
}

impl NetworkWeights {
    /// All-zero convolutions with identity batch norms.
    pub fn zeros(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let mut encoder = Vec::new();
        let mut prev = 1;
        for k in 0..topology.depth {
            let c = topology.encoder_channels(k);
            encoder.push([GhostParams::zeros(prev, c), GhostParams::zeros(c, c)]);
            prev = c;
        }
        let bottleneck = GhostParams::zeros(prev, topology.bottleneck_channels());
        prev = topology.bottleneck_channels();
        let mut decoder = Vec::new();
        for k in 0..topology.depth {
            let s = topology.decoder_channels(k);
            decoder.push(DecoderStage {
                attention: AttentionParams::zeros(s, prev),
                ghosts: [GhostParams::zeros(s + prev, s), GhostParams::zeros(s, s)],
            });
            prev = s;
        }
        Ok(Self {
            topology,
            encoder,
            bottleneck,
            decoder,
            final_conv: Conv::zeros(1, topology.base, 1),
        })
    }

    /// He-initialized convolutions, mildly perturbed batch norms.
    pub fn random(topology: Topology, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in w.slots_mut() {
            match t {
                Slot::Conv(c) => {
                    let fan_in = (c.in_ch * c.kernel * c.kernel).max(1) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive sigma");
                    for v in c.weight.iter_mut() {
                        *v = normal.sample(&mut rng) as f32;
                    }
                    let small = Normal::new(0.0, 0.05).expect("positive sigma");
                    for v in c.bias.iter_mut() {
                        *v = small.sample(&mut rng) as f32;
                    }
                }
                Slot::Bn(bn) => {
                    let jitter = Normal::new(0.0, 0.1).expect("positive sigma");
                    for i in 0..bn.channels() {
                        bn.gamma[i] = 1.0 + jitter.sample(&mut rng) as f32;
                        bn.beta[i] = jitter.sample(&mut rng) as f32;
                        bn.mean[i] = jitter.sample(&mut rng) as f32;
                        bn.var[i] = 1.0 + f64::abs(jitter.sample(&mut rng)) as f32;
                    }
                }
            }
        }
        Ok(w)
    }

    /// Hand-set weights that segment an intensity band: pixels whose value
    /// lies in `(lo, hi)` (0-255 scale) come out as iris. Only the first
    /// encoder stage, the last decoder stage and the output layer carry
    /// signal; everything else is zero, and the last attention gate is
    /// saturated open.
    pub fn band(topology: Topology, lo: f32, hi: f32) -> Result<Self> {
        if topology.base < 4 {
            return Err(Error::Weights("band weights need a base width of at least 4".into()));
        }
        let mut w = Self::zeros(topology)?;
        let (t1, t2) = (lo / 255.0, hi / 255.0);
        // Channel 0 = relu(t1 - x), channel 1 = relu(x - t2).
        let g = &mut w.encoder[0][0].primary;
        g.set_center(0, 0, -1.0);
        g.bias[0] = t1;
        g.set_center(1, 0, 1.0);
        g.bias[1] = -t2;
        pass_through(&mut w.encoder[0][1].primary);
        let last = w.decoder.last_mut().expect("depth >= 1");
        last.attention.psi.bias[0] = 20.0;
        pass_through(&mut last.ghosts[0].primary);
        pass_through(&mut last.ghosts[1].primary);
        w.final_conv.weight[0] = -400.0;
        w.final_conv.weight[1] = -400.0;
        w.final_conv.bias[0] = 4.0;
        Ok(w)
    }

    pub fn param_count(&self) -> usize {
        let ghosts = self.encoder.iter().flatten().chain(std::iter::once(&self.bottleneck));
        let enc: usize = ghosts.map(GhostParams::param_count).sum();
        let dec: usize = self
            .decoder
            .iter()
            .map(|d| d.attention.param_count() + d.ghosts.iter().map(GhostParams::param_count).sum::<usize>())
            .sum();
        enc + dec + self.final_conv.param_count()
    }

    fn slots_mut(&mut self) -> Vec<(String, Slot<'_>)> {
        let mut out = Vec::new();
        fn ghost<'a>(out: &mut Vec<(String, Slot<'a>)>, prefix: String, g: &'a mut GhostParams) {
            out.push((format!("{prefix}.primary"), Slot::Conv(&mut g.primary)));
            out.push((format!("{prefix}.bn1"), Slot::Bn(&mut g.bn1)));
            out.push((format!("{prefix}.ghost"), Slot::Conv(&mut g.ghost)));
            out.push((format!("{prefix}.bn2"), Slot::Bn(&mut g.bn2)));
        }
        for (k, stage) in self.encoder.iter_mut().enumerate() {
            for (j, g) in stage.iter_mut().enumerate() {
                ghost(&mut out, format!("enc{}.ghost{}", k + 1, j + 1), g);
            }
        }
        ghost(&mut out, "bottleneck.ghost1".into(), &mut self.bottleneck);
        for (k, stage) in self.decoder.iter_mut().enumerate() {
            let a = &mut stage.attention;
            out.push((format!("dec{}.att.wx", k + 1), Slot::Conv(&mut a.wx)));
            out.push((format!("dec{}.att.wg", k + 1), Slot::Conv(&mut a.wg)));
            out.push((format!("dec{}.att.psi", k + 1), Slot::Conv(&mut a.psi)));
            for (j, g) in stage.ghosts.iter_mut().enumerate() {
                ghost(&mut out, format!("dec{}.ghost{}", k + 1, j + 1), g);
            }
        }
        out.push(("final".into(), Slot::Conv(&mut self.final_conv)));
        out
    }

    /// Flattens to named tensors in canonical order.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        for (name, slot) in copy.slots_mut() {
            match slot {
                Slot::Conv(c) => {
                    out.push(NamedTensor {
                        name: format!("{name}.weight"),
                        shape: vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
                        data: std::mem::take(&mut c.weight),
                    });
                    out.push(NamedTensor {
                        name: format!("{name}.bias"),
                        shape: vec![c.out_ch],
                        data: std::mem::take(&mut c.bias),
                    });
                }
                Slot::Bn(bn) => {
                    for (field, v) in [
                        ("gamma", &mut bn.gamma),
                        ("beta", &mut bn.beta),
                        ("mean", &mut bn.mean),
                        ("var", &mut bn.var),
                    ] {
                        out.push(NamedTensor {
                            name: format!("{name}.{field}"),
                            shape: vec![v.len()],
                            data: std::mem::take(v),
                        });
                    }
                }
            }
        }
        out
    }

    /// Rebuilds the network from named tensors. The topology is inferred
    /// from the stage count and the first layer's width; every tensor must
    /// then match the expected name and shape.
    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let depth = (1..)
            .take_while(|k| tensors.iter().any(|t| t.name == format!("enc{k}.ghost1.primary.weight")))
            .count();
        let first = tensors
            .iter()
            .find(|t| t.name == "enc1.ghost1.primary.weight")
            .ok_or_else(|| Error::Weights("missing layer enc1.ghost1.primary.weight".into()))?;
        let base = 2 * first.shape.first().copied().unwrap_or(0);
        let mut w = Self::zeros(Topology { depth, base })?;

        let mut by_name: std::collections::HashMap<String, NamedTensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: String, shape: Vec<usize>| -> Result<Vec<f32>> {
            let t = by_name.remove(&name).ok_or_else(|| Error::Weights(format!("missing layer {name}")))?;
            if t.shape != shape {
                return Err(Error::Weights(format!(
                    "layer {name}: expected shape {shape:?}, found {:?}",
                    t.shape
                )));
            }
            Ok(t.data)
        };
        for (name, slot) in w.slots_mut() {
            match slot {
                Slot::Conv(c) => {
                    c.weight = take(format!("{name}.weight"), vec![c.out_ch, c.in_ch, c.kernel, c.kernel])?;
                    c.bias = take(format!("{name}.bias"), vec![c.out_ch])?;
                }
                Slot::Bn(bn) => {
                    let n = bn.channels();
                    bn.gamma = take(format!("{name}.gamma"), vec![n])?;
                    bn.beta = take(format!("{name}.beta"), vec![n])?;
                    bn.mean = take(format!("{name}.mean"), vec![n])?;
                    bn.var = take(format!("{name}.var"), vec![n])?;
                    if let Some(v) = bn.var.iter().find(|v| **v < 0.0) {
                        return Err(Error::Weights(format!("layer {name}.var: negative variance {v}")));
                    }
                }
            }
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Weights(format!("unexpected layer {extra}")));
        }
        Ok(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_gauw(&self.to_tensors()).expect("canonical tensors are consistent")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensors(decode_gauw(bytes)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

enum Slot<'a> {
    Conv(&'a mut Conv),
    Bn(&'a mut BatchNorm),
}

/// Copies input channel `i` to output channel `i` for as many outputs as exist.
fn pass_through(c: &mut Conv) {
    for o in 0..c.out_ch.min(c.in_ch) {
        c.set_center(o, o, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        let conv = Conv::zeros(1, 1, 3);
        assert_eq!(conv.param_count(), 10);
        assert_eq!(GhostParams::zeros(1, 64).param_count(), 768);
        let tiny = Topology { depth: 2, base: 2 };
        assert_eq!(NetworkWeights::zeros(tiny).unwrap().param_count(), tiny.param_count());
        let mid = Topology { depth: 3, base: 8 };
        assert_eq!(NetworkWeights::zeros(mid).unwrap().param_count(), mid.param_count());
    }

    #[test]
    fn round_trip_and_topology_inference() {
        let t = Topology { depth: 3, base: 4 };
        let w = NetworkWeights::random(t, 7).unwrap();
        let back = NetworkWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.topology, t);
    }

    #[test]
    fn header_and_payload_layout() {
        let bytes = encode_gauw(&[NamedTensor {
            name: "a".into(),
            shape: vec![2],
            data: vec![1.0, -2.0],
        }])
        .unwrap();
        let mut expect = b"GAUW".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.push(b'a');
        expect.extend_from_slice(&[0, 1]);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(decode_gauw(&bytes).unwrap()[0].data, vec![1.0, -2.0]);
    }

    #[test]
    fn malformed_files_name_the_problem() {
        let w = NetworkWeights::zeros(Topology { depth: 2, base: 2 }).unwrap();
        let good = w.to_tensors();

        let mut bad = good.clone();
        bad.retain(|t| t.name != "dec1.att.psi.bias");
        let e = NetworkWeights::from_tensors(bad).unwrap_err().to_string();
        assert!(e.contains("dec1.att.psi.bias"), "{e}");

        let mut bad = good.clone();
        let t = bad.iter_mut().find(|t| t.name == "enc2.ghost1.primary.weight").unwrap();
        t.shape = vec![2, 3, 3, 3];
        t.data = vec![0.0; 54];
        let e = NetworkWeights::from_tensors(bad).unwrap_err().to_string();
        assert!(e.contains("enc2.ghost1.primary.weight") && e.contains("expected shape"), "{e}");

        let mut bad = good.clone();
        bad.push(NamedTensor {
            name: "zzz".into(),
            shape: vec![1],
            data: vec![0.0],
        });
        assert!(NetworkWeights::from_tensors(bad).unwrap_err().to_string().contains("zzz"));

        let bytes = w.to_bytes();
        assert!(NetworkWeights::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(NetworkWeights::from_bytes(b"NOPE").is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(NetworkWeights::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }
}
