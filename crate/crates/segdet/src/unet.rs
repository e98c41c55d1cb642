//! 3D U-Net segmenter over a 1- or 2-channel volume (image [+ attention]).
//!
//! Contracting path: per level, two padded 3x3x3 convolutions each followed
//! by ReLU, then 2x2x2 max pooling; channels double per level. Expanding
//! path: 2x2x2 stride-2 upconvolution, channel concatenation with the
//! equal-resolution skip, then two 3x3x3 convolutions with ReLU; channels
//! halve per level. A final 1x1x1 convolution maps to the label logits.
//! Padding-1 convolutions keep every spatial extent, so the output logits
//! match the input dims exactly.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{init_gaussian, init_he};
use crate::tensor::{Param, ParamKind, Tensor};
use crate::volume::Volume;

#[derive(Clone, Debug)]
pub struct UNetConfig {
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels of the first level; doubles per stage.
    pub base_channels: usize,
    /// 2 for image + attention/mask input, 1 for the plain baseline.
    pub in_channels: usize,
    pub num_labels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 8, in_channels: 2, num_labels: 2 }
    }
}

struct LevelConvs {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

struct DecoderLevel {
    up_w: Param,
    convs: LevelConvs,
}

pub struct UNet3D {
    pub cfg: UNetConfig,
    encoder: Vec<LevelConvs>,
    bottom: LevelConvs,
    decoder: Vec<DecoderLevel>, // deepest level first
    head_w: Param,
    head_b: Param,
}

fn level_convs(prefix: &str, c_in: usize, c_out: usize) -> LevelConvs {
    LevelConvs {
        w1: Param::new(format!("{prefix}.conv1.w"), ParamKind::Weight, Tensor::zeros(&[c_out, c_in, 3, 3, 3])),
        b1: Param::new(format!("{prefix}.conv1.b"), ParamKind::Bias, Tensor::zeros(&[c_out])),
        w2: Param::new(format!("{prefix}.conv2.w"), ParamKind::Weight, Tensor::zeros(&[c_out, c_out, 3, 3, 3])),
        b2: Param::new(format!("{prefix}.conv2.b"), ParamKind::Bias, Tensor::zeros(&[c_out])),
    }
}

impl UNet3D {
    /// Fresh network: fan-in-scaled Gaussian for the interior, N(0, 0.01)
    /// for the final label head, zero biases.
    pub fn new(cfg: UNetConfig, seed: u64) -> UNet3D {
        let ch = |level: usize| cfg.base_channels << level;
        let mut encoder = Vec::new();
        let mut c_in = cfg.in_channels;
        for level in 0..cfg.depth {
            encoder.push(level_convs(&format!("enc{level}"), c_in, ch(level)));
            c_in = ch(level);
        }
        let bottom = level_convs("bottom", c_in, ch(cfg.depth));

        let mut decoder = Vec::new();
        for level in (0..cfg.depth).rev() {
            let c_hi = ch(level + 1);
            let c_lo = ch(level);
            decoder.push(DecoderLevel {
                up_w: Param::new(format!("dec{level}.up.w"), ParamKind::Weight, Tensor::zeros(&[c_hi, c_lo, 2, 2, 2])),
                convs: level_convs(&format!("dec{level}"), 2 * c_lo, c_lo),
            });
        }
        let head_w = Param::new("head.w", ParamKind::Weight, Tensor::zeros(&[cfg.num_labels, cfg.base_channels, 1, 1, 1]));
        let head_b = Param::new("head.b", ParamKind::Bias, Tensor::zeros(&[cfg.num_labels]));

        let model = UNet3D { cfg, encoder, bottom, decoder, head_w, head_b };
        let all = model.params();
        let (head, trunk): (Vec<Param>, Vec<Param>) = all.into_iter().partition(|p| p.name.starts_with("head."));
        init_he(&trunk, seed);
        init_gaussian(&head, 0.01, seed ^ 0x9e37);
        model
    }

    /// All parameters in a fixed order (also the checkpoint order).
    pub fn params(&self) -> Vec<Param> {
        fn convs(c: &LevelConvs) -> [Param; 4] {
            [c.w1.clone(), c.b1.clone(), c.w2.clone(), c.b2.clone()]
        }
        let mut out = Vec::new();
        for level in &self.encoder {
            out.extend(convs(level));
        }
        out.extend(convs(&self.bottom));
        for dec in &self.decoder {
            out.push(dec.up_w.clone());
            out.extend(convs(&dec.convs));
        }
        out.extend([self.head_w.clone(), self.head_b.clone()]);
        out
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    fn double_conv(&self, g: &mut Graph, x: NodeId, convs: &LevelConvs) -> Result<NodeId> {
        let w1 = g.param(&convs.w1);
        let b1 = g.param(&convs.b1);
        let mut x = g.conv(x, w1, Some(b1), &[1, 1, 1], &[1, 1, 1])?;
        x = g.relu(x);
        let w2 = g.param(&convs.w2);
        let b2 = g.param(&convs.b2);
        x = g.conv(x, w2, Some(b2), &[1, 1, 1], &[1, 1, 1])?;
        Ok(g.relu(x))
    }

    /// Forward `[1, C, D, H, W]` to logits `[1, L, D, H, W]`.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 5 || shape[0] != 1 {
            return Err(Error::Dim(format!("unet expects a [1,C,D,H,W] input, got {shape:?}")));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::Dim(format!(
                "unet configured for {} input channels, got {}",
                self.cfg.in_channels, shape[1]
            )));
        }
        let div = 1usize << self.cfg.depth;
        for (axis, &e) in shape[2..].iter().enumerate() {
            if e % div != 0 {
                return Err(Error::Dim(format!(
                    "input extent {e} on spatial axis {axis} is not divisible by 2^depth = {div}"
                )));
            }
        }

        let mut x = input;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for level in &self.encoder {
            x = self.double_conv(g, x, level)?;
            skips.push(x);
            x = g.maxpool(x, &[2, 2, 2], &[2, 2, 2])?;
        }
        x = self.double_conv(g, x, &self.bottom)?;
        for dec in &self.decoder {
            let up_w = g.param(&dec.up_w);
            let up = g.tconv(x, up_w, &[2, 2, 2])?;
            let skip = skips.pop().expect("one skip per decoder level");
            x = g.concat_channels(skip, up)?;
            x = self.double_conv(g, x, &dec.convs)?;
        }
        let hw = g.param(&self.head_w);
        let hb = g.param(&self.head_b);
        g.conv(x, hw, Some(hb), &[1, 1, 1], &[0, 0, 0])
    }
}

/// Voxel-wise softmax cross entropy against a binary label volume.
pub fn seg_loss(g: &mut Graph, logits: NodeId, labels: &Volume) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 5 {
        return Err(Error::Dim(format!("expected rank-5 logits, got {shape:?}")));
    }
    if (shape[2], shape[3], shape[4]) != labels.dims() {
        return Err(Error::Dim(format!(
            "logit dims {:?} != label dims {:?}",
            &shape[2..],
            labels.dims()
        )));
    }
    let n_labels = shape[1] as i32;
    let mut idx_labels = Vec::with_capacity(labels.numel());
    for &v in &labels.data {
        let l = v.round() as i32;
        if (v - l as f32).abs() > 1e-3 || l < 0 || l >= n_labels {
            return Err(Error::Input(format!("label value {v} out of range for {n_labels} labels")));
        }
        idx_labels.push(l);
    }
    g.softmax_cross_entropy(logits, &idx_labels, None)
}

/// Voxel-wise argmax over label logits; ties go to the lower label index.
pub fn predict(model: &UNet3D, input: Tensor) -> Result<Volume> {
    let mut g = Graph::new();
    let x = g.constant(input);
    let logits = model.forward(&mut g, x)?;
    let shape = g.shape(logits).to_vec();
    let (l, d, h, w) = (shape[1], shape[2], shape[3], shape[4]);
    let spatial = d * h * w;
    let data = g.data(logits);
    let mut out = Volume::zeros(d, h, w);
    for pos in 0..spatial {
        let mut best = 0usize;
        let mut best_v = data[pos];
        for c in 1..l {
            let v = data[c * spatial + pos];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.data[pos] = best as f32;
    }
    Ok(out)
}
