//! The trainable detection network: a small convolutional backbone over a
//! 2D slice, a 3x3 proposal window, and parallel box-classification /
//! box-regression heads, with multi-task loss and proposal extraction.
//!
//! Channel layouts are fixed: for anchor `k` at feature cell `(i, j)`,
//! the cls map holds (background, object) logits at channels `2k` and
//! `2k + 1`, and the reg map holds (tx, ty, tw, th) at channels `4k..4k+4`.
//! Anchor index `a = (i * feature_w + j) * anchors_per_cell + k` matches
//! the order of [`generate_anchors`].

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{assign_labels, clip_box, decode, generate_anchors, nms, AnchorGrid, AnchorLabels, BBox, RegTarget};
use crate::graph::{Graph, NodeId};
use crate::optim::{init_gaussian, init_he};
use crate::tensor::{Param, ParamKind, Tensor};
use crate::volume::Volume;

#[derive(Clone, Debug)]
pub struct RpnConfig {
    /// Output channels of each backbone block; each block ends in a 2x2
    /// max pool, so the downsample factor is `2^blocks`.
    pub backbone_channels: Vec<usize>,
    pub head_channels: usize,
    pub anchor_scales: Vec<f32>,
    pub anchor_ratios: Vec<f32>,
    pub pos_iou: f32,
    pub neg_iou: f32,
    pub batch_size: usize,
    pub pos_fraction: f32,
    /// Train on positive anchors only (no sampled negatives), for fidelity
    /// experiments; the default mixes positives and negatives 1:1.
    pub positives_only: bool,
    pub score_thresh: f32,
    pub nms_thresh: f32,
    pub max_proposals_per_slice: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            backbone_channels: vec![8, 16, 32],
            head_channels: 64,
            anchor_scales: vec![8.0, 16.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch_size: 256,
            pos_fraction: 0.5,
            positives_only: false,
            score_thresh: 0.5,
            nms_thresh: 0.5,
            max_proposals_per_slice: 3,
        }
    }
}

impl RpnConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn anchor_grid(&self, slice_h: usize, slice_w: usize) -> Result<AnchorGrid> {
        let df = self.downsample_factor();
        generate_anchors(slice_h / df, slice_w / df, df, &self.anchor_scales, &self.anchor_ratios)
    }
}

struct ConvBlock {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

pub struct RpnModel {
    pub cfg: RpnConfig,
    blocks: Vec<ConvBlock>,
    head_w: Param,
    head_b: Param,
    cls_w: Param,
    cls_b: Param,
    reg_w: Param,
    reg_b: Param,
}

impl RpnModel {
    /// Fresh model: fan-in-scaled Gaussian for backbone and shared head
    /// conv, N(0, 0.01) for the prediction heads, zero biases.
    pub fn new(cfg: RpnConfig, seed: u64) -> RpnModel {
        let a = cfg.anchors_per_cell();
        let mut blocks = Vec::new();
        let mut c_in = 1usize;
        for (i, &c_out) in cfg.backbone_channels.iter().enumerate() {
            blocks.push(ConvBlock {
                w1: Param::new(format!("backbone.{i}.conv1.w"), ParamKind::Weight, Tensor::zeros(&[c_out, c_in, 3, 3])),
                b1: Param::new(format!("backbone.{i}.conv1.b"), ParamKind::Bias, Tensor::zeros(&[c_out])),
                w2: Param::new(format!("backbone.{i}.conv2.w"), ParamKind::Weight, Tensor::zeros(&[c_out, c_out, 3, 3])),
                b2: Param::new(format!("backbone.{i}.conv2.b"), ParamKind::Bias, Tensor::zeros(&[c_out])),
            });
            c_in = c_out;
        }
        let head_w = Param::new("head.conv.w", ParamKind::Weight, Tensor::zeros(&[cfg.head_channels, c_in, 3, 3]));
        let head_b = Param::new("head.conv.b", ParamKind::Bias, Tensor::zeros(&[cfg.head_channels]));
        let cls_w = Param::new("head.cls.w", ParamKind::Weight, Tensor::zeros(&[2 * a, cfg.head_channels, 1, 1]));
        let cls_b = Param::new("head.cls.b", ParamKind::Bias, Tensor::zeros(&[2 * a]));
        let reg_w = Param::new("head.reg.w", ParamKind::Weight, Tensor::zeros(&[4 * a, cfg.head_channels, 1, 1]));
        let reg_b = Param::new("head.reg.b", ParamKind::Bias, Tensor::zeros(&[4 * a]));

        let model = RpnModel { cfg, blocks, head_w, head_b, cls_w, cls_b, reg_w, reg_b };
        init_he(&model.params(), seed);
        model
    }

    /// All parameters in a fixed order (also the checkpoint order).
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([b.w1.clone(), b.b1.clone(), b.w2.clone(), b.b2.clone()]);
        }
        out.extend([
            self.head_w.clone(),
            self.head_b.clone(),
            self.cls_w.clone(),
            self.cls_b.clone(),
            self.reg_w.clone(),
            self.reg_b.clone(),
        ]);
        out
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Forward one `[1, 1, H, W]` slice to `(cls [1, 2A, h, w],
    /// reg [1, 4A, h, w])` with `h = H / downsample`, `w = W / downsample`.
    pub fn forward(&self, g: &mut Graph, slice: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.shape(slice).to_vec();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
            return Err(Error::Dim(format!("rpn expects a [1,1,H,W] slice, got {shape:?}")));
        }
        let df = self.cfg.downsample_factor();
        for (axis, &e) in shape[2..].iter().enumerate() {
            if e % df != 0 {
                return Err(Error::Dim(format!(
                    "slice extent {e} on spatial axis {axis} is not divisible by the downsample factor {df}"
                )));
            }
        }
        let mut x = slice;
        for b in &self.blocks {
            let w1 = g.param(&b.w1);
            let b1 = g.param(&b.b1);
            x = g.conv(x, w1, Some(b1), &[1, 1], &[1, 1])?;
            x = g.relu(x);
            let w2 = g.param(&b.w2);
            let b2 = g.param(&b.b2);
            x = g.conv(x, w2, Some(b2), &[1, 1], &[1, 1])?;
            x = g.relu(x);
            x = g.maxpool(x, &[2, 2], &[2, 2])?;
        }
        let hw = g.param(&self.head_w);
        let hb = g.param(&self.head_b);
        let mut h = g.conv(x, hw, Some(hb), &[1, 1], &[1, 1])?;
        h = g.relu(h);
        let cw = g.param(&self.cls_w);
        let cb = g.param(&self.cls_b);
        let cls = g.conv(h, cw, Some(cb), &[1, 1], &[0, 0])?;
        let rw = g.param(&self.reg_w);
        let rb = g.param(&self.reg_b);
        let reg = g.conv(h, rw, Some(rb), &[1, 1], &[0, 0])?;
        Ok((cls, reg))
    }
}

/// Anchor indices picked for one loss evaluation.
#[derive(Clone, Debug)]
pub struct MinibatchSample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl MinibatchSample {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sample up to `batch * pos_fraction` positives uniformly without
/// replacement and fill the remainder with negatives. With
/// `positives_only`, negatives are excluded entirely.
pub fn sample_minibatch(
    labels: &AnchorLabels,
    batch: usize,
    pos_fraction: f32,
    positives_only: bool,
    rng: &mut ChaCha8Rng,
) -> Result<MinibatchSample> {
    let pos_pool: Vec<usize> = labels.positives().collect();
    let neg_pool: Vec<usize> = labels.negatives().collect();

    let pos_cap = if positives_only { batch } else { (batch as f32 * pos_fraction) as usize };
    let n_pos = pos_pool.len().min(pos_cap);
    let n_neg = if positives_only { 0 } else { neg_pool.len().min(batch - n_pos) };
    if n_pos + n_neg == 0 {
        return Err(Error::Usage("no anchors available to sample".into()));
    }

    let mut positives: Vec<usize> = pos_pool.choose_multiple(rng, n_pos).copied().collect();
    let mut negatives: Vec<usize> = neg_pool.choose_multiple(rng, n_neg).copied().collect();
    positives.sort_unstable();
    negatives.sort_unstable();
    Ok(MinibatchSample { positives, negatives })
}

/// Flat index of channel `ch` at feature cell `(i, j)` in a `[1, C, h, w]`
/// map.
fn feat_index(ch: usize, i: usize, j: usize, h: usize, w: usize) -> usize {
    (ch * h + i) * w + j
}

fn anchor_cell(a: usize, anchors_per_cell: usize, feature_w: usize) -> (usize, usize, usize) {
    let cell = a / anchors_per_cell;
    (cell / feature_w, cell % feature_w, a % anchors_per_cell)
}

/// Multi-task proposal loss: mean log loss over the sampled anchors plus
/// smooth-L1 over the 4 offsets of the sampled positives, the latter
/// normalized by the sampled-anchor count; the two terms add unweighted.
pub fn rpn_loss(
    g: &mut Graph,
    cls: NodeId,
    reg: NodeId,
    labels: &AnchorLabels,
    sample: &MinibatchSample,
) -> Result<NodeId> {
    if sample.is_empty() {
        return Err(Error::Usage("empty anchor minibatch".into()));
    }
    let cls_shape = g.shape(cls).to_vec();
    let (h, w) = (cls_shape[2], cls_shape[3]);
    let a_per_cell = cls_shape[1] / 2;
    let n = sample.len();

    // classification over (background, object) logit pairs
    let mut idx = Vec::with_capacity(2 * n);
    let mut cls_targets = Vec::with_capacity(n);
    for (&a, is_pos) in sample
        .positives
        .iter()
        .map(|a| (a, true))
        .chain(sample.negatives.iter().map(|a| (a, false)))
    {
        let (i, j, k) = anchor_cell(a, a_per_cell, w);
        debug_assert!(i < h);
        idx.push(feat_index(2 * k, i, j, h, w));
        idx.push(feat_index(2 * k + 1, i, j, h, w));
        cls_targets.push(if is_pos { 1i32 } else { 0i32 });
    }
    let picked = g.gather(cls, &idx)?;
    let pairs = g.reshape(picked, &[n, 2])?;
    let cls_term = g.softmax_cross_entropy(pairs, &cls_targets, None)?;

    if sample.positives.is_empty() {
        return Ok(cls_term);
    }

    // regression over sampled positive anchors
    let mut reg_idx = Vec::with_capacity(4 * sample.positives.len());
    let mut reg_targets = Vec::with_capacity(4 * sample.positives.len());
    for &a in &sample.positives {
        let (i, j, k) = anchor_cell(a, a_per_cell, w);
        let t = labels.targets[a].ok_or_else(|| {
            Error::Usage(format!("sampled positive anchor {a} has no regression target"))
        })?;
        for (off, tv) in [t.tx, t.ty, t.tw, t.th].into_iter().enumerate() {
            reg_idx.push(feat_index(4 * k + off, i, j, h, w));
            reg_targets.push(tv);
        }
    }
    let pred = g.gather(reg, &reg_idx)?;
    let target = g.constant(Tensor::new(vec![reg_targets.len()], reg_targets)?);
    let l1 = g.smooth_l1(pred, target)?;
    let reg_term = g.scale(l1, 1.0 / n as f32);
    g.add(cls_term, reg_term)
}

/// Proposals for every slice of a volume: boxes with objectness scores,
/// sorted by descending score, at most `max_proposals_per_slice` each.
#[derive(Clone, Debug, Default)]
pub struct ProposalSet {
    pub slices: Vec<Vec<(BBox, f32)>>,
}

/// Objectness from a (background, object) logit pair.
fn objectness(l_bg: f32, l_obj: f32) -> f32 {
    1.0 / (1.0 + (l_bg - l_obj).exp())
}

/// Run the detector over every slice: score-filter at `score_thresh`,
/// decode against the anchors, clip to the slice, NMS, then keep the top
/// `max_proposals_per_slice`. Slices may yield no proposals.
pub fn extract_proposals(model: &RpnModel, volume: &Volume, cfg: &RpnConfig) -> Result<ProposalSet> {
    let (d, h, w) = volume.dims();
    let grid = cfg.anchor_grid(h, w)?;
    let a_per_cell = cfg.anchors_per_cell();
    let mut slices = Vec::with_capacity(d);
    for z in 0..d {
        let mut g = Graph::new();
        let x = g.constant(volume.slice_tensor(z));
        let (cls, reg) = model.forward(&mut g, x)?;
        let cls_shape = g.shape(cls).to_vec();
        let (fh, fw) = (cls_shape[2], cls_shape[3]);
        let cls_data = g.data(cls);
        let reg_data = g.data(reg);

        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for a in 0..grid.len() {
            let (i, j, k) = anchor_cell(a, a_per_cell, fw);
            debug_assert!(i < fh);
            let score = objectness(
                cls_data[feat_index(2 * k, i, j, fh, fw)],
                cls_data[feat_index(2 * k + 1, i, j, fh, fw)],
            );
            if score < cfg.score_thresh {
                continue;
            }
            let t = RegTarget {
                tx: reg_data[feat_index(4 * k, i, j, fh, fw)],
                ty: reg_data[feat_index(4 * k + 1, i, j, fh, fw)],
                tw: reg_data[feat_index(4 * k + 2, i, j, fh, fw)],
                th: reg_data[feat_index(4 * k + 3, i, j, fh, fw)],
            };
            let (decoded, _) = decode(&grid.boxes[a], &t);
            boxes.push(clip_box(&decoded, h, w));
            scores.push(score);
        }
        let kept = nms(&boxes, &scores, cfg.nms_thresh);
        let top: Vec<(BBox, f32)> = kept
            .into_iter()
            .take(cfg.max_proposals_per_slice)
            .map(|i| (boxes[i], scores[i]))
            .collect();
        slices.push(top);
    }
    Ok(ProposalSet { slices })
}

/// Anchor labels for one slice's ground-truth box list.
pub fn slice_anchor_labels(cfg: &RpnConfig, slice_h: usize, slice_w: usize, gt: &[BBox]) -> Result<AnchorLabels> {
    let grid = cfg.anchor_grid(slice_h, slice_w)?;
    assign_labels(&grid, gt, cfg.pos_iou, cfg.neg_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Sgd;
    use rand::SeedableRng;

    #[test]
    fn forward_shapes_full_scale() {
        let model = RpnModel::new(RpnConfig::default(), 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 184, 96]));
        let (cls, reg) = model.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(cls), &[1, 18, 23, 12]);
        assert_eq!(g.shape(reg), &[1, 36, 23, 12]);
        let grid = model.cfg.anchor_grid(184, 96).unwrap();
        assert_eq!(grid.len(), 23 * 12 * 9);
        assert_eq!(grid.len(), 2484);
    }

    #[test]
    fn forward_rejects_indivisible_extent() {
        let model = RpnModel::new(RpnConfig::default(), 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 180, 96]));
        assert!(matches!(model.forward(&mut g, x), Err(Error::Dim(_))));
    }

    #[test]
    fn zero_input_gives_uniform_objectness() {
        let model = RpnModel::new(RpnConfig::default(), 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 48, 32]));
        let (cls, _) = model.forward(&mut g, x).unwrap();
        // zero input and zero biases keep every activation at zero, so both
        // class logits tie and the softmax is uniform
        assert!(g.data(cls).iter().all(|&v| v == 0.0));
        assert_eq!(objectness(0.0, 0.0), 0.5);
    }

    #[test]
    fn cls_probabilities_sum_to_one() {
        let model = RpnModel::new(RpnConfig::default(), 5);
        let mut g = Graph::new();
        let p = gen_slice(21);
        let x = g.constant(p);
        let (cls, _) = model.forward(&mut g, x).unwrap();
        let shape = g.shape(cls).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let data = g.data(cls);
        for k in 0..9 {
            for i in 0..h {
                for j in 0..w {
                    let lb = data[feat_index(2 * k, i, j, h, w)];
                    let lo = data[feat_index(2 * k + 1, i, j, h, w)];
                    let p_obj = objectness(lb, lo);
                    let p_bg = objectness(lo, lb);
                    assert!((p_obj + p_bg - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    fn gen_slice(seed: u64) -> Tensor {
        let mut s = seed | 1;
        let mut t = Tensor::zeros(&[1, 1, 48, 32]);
        for v in t.data.iter_mut() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *v = (s >> 40) as f32 / (1u64 << 24) as f32;
        }
        t
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let model = RpnModel::new(RpnConfig::default(), 9);
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(gen_slice(4));
            let (cls, reg) = model.forward(&mut g, x).unwrap();
            (g.data(cls).to_vec(), g.data(reg).to_vec())
        };
        assert_eq!(run(), run());
    }

    fn toy_labels() -> AnchorLabels {
        // 2x2 feature grid, 1 anchor per cell (scale 16, ratio 1)
        let grid = generate_anchors(2, 2, 16, &[16.0], &[1.0]).unwrap();
        let gt = grid.boxes[1];
        assign_labels(&grid, &[gt], 0.7, 0.3).unwrap()
    }

    #[test]
    fn minibatch_counts_follow_the_rule() {
        // synthetic label sets exercising the counting rules
        let mk = |pos: usize, neg: usize| AnchorLabels {
            labels: (0..pos + neg)
                .map(|i| {
                    if i < pos {
                        crate::geometry::AnchorLabel::Positive
                    } else {
                        crate::geometry::AnchorLabel::Negative
                    }
                })
                .collect(),
            matched_gt: vec![None; pos + neg],
            targets: vec![None; pos + neg],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_minibatch(&mk(10, 1000), 256, 0.5, false, &mut rng).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (10, 246));

        let s = sample_minibatch(&mk(300, 1000), 256, 0.5, false, &mut rng).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (128, 128));

        let s = sample_minibatch(&mk(300, 1000), 256, 0.5, true, &mut rng).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (256, 0));

        let empty = AnchorLabels { labels: vec![], matched_gt: vec![], targets: vec![] };
        assert!(matches!(
            sample_minibatch(&empty, 256, 0.5, false, &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn minibatch_same_seed_identical() {
        let labels = toy_labels();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_minibatch(&labels, 3, 0.5, false, &mut rng).unwrap();
            (s.positives, s.negatives)
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn loss_without_positives_is_pure_classification() {
        let labels = toy_labels();
        let mut g = Graph::new();
        let cls = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let reg = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let sample = MinibatchSample { positives: vec![], negatives: vec![0, 2, 3] };
        let loss = rpn_loss(&mut g, cls, reg, &labels, &sample).unwrap();
        assert!((g.data(loss)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn loss_vanishes_on_perfect_predictions() {
        let labels = toy_labels();
        // anchor 1 positive with zero target; push its object logit high,
        // everything else to background
        let mut cls = Tensor::zeros(&[1, 2, 2, 2]);
        for a in 0..4 {
            let (i, j, _) = anchor_cell(a, 1, 2);
            let correct = if a == 1 { 1 } else { 0 };
            cls.data[feat_index(correct, i, j, 2, 2)] = 30.0;
        }
        let reg = Tensor::zeros(&[1, 4, 2, 2]); // exact offsets: target is 0
        let mut g = Graph::new();
        let cls = g.constant(cls);
        let reg = g.constant(reg);
        let sample = MinibatchSample { positives: vec![1], negatives: vec![0, 2, 3] };
        let loss = rpn_loss(&mut g, cls, reg, &labels, &sample).unwrap();
        assert!(g.data(loss)[0] < 1e-6, "loss {}", g.data(loss)[0]);
    }

    #[test]
    fn loss_matches_scalar_oracle_on_hand_built_case() {
        let labels = toy_labels();
        let mut cls = Tensor::zeros(&[1, 2, 2, 2]);
        let mut reg = Tensor::zeros(&[1, 4, 2, 2]);
        // anchor 0 (negative): logits (0.3, -0.2); anchor 1 (positive):
        // logits (-0.5, 0.9), offsets (0.1, -0.3, 0.6, 1.4) vs target 0;
        // anchor 2 (negative): logits (0, 0)
        cls.data[feat_index(0, 0, 0, 2, 2)] = 0.3;
        cls.data[feat_index(1, 0, 0, 2, 2)] = -0.2;
        cls.data[feat_index(0, 0, 1, 2, 2)] = -0.5;
        cls.data[feat_index(1, 0, 1, 2, 2)] = 0.9;
        for (off, v) in [0.1f32, -0.3, 0.6, 1.4].into_iter().enumerate() {
            reg.data[feat_index(off, 0, 1, 2, 2)] = v;
        }
        let mut g = Graph::new();
        let cls = g.constant(cls);
        let reg = g.constant(reg);
        let sample = MinibatchSample { positives: vec![1], negatives: vec![0, 2] };
        let loss = rpn_loss(&mut g, cls, reg, &labels, &sample).unwrap();

        // f64 oracle, direct formulas
        let ce = |l0: f64, l1: f64, label: usize| {
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            lse - if label == 0 { l0 } else { l1 }
        };
        let smooth = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        let cls_term = (ce(0.3, -0.2, 0) + ce(-0.5, 0.9, 1) + ce(0.0, 0.0, 0)) / 3.0;
        let reg_term = (smooth(0.1) + smooth(-0.3) + smooth(0.6) + smooth(1.4)) / 3.0;
        let want = cls_term + reg_term;
        assert!(
            (f64::from(g.data(loss)[0]) - want).abs() < 1e-5,
            "{} vs {want}",
            g.data(loss)[0]
        );
    }

    #[test]
    fn empty_sample_is_usage_error() {
        let labels = toy_labels();
        let mut g = Graph::new();
        let cls = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let reg = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let sample = MinibatchSample { positives: vec![], negatives: vec![] };
        assert!(matches!(
            rpn_loss(&mut g, cls, reg, &labels, &sample),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn untrained_proposals_are_well_formed() {
        let cfg = RpnConfig::default();
        let model = RpnModel::new(cfg.clone(), 1);
        let mut vol = Volume::zeros(4, 48, 32);
        for (i, v) in vol.data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f32 / 1000.0;
        }
        let props = extract_proposals(&model, &vol, &cfg).unwrap();
        assert_eq!(props.slices.len(), 4);
        for slice in &props.slices {
            assert!(slice.len() <= cfg.max_proposals_per_slice);
            for win in slice.windows(2) {
                assert!(win[0].1 >= win[1].1, "scores sorted descending");
            }
            for (b, _) in slice {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 32.0 && b.y2 <= 184.0);
            }
        }
    }

    #[test]
    fn full_batch_training_on_one_slice_converges() {
        // loss decreases (allowing <= 5 non-monotone steps of 50) and falls
        // below 0.1 by step 1000 with the paper's SGD settings
        let cfg = RpnConfig::default();
        let model = RpnModel::new(cfg.clone(), 42);
        let phantom = crate::phantom::gen_phantom(5, (32, 48, 32), &crate::phantom::PhantomParams::default()).unwrap();
        let z = (0..32)
            .max_by_key(|&z| phantom.gt_boxes[z].map_or(0, |b| b.area() as i64))
            .unwrap();
        let gt = vec![phantom.gt_boxes[z].unwrap()];
        let labels = slice_anchor_labels(&cfg, 48, 32, &gt).unwrap();
        let sample = MinibatchSample {
            positives: labels.positives().collect(),
            negatives: labels.negatives().collect(),
        };
        let mut opt = Sgd::detection_defaults();
        let params = model.params();
        let mut losses = Vec::new();
        for _ in 0..1000 {
            let mut g = Graph::new();
            let x = g.constant(phantom.volume.slice_tensor(z));
            let (cls, reg) = model.forward(&mut g, x).unwrap();
            let loss = rpn_loss(&mut g, cls, reg, &labels, &sample).unwrap();
            losses.push(g.data(loss)[0]);
            model.zero_grad();
            g.backward(loss).unwrap();
            opt.step(&params).unwrap();
        }
        let non_monotone = losses[..50].windows(2).filter(|w| w[1] > w[0]).count();
        assert!(non_monotone <= 5, "{non_monotone} non-monotone steps in the first 50");
        assert!(losses[999] < 0.1, "loss after 1000 steps: {}", losses[999]);
    }

    #[test]
    fn rpn_gradient_matches_finite_differences() {
        // end-to-end d(loss)/dw for a backbone weight on a tiny slice
        let cfg = RpnConfig {
            backbone_channels: vec![4, 4, 8],
            head_channels: 8,
            ..RpnConfig::default()
        };
        let model = RpnModel::new(cfg.clone(), 17);
        let slice = gen_slice(33);
        let labels = slice_anchor_labels(&cfg, 48, 32, &[BBox::new(8.0, 12.0, 24.0, 30.0)]).unwrap();
        let sample = MinibatchSample {
            positives: labels.positives().collect(),
            negatives: labels.negatives().take(40).collect(),
        };
        let eval = || {
            let mut g = Graph::new();
            let x = g.constant(slice.clone());
            let (cls, reg) = model.forward(&mut g, x).unwrap();
            let loss = rpn_loss(&mut g, cls, reg, &labels, &sample).unwrap();
            (g, loss)
        };
        let (mut g, loss) = eval();
        model.zero_grad();
        g.backward(loss).unwrap();

        let target = &model.params()[0]; // backbone.0.conv1.w
        let flat = 7usize;
        let analytic = target.borrow().grad.as_ref().unwrap()[flat];

        let h = 1e-3f32;
        let orig = target.borrow().data[flat];
        target.borrow_mut().data[flat] = orig + h;
        let plus = { let (g, l) = eval(); f64::from(g.data(l)[0]) };
        target.borrow_mut().data[flat] = orig - h;
        let minus = { let (g, l) = eval(); f64::from(g.data(l)[0]) };
        target.borrow_mut().data[flat] = orig;

        let fd = ((plus - minus) / (2.0 * f64::from(h))) as f32;
        let denom = analytic.abs().max(fd.abs()).max(0.5);
        assert!(
            ((analytic - fd) / denom).abs() < 1e-3,
            "analytic {analytic} vs fd {fd}"
        );
    }
}
