//! Box geometry underneath the region proposal network: anchors, IoU,
//! regression encode/decode, anchor label assignment and NMS.
//!
//! Boxes use continuous half-open coordinates `[x1, x2) x [y1, y2)` with
//! `area = (x2-x1)*(y2-y1)`; a pixel `(i, j)` belongs to a box iff its
//! center `(j+0.5, i+0.5)` does. All functions here are pure.

use crate::error::{Error, Result};

/// Axis-aligned 2D rectangle in slice pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Construct from center point and size.
    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> BBox {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    /// True iff the pixel center `(x + 0.5, y + 0.5)` lies inside.
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
        cx >= self.x1 && cx < self.x2 && cy >= self.y1 && cy < self.y2
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Clamp a box to `[0, w] x [0, h]`.
pub fn clip_box(b: &BBox, h: usize, w: usize) -> BBox {
    let (wf, hf) = (w as f32, h as f32);
    BBox::new(
        b.x1.clamp(0.0, wf),
        b.y1.clamp(0.0, hf),
        b.x2.clamp(0.0, wf),
        b.y2.clamp(0.0, hf),
    )
}

/// The 4-vector parameterizing a box relative to an anchor: dimensionless
/// center offsets and log-space size shifts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegTarget {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
}

/// Largest magnitude accepted for the log-space size shifts when decoding.
pub const MAX_LOG_SHIFT: f32 = 4.0;

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<RegTarget> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::Input(format!("degenerate anchor {anchor:?}")));
    }
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::Input(format!("degenerate ground-truth box {gt:?}")));
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    Ok(RegTarget {
        tx: (gx - ax) / anchor.width(),
        ty: (gy - ay) / anchor.height(),
        tw: (gt.width() / anchor.width()).ln(),
        th: (gt.height() / anchor.height()).ln(),
    })
}

/// Exact inverse of [`encode`]; `|tw|`/`|th|` are clamped to
/// [`MAX_LOG_SHIFT`] and the returned flag says whether clamping fired.
pub fn decode(anchor: &BBox, t: &RegTarget) -> (BBox, bool) {
    let clamped = t.tw.abs() > MAX_LOG_SHIFT || t.th.abs() > MAX_LOG_SHIFT;
    let tw = t.tw.clamp(-MAX_LOG_SHIFT, MAX_LOG_SHIFT);
    let th = t.th.clamp(-MAX_LOG_SHIFT, MAX_LOG_SHIFT);
    let (ax, ay) = anchor.center();
    let cx = ax + t.tx * anchor.width();
    let cy = ay + t.ty * anchor.height();
    let w = anchor.width() * tw.exp();
    let h = anchor.height() * th.exp();
    (BBox::from_center(cx, cy, w, h), clamped)
}

/// Anchors tiled over a feature grid: one box per (cell, scale, ratio)
/// triple in fixed `(y, x, anchor-index)` order, 9 per cell.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub feature_h: usize,
    pub feature_w: usize,
    /// Pixels per feature cell.
    pub stride: usize,
    pub scales: Vec<f32>,
    pub ratios: Vec<f32>,
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tile anchors with centers at `(stride*(j+0.5), stride*(i+0.5))`.
/// A scale `s` / ratio `r` anchor has `w = s*sqrt(r)`, `h = s/sqrt(r)`,
/// so aspect `w/h = r` and area `s^2`. Anchor index within a cell is
/// `scale_index * ratios.len() + ratio_index`.
pub fn generate_anchors(feature_h: usize, feature_w: usize, stride: usize, scales: &[f32], ratios: &[f32]) -> Result<AnchorGrid> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::Input("anchor scales and ratios must be nonempty".into()));
    }
    if let Some(&bad) = scales.iter().chain(ratios).find(|&&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Input(format!("nonpositive anchor scale/ratio {bad}")));
    }
    let mut boxes = Vec::with_capacity(feature_h * feature_w * scales.len() * ratios.len());
    for i in 0..feature_h {
        for j in 0..feature_w {
            let cy = stride as f32 * (i as f32 + 0.5);
            let cx = stride as f32 * (j as f32 + 0.5);
            for &s in scales {
                for &r in ratios {
                    let w = s * r.sqrt();
                    let h = s / r.sqrt();
                    boxes.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    Ok(AnchorGrid {
        feature_h,
        feature_w,
        stride,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
        boxes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor assignment against a slice's ground-truth boxes.
#[derive(Clone, Debug)]
pub struct AnchorLabels {
    pub labels: Vec<AnchorLabel>,
    /// Index of the best-IoU ground-truth box, for positive anchors.
    pub matched_gt: Vec<Option<usize>>,
    /// Regression target onto the matched box, for positive anchors.
    pub targets: Vec<Option<RegTarget>>,
}

impl AnchorLabels {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == AnchorLabel::Negative)
            .map(|(i, _)| i)
    }
}

/// Assign anchor labels: positive iff IoU > `pos_iou` against any box or the
/// anchor is the (lowest-index) argmax-IoU anchor of some box; negative iff
/// the max IoU is < `neg_iou` and not forced; otherwise ignore. Each
/// positive anchor regresses onto its best-IoU box (lowest index on ties).
/// No ground truth yields all negatives.
pub fn assign_labels(anchors: &AnchorGrid, gts: &[BBox], pos_iou: f32, neg_iou: f32) -> Result<AnchorLabels> {
    if anchors.is_empty() {
        return Err(Error::Usage("assign_labels on an empty anchor grid".into()));
    }
    let n = anchors.len();
    if gts.is_empty() {
        return Ok(AnchorLabels {
            labels: vec![AnchorLabel::Negative; n],
            matched_gt: vec![None; n],
            targets: vec![None; n],
        });
    }

    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut matched_gt = vec![None; n];
    let mut targets = vec![None; n];

    // per-anchor best gt
    let mut best_iou = vec![0.0f32; n];
    let mut best_gt = vec![0usize; n];
    for (a, anchor) in anchors.boxes.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = g;
            }
        }
    }

    for a in 0..n {
        if best_iou[a] > pos_iou {
            labels[a] = AnchorLabel::Positive;
        } else if best_iou[a] < neg_iou {
            labels[a] = AnchorLabel::Negative;
        }
    }

    // forced match: the lowest-index argmax-IoU anchor of each gt is positive
    for (g, gt) in gts.iter().enumerate() {
        let mut arg = 0usize;
        let mut best = f32::NEG_INFINITY;
        for (a, anchor) in anchors.boxes.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best {
                best = v;
                arg = a;
            }
        }
        labels[arg] = AnchorLabel::Positive;
        let _ = (g, best); // the per-anchor argmax above already fixed matched_gt
    }

    for a in 0..n {
        if labels[a] == AnchorLabel::Positive {
            matched_gt[a] = Some(best_gt[a]);
            targets[a] = Some(encode(&anchors.boxes[a], &gts[best_gt[a]])?);
        }
    }

    Ok(AnchorLabels { labels, matched_gt, targets })
}

/// Greedy non-maximum suppression: keep boxes in descending score order
/// (ties broken by lower index), suppressing any box whose IoU with an
/// already kept box exceeds `iou_thresh`. Returns kept indices.
pub fn nms(boxes: &[BBox], scores: &[f32], iou_thresh: f32) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &cand in &order {
        if kept.iter().all(|&k| iou(&boxes[cand], &boxes[k]) <= iou_thresh) {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pixel-count IoU on the integer grid: pixel (i, j) is inside a box iff
    /// the box contains its center.
    fn iou_pixel_oracle(a: &BBox, b: &BBox, h: usize, w: usize) -> f64 {
        let (mut inter, mut uni) = (0u64, 0u64);
        for i in 0..h {
            for j in 0..w {
                let ina = a.contains_pixel(i, j);
                let inb = b.contains_pixel(i, j);
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    uni += 1;
                }
            }
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = BBox::new(2.0, 3.0, 10.0, 12.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(20.0, 3.0, 30.0, 12.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_quarter_overlap_matches_enumeration() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        let v = iou(&a, &b);
        assert!((v - 25.0 / 175.0).abs() < 1e-6);
        assert!((f64::from(v) - iou_pixel_oracle(&a, &b, 20, 20)).abs() < 1e-6);
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        let mut s = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32 * 30.0
        };
        for _ in 0..200 {
            let (x1, y1, w1, h1) = (next(), next(), next() + 1.0, next() + 1.0);
            let (x2, y2, w2, h2) = (next(), next(), next() + 1.0, next() + 1.0);
            let a = BBox::new(x1, y1, x1 + w1, y1 + h1);
            let b = BBox::new(x2, y2, x2 + w2, y2 + h2);
            let v = iou(&a, &b);
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v, iou(&b, &a));
        }
    }

    #[test]
    fn iou_equals_pixel_count_on_integer_boxes() {
        let mut s = 0xdeadbeefu64;
        let mut next = move |m: u64| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 33) % m
        };
        for _ in 0..100 {
            let x1 = next(20) as f32;
            let y1 = next(20) as f32;
            let a = BBox::new(x1, y1, x1 + 1.0 + next(10) as f32, y1 + 1.0 + next(10) as f32);
            let x2 = next(20) as f32;
            let y2 = next(20) as f32;
            let b = BBox::new(x2, y2, x2 + 1.0 + next(10) as f32, y2 + 1.0 + next(10) as f32);
            assert!((f64::from(iou(&a, &b)) - iou_pixel_oracle(&a, &b, 40, 40)).abs() < 1e-6);
        }
    }

    #[test]
    fn anchor_generation_examples() {
        // one cell, scale 16, ratio 1: a 16x16 box on the cell center
        let g = generate_anchors(1, 1, 16, &[16.0], &[1.0]).unwrap();
        assert_eq!(g.boxes.len(), 1);
        assert_eq!(g.boxes[0], BBox::new(0.0, 0.0, 16.0, 16.0));

        // 2x3 grid with 9 anchors per cell
        let g = generate_anchors(2, 3, 8, &[8.0, 16.0, 32.0], &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(g.len(), 54);
        assert_eq!(g.anchors_per_cell(), 9);

        // ratio 2 keeps area and fixes aspect
        let g = generate_anchors(1, 1, 16, &[16.0], &[2.0]).unwrap();
        let b = &g.boxes[0];
        assert!((b.width() / b.height() - 2.0).abs() < 1e-5);
        assert!((b.area() - 256.0).abs() < 1e-3);
        assert!((b.width() - 16.0 * std::f32::consts::SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn anchor_centers_on_cell_centers() {
        let g = generate_anchors(3, 2, 8, &[8.0], &[1.0]).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let b = &g.boxes[i * 2 + j];
                let (cx, cy) = b.center();
                assert!((cx - 8.0 * (j as f32 + 0.5)).abs() < 1e-5);
                assert!((cy - 8.0 * (i as f32 + 0.5)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn anchor_generation_rejects_bad_inputs() {
        assert!(generate_anchors(1, 1, 8, &[], &[1.0]).is_err());
        assert!(generate_anchors(1, 1, 8, &[-2.0], &[1.0]).is_err());
        assert!(generate_anchors(1, 1, 8, &[8.0], &[0.0]).is_err());
    }

    #[test]
    fn encode_closed_forms() {
        let anchor = BBox::new(10.0, 20.0, 26.0, 36.0); // 16x16
        let t = encode(&anchor, &anchor).unwrap();
        assert_eq!((t.tx, t.ty, t.tw, t.th), (0.0, 0.0, 0.0, 0.0));

        let shifted = BBox::new(26.0, 20.0, 42.0, 36.0); // translated by one width
        let t = encode(&anchor, &shifted).unwrap();
        assert!((t.tx - 1.0).abs() < 1e-6 && t.ty.abs() < 1e-6);
        assert!(t.tw.abs() < 1e-6 && t.th.abs() < 1e-6);

        let doubled = BBox::from_center(18.0, 28.0, 32.0, 32.0);
        let t = encode(&anchor, &doubled).unwrap();
        assert!((t.tw - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((t.th - std::f32::consts::LN_2).abs() < 1e-6);

        assert!(encode(&anchor, &BBox::new(5.0, 5.0, 5.0, 9.0)).is_err());
    }

    #[test]
    fn decode_closed_forms() {
        let anchor = BBox::new(10.0, 20.0, 26.0, 36.0);
        let (b, clamped) = decode(&anchor, &RegTarget { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 });
        assert!(!clamped);
        assert!((b.x1 - anchor.x1).abs() < 1e-5 && (b.y2 - anchor.y2).abs() < 1e-5);

        let ln2 = std::f32::consts::LN_2;
        let (b, _) = decode(&anchor, &RegTarget { tx: 0.0, ty: 0.0, tw: ln2, th: ln2 });
        assert!((b.width() - 32.0).abs() < 1e-4 && (b.height() - 32.0).abs() < 1e-4);
        let (c0, c1) = b.center();
        assert!((c0 - 18.0).abs() < 1e-5 && (c1 - 28.0).abs() < 1e-5);

        let (b, clamped) = decode(&anchor, &RegTarget { tx: 0.0, ty: 0.0, tw: 50.0, th: 0.0 });
        assert!(clamped);
        assert!((b.width() - 16.0 * MAX_LOG_SHIFT.exp()).abs() < 1.0);
    }

    #[test]
    fn encode_decode_roundtrip_over_random_pairs() {
        let mut s = 42u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        for _ in 0..1000 {
            let anchor = BBox::from_center(
                20.0 + 150.0 * next(),
                20.0 + 150.0 * next(),
                4.0 + 60.0 * next(),
                4.0 + 60.0 * next(),
            );
            let gt = BBox::from_center(
                20.0 + 150.0 * next(),
                20.0 + 150.0 * next(),
                2.0 + 80.0 * next(),
                2.0 + 80.0 * next(),
            );
            let t = encode(&anchor, &gt).unwrap();
            let (back, clamped) = decode(&anchor, &t);
            assert!(!clamped);
            for (got, want) in [
                (back.x1, gt.x1),
                (back.y1, gt.y1),
                (back.x2, gt.x2),
                (back.y2, gt.y2),
            ] {
                assert!((got - want).abs() < 1e-4, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn clip_examples() {
        let inner = BBox::new(5.0, 5.0, 20.0, 20.0);
        assert_eq!(clip_box(&inner, 184, 96), inner);

        let outside = BBox::new(-30.0, -40.0, -10.0, -5.0);
        let c = clip_box(&outside, 184, 96);
        assert_eq!(c.area(), 0.0);
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 0.0, 0.0));

        let spill = BBox::new(-5.0, -5.0, 200.0, 50.0);
        let c = clip_box(&spill, 184, 96);
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 96.0, 50.0));
    }

    // Independent re-derivation of the assignment rules, one anchor at a time.
    fn assign_oracle(anchors: &AnchorGrid, gts: &[BBox], pos_iou: f32, neg_iou: f32) -> (Vec<AnchorLabel>, Vec<Option<usize>>) {
        let n = anchors.len();
        if gts.is_empty() {
            return (vec![AnchorLabel::Negative; n], vec![None; n]);
        }
        // forced set: lowest-index argmax anchor per gt
        let mut forced = vec![false; n];
        for gt in gts {
            let mut arg = 0;
            let mut best = f32::NEG_INFINITY;
            for a in 0..n {
                let v = iou(&anchors.boxes[a], gt);
                if v > best {
                    best = v;
                    arg = a;
                }
            }
            forced[arg] = true;
        }
        let mut labels = Vec::with_capacity(n);
        let mut matched = Vec::with_capacity(n);
        for a in 0..n {
            let ious: Vec<f32> = gts.iter().map(|g| iou(&anchors.boxes[a], g)).collect();
            let max = ious.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let label = if forced[a] || max > pos_iou {
                AnchorLabel::Positive
            } else if max < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            let m = if label == AnchorLabel::Positive {
                Some(ious.iter().enumerate().fold((0usize, f32::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc }).0)
            } else {
                None
            };
            labels.push(label);
            matched.push(m);
        }
        (labels, matched)
    }

    fn random_gts(seed: u64, count: usize) -> Vec<BBox> {
        let mut s = seed.wrapping_mul(0x2545F4914F6CDD1D) | 1;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        (0..count)
            .map(|_| {
                let x1 = next() * 70.0;
                let y1 = next() * 150.0;
                BBox::new(x1, y1, x1 + 4.0 + next() * 25.0, y1 + 4.0 + next() * 25.0)
            })
            .collect()
    }

    #[test]
    fn assign_empty_gt_is_all_negative() {
        let anchors = generate_anchors(2, 2, 8, &[8.0, 16.0], &[1.0]).unwrap();
        let l = assign_labels(&anchors, &[], 0.7, 0.3).unwrap();
        assert!(l.labels.iter().all(|&v| v == AnchorLabel::Negative));
        assert!(l.positives().count() == 0);
    }

    #[test]
    fn assign_exact_anchor_match_is_positive_with_zero_target() {
        let anchors = generate_anchors(2, 2, 16, &[16.0], &[1.0]).unwrap();
        let gt = anchors.boxes[2];
        let l = assign_labels(&anchors, &[gt], 0.7, 0.3).unwrap();
        assert_eq!(l.labels[2], AnchorLabel::Positive);
        let t = l.targets[2].unwrap();
        assert_eq!((t.tx, t.ty, t.tw, t.th), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(l.matched_gt[2], Some(0));
    }

    #[test]
    fn assign_matches_bruteforce_oracle_on_200_random_configs() {
        // ~50 anchors (uses a small grid), up to 3 gts
        for seed in 0..200u64 {
            let anchors = generate_anchors(3, 2, 16, &[12.0, 24.0, 40.0], &[0.5, 1.0, 2.0]).unwrap();
            assert_eq!(anchors.len(), 54);
            let gts = random_gts(seed + 1, (seed % 3 + 1) as usize);
            let got = assign_labels(&anchors, &gts, 0.7, 0.3).unwrap();
            let (labels, matched) = assign_oracle(&anchors, &gts, 0.7, 0.3);
            assert_eq!(got.labels, labels, "seed {seed}");
            assert_eq!(got.matched_gt, matched, "seed {seed}");
            // targets encode the matched gt
            for a in 0..anchors.len() {
                if let Some(g) = matched[a] {
                    let want = encode(&anchors.boxes[a], &gts[g]).unwrap();
                    assert_eq!(got.targets[a].unwrap(), want);
                } else {
                    assert!(got.targets[a].is_none());
                }
            }
        }
    }

    #[test]
    fn every_gt_gets_a_positive_anchor() {
        for seed in 0..100u64 {
            let anchors = generate_anchors(6, 4, 8, &[8.0, 16.0, 32.0], &[0.5, 1.0, 2.0]).unwrap();
            let gts = random_gts(seed + 1000, 3);
            let l = assign_labels(&anchors, &gts, 0.7, 0.3).unwrap();
            for g in 0..gts.len() {
                let covered = (0..anchors.len()).any(|a| {
                    l.labels[a] == AnchorLabel::Positive
                        && iou(&anchors.boxes[a], &gts[g])
                            >= (0..anchors.len()).map(|b| iou(&anchors.boxes[b], &gts[g])).fold(f32::NEG_INFINITY, f32::max)
                });
                assert!(covered, "gt {g} of seed {seed} has no positive anchor");
            }
        }
    }

    // Textbook remove-from-pool NMS as an independent reference.
    fn nms_oracle(boxes: &[BBox], scores: &[f32], thresh: f32) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..boxes.len()).collect();
        let mut kept = Vec::new();
        while !pool.is_empty() {
            let mut best = pool[0];
            for &i in &pool {
                if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                    best = i;
                }
            }
            kept.push(best);
            pool.retain(|&i| i != best && iou(&boxes[i], &boxes[best]) <= thresh);
        }
        kept
    }

    #[test]
    fn nms_examples() {
        let one = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(nms(&one, &[0.5], 0.5), vec![0]);

        let two = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(nms(&two, &[0.4, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn nms_matches_bruteforce_oracle() {
        let mut s = 7u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        for case in 0..200 {
            let n = 30;
            let mut boxes = Vec::with_capacity(n);
            let mut scores = Vec::with_capacity(n);
            for _ in 0..n {
                let x1 = next() * 60.0;
                let y1 = next() * 60.0;
                boxes.push(BBox::new(x1, y1, x1 + 5.0 + next() * 30.0, y1 + 5.0 + next() * 30.0));
                scores.push(next());
            }
            assert_eq!(nms(&boxes, &scores, 0.5), nms_oracle(&boxes, &scores, 0.5), "case {case}");
        }
    }

    #[test]
    fn nms_is_input_order_independent_for_distinct_scores() {
        let mut s = 99u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        let n = 20;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for i in 0..n {
            let x1 = next() * 50.0;
            let y1 = next() * 50.0;
            boxes.push(BBox::new(x1, y1, x1 + 5.0 + next() * 20.0, y1 + 5.0 + next() * 20.0));
            scores.push(0.01 + i as f32 * 0.049); // distinct by construction
        }
        let base: std::collections::BTreeSet<(u32, u32)> = nms(&boxes, &scores, 0.5)
            .into_iter()
            .map(|i| (scores[i].to_bits(), boxes[i].x1.to_bits()))
            .collect();
        // rotate the input and compare the kept set
        for rot in 1..n {
            let b2: Vec<BBox> = (0..n).map(|i| boxes[(i + rot) % n]).collect();
            let s2: Vec<f32> = (0..n).map(|i| scores[(i + rot) % n]).collect();
            let got: std::collections::BTreeSet<(u32, u32)> = nms(&b2, &s2, 0.5)
                .into_iter()
                .map(|i| (s2[i].to_bits(), b2[i].x1.to_bits()))
                .collect();
            assert_eq!(base, got, "rotation {rot}");
        }
    }
}
