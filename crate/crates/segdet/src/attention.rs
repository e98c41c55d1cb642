//! Attention volumes: per-slice detected boxes rasterized into a binary 3D
//! mask, plus the tight 3D bounding-box baseline.
//!
//! Rasterization rule: a voxel is inside a box iff its center is
//! (half-open box coordinates), so box unions are exact and deterministic.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rpn::ProposalSet;
use crate::volume::Volume;

fn rasterize<'a>(per_slice: impl Iterator<Item = Vec<&'a BBox>>, dims: (usize, usize, usize)) -> Volume {
    let (d, h, w) = dims;
    let mut out = Volume::zeros(d, h, w);
    for (z, boxes) in per_slice.enumerate().take(d) {
        for b in boxes {
            // restrict the scan to the box's pixel span
            let y0 = b.y1.floor().max(0.0) as usize;
            let y1 = (b.y2.ceil().max(0.0) as usize).min(h);
            let x0 = b.x1.floor().max(0.0) as usize;
            let x1 = (b.x2.ceil().max(0.0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    if b.contains_pixel(y, x) {
                        out.set(z, y, x, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Stack the kept proposals of every slice into a binary attention volume;
/// a voxel is 1 iff it lies inside at least one proposal box of its slice.
pub fn build_attention(proposals: &ProposalSet, dims: (usize, usize, usize)) -> Result<Volume> {
    if proposals.slices.len() != dims.0 {
        return Err(Error::Input(format!(
            "proposal set covers {} slices, volume has {}",
            proposals.slices.len(),
            dims.0
        )));
    }
    Ok(rasterize(
        proposals.slices.iter().map(|s| s.iter().map(|(b, _)| b).collect()),
        dims,
    ))
}

/// Same rasterization from per-slice ground-truth boxes (oracle attention).
pub fn attention_from_gt_boxes(gt_boxes: &[Option<BBox>], dims: (usize, usize, usize)) -> Result<Volume> {
    if gt_boxes.len() != dims.0 {
        return Err(Error::Input(format!(
            "{} per-slice boxes for a volume of {} slices",
            gt_boxes.len(),
            dims.0
        )));
    }
    Ok(rasterize(
        gt_boxes.iter().map(|b| b.iter().collect()),
        dims,
    ))
}

/// The axis-aligned tight 3D bounding box of all foreground voxels, filled
/// with ones; all-zero when there is no foreground.
pub fn build_3d_mask(labels: &Volume) -> Volume {
    let (d, h, w) = labels.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if labels.at(z, y, x) > 0.5 {
                    any = true;
                    lo = [lo[0].min(z), lo[1].min(y), lo[2].min(x)];
                    hi = [hi[0].max(z), hi[1].max(y), hi[2].max(x)];
                }
            }
        }
    }
    let mut out = Volume::zeros(d, h, w);
    if any {
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    out.set(z, y, x, 1.0);
                }
            }
        }
    }
    out
}
