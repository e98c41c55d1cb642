//! Detection geometry in isolation: anchor tiling, IoU-based label
//! assignment, regression encode/decode and non-maximum suppression.
//!
//!     cargo run --example anchor_geometry

use segdet::geometry::{assign_labels, decode, encode, generate_anchors, iou, nms, AnchorLabel, BBox};

fn main() {
    // anchors for a 48x32 slice at stride 8: 6x4 cells x 9 anchors
    let grid = generate_anchors(6, 4, 8, &[8.0, 16.0, 32.0], &[0.5, 1.0, 2.0]).unwrap();
    println!("{} anchors ({} per cell)", grid.len(), grid.anchors_per_cell());

    let gt = BBox::new(10.0, 18.0, 24.0, 33.0);
    let labels = assign_labels(&grid, &[gt], 0.7, 0.3).unwrap();
    let pos: Vec<usize> = labels.positives().collect();
    let neg = labels.negatives().count();
    let ignore = grid.len() - pos.len() - neg;
    println!("ground truth {gt:?}: {} positive, {neg} negative, {ignore} ignored", pos.len());

    for &a in &pos {
        let anchor = grid.boxes[a];
        let t = labels.targets[a].unwrap();
        let (back, _) = decode(&anchor, &t);
        println!(
            "  anchor {a}: IoU {:.3}, target ({:+.2}, {:+.2}, {:+.2}, {:+.2}), decode roundtrip IoU {:.6}",
            iou(&anchor, &gt),
            t.tx,
            t.ty,
            t.tw,
            t.th,
            iou(&back, &gt)
        );
        assert_eq!(labels.labels[a], AnchorLabel::Positive);
    }

    // encode/decode are exact inverses
    let anchor = grid.boxes[pos[0]];
    let t = encode(&anchor, &gt).unwrap();
    let (roundtrip, clamped) = decode(&anchor, &t);
    println!("roundtrip box: {roundtrip:?} (clamped: {clamped})");

    // NMS keeps the best of overlapping candidates
    let candidates = vec![
        BBox::new(10.0, 18.0, 24.0, 33.0),
        BBox::new(11.0, 19.0, 25.0, 34.0),
        BBox::new(12.0, 17.0, 26.0, 32.0),
        BBox::new(2.0, 2.0, 8.0, 8.0),
    ];
    let scores = vec![0.9, 0.95, 0.6, 0.4];
    let kept = nms(&candidates, &scores, 0.5);
    println!("nms kept indices {kept:?} of {} candidates", candidates.len());
}
