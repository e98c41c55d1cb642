//! The cascade hand-off: train a detector briefly, stack its per-slice
//! proposals into the binary attention volume, and compare that volume
//! against the oracle (ground-truth box) attention and the 3D-mask
//! baseline.
//!
//!     cargo run --example attention_pipeline

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segdet::attention::{attention_from_gt_boxes, build_3d_mask, build_attention};
use segdet::geometry::BBox;
use segdet::graph::Graph;
use segdet::metrics::iou_metric;
use segdet::optim::Sgd;
use segdet::phantom::{gen_phantom, PhantomParams};
use segdet::rpn::{extract_proposals, rpn_loss, sample_minibatch, slice_anchor_labels, RpnConfig, RpnModel};

fn main() {
    let phantom = gen_phantom(13, (32, 48, 32), &PhantomParams::default()).unwrap();
    let cfg = RpnConfig::default();

    // brief detector training on this phantom's slices
    let slices: Vec<usize> = (0..32).collect();
    let labels: Vec<_> = slices
        .iter()
        .map(|&z| {
            let gt: Vec<BBox> = phantom.gt_boxes[z].into_iter().collect();
            slice_anchor_labels(&cfg, 48, 32, &gt).unwrap()
        })
        .collect();
    let model = RpnModel::new(cfg.clone(), 2);
    let params = model.params();
    let mut opt = Sgd::detection_defaults();
    for it in 0..600u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(it);
        let si = rng.random_range(0..slices.len());
        let sample = sample_minibatch(&labels[si], cfg.batch_size, cfg.pos_fraction, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(phantom.volume.slice_tensor(slices[si]));
        let (cls, reg) = model.forward(&mut g, x).unwrap();
        let loss = rpn_loss(&mut g, cls, reg, &labels[si], &sample).unwrap();
        model.zero_grad();
        g.backward(loss).unwrap();
        opt.step(&params).unwrap();
    }

    let proposals = extract_proposals(&model, &phantom.volume, &cfg).unwrap();
    let detected = build_attention(&proposals, phantom.volume.dims()).unwrap();
    let oracle = attention_from_gt_boxes(&phantom.gt_boxes, phantom.volume.dims()).unwrap();
    let mask3d = build_3d_mask(&phantom.labels);

    let total = phantom.labels.numel();
    println!("volume: {total} voxels, {} foreground", phantom.labels.foreground_count());
    println!("detected attention: {} voxels set", detected.foreground_count());
    println!("oracle attention:   {} voxels set", oracle.foreground_count());
    println!("3d mask baseline:   {} voxels set", mask3d.foreground_count());
    println!(
        "attention-vs-oracle IoU: {:.3}",
        iou_metric(&detected, &oracle).unwrap()
    );

    // the oracle chain is a strict containment: labels <= oracle <= mask3d
    let within = phantom
        .labels
        .data
        .iter()
        .zip(&oracle.data)
        .zip(&mask3d.data)
        .all(|((&l, &o), &m)| o >= l && m >= o);
    println!("containment chain (labels <= oracle attention <= 3d mask): {within}");
}
