//! Overfit the detector on the slices of a single phantom and inspect the
//! proposals it produces.
//!
//!     cargo run --example train_rpn_overfit

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segdet::geometry::{iou, BBox};
use segdet::graph::Graph;
use segdet::optim::Sgd;
use segdet::phantom::{gen_phantom, PhantomParams};
use segdet::rpn::{extract_proposals, rpn_loss, sample_minibatch, slice_anchor_labels, RpnConfig, RpnModel};

fn main() {
    let phantom = gen_phantom(21, (32, 48, 32), &PhantomParams::default()).unwrap();
    let cfg = RpnConfig::default();

    let slices: Vec<usize> = (0..32).filter(|&z| phantom.gt_boxes[z].is_some()).collect();
    println!("training on {} object-bearing slices", slices.len());
    let labels: Vec<_> = slices
        .iter()
        .map(|&z| {
            let gt: Vec<BBox> = phantom.gt_boxes[z].into_iter().collect();
            slice_anchor_labels(&cfg, 48, 32, &gt).unwrap()
        })
        .collect();

    let model = RpnModel::new(cfg.clone(), 5);
    let params = model.params();
    let mut opt = Sgd::detection_defaults();
    for it in 0..800u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(it);
        let si = rng.random_range(0..slices.len());
        let sample = sample_minibatch(&labels[si], cfg.batch_size, cfg.pos_fraction, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(phantom.volume.slice_tensor(slices[si]));
        let (cls, reg) = model.forward(&mut g, x).unwrap();
        let loss = rpn_loss(&mut g, cls, reg, &labels[si], &sample).unwrap();
        if it % 100 == 0 {
            println!("iter {it:3}: loss {:.4}", g.data(loss)[0]);
        }
        model.zero_grad();
        g.backward(loss).unwrap();
        opt.step(&params).unwrap();
    }

    let proposals = extract_proposals(&model, &phantom.volume, &cfg).unwrap();
    println!("\nslice  proposals  top-1 IoU vs ground truth");
    for z in 0..32 {
        let gt = phantom.gt_boxes[z];
        let top = proposals.slices[z].first();
        match (gt, top) {
            (Some(gt), Some((b, score))) => {
                println!("{z:4}   {:9}  {:.3} (score {score:.2})", proposals.slices[z].len(), iou(b, &gt))
            }
            (Some(_), None) => println!("{z:4}   {:9}  missed", 0),
            (None, t) => println!("{z:4}   {:9}  (no object)", t.map_or(0, |_| proposals.slices[z].len())),
        }
    }
}
