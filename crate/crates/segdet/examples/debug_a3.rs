//! Temporary diagnosis for the detector-overfit criterion.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdet::geometry::{iou, BBox};
use segdet::graph::Graph;
use segdet::optim::Sgd;
use segdet::phantom::{gen_phantom, PhantomParams};
use segdet::rpn::*;

fn run(cfg: &RpnConfig, tag: &str) {
    let params = PhantomParams::default();
    let dims = (32, 48, 32);
    let phantoms = [gen_phantom(301, dims, &params).unwrap(), gen_phantom(302, dims, &params).unwrap()];
    let mut slices: Vec<(usize, usize)> = Vec::new();
    'outer: for z in 0..32 {
        for (pi, p) in phantoms.iter().enumerate() {
            if p.gt_boxes[z].is_some() {
                slices.push((pi, z));
                if slices.len() == 20 { break 'outer; }
            }
        }
    }
    let labels: Vec<_> = slices.iter().map(|&(pi, z)| {
        let gt: Vec<BBox> = phantoms[pi].gt_boxes[z].into_iter().collect();
        slice_anchor_labels(cfg, 48, 32, &gt).unwrap()
    }).collect();

    let model = RpnModel::new(cfg.clone(), 33);
    let mparams = model.params();
    let mut opt = Sgd::detection_defaults();
    let mut final_loss = 0.0;
    for it in 0..2000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9_000_000 + it);
        let si = rng.random_range(0..slices.len());
        let (pi, z) = slices[si];
        let sample = sample_minibatch(&labels[si], cfg.batch_size, cfg.pos_fraction, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(phantoms[pi].volume.slice_tensor(z));
        let (cls, reg) = model.forward(&mut g, x).unwrap();
        let loss = rpn_loss(&mut g, cls, reg, &labels[si], &sample).unwrap();
        final_loss = g.data(loss)[0];
        model.zero_grad();
        g.backward(loss).unwrap();
        opt.step(&mparams).unwrap();
    }

    let mut hits = 0;
    let mut detail = String::new();
    for &(pi, z) in slices.iter() {
        let gt = phantoms[pi].gt_boxes[z].unwrap();
        let props = extract_proposals(&model, &phantoms[pi].volume, cfg).unwrap();
        let top = props.slices[z].first();
        let t1 = top.map_or(-1.0, |(b, _)| iou(b, &gt));
        if t1 >= 0.7 { hits += 1; }
        detail.push_str(&format!("  p{pi}z{z:2} ({:2.0}x{:2.0}) top1={t1:.2} score={}\n", gt.width(), gt.height(),
            top.map_or("none".into(), |(_, s)| format!("{s:.2}"))));
    }
    println!("== {tag}: final-batch loss {final_loss:.3}, top1>=0.7 on {hits}/20");
    if hits < 18 { print!("{detail}"); }
}

fn main() {
    let base = RpnConfig::default();
    run(&base, "he-heads, default scales 8/16/32 thresh 0.5");
    run(&RpnConfig { anchor_scales: vec![6.0, 10.0, 16.0], ..base.clone() }, "he-heads, scales 6/10/16 thresh 0.5");
    run(&RpnConfig {
        backbone_channels: vec![16, 32],
        anchor_scales: vec![5.0, 8.0, 13.0],
        ..base.clone()
    }, "he-heads, downsample 4, scales 5/8/13 thresh 0.5");
}
