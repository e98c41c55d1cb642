//! Overfit the 3D U-Net on one phantom with oracle (ground-truth box)
//! attention and watch the train IoU climb.
//!
//!     cargo run --example train_unet_overfit

use segdet::attention::attention_from_gt_boxes;
use segdet::graph::Graph;
use segdet::metrics::iou_metric;
use segdet::optim::Adam;
use segdet::phantom::{gen_phantom, PhantomParams};
use segdet::pipeline::seg_input;
use segdet::unet::{predict, seg_loss, UNet3D, UNetConfig};

fn main() {
    let phantom = gen_phantom(3, (32, 48, 32), &PhantomParams::default()).unwrap();
    let attention = attention_from_gt_boxes(&phantom.gt_boxes, phantom.volume.dims()).unwrap();
    let input = seg_input(&phantom.volume, Some(&attention)).unwrap();

    let model = UNet3D::new(UNetConfig::default(), 9);
    let params = model.params();
    let mut opt = Adam::segmentation_defaults();

    for it in 1..=400u64 {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let logits = model.forward(&mut g, x).unwrap();
        let loss = seg_loss(&mut g, logits, &phantom.labels).unwrap();
        let loss_v = g.data(loss)[0];
        model.zero_grad();
        g.backward(loss).unwrap();
        opt.step(&params).unwrap();

        if it % 50 == 0 {
            let pred = predict(&model, input.clone()).unwrap();
            let iou = iou_metric(&pred, &phantom.labels).unwrap();
            println!("iter {it:3}: loss {loss_v:.4}, train IoU {iou:.4}");
            if iou >= 0.95 {
                println!("reached IoU 0.95, stopping early");
                break;
            }
        }
    }
}
