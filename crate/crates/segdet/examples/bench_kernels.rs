//! Rough per-op timing for the hot kernels (not a criterion harness).
use std::time::Instant;

use segdet::graph::Graph;
use segdet::tensor::Tensor;
use segdet::unet::{seg_loss, UNet3D, UNetConfig};
use segdet::volume::Volume;

fn main() {
    let model = UNet3D::new(UNetConfig::default(), 1);
    let mut input = Tensor::zeros(&[1, 2, 32, 48, 32]);
    for (i, v) in input.data.iter_mut().enumerate() {
        *v = ((i * 2654435761) % 1000) as f32 / 1000.0;
    }
    let mut labels = Volume::zeros(32, 48, 32);
    for (i, v) in labels.data.iter_mut().enumerate() {
        *v = ((i / 7) % 2) as f32;
    }

    // forward only
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = model.forward(&mut g, x).unwrap();
        std::hint::black_box(g.data(y)[0]);
    }
    println!("forward: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = model.forward(&mut g, x).unwrap();
        let loss = seg_loss(&mut g, y, &labels).unwrap();
        model.zero_grad();
        g.backward(loss).unwrap();
    }
    println!("fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
