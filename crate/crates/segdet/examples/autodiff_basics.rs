//! The autodiff tape on a toy problem: fit a 3x3 convolution kernel to a
//! known target by gradient descent, verifying one gradient against
//! central differences along the way.
//!
//!     cargo run --example autodiff_basics

use segdet::graph::Graph;
use segdet::optim::Sgd;
use segdet::tensor::{Param, ParamKind, Tensor};

fn main() {
    // target kernel: a small edge detector
    let target_w = Tensor::new(vec![1, 1, 3, 3], vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]).unwrap();
    let mut image = Tensor::zeros(&[1, 1, 8, 8]);
    for (i, v) in image.data.iter_mut().enumerate() {
        *v = ((i * 37 + 11) % 64) as f32 / 64.0;
    }

    // reference output produced by the target kernel
    let reference = {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let w = g.constant(target_w);
        let y = g.conv(x, w, None, &[1, 1], &[1, 1]).unwrap();
        Tensor::new(vec![1, 1, 8, 8], g.data(y).to_vec()).unwrap()
    };

    let w = Param::new("w", ParamKind::Weight, Tensor::zeros(&[1, 1, 3, 3]));
    let mut opt = Sgd::new(0.05, 0.9, 0.0);
    let loss_of = |w: &Param| {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let wn = g.param(w);
        let y = g.conv(x, wn, None, &[1, 1], &[1, 1]).unwrap();
        let r = g.constant(reference.clone());
        let neg = g.scale(r, -1.0);
        let diff = g.add(y, neg).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.sum(sq);
        (g, loss)
    };

    for step in 0..=200 {
        let (mut g, loss) = loss_of(&w);
        if step % 40 == 0 {
            println!("step {step:3}: loss {:.6}", g.data(loss)[0]);
        }
        w.zero_grad();
        g.backward(loss).unwrap();

        if step == 0 {
            // spot-check d(loss)/dw[4] against central differences
            let analytic = w.borrow().grad.as_ref().unwrap()[4];
            let h = 1e-3f32;
            let orig = w.borrow().data[4];
            w.borrow_mut().data[4] = orig + h;
            let plus = { let (g, l) = loss_of(&w); g.data(l)[0] };
            w.borrow_mut().data[4] = orig - h;
            let minus = { let (g, l) = loss_of(&w); g.data(l)[0] };
            w.borrow_mut().data[4] = orig;
            println!(
                "gradient check at w[4]: analytic {analytic:.5} vs finite difference {:.5}",
                (plus - minus) / (2.0 * h)
            );
        }
        opt.step(&[w.clone()]).unwrap();
    }
    println!("recovered kernel: {:?}", w.borrow().data);
}
