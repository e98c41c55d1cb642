//! Momentum SGD and Adam, plus seeded Gaussian weight initialization.
//!
//! SGD folds weight decay into the gradient before the momentum update
//! (`v <- m*v + (g + wd*p)`, `p <- p - lr*v`), matching classic framework
//! behavior. Adam is the standard bias-corrected form. Optimizer state
//! vectors are exposed so checkpoints can persist them bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamKind};

/// Momentum SGD with additive-L2 weight decay.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// One velocity buffer per parameter, in step order.
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Sgd {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Paper hyperparameters for the detection stage.
    pub fn detection_defaults() -> Sgd {
        Sgd::new(0.001, 0.9, 0.0005)
    }

    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0f32; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer bound to {} parameters, stepped with {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let mut t = p.borrow_mut();
            let Some(grad) = t.grad.take() else {
                return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
            };
            for i in 0..t.data.len() {
                v[i] = self.momentum * v[i] + (grad[i] + self.weight_decay * t.data[i]);
                t.data[i] -= self.lr * v[i];
            }
            t.grad = Some(grad); // grads untouched; the caller zeroes them
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step_count: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Adam {
        Adam { lr, beta1, beta2, epsilon: 1e-8, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Paper hyperparameters for the segmentation stage.
    pub fn segmentation_defaults() -> Adam {
        Adam::new(0.001, 0.9, 0.999)
    }

    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0f32; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0f32; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer bound to {} parameters, stepped with {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = (1.0 - f64::from(self.beta1).powf(t)) as f32;
        let bc2 = (1.0 - f64::from(self.beta2).powf(t)) as f32;
        for (pi, p) in params.iter().enumerate() {
            let mut tensor = p.borrow_mut();
            let Some(grad) = tensor.grad.take() else {
                return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
            };
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for i in 0..tensor.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

/// Fill weights with draws from N(0, std^2) and biases with exactly 0,
/// deterministically per seed.
pub fn init_gaussian(params: &[Param], std: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, std).expect("std must be finite and positive");
    for p in params {
        let mut t = p.borrow_mut();
        match p.kind {
            ParamKind::Weight => t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
            ParamKind::Bias => t.data.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

/// Fan-in scaled Gaussian init (std = sqrt(2 / fan_in)) for the interior
/// layers of a from-scratch network; biases 0. `fan_in` per parameter is
/// the product of all weight dimensions except the first.
pub fn init_he(params: &[Param], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        let mut t = p.borrow_mut();
        match p.kind {
            ParamKind::Weight => {
                let fan_in: usize = t.shape[1..].iter().product::<usize>().max(1);
                let std = (2.0 / fan_in as f32).sqrt();
                let normal = Normal::new(0.0f32, std).expect("std finite");
                t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            ParamKind::Bias => t.data.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}
