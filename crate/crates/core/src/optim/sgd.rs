//! Momentum SGD with weight decay, plus the cosine schedule and global
//! gradient-norm clipping used for network weights.

use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct MomentumSgd<F> {
    pub momentum: F,
    pub weight_decay: F,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> MomentumSgd<F> {
    pub fn new(params: &ParamSet<F>, momentum: F, weight_decay: F) -> Self {
        MomentumSgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|b| vec![F::zero(); b.data.len()]).collect(),
        }
    }

    /// One update: `v = momentum*v + (g + wd*theta); theta -= lr*v`.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Vec<F>], lr: F) {
        assert_eq!(grads.len(), self.velocity.len(), "gradient/velocity count mismatch");
        for ((buf, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((th, gv), vv) in buf.data.iter_mut().zip(g).zip(v.iter_mut()) {
                let eff = *gv + self.weight_decay * *th;
                *vv = self.momentum * *vv + eff;
                *th = *th - lr * *vv;
            }
        }
    }

    pub fn velocity(&self) -> &[Vec<F>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut Vec<Vec<F>> {
        &mut self.velocity
    }
}

/// Cosine-annealed learning rate from `base` at epoch 0 toward 0 at
/// `total_epochs`.
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    let t = (epoch as f64 / total_epochs.max(1) as f64).clamp(0.0, 1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: F) -> F {
    let mut sq = F::zero();
    for g in grads.iter() {
        for v in g {
            sq += *v * *v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > F::zero() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_descends_a_quadratic() {
        // f(x) = x^2, minimum at 0
        let mut params = ParamSet::<f32>::new();
        params.add("x", vec![1], vec![2.0]);
        let mut opt = MomentumSgd::new(&params, 0.9, 0.0);
        for _ in 0..300 {
            let x = params.iter().next().unwrap().data[0];
            opt.step(&mut params, &[vec![2.0 * x]], 0.05);
        }
        let x = params.iter().next().unwrap().data[0];
        assert!(x.abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.1, 0, 10) - 0.1).abs() < 1e-12);
        let mid = cosine_lr(0.1, 5, 10);
        assert!((mid - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 9, 10) < 0.01);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![vec![3.0f32, 4.0]]; // norm 5
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-6);
        let post: f32 = grads[0].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((post - 1.0).abs() < 1e-5);
    }

    #[test]
    fn clipping_leaves_small_gradients_alone() {
        let mut grads = vec![vec![0.3f32, 0.4]];
        clip_grad_norm(&mut grads, 5.0);
        assert_eq!(grads[0], vec![0.3, 0.4]);
    }
}
