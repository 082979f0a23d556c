//! Adaptive-moment optimizer for the search parameters (architecture
//! logits and policy parameters).

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(sizes: &[usize], lr: F, betas: (F, F), weight_decay: F) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: F::fromf(1e-8),
            weight_decay,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One update over parallel parameter views and gradients. Weight decay
    /// is folded into the gradient (L2 style), which also nudges saturated
    /// box-constrained parameters back toward the feasible interval.
    pub fn step(&mut self, params: &mut [&mut Vec<F>], grads: &[Vec<F>]) {
        assert_eq!(params.len(), self.m.len(), "parameter/state count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient/state count mismatch");
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t as i32);
        let bc2 = F::one() - self.beta2.powi(self.t as i32);
        for ((theta, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((th, gv), (mv, vv)) in
                theta.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let eff = *gv + self.weight_decay * *th;
                *mv = self.beta1 * *mv + (F::one() - self.beta1) * eff;
                *vv = self.beta2 * *vv + (F::one() - self.beta2) * eff * eff;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *th = *th - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn state_mut(&mut self) -> (&mut Vec<Vec<F>>, &mut Vec<Vec<F>>, &mut u64) {
        (&mut self.m, &mut self.v, &mut self.t)
    }

    pub fn state(&self) -> (&[Vec<F>], &[Vec<F>], u64) {
        (&self.m, &self.v, self.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut x = vec![3.0f32];
        let mut opt = Adam::new(&[1], 0.1, (0.9, 0.999), 0.0);
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            opt.step(&mut [&mut x], &[g]);
        }
        assert!(x[0].abs() < 1e-2, "x = {}", x[0]);
    }

    #[test]
    fn weight_decay_pulls_parameters_down_without_gradient() {
        let mut x = vec![2.0f32];
        let mut opt = Adam::new(&[1], 0.01, (0.5, 0.999), 1e-1);
        for _ in 0..50 {
            opt.step(&mut [&mut x], &[vec![0.0]]);
        }
        assert!(x[0] < 2.0, "decay had no effect: {}", x[0]);
    }
}
