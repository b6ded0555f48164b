//! AdamW with decoupled weight decay and per-parameter learning rates.

use crate::tensor::Tensor;

/// `base * min(1, iter / warmup)`, constant afterwards.
pub fn lr_at(iter: u64, base: f32, warmup: u64) -> f32 {
    if warmup == 0 || iter >= warmup {
        base
    } else {
        (base as f64 * iter as f64 / warmup as f64) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], betas: (f32, f32), eps: f32, weight_decay: f32) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update of every parameter with its own learning rate. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &[Tensor], lrs: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), lrs.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for (k, p) in params.iter().enumerate() {
            let lr = lrs[k] as f64;
            let grad = p.grad();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                let mut x = data[i] as f64;
                x -= lr * self.weight_decay as f64 * x;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                x -= lr * mhat / (vhat.sqrt() + self.eps as f64);
                data[i] = x as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(750, 1.0, 1500), 0.5);
        assert_eq!(lr_at(0, 1.0, 1500), 0.0);
        assert_eq!(lr_at(1500, 0.6e-5, 1500), 0.6e-5);
        assert_eq!(lr_at(10_000, 2.0, 1500), 2.0);
        assert_eq!(lr_at(0, 2.0, 0), 2.0);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let p = Tensor::parameter(vec![1.0, 1.0, 1.0], &[3]).unwrap();
        p.accumulate_grad(&[0.5, -3.0, 0.0]);
        let mut opt = AdamW::new(std::slice::from_ref(&p), (0.9, 0.999), 1e-8, 0.0);
        opt.step(std::slice::from_ref(&p), &[0.1]);
        let d = p.to_vec();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn decoupled_decay_only() {
        let p = Tensor::parameter(vec![2.0], &[1]).unwrap();
        let mut opt = AdamW::new(std::slice::from_ref(&p), (0.9, 0.999), 1e-8, 0.1);
        opt.step(std::slice::from_ref(&p), &[0.5]);
        assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }
}
