//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    /// One moment buffer per parameter tensor, sized from `sizes`.
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err("AdamW tensors", self.m.len(), params.len().min(grads.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.data.len() != self.m[k].len() || g.data.len() != self.m[k].len() {
                return Err(shape_err("AdamW tensor size", self.m[k].len(), p.data.len()));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if lr == 0.0 {
                    continue;
                }
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Learning rate at optimiser step `step` (0-based) of `total`: linear
/// warmup over `ceil(warmup_ratio·total)` steps, then linear decay.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warm = ((warmup_ratio * total as f64).ceil() as usize).min(total);
    if step < warm {
        peak * (step + 1) as f64 / warm as f64
    } else {
        peak * (total - step) as f64 / (total - warm).max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut p = Matrix::from_vec(1, 3, vec![0.3, -1.7, 1e-300]).unwrap();
        let before = p.clone();
        let g = Matrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let mut opt = AdamW::new(&[3], 0.1);
        for _ in 0..5 {
            opt.step(vec![&mut p], vec![&g], 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is g/|g| per coordinate.
        let mut p = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![0.5, -4.0]).unwrap();
        let mut opt = AdamW::new(&[2], 0.0);
        opt.step(vec![&mut p], vec![&g], 0.01).unwrap();
        assert!((p.data[0] - 0.99).abs() < 1e-9);
        assert!((p.data[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = Matrix::from_vec(1, 1, vec![5.0]).unwrap();
        let mut opt = AdamW::new(&[1], 0.0);
        for _ in 0..2000 {
            let g = Matrix::from_vec(1, 1, vec![2.0 * p.data[0]]).unwrap();
            opt.step(vec![&mut p], vec![&g], 0.05).unwrap();
        }
        assert!(p.data[0].abs() < 1e-2);
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((lr_at(0, total, 1.0, 0.03) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(lr_at(2, total, 1.0, 0.03), 1.0);
        assert_eq!(lr_at(3, total, 1.0, 0.03), 1.0);
        assert!(lr_at(50, total, 1.0, 0.03) < 1.0);
        assert!(lr_at(99, total, 1.0, 0.03) > 0.0);
        for s in 3..99 {
            assert!(lr_at(s + 1, total, 1.0, 0.03) <= lr_at(s, total, 1.0, 0.03));
        }
    }
}
