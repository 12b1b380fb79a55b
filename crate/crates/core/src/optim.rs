//! AdamW with linear warmup and linear decay, plus global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Warmup covers `warmup_frac` of `total_steps`, rounded down.
    pub fn new(lr: f64, warmup_frac: f64, total_steps: usize) -> Self {
        Schedule {
            lr,
            warmup_steps: (warmup_frac * total_steps as f64).floor() as usize,
            total_steps,
        }
    }

    /// Learning rate at 0-based `step`:
    /// `lr · min(step / warmup, (total − step) / (total − warmup))`, clamped
    /// to `[0, lr]`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            s / self.warmup_steps as f64
        };
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps);
        let decay = if decay_span == 0 {
            1.0
        } else {
            (self.total_steps as f64 - s) / decay_span as f64
        };
        self.lr * warm.min(decay).clamp(0.0, 1.0)
    }
}

/// Decoupled-weight-decay Adam. Decay applies only to parameters flagged
/// `decay` (weight matrices, not biases or norm gains).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub schedule: Schedule,
    pub weight_decay: f64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    step: usize,
}

impl AdamW {
    pub fn new(schedule: Schedule, weight_decay: f64) -> Self {
        AdamW {
            schedule,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One update of every trainable parameter that has a gradient.
    /// Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        let lr = self.schedule.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let (rows, cols) = g.shape();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = BETA1 * m.data[j] + (1.0 - BETA1) * gj;
                v.data[j] = BETA2 * v.data[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m.data[j] / c1;
                let v_hat = v.data[j] / c2;
                let w = &mut p.value.data[j];
                *w -= lr * decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        self.step += 1;
        lr
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64, decay: bool) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::scalar(w), decay);
        (s, id)
    }

    fn grad(s: &ParamStore, id: crate::params::ParamId, g: f64) -> Gradients {
        let mut grads = Gradients::for_store(s);
        grads.entry(id, (1, 1)).data[0] = g;
        grads
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(1e-3, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 1e-3);
        assert!((s.lr_at(5) - 5e-4).abs() < 1e-18);
        assert!((s.lr_at(55) - 5e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(100), 0.0);
        let flat = Schedule::new(2.0, 0.0, 4);
        assert_eq!(flat.lr_at(0), 2.0);
    }

    #[test]
    fn two_hand_steps() {
        // No warmup, total 1000 steps, lr 0.1, decay 0.01, gradients 0.5 then -1.
        let (mut s, id) = scalar_store(1.0, true);
        let mut opt = AdamW::new(Schedule::new(0.1, 0.0, 1000), 0.01);

        let lr0 = 0.1;
        let m1 = 0.05;
        let v1 = 0.00025;
        let w1 = (1.0 - lr0 * 0.01 * 1.0) - lr0 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let g = grad(&s, id, 0.5);
        opt.step(&mut s, &g);
        assert!((s.value(id).data[0] - w1).abs() < 1e-15);

        let lr1 = 0.1 * 999.0 / 1000.0;
        let m2 = 0.9 * m1 + 0.1 * -1.0;
        let v2 = 0.999 * v1 + 0.001 * 1.0;
        let c1 = 1.0 - 0.81;
        let c2 = 1.0 - 0.999f64 * 0.999;
        let w2 = (w1 - lr1 * 0.01 * w1) - lr1 * (m2 / c1) / ((v2 / c2).sqrt() + 1e-8);
        let g = grad(&s, id, -1.0);
        opt.step(&mut s, &g);
        assert!((s.value(id).data[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (mut s, id) = scalar_store(0.3, true);
        let mut opt = AdamW::new(Schedule::new(0.0, 0.0, 10), 0.0);
        for g in [1.0, -2.0, 0.5] {
            let g = grad(&s, id, g);
            opt.step(&mut s, &g);
        }
        assert_eq!(s.value(id).data[0], 0.3);
    }

    #[test]
    fn frozen_and_no_decay_flags() {
        let (mut s, id) = scalar_store(2.0, false);
        let mut opt = AdamW::new(Schedule::new(0.1, 0.0, 10), 0.5);
        let g = grad(&s, id, 0.0);
        opt.step(&mut s, &g);
        assert_eq!(s.value(id).data[0], 2.0);
        s.set_trainable(id, false);
        let g = grad(&s, id, 1.0);
        opt.step(&mut s, &g);
        assert_eq!(s.value(id).data[0], 2.0);
    }

    #[test]
    fn clipping() {
        let mut s = ParamStore::new();
        let a = s.add("a", Matrix::zeros(1, 2), true);
        let mut g = Gradients::for_store(&s);
        g.entry(a, (1, 2)).data.copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 10.0), g.global_norm());
    }
}
