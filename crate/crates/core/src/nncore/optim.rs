use std::f64::consts::PI;

use super::ParamStore;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_max;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t).cos())
    }
}

/// AdamW with decoupled weight decay. Decay applies to matrices with more than
/// one row (weights and embedding tables), not to biases or norm gains.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let decay = if p.value.rows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let grad = &p.grad;
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Tensor;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule { lr_max: 1e-4, lr_min: 1e-6, total_steps: 2000 };
        assert_eq!(s.lr(0), 1e-4);
        assert!((s.lr(1999) - 1e-6).abs() < 1e-18);
        assert!(s.lr(1000) < 1e-4 && s.lr(1000) > 1e-6);
        // monotone non-increasing
        for i in 1..2000 {
            assert!(s.lr(i) <= s.lr(i - 1));
        }
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        store.get_mut(id).grad = vec![0.5, -0.5];
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, 0.01);
        let w = store.get(id).value.data();
        // first Adam step has magnitude lr regardless of gradient scale
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 0.99).abs() < 1e-9);
    }
}
