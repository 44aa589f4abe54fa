use herbs_tensor::{ParamStore, Tensor};

use crate::error::{HerbsError, Result};

/// Cosine decay from `lr0` at step 0 to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(HerbsError::InvalidConfig("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(HerbsError::InvalidConfig(format!("step {step} beyond schedule end {total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.velocity.len(), "one gradient per parameter");
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let w = store.get_mut(id);
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Running sum of micro-batch gradients.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    sum: Vec<Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn add(&mut self, grads: Vec<Tensor>) {
        if self.sum.is_empty() {
            self.sum = grads;
        } else {
            for (s, g) in self.sum.iter_mut().zip(&grads) {
                s.add_assign(g);
            }
        }
        self.count += 1;
    }

    /// Mean over the micro-batches added since the last call.
    pub fn take_mean(&mut self) -> Option<Vec<Tensor>> {
        if self.count == 0 {
            return None;
        }
        let scale = 1.0 / self.count as f64;
        let mut out = std::mem::take(&mut self.sum);
        out.iter_mut().for_each(|t| *t = t.scale(scale));
        self.count = 0;
        Some(out)
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Optimizer steps in one epoch: micro-batches `ceil(n / batch)`, one step per
/// `accum` of them, the last partial window included.
pub fn steps_per_epoch(samples: usize, batch_size: usize, accum_steps: usize) -> usize {
    samples.div_ceil(batch_size).div_ceil(accum_steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_points() {
        assert_eq!(lr_at(0, 100, 5e-4).unwrap(), 5e-4);
        assert!((lr_at(50, 100, 5e-4).unwrap() - 2.5e-4).abs() < 1e-18);
        assert!(lr_at(100, 100, 5e-4).unwrap().abs() < 1e-18);
        assert!(lr_at(0, 0, 5e-4).is_err());
        let lrs: Vec<f64> = (0..=37).map(|s| lr_at(s, 37, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new([2], vec![3.0, 0.0]), Tensor::new([1], vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn step_counts() {
        assert_eq!(steps_per_epoch(200, 8, 4), 7);
        assert_eq!(steps_per_epoch(32, 8, 4), 1);
        assert_eq!(steps_per_epoch(33, 8, 4), 2);
        assert_eq!(steps_per_epoch(10, 8, 1), 2);
    }

    #[test]
    fn accumulator_averages_actual_window() {
        let mut acc = GradAccumulator::new();
        acc.add(vec![Tensor::new([2], vec![1.0, 2.0])]);
        acc.add(vec![Tensor::new([2], vec![3.0, 6.0])]);
        assert_eq!(acc.take_mean().unwrap()[0].data(), &[2.0, 4.0]);
        assert!(acc.take_mean().is_none());
    }

    #[test]
    fn sgd_update_rule() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new([1], vec![1.0]));
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        opt.step(&mut store, &[Tensor::new([1], vec![0.5])], 0.1);
        // v = 0.5 + 0.1 * 1 = 0.6, w = 1 - 0.06
        assert!((store.get(id).data()[0] - 0.94).abs() < 1e-15);
        opt.step(&mut store, &[Tensor::new([1], vec![0.0])], 0.1);
        // v = 0.9 * 0.6 + 0.094 = 0.634
        assert!((store.get(id).data()[0] - (0.94 - 0.0634)).abs() < 1e-15);
    }
}
