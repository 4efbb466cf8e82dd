use super::mat::Mat;
use super::params::{Gradients, ParamStore};
use crate::error::{EagerError, Result};

/// Bias-corrected Adam with linear learning-rate warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    step_count: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, warmup_steps: u64) -> Self {
        let zeros = || params.ids().map(|id| {
            let (r, c) = params.value(id).shape();
            Mat::zeros(r, c)
        });
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            step_count: 0,
            m: zeros().collect(),
            v: zeros().collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Learning rate applied at optimizer step `step` (1-based).
    pub fn effective_lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update. Non-finite gradients abort before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(EagerError::NonFinite(format!("gradient of `{}`", params.name(id))));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.effective_lr(self.step_count);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.value_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("x", Mat::scalar(v));
        ps
    }

    #[test]
    fn first_step_closed_form() {
        let mut ps = scalar_store(0.0);
        let mut adam = AdamState::new(&ps, 0.001, 0);
        let mut g = Gradients::zeros_like(&ps);
        g.add(ps.ids().next().unwrap(), &Mat::scalar(1.0));
        adam.step(&mut ps, &g).unwrap();
        let delta = -ps.value(ps.ids().next().unwrap()).item();
        let want = 0.001 / (1.0 + 1e-8);
        assert!((delta - want).abs() < 1e-15, "{delta}");
        assert!((delta - 0.000999999).abs() < 1e-9);
    }

    #[test]
    fn zero_grad_leaves_params_and_counts_step() {
        let mut ps = scalar_store(2.5);
        let mut adam = AdamState::new(&ps, 0.001, 10);
        let g = Gradients::zeros_like(&ps);
        adam.step(&mut ps, &g).unwrap();
        assert_eq!(ps.value(ps.ids().next().unwrap()).item(), 2.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn warmup_is_linear() {
        let ps = scalar_store(0.0);
        let adam = AdamState::new(&ps, 0.001, 100);
        assert!((adam.effective_lr(50) - 0.0005).abs() < 1e-15);
        assert_eq!(adam.effective_lr(100), 0.001);
        assert_eq!(adam.effective_lr(1000), 0.001);
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut ps = scalar_store(1.0);
        let mut adam = AdamState::new(&ps, 0.001, 0);
        let mut g = Gradients::zeros_like(&ps);
        g.add(ps.ids().next().unwrap(), &Mat::scalar(f64::NAN));
        assert!(adam.step(&mut ps, &g).is_err());
        assert_eq!(ps.value(ps.ids().next().unwrap()).item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
