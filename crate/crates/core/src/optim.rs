//! Adam with bias correction over a fixed list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TnetError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers are sized from `sizes`, one entry per tensor.
    pub fn new(lr: f64, sizes: &[usize]) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TnetError::config("lr", format!("must be positive, got {lr}")));
        }
        Ok(Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            second: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        })
    }

    /// One update of every tensor whose `active` flag is set. Inactive
    /// tensors keep both their values and their moment estimates.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], active: &[bool]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || active.len() != params.len() {
            return Err(TnetError::dim(
                "adam_step tensor count",
                self.first.len(),
                format!(
                    "{} params / {} grads / {} flags",
                    params.len(),
                    grads.len(),
                    active.len()
                ),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != p.len() {
                return Err(TnetError::dim("adam_step tensor", self.first[k].len(), p.len()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !active[k] {
                continue;
            }
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut state = AdamState::new(0.1, &[3]).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        state.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], &[true]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::new(0.1, &[1]).unwrap();
        let mut p = vec![1.0];
        state.step(&mut [&mut p], &[&[1.0]], &[true]).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut state = AdamState::new(0.01, &[1]).unwrap();
        let mut p = vec![0.0];
        let mut last = p[0];
        for _ in 0..100 {
            state.step(&mut [&mut p], &[&[2.5]], &[true]).unwrap();
            assert!(p[0] < last);
            last = p[0];
        }
        assert_eq!(state.step, 100);
    }

    #[test]
    fn inactive_tensors_are_untouched() {
        let mut state = AdamState::new(0.1, &[1, 1]).unwrap();
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        state
            .step(&mut [&mut a, &mut b], &[&[1.0], &[1.0]], &[true, false])
            .unwrap();
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = AdamState::new(0.1, &[2]).unwrap();
        let mut p = vec![0.0];
        assert!(state.step(&mut [&mut p], &[&[0.0]], &[true]).is_err());
        assert!(AdamState::new(0.0, &[1]).is_err());
    }
}
