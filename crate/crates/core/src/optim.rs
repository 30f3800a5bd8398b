//! Adam optimizer used by the mask, field, and codebook training loops.

/// Adam with bias correction; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// Apply one update in place. `params` and `grads` must match the length
    /// given at construction.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Drop optimizer state for removed parameters, keeping rows in `kept`
    /// order. Used when Gaussians are physically pruned mid-training.
    pub fn compact(&mut self, kept: &[usize]) {
        self.m = kept.iter().map(|&i| self.m[i]).collect();
        self.v = kept.iter().map(|&i| self.v[i]).collect();
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize (x-3)² + (y+1)².
        let mut params = vec![0.0, 0.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..1000 {
            let grads = vec![2.0 * (params[0] - 3.0), 2.0 * (params[1] + 1.0)];
            opt.step(&mut params, &grads);
        }
        assert!((params[0] - 3.0).abs() < 1e-3);
        assert!((params[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn first_step_size_is_close_to_lr() {
        // With bias correction the first update has magnitude
        // lr·|g|/(|g| + ε) ≈ lr for any gradient well above ε.
        for &g in &[1e-4, 1.0, 1e6] {
            let mut params = vec![0.0];
            let mut opt = Adam::new(1, 0.01);
            opt.step(&mut params, &[g]);
            assert!(
                (params[0].abs() - 0.01).abs() < 1e-3,
                "grad {g} gave step {}",
                params[0]
            );
        }
        // At g ≈ ε the update is damped, never amplified.
        let mut params = vec![0.0];
        let mut opt = Adam::new(1, 0.01);
        opt.step(&mut params, &[1e-8]);
        assert!(params[0].abs() <= 0.01);
    }

    #[test]
    fn compact_preserves_momentum_rows() {
        let mut params = vec![0.0, 0.0, 0.0];
        let mut opt = Adam::new(3, 0.1);
        opt.step(&mut params, &[1.0, 2.0, 3.0]);
        let m_before = opt.m.clone();
        opt.compact(&[0, 2]);
        assert_eq!(opt.len(), 2);
        assert_eq!(opt.m[0], m_before[0]);
        assert_eq!(opt.m[1], m_before[2]);
    }
}
