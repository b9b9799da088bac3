//! Adam optimizer over flat parameter slices.

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state. Parameter tensors must be presented in the same order on
/// every step; moments are keyed by position.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `params` and `grads` must align slot by slot.
    pub fn step(&mut self, mut params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        assert_eq!(params.len(), grads.len(), "param/grad slot mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "slot count changed between steps");

        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let lr = self.config.learning_rate;
        let eps = self.config.epsilon;

        for (slot, (param, grad)) in params.iter_mut().zip(grads.iter()).enumerate() {
            assert_eq!(param.len(), grad.len(), "slot {slot} length mismatch");
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..param.len() {
                let g = grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                param[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with a fresh state the bias-corrected update is lr * g / (|g| + eps)
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        let mut p = vec![1.0f32, -2.0];
        let g = vec![0.5f32, -3.0];
        opt.step(vec![&mut p], vec![&g]);
        assert!((p[0] - 0.9).abs() < 1e-5, "{}", p[0]);
        assert!((p[1] + 1.9).abs() < 1e-5, "{}", p[1]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        let mut p = vec![5.0f32];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0]];
            opt.step(vec![&mut p], vec![&g]);
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }
}
