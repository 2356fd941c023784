/// Hyperparameters of the Adam update.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Raised when a gradient contains NaN or infinity. Parameters and moments
/// are left untouched.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("non-finite gradient component at index {index}")]
pub struct Diverged {
    pub index: usize,
}

/// Adam state: first and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self::with_config(dim, AdamConfig::default())
    }

    pub fn with_config(dim: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// # Panics
    /// If `params`, `grads` and the state disagree in length.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), Diverged> {
        assert_eq!(params.len(), self.m.len(), "adam: parameter dimension");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient dimension");
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Diverged { index });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
