//! Adam optimizer with bias correction.

/// Per-parameter first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    /// Canonical defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(n_params: usize) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: vec![(Vec::new(), Vec::new()); n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimizer step, before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Standard Adam update for parameter slot `slot`.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive, got {lr}");
        assert!(self.step > 0, "begin_step must precede update");
        assert_eq!(param.len(), grad.len(), "param/grad length mismatch");
        let (m, v) = &mut self.moments[slot];
        if m.is_empty() {
            m.resize(param.len(), 0.0);
            v.resize(param.len(), 0.0);
        }
        assert_eq!(m.len(), param.len(), "moment/parameter shape mismatch");
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
