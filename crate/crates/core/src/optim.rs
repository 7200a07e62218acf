//! Adam, the first-order optimizer used by the per-instance solvers.

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Stops once the best loss has improved by less than `tol` over the last
/// `window` iterations.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    window: usize,
    tol: f64,
    best_history: Vec<f64>,
}

impl EarlyStop {
    pub fn new(window: usize, tol: f64) -> Self {
        Self {
            window,
            tol,
            best_history: Vec::new(),
        }
    }

    /// Records the current best loss; returns `true` when progress stalled.
    pub fn update(&mut self, best: f64) -> bool {
        self.best_history.push(best);
        let n = self.best_history.len();
        if self.window == 0 || n <= self.window {
            return false;
        }
        self.best_history[n - 1 - self.window] - best < self.tol
    }
}
