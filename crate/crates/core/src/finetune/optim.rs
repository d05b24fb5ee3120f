/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(n_params: usize, betas: (f64, f64), epsilon: f64, weight_decay: f64) -> Self {
        Self { betas, epsilon, weight_decay, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update. Parameters flagged in `no_decay` skip weight decay.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, no_decay: &[usize]) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            if !no_decay.contains(&i) {
                params[i] *= 1.0 - lr * self.weight_decay;
            }
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}
