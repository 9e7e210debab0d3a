use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdaptiveMoment,
    PlainSgd,
}

/// First-order optimiser state over a flat parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::AdaptiveMoment => Optimizer::Adam(Adam::new(learning_rate, n_params)),
            OptimizerKind::PlainSgd => Optimizer::Sgd { learning_rate },
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Adam(adam) => adam.step(params, grads),
            Optimizer::Sgd { learning_rate } => {
                let lr = *learning_rate as f32;
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
        }
    }
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= (self.learning_rate * m_hat / (v_hat.sqrt() + self.eps)) as f32;
        }
    }
}
