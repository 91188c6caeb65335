use ndarray::{Array2, Zip};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: impl Iterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes.map(|s| (Array2::zeros(s), Array2::zeros(s))).unzip();
        Self { m, v, step: 0 }
    }

    /// One bias-corrected Adam update of the tensors selected by `update`.
    /// Unselected tensors and their moments are left untouched.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [Array2<f64>],
        grads: &[Array2<f64>],
        update: impl Fn(usize) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !update(i) {
                continue;
            }
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
                });
        }
    }
}
