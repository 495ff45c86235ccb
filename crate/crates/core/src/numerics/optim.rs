use super::params::{Grads, ParamId, ParamStore};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of the parameters in `trainable` using `grads`.
    /// Parameters without a gradient get a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, trainable: &[ParamId]) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), Vec::new());
            self.second.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &id in trainable {
            let decay = store.param(id).decay;
            let g = grads.raw(id);
            let p = store.get_mut(id).data_mut();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            if m.is_empty() {
                *m = vec![0.0; p.len()];
                *v = vec![0.0; p.len()];
            }
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if decay {
                    p[i] *= 1.0 - self.lr * self.weight_decay;
                }
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` when the monitored metric has
/// not improved by at least `threshold` for `patience` consecutive evals.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_evals: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            bad_evals: 0,
        }
    }

    /// Records `metric` and returns the (possibly reduced) learning rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best - self.threshold {
            self.best = metric;
            self.bad_evals = 0;
            lr
        } else {
            self.bad_evals += 1;
            if self.bad_evals >= self.patience {
                self.bad_evals = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

/// Stops when the metric improves by less than `threshold` for `patience`
/// consecutive evals.
#[derive(Clone, Debug)]
pub struct ConvergenceMonitor {
    pub threshold: f64,
    pub patience: usize,
    last: f64,
    stale: usize,
}

impl ConvergenceMonitor {
    pub fn new(threshold: f64, patience: usize) -> Self {
        Self {
            threshold,
            patience,
            last: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn converged(&mut self, metric: f64) -> bool {
        if self.last - metric < self.threshold {
            self.stale += 1;
        } else {
            self.stale = 0;
        }
        self.last = self.last.min(metric);
        self.stale >= self.patience
    }
}
