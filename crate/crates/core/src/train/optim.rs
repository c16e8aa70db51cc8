use crate::tensor::{Gradients, ParamStore, Scalar};

/// Bias-corrected Adam with optional global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

/// Gradient norms around one optimizer step.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StepStats {
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, clip_norm: Option<f64>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.len()])
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips `grads` in place (when configured) and applies one update.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &mut Gradients<T>, lr: f64) -> StepStats {
        let pre = match self.clip_norm {
            Some(max) => grads.clip_global_norm(max),
            None => grads.global_norm(),
        };
        let post = if self.clip_norm.is_some() {
            grads.global_norm()
        } else {
            pre
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id).data();
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::from_f64_lossy(mi);
                v[i] = T::from_f64_lossy(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p[i] = T::from_f64_lossy(p[i].as_f64() - update);
            }
        }
        StepStats {
            pre_clip_norm: pre,
            post_clip_norm: post,
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// a strict improvement of the monitored loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Stops once `patience` epochs pass without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    /// Returns `(improved, stop)` for a 0-based epoch.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
        }
        let stop = self
            .best_epoch
            .is_some_and(|b| epoch >= b + self.patience);
        (improved, stop)
    }
}
