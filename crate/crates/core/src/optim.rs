//! SGD with momentum, L2 weight decay and step-wise learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::model::{HeadGrads, ModelGrads, TemporalModel};

/// Floor applied to the trainable NCA scale so it stays positive.
pub const ETA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs (0-based) at whose start the rate is multiplied by `factor`.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.initial * self.factor.powi(drops as i32)
    }

    /// Rate in effect after the last decay.
    pub fn final_rate(&self) -> f64 {
        self.initial * self.factor.powi(self.decay_epochs.len() as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier on the learning rate used for η.
    pub eta_lr_scale: f64,
    backbone: Vec<Vec<f64>>,
    proxies: Vec<ndarray::Array2<f64>>,
    eta: f64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            eta_lr_scale: 1.0,
            backbone: Vec::new(),
            proxies: Vec::new(),
            eta: 0.0,
        }
    }

    /// One update of every parameter. Proxies are renormalized afterwards
    /// and η is kept above [`ETA_MIN`].
    pub fn step(&mut self, model: &mut TemporalModel, grads: &ModelGrads, lr: f64) {
        let mut flat = Vec::new();
        grads.backbone.visit(&mut |_, _, v| flat.push(v.to_vec()));
        if self.backbone.is_empty() {
            self.backbone = flat.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        let mut i = 0;
        let velocity = &mut self.backbone;
        model.backbone.visit_mut(&mut |_, params| {
            for ((p, &g), v) in params.iter_mut().zip(&flat[i]).zip(velocity[i].iter_mut()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
            i += 1;
        });
        self.step_head(model, &grads.head, lr);
    }

    /// Updates only the classifier head.
    pub fn step_head(&mut self, model: &mut TemporalModel, grads: &HeadGrads, lr: f64) {
        while self.proxies.len() < model.head.proxies.len() {
            let shape = model.head.proxies[self.proxies.len()].raw_dim();
            self.proxies.push(ndarray::Array2::zeros(shape));
        }
        for ((p, g), v) in model.head.proxies.iter_mut().zip(&grads.proxies).zip(&mut self.proxies) {
            *v *= self.momentum;
            *v += g;
            p.scaled_add(-lr, v);
        }
        model.head.renormalize();
        self.eta = self.momentum * self.eta + grads.eta;
        model.head.eta = (model.head.eta - self.eta_lr_scale * lr * self.eta).max(ETA_MIN);
    }
}
