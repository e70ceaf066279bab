//! SGD with momentum, weight decay and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay {weight_decay}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v <- momentum·v + grad + weight_decay·param; param <- param - lr·v`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        if self.velocity.len() != store.len() {
            self.velocity = store
                .params()
                .iter()
                .map(|p| vec![0.0; p.tensor.data().len()])
                .collect();
        }
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let data = p.tensor.data_mut();
            for ((x, v), g) in data.iter_mut().zip(v.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g + self.weight_decay * *x;
                *x -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// Multiplies the base rate by `factor` at each milestone epoch (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}
