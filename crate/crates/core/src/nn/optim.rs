use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::layers::Module;

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: HashMap<String, Vec<f32>>,
}

impl OptimState {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::invalid("lr", format!("{lr} is not positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("{momentum} not in [0, 1)")));
        }
        if weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay", "negative"));
        }
        Ok(Self { lr, momentum, weight_decay, buffers: HashMap::new() })
    }

    pub fn buffer(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    /// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape("sgd_step", format!("{name}: {} params vs {} grads", param.len(), grad.len())));
        }
        let v = self.buffers.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        if v.len() != param.len() {
            return Err(Error::shape("sgd_step", format!("{name}: momentum buffer has {} entries", v.len())));
        }
        for ((p, &g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = self.momentum * *vi + g + self.weight_decay * *p;
            *p -= self.lr * *vi;
        }
        Ok(())
    }
}

/// Applies one SGD step to every parameter of `module` using its accumulated gradients.
pub fn sgd_step(module: &mut dyn Module, state: &mut OptimState) -> Result<()> {
    let mut result = Ok(());
    module.visit_params("", &mut |p| {
        if result.is_ok() {
            result = state.update(&p.name, p.value, p.grad);
        }
    });
    result
}
