use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::OptimizerConfig;
use crate::error::Result;

/// SGD with heavy-ball momentum: `v <- mu v + g + wd p`, `p <- p - lr v`.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    cfg: OptimizerConfig,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, cfg: OptimizerConfig) -> Self {
        let velocity = vec![None; vars.len()];
        Self { vars, velocity, cfg }
    }

    /// Variables without a gradient keep their value and velocity.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let mut g = g.clone();
            if self.cfg.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.cfg.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.cfg.momentum != 0.0 => ((prev * self.cfg.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - (&v * self.cfg.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}
