use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FtwaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient, applied to weights and biases alike.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with coupled L2 weight decay (`g + λθ`).
pub struct Adam {
    slots: Vec<Slot>,
    config: AdamConfig,
    step: usize,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            slots,
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. Gradients are checked for finiteness first so a
    /// blown-up step never reaches the parameters; the error names the
    /// offending tensor.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for slot in &self.slots {
            if let Some(g) = grads.get(slot.var.as_tensor()) {
                let s = g.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                if !s.is_finite() {
                    return Err(FtwaError::Divergence {
                        step: self.step,
                        component: format!("gradient of {}", slot.name),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Detached so the moment buffers never hold on to a graph.
            let theta = slot.var.as_tensor().detach();
            let g = g.detach();
            let g = if c.weight_decay > 0.0 {
                (g + theta.affine(c.weight_decay, 0.0)?)?
            } else {
                g
            };
            slot.m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            slot.v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&slot.m / bias1)?;
            let v_hat = (&slot.v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            slot.var.set(&(&theta - (update * lr)?)?)?;
        }
        Ok(())
    }
}
