//! AdamW with decoupled weight decay and an exportable state.

use std::collections::BTreeMap;

use tch::{nn, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimiser over the trainable variables of one [`nn::VarStore`], ordered by name.
#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(vs: &nn::VarStore, config: AdamWConfig) -> Self {
        let vars: BTreeMap<String, Tensor> = vs.variables().into_iter().collect();
        let (names, params): (Vec<_>, Vec<_>) = vars.into_iter().filter(|(_, t)| t.requires_grad()).unzip();
        let m = params.iter().map(|p| p.zeros_like()).collect();
        let v = params.iter().map(|p| p.zeros_like()).collect();
        Self {
            config,
            names,
            params,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            let mut g = p.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    /// One update with learning rate `lr` from the gradients currently stored
    /// on the parameters. Parameters without a gradient are left untouched.
    pub fn step(&mut self, lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for ((p, m), v) in self.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let _ = p.g_mul_scalar_(1.0 - lr * weight_decay);
                let _ = m.g_mul_scalar_(beta1).g_add_(&(&g * (1.0 - beta1)));
                let _ = v.g_mul_scalar_(beta2).g_add_(&(g.square() * (1.0 - beta2)));
                let denom = (&*v / bc2).sqrt() + eps;
                let _ = p.g_sub_(&((&*m / bc1) / denom * lr));
            }
        });
    }

    /// Moment tensors keyed `"{prefix}m/{name}"`, `"{prefix}v/{name}"`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.names.len());
        for (i, name) in self.names.iter().enumerate() {
            out.push((format!("{prefix}m/{name}"), self.m[i].shallow_clone()));
            out.push((format!("{prefix}v/{name}"), self.v[i].shallow_clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str, step: u64) -> Result<()> {
        tch::no_grad(|| -> Result<()> {
            for (i, name) in self.names.iter().enumerate() {
                for (slot, key) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                    let k = format!("{prefix}{key}/{name}");
                    let t = tensors
                        .get(&k)
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimiser tensor {k}")))?;
                    if t.size() != slot.size() {
                        return Err(Error::Checkpoint(format!("shape mismatch for {k}")));
                    }
                    slot.copy_(&t.to_kind(slot.kind()));
                }
            }
            Ok(())
        })?;
        self.step = step;
        Ok(())
    }
}
