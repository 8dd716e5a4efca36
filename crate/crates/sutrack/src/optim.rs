//! Named parameters and the AdamW optimizer.
//!
//! Parameters live in a [`ParamSet`], outside any tape. A training step
//! injects them into a fresh tape with [`ParamSet::leaf`], runs forward and
//! backward, then pulls the tape's tagged gradients back with
//! [`ParamSet::accumulate_from`]. Gradients accumulate across samples until
//! [`ParamSet::clear_grads`].

use std::collections::HashMap;

use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter `{name}` has no gradient; run backward before step")]
    MissingGrad { name: String },
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Transformer backbone and patch/position embeddings: lower rate.
    Encoder,
    /// Heads, token tables and projections: higher rate.
    Other,
}

pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Identifier returned by [`ParamSet::register`]; doubles as the tape tag.
pub type ParamId = usize;

#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            group,
            value,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.params[id].value.shape(),
            value.shape(),
            "parameter `{}` shape changed",
            self.params[id].name
        );
        self.params[id].value = value;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate()
    }

    /// Injects a parameter into `tape` as a tagged differentiable leaf.
    pub fn leaf<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        tape.leaf_tagged(self.params[id].value.clone(), id)
    }

    /// Adds the tape's tagged leaf gradients into the matching parameters.
    pub fn accumulate_from(&mut self, tape: &Tape) {
        for (id, g) in tape.tagged_grads() {
            let p = &mut self.params[id];
            match &mut p.grad {
                Some(acc) => acc.add_scaled(&g, 1.0),
                slot => *slot = Some(g),
            }
        }
    }

    /// Scales every present gradient, e.g. by `1/batch` after accumulation.
    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                *g = g.scale(c);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Global L2 norm over all present gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for p in &self.params {
            if let Some(g) = &p.grad {
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_encoder: 3e-4,
            lr_other: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay and per-group learning rates.
///
/// Update per parameter, with the group's rate `lr`:
/// ```text
/// theta  -= lr * wd * theta                 (decay first, decoupled)
/// m       = b1 * m + (1 - b1) * g
/// v       = b2 * v + (1 - b2) * g^2
/// m_hat   = m / (1 - b1^t)
/// v_hat   = v / (1 - b2^t)
/// theta  -= lr * m_hat / (sqrt(v_hat) + eps)
/// ```
pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        let m = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            cfg,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter. Errors if any parameter is missing
    /// its gradient, leaving all values untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), OptimError> {
        for (_, p) in params.iter() {
            if p.grad.is_none() {
                return Err(OptimError::MissingGrad {
                    name: p.name.clone(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, p) in params.params.iter_mut().enumerate() {
            let lr = match p.group {
                ParamGroup::Encoder => c.lr_encoder,
                ParamGroup::Other => c.lr_other,
            };
            let g = p.grad.as_ref().expect("checked above");
            let theta = p.value.data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (((th, gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *th -= lr * c.weight_decay * *th;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.register("w", ParamGroup::Other, Tensor::scalar(value));
        ps
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        // With bias correction, step 1 gives m_hat = g and v_hat = g^2,
        // so the update is lr * g / (|g| + eps), essentially lr * sign(g).
        let mut ps = one_param(1.0);
        ps.params[0].grad = Some(Tensor::scalar(0.5));
        let cfg = AdamWConfig {
            lr_other: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&ps, cfg);
        opt.step(&mut ps).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((ps.value(0).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let mut ps = one_param(2.0);
        let cfg = AdamWConfig {
            lr_other: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&ps, cfg.clone());
        let grads = [0.3, -0.2];
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 2.0f64);
        for (t, &g) in grads.iter().enumerate() {
            ps.params[0].grad = Some(Tensor::scalar(g));
            opt.step(&mut ps).unwrap();
            ps.clear_grads();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32 + 1));
            theta -= cfg.lr_other * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        assert!((ps.value(0).item() - theta).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled_from_moments() {
        // Zero gradient: moments stay zero, so only decay moves the value.
        let mut ps = one_param(10.0);
        ps.params[0].grad = Some(Tensor::scalar(0.0));
        let cfg = AdamWConfig {
            lr_other: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&ps, cfg);
        opt.step(&mut ps).unwrap();
        assert!((ps.value(0).item() - 10.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn encoder_and_other_groups_use_their_own_rates() {
        let mut ps = ParamSet::new();
        ps.register("enc", ParamGroup::Encoder, Tensor::scalar(1.0));
        ps.register("head", ParamGroup::Other, Tensor::scalar(1.0));
        for p in &mut ps.params {
            p.grad = Some(Tensor::scalar(1.0));
        }
        let cfg = AdamWConfig {
            lr_encoder: 0.001,
            lr_other: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&ps, cfg);
        opt.step(&mut ps).unwrap();
        let enc_move = 1.0 - ps.value(0).item();
        let head_move = 1.0 - ps.value(1).item();
        assert!((head_move / enc_move - 10.0).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_is_an_error_and_names_the_parameter() {
        let mut ps = one_param(1.0);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn tape_roundtrip_accumulates_into_params() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", ParamGroup::Other, Tensor::new(vec![2], vec![1.0, 2.0]));
        let tape = Tape::new();
        let w = ps.leaf(&tape, id);
        let loss = w.mul(w).sum_all();
        tape.backward(loss).unwrap();
        ps.accumulate_from(&tape);
        assert_eq!(ps.get(id).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        // A second tape adds on top.
        let tape2 = Tape::new();
        let w2 = ps.leaf(&tape2, id);
        tape2.backward(w2.sum_all()).unwrap();
        ps.accumulate_from(&tape2);
        assert_eq!(ps.get(id).grad.as_ref().unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamSet::new();
        ps.register("w", ParamGroup::Other, Tensor::scalar(0.0));
        ps.register("w", ParamGroup::Other, Tensor::scalar(0.0));
    }
}
