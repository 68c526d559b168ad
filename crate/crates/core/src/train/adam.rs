use indexmap::IndexMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::tensor::Tensor;

/// Moment slots, one per trainable parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn has_slot(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

/// One Adam update with bias correction and decoupled weight decay.
///
/// Only parameters present in `grads` are touched; a missing moment slot is
/// created on first use. Parameters, moments and the update all round to
/// `f32` storage.
pub fn adam_step(
    model: &mut DecoderModel,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGrad(format!("{name}[{i}]")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if !p.requires_grad {
            continue;
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let shape = p.shape().to_vec();
        let mut data = p.data().to_vec();
        for i in 0..data.len() {
            m[i] = f32r(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
            v[i] = f32r(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let update = cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * data[i]);
            data[i] = f32r(data[i] - update);
        }
        let requires_grad = p.requires_grad;
        *p = Tensor::new(shape, data)?.with_grad(requires_grad);
    }
    Ok(())
}
