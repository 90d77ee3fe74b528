//! Decoupled AdamW and the linear-decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::EncoderWeights;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-6;

/// `lr_max · (1 − step/total_steps)`.
pub fn lr_linear(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    debug_assert!(total_steps >= 1 && step <= total_steps);
    lr_max * (1.0 - step as f64 / total_steps as f64)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    shape: Vec<usize>,
}

/// Adam with bias correction, followed by weight decay applied directly to
/// the parameters (never through the gradient). Only tensors registered at
/// construction are ever touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor)>, weight_decay: f64) -> Self {
        let state = params
            .into_iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    Moments {
                        m: vec![0.0; t.numel()],
                        v: vec![0.0; t.numel()],
                        shape: t.shape().to_vec(),
                    },
                )
            })
            .collect();
        AdamW {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            weight_decay,
            t: 0,
            state,
        }
    }

    /// Registers every tensor of `weights` whose name is in `names`.
    pub fn for_manifest<'a>(
        weights: &EncoderWeights,
        names: impl IntoIterator<Item = &'a String>,
        weight_decay: f64,
    ) -> Result<Self> {
        let params = names
            .into_iter()
            .map(|n| Ok((n.as_str(), weights.get(n)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamW::new(params, weight_decay))
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.state.keys()
    }

    /// One update at learning rate `lr`. Registered tensors absent from
    /// `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut EncoderWeights, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::config("learning rate must be non-negative"));
        }
        for (name, g) in grads {
            let Some(st) = self.state.get(name) else {
                return Err(Error::contract(format!("gradient for unregistered tensor `{name}`")));
            };
            if g.shape() != st.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match `{name}` {:?}",
                    g.shape(),
                    st.shape
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = (1.0 - self.beta1.powi(t)) as f32;
        let bc2 = (1.0 - self.beta2.powi(t)) as f32;
        let lr32 = lr as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let eps = self.eps as f32;

        for (name, st) in self.state.iter_mut() {
            let p = params.get_mut(name)?;
            if p.shape() != st.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?}, optimizer state {:?}",
                    p.shape(),
                    st.shape
                )));
            }
            let g = grads.get(name).map(|g| g.data());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *x = *x * decay - lr32 * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
