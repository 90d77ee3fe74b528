//! Bidirectional pre-LN transformer encoder with three head variants.

pub mod checkpoint;
pub mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use forward::{forward_mlm, forward_mlm_batch, forward_pooled, forward_token_labels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Mlm,
    PooledClassifier,
    TokenClassifier,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Mlm => "mlm",
            HeadKind::PooledClassifier => "pooled-classifier",
            HeadKind::TokenClassifier => "token-classifier",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(HeadKind::Mlm),
            "pooled-classifier" | "pooled" => Ok(HeadKind::PooledClassifier),
            "token-classifier" | "token" => Ok(HeadKind::TokenClassifier),
            _ => Err(Error::config(format!("unknown head kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::config(format!("unknown pooling `{s}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub head_kind: HeadKind,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 64,
            max_seq: 64,
            head_kind: HeadKind::Mlm,
            pooling: Pooling::Cls,
        }
    }
}

/// The six linear maps inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixRole {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl MatrixRole {
    pub const ALL: [MatrixRole; 6] = [
        MatrixRole::Wq,
        MatrixRole::Wk,
        MatrixRole::Wv,
        MatrixRole::Wo,
        MatrixRole::W1,
        MatrixRole::W2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixRole::Wq => "wq",
            MatrixRole::Wk => "wk",
            MatrixRole::Wv => "wv",
            MatrixRole::Wo => "wo",
            MatrixRole::W1 => "w1",
            MatrixRole::W2 => "w2",
        }
    }

    fn group(self) -> &'static str {
        match self {
            MatrixRole::W1 | MatrixRole::W2 => "ffn",
            _ => "attn",
        }
    }

    /// Tensor name of this matrix in `layer`.
    pub fn tensor_name(self, layer: usize) -> String {
        format!("layers.{layer}.{}.{}", self.group(), self.as_str())
    }
}

impl FromStr for MatrixRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MatrixRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown matrix role `{s}`")))
    }
}

pub mod names {
    pub const TOKEN_EMBED: &str = "embed.token";
    pub const POS_EMBED: &str = "embed.position";
    pub const FINAL_LN_GAMMA: &str = "final_ln.gamma";
    pub const FINAL_LN_BETA: &str = "final_ln.beta";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    pub fn ln(layer: usize, which: u8, part: &str) -> String {
        format!("layers.{layer}.ln{which}.{part}")
    }

    /// Layer index of a per-layer tensor name, if any.
    pub fn layer_of(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("adapter.").unwrap_or(name);
        let rest = rest.strip_prefix("layers.")?;
        rest.split('.').next()?.parse().ok()
    }

    pub fn is_embedding(name: &str) -> bool {
        name.starts_with("embed.")
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden {} is not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_outputs(&self) -> usize {
        match self.head_kind {
            HeadKind::Mlm => self.vocab_size,
            HeadKind::PooledClassifier => 2,
            HeadKind::TokenClassifier => 1,
        }
    }

    /// Every stored tensor of the base model, in a fixed order. Matrices are
    /// stored `d_out×d_in`.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let f = self.ffn_mult * h;
        let mut m = vec![
            (names::TOKEN_EMBED.to_string(), vec![self.vocab_size, h]),
            (names::POS_EMBED.to_string(), vec![self.max_seq, h]),
        ];
        for l in 0..self.n_layers {
            m.push((names::ln(l, 1, "gamma"), vec![h]));
            m.push((names::ln(l, 1, "beta"), vec![h]));
            for role in [MatrixRole::Wq, MatrixRole::Wk, MatrixRole::Wv, MatrixRole::Wo] {
                m.push((role.tensor_name(l), vec![h, h]));
            }
            m.push((names::ln(l, 2, "gamma"), vec![h]));
            m.push((names::ln(l, 2, "beta"), vec![h]));
            m.push((MatrixRole::W1.tensor_name(l), vec![f, h]));
            m.push((MatrixRole::W2.tensor_name(l), vec![h, f]));
        }
        m.push((names::FINAL_LN_GAMMA.to_string(), vec![h]));
        m.push((names::FINAL_LN_BETA.to_string(), vec![h]));
        m.push((names::HEAD_WEIGHT.to_string(), vec![self.head_outputs(), h]));
        m.push((names::HEAD_BIAS.to_string(), vec![self.head_outputs()]));
        m
    }

    pub fn matrix_shape(&self, role: MatrixRole) -> (usize, usize) {
        let h = self.hidden;
        let f = self.ffn_mult * h;
        match role {
            MatrixRole::W1 => (f, h),
            MatrixRole::W2 => (h, f),
            _ => (h, h),
        }
    }
}

/// Closed-form count of stored weight scalars for `config` (adapters excluded).
pub fn count_params(config: &ModelConfig) -> u64 {
    let (v, h, s, o) = (
        config.vocab_size as u64,
        config.hidden as u64,
        config.max_seq as u64,
        config.head_outputs() as u64,
    );
    let f = config.ffn_mult as u64 * h;
    let per_layer = 4 * h * h + 2 * f * h + 4 * h;
    v * h + s * h + config.n_layers as u64 * per_layer + 2 * h + o * h + o
}

/// Named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl EncoderWeights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded initialisation: matrices and embeddings ~ N(0, std²), layer-norm
    /// gains 1, biases 0.
    pub fn init(config: &ModelConfig, seed: u64, std: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::config(e.to_string()))?;
        let mut w = EncoderWeights::new();
        for (name, shape) in config.manifest() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".beta") || name == names::HEAD_BIAS {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            w.insert(name, Tensor::from_parts(shape, data));
        }
        Ok(w)
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mut w = EncoderWeights::new();
        for (name, shape) in config.manifest() {
            w.insert(name, Tensor::zeros(shape));
        }
        w
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Manifest(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Manifest(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    /// Checks that every manifest tensor is present with the declared shape
    /// and finite.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        for (name, shape) in config.manifest() {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor `{name}` holds non-finite values")));
            }
        }
        Ok(())
    }
}
