//! Run configuration and its flat `key=value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig, Pooling};
use crate::peft::{AdapterSpec, AdapterTargets, FreezeSpec};
use crate::train::Objective;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OrderPolicy {
    /// Every pair is rendered with the chosen response as option 1.
    Fixed,
    /// Each pair draws a random option order every epoch.
    #[default]
    Shuffled,
    /// Each pair appears once in each order per epoch.
    Both,
}

impl FromStr for OrderPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(OrderPolicy::Fixed),
            "shuffled" => Ok(OrderPolicy::Shuffled),
            "both" => Ok(OrderPolicy::Both),
            _ => Err(Error::config(format!("unknown order policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OrderPolicy::Fixed => "fixed",
            OrderPolicy::Shuffled => "shuffled",
            OrderPolicy::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze: FreezeSpec,
    pub dora: Option<AdapterSpec>,
    pub objective: Objective,
    pub prefix: String,
    pub order_policy: OrderPolicy,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Held-out accuracy is traced every this many steps (0: final step only).
    pub eval_every: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub pooling: Pooling,
    /// Standard deviation of the normal initialisation of fresh weights.
    pub init_std: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 256,
            epochs: 1,
            seed: 0,
            freeze: FreezeSpec::none(),
            dora: None,
            objective: Objective::Cloze,
            prefix: crate::data::DEFAULT_PREFIXES[0].to_string(),
            order_policy: OrderPolicy::Shuffled,
            clip_norm: None,
            eval_every: 0,
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            ffn_mult: 4,
            max_seq: 64,
            pooling: Pooling::Cls,
            init_std: 0.02,
        }
    }
}

const KEYS: [&str; 21] = [
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "frozen_layers",
    "freeze_embeddings",
    "dora_rank",
    "dora_targets",
    "objective",
    "prefix",
    "order_policy",
    "clip_norm",
    "eval_every",
    "layers",
    "hidden",
    "heads",
    "ffn_mult",
    "max_seq",
    "pooling",
    "init_std",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.freeze.n_frozen_layers > self.n_layers {
            return Err(Error::config(format!(
                "cannot freeze {} of {} layers",
                self.freeze.n_frozen_layers, self.n_layers
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be positive"));
        }
        if self.dora.as_ref().is_some_and(|d| d.rank == 0) {
            return Err(Error::config("dora_rank must be positive"));
        }
        self.model_config(16).validate()
    }

    pub fn head_kind(&self) -> HeadKind {
        self.objective.head_kind()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            hidden: self.hidden,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            vocab_size,
            max_seq: self.max_seq,
            head_kind: self.head_kind(),
            pooling: self.pooling,
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "frozen_layers" => {
                let k: usize = parse(key, v)?;
                self.freeze.n_frozen_layers = k;
                self.freeze.freeze_embeddings = k > 0;
            }
            "freeze_embeddings" => self.freeze.freeze_embeddings = parse(key, v)?,
            "dora_rank" => {
                let r: usize = parse(key, v)?;
                self.dora = match (r, self.dora.take()) {
                    (0, _) => None,
                    (rank, Some(d)) => Some(AdapterSpec { rank, ..d }),
                    (rank, None) => Some(AdapterSpec {
                        rank,
                        targets: AdapterTargets::default(),
                    }),
                };
            }
            "dora_targets" => {
                let targets: AdapterTargets = v.parse()?;
                match self.dora.as_mut() {
                    Some(d) => d.targets = targets,
                    None => return Err(Error::config("dora_targets needs a positive dora_rank first")),
                }
            }
            "objective" => self.objective = v.parse()?,
            "prefix" => self.prefix = v.to_string(),
            "order_policy" => self.order_policy = v.parse()?,
            "clip_norm" => {
                self.clip_norm = match v {
                    "off" | "none" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "eval_every" => self.eval_every = parse(key, v)?,
            "layers" => self.n_layers = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "heads" => self.n_heads = parse(key, v)?,
            "ffn_mult" => self.ffn_mult = parse(key, v)?,
            "max_seq" => self.max_seq = parse(key, v)?,
            "pooling" => self.pooling = v.parse()?,
            "init_std" => self.init_std = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key=value` file over the defaults. Blank lines and
    /// lines starting with `#` are ignored; a repeated key is an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, v) in parse_kv(text)? {
            cfg.set(&key, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = match key {
                "lr" => self.lr.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "seed" => self.seed.to_string(),
                "frozen_layers" => self.freeze.n_frozen_layers.to_string(),
                "freeze_embeddings" => self.freeze.freeze_embeddings.to_string(),
                "dora_rank" => self.dora.as_ref().map_or(0, |d| d.rank).to_string(),
                "dora_targets" => match &self.dora {
                    Some(d) => d.targets.to_string(),
                    None => continue,
                },
                "objective" => self.objective.to_string(),
                "prefix" => self.prefix.clone(),
                "order_policy" => self.order_policy.to_string(),
                "clip_norm" => self.clip_norm.map_or("off".into(), |c| c.to_string()),
                "eval_every" => self.eval_every.to_string(),
                "layers" => self.n_layers.to_string(),
                "hidden" => self.hidden.to_string(),
                "heads" => self.n_heads.to_string(),
                "ffn_mult" => self.ffn_mult.to_string(),
                "max_seq" => self.max_seq.to_string(),
                "pooling" => self.pooling.to_string(),
                "init_std" => self.init_std.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "{key}={v}");
        }
        out
    }
}

/// Splits `key=value` lines, keeping file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected key=value", i + 1)));
        };
        let k = k.trim().to_string();
        if seen.insert(k.clone(), i + 1).is_some() {
            return Err(Error::config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig {
            lr: 2.5e-4,
            seed: 9,
            objective: Objective::TokenLevel,
            prefix: "Which response is the most helpful, relevant, and correct?".into(),
            clip_norm: Some(1.0),
            ..TrainConfig::default()
        };
        cfg.set("frozen_layers", "1").unwrap();
        cfg.set("dora_rank", "8").unwrap();
        cfg.set("dora_targets", "wq,wv").unwrap();
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_kv(), cfg.to_kv());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_kv("lr=0").is_err());
        assert!(TrainConfig::from_kv("weight_decay=-1").is_err());
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("lr=1e-3\nlr=2e-3").is_err());
        assert!(TrainConfig::from_kv("just text").is_err());
        assert!(TrainConfig::from_kv("frozen_layers=3").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = TrainConfig::from_kv("# run\n\nseed = 4\n").unwrap();
        assert_eq!(cfg.seed, 4);
    }
}
