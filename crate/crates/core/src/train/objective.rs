//! The three training objectives: masked-token cloze, pooled two-way
//! classification, and per-token binary labelling.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::data::{ClozeInstance, ScaffoldInstance};
use crate::error::{Error, Result};
use crate::model::forward::{bind, mlm_logits, pooled_logits, token_logits, Bound};
use crate::model::{Checkpoint, HeadKind, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Objective {
    #[default]
    Cloze,
    Pooled,
    TokenLevel,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Cloze, Objective::Pooled, Objective::TokenLevel];

    pub fn head_kind(self) -> HeadKind {
        match self {
            Objective::Cloze => HeadKind::Mlm,
            Objective::Pooled => HeadKind::PooledClassifier,
            Objective::TokenLevel => HeadKind::TokenClassifier,
        }
    }

    pub fn for_head(kind: HeadKind) -> Self {
        match kind {
            HeadKind::Mlm => Objective::Cloze,
            HeadKind::PooledClassifier => Objective::Pooled,
            HeadKind::TokenClassifier => Objective::TokenLevel,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cloze => "cloze",
            Objective::Pooled => "pooled",
            Objective::TokenLevel => "token-level",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cloze" => Ok(Objective::Cloze),
            "pooled" => Ok(Objective::Pooled),
            "token-level" | "token" => Ok(Objective::TokenLevel),
            _ => Err(Error::config(format!("unknown objective `{s}`"))),
        }
    }
}

/// A rendered training/eval record for any objective.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Example {
    Cloze(ClozeInstance),
    Scaffold(ScaffoldInstance),
}

/// Cross-entropy of the gold verbalizer over the full vocabulary.
pub fn cloze_loss(tape: &mut Tape, w: &Bound, cfg: &ModelConfig, inst: &ClozeInstance) -> Result<Var> {
    let logits = mlm_logits(tape, w, cfg, &inst.token_ids, inst.mask_position)?;
    tape.cross_entropy(logits, inst.gold_verbalizer as usize)
}

/// Two-way cross-entropy; class 0 means option 1 holds the chosen response.
pub fn pooled_loss(tape: &mut Tape, w: &Bound, cfg: &ModelConfig, inst: &ScaffoldInstance) -> Result<Var> {
    let logits = pooled_logits(tape, w, cfg, &inst.token_ids)?;
    tape.cross_entropy(logits, inst.gold_option())
}

/// Mean binary cross-entropy with label 1 on chosen-response tokens and 0 on
/// rejected-response tokens. Scaffold tokens carry no label.
pub fn token_level_loss(tape: &mut Tape, w: &Bound, cfg: &ModelConfig, inst: &ScaffoldInstance) -> Result<Var> {
    let (idx, labels) = token_labels(inst)?;
    let scores = token_logits(tape, w, cfg, &inst.token_ids)?;
    tape.bce_with_logits(scores, &idx, &labels)
}

/// Positions and 0/1 labels of every response token in `inst`.
pub fn token_labels(inst: &ScaffoldInstance) -> Result<(Vec<usize>, Vec<f32>)> {
    let chosen = &inst.option_spans[inst.gold_option()];
    let rejected = &inst.option_spans[1 - inst.gold_option()];
    if chosen.is_empty() || rejected.is_empty() {
        return Err(Error::contract(format!("empty response span in `{}`", inst.source_id)));
    }
    let mut idx = Vec::with_capacity(chosen.len() + rejected.len());
    let mut labels = Vec::with_capacity(idx.capacity());
    for i in inst.option_spans[0].clone().chain(inst.option_spans[1].clone()) {
        idx.push(i);
        labels.push(if chosen.contains(&i) { 1.0 } else { 0.0 });
    }
    Ok((idx, labels))
}

pub fn example_loss(tape: &mut Tape, w: &Bound, cfg: &ModelConfig, ex: &Example) -> Result<Var> {
    match (ex, cfg.head_kind) {
        (Example::Cloze(i), _) => cloze_loss(tape, w, cfg, i),
        (Example::Scaffold(i), HeadKind::TokenClassifier) => token_level_loss(tape, w, cfg, i),
        (Example::Scaffold(i), _) => pooled_loss(tape, w, cfg, i),
    }
}

fn eager(ck: &Checkpoint, f: impl FnOnce(&mut Tape, &Bound) -> Result<Var>) -> Result<f32> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, ck, None)?;
    let loss = f(&mut tape, &w)?;
    Ok(tape.value(loss).data()[0])
}

pub fn loss_cloze(ck: &Checkpoint, inst: &ClozeInstance) -> Result<f32> {
    eager(ck, |t, w| cloze_loss(t, w, &ck.config, inst))
}

pub fn loss_pooled(ck: &Checkpoint, inst: &ScaffoldInstance) -> Result<f32> {
    eager(ck, |t, w| pooled_loss(t, w, &ck.config, inst))
}

pub fn loss_token_level(ck: &Checkpoint, inst: &ScaffoldInstance) -> Result<f32> {
    eager(ck, |t, w| token_level_loss(t, w, &ck.config, inst))
}
