//! Encoder forward passes recorded on a [`Tape`].

use std::collections::{BTreeSet, HashMap};

use crate::autodiff::{Tape, Var};
use crate::data::tokenizer::{CLS_ID, MASK_ID};
use crate::error::{Error, Result};
use crate::model::checkpoint::ADAPTER_PREFIX;
use crate::model::{names, Checkpoint, HeadKind, MatrixRole, ModelConfig, Pooling};
use crate::peft::{adapter_names, DORA_EPS};
use crate::tensor::{Tensor, LN_EPS};

/// Tape variables for one checkpoint: the effective weight of every base
/// tensor, plus the trainable leaves whose gradients the optimizer consumes.
pub struct Bound {
    effective: HashMap<String, Var>,
    pub trainable: Vec<(String, Var)>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.effective
            .get(name)
            .copied()
            .ok_or_else(|| Error::Manifest(name.to_string()))
    }
}

/// Records every tensor of `ck` on `tape`. Names in `trainable` become
/// trainable leaves; everything else is constant. Adapted matrices are bound
/// to their DoRA effective weight, with the base matrix held constant.
pub fn bind(tape: &mut Tape, ck: &Checkpoint, trainable: Option<&BTreeSet<String>>) -> Result<Bound> {
    let is_trainable = |n: &str| trainable.is_some_and(|t| t.contains(n));
    let mut effective = HashMap::new();
    let mut leaves = Vec::new();
    let mut leaf = |tape: &mut Tape, name: &str, t: &Tensor| {
        if is_trainable(name) {
            let v = tape.param(t.clone());
            leaves.push((name.to_string(), v));
            v
        } else {
            tape.constant(t.clone())
        }
    };

    for (name, t) in ck.weights.iter() {
        if name.starts_with(ADAPTER_PREFIX) {
            continue;
        }
        let [a_name, b_name, m_name] = adapter_names(name);
        let var = if ck.weights.contains(&a_name) {
            let w0 = tape.constant(t.clone());
            let a = leaf(tape, &a_name, ck.weights.get(&a_name)?);
            let b = leaf(tape, &b_name, ck.weights.get(&b_name)?);
            let m = leaf(tape, &m_name, ck.weights.get(&m_name)?);
            let delta = tape.matmul(b, a)?;
            let w = tape.add(w0, delta)?;
            tape.row_rescale(w, m, DORA_EPS)?
        } else {
            leaf(tape, name, t)
        };
        effective.insert(name.clone(), var);
    }
    Ok(Bound {
        effective,
        trainable: leaves,
    })
}

fn check_ids(config: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if ids.len() > config.max_seq {
        return Err(Error::Length {
            len: ids.len(),
            max: config.max_seq,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Index {
            index: bad as usize,
            len: config.vocab_size,
        });
    }
    Ok(())
}

/// Final-layer hidden states `[n×H]`. Attention is unmasked in both
/// directions.
pub fn encode(tape: &mut Tape, w: &Bound, config: &ModelConfig, ids: &[u32]) -> Result<Var> {
    check_ids(config, ids)?;
    let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let pos_ids: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.gather(w.get(names::TOKEN_EMBED)?, &tok_ids)?;
    let pos = tape.gather(w.get(names::POS_EMBED)?, &pos_ids)?;
    let mut x = tape.add(tok, pos)?;

    for l in 0..config.n_layers {
        let h = tape.layer_norm(x, w.get(&names::ln(l, 1, "gamma"))?, w.get(&names::ln(l, 1, "beta"))?, LN_EPS)?;
        let q = tape.matmul_nt(h, w.get(&MatrixRole::Wq.tensor_name(l))?)?;
        let k = tape.matmul_nt(h, w.get(&MatrixRole::Wk.tensor_name(l))?)?;
        let v = tape.matmul_nt(h, w.get(&MatrixRole::Wv.tensor_name(l))?)?;
        let ctx = tape.attention(q, k, v, config.n_heads)?;
        let o = tape.matmul_nt(ctx, w.get(&MatrixRole::Wo.tensor_name(l))?)?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, w.get(&names::ln(l, 2, "gamma"))?, w.get(&names::ln(l, 2, "beta"))?, LN_EPS)?;
        let up = tape.matmul_nt(h, w.get(&MatrixRole::W1.tensor_name(l))?)?;
        let act = tape.gelu(up)?;
        let down = tape.matmul_nt(act, w.get(&MatrixRole::W2.tensor_name(l))?)?;
        x = tape.add(x, down)?;
    }
    tape.layer_norm(x, w.get(names::FINAL_LN_GAMMA)?, w.get(names::FINAL_LN_BETA)?, LN_EPS)
}

fn head(tape: &mut Tape, w: &Bound, features: Var) -> Result<Var> {
    let z = tape.matmul_nt(features, w.get(names::HEAD_WEIGHT)?)?;
    tape.add_row(z, w.get(names::HEAD_BIAS)?)
}

fn expect_head(config: &ModelConfig, want: HeadKind) -> Result<()> {
    if config.head_kind != want {
        return Err(Error::contract(format!(
            "model has a {} head, operation needs {want}",
            config.head_kind
        )));
    }
    Ok(())
}

/// Vocabulary logits `[1×V]` at `mask_pos`.
pub fn mlm_logits(tape: &mut Tape, w: &Bound, config: &ModelConfig, ids: &[u32], mask_pos: usize) -> Result<Var> {
    expect_head(config, HeadKind::Mlm)?;
    match ids.get(mask_pos) {
        Some(&id) if id == MASK_ID => {}
        Some(_) => return Err(Error::contract(format!("position {mask_pos} does not hold the mask token"))),
        None => {
            return Err(Error::Index {
                index: mask_pos,
                len: ids.len(),
            })
        }
    }
    let hidden = encode(tape, w, config, ids)?;
    let row = tape.select_row(hidden, mask_pos)?;
    head(tape, w, row)
}

/// Two-way logits `[1×2]`; class 0 means option 1 is better.
pub fn pooled_logits(tape: &mut Tape, w: &Bound, config: &ModelConfig, ids: &[u32]) -> Result<Var> {
    expect_head(config, HeadKind::PooledClassifier)?;
    if config.pooling == Pooling::Cls && ids.first() != Some(&CLS_ID) {
        return Err(Error::contract("cls pooling needs the sequence to start with the CLS token"));
    }
    let hidden = encode(tape, w, config, ids)?;
    let pooled = match config.pooling {
        Pooling::Cls => tape.select_row(hidden, 0)?,
        Pooling::Mean => tape.mean_rows(hidden)?,
    };
    head(tape, w, pooled)
}

/// One logit per token, `[n×1]`.
pub fn token_logits(tape: &mut Tape, w: &Bound, config: &ModelConfig, ids: &[u32]) -> Result<Var> {
    expect_head(config, HeadKind::TokenClassifier)?;
    let hidden = encode(tape, w, config, ids)?;
    head(tape, w, hidden)
}

fn flatten(t: &Tensor) -> Tensor {
    Tensor::from_parts(vec![t.numel()], t.data().to_vec())
}

/// Full-vocabulary logits at the mask position.
pub fn forward_mlm(ck: &Checkpoint, ids: &[u32], mask_pos: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, ck, None)?;
    let out = mlm_logits(&mut tape, &w, &ck.config, ids, mask_pos)?;
    Ok(flatten(tape.value(out)))
}

pub fn forward_pooled(ck: &Checkpoint, ids: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, ck, None)?;
    let out = pooled_logits(&mut tape, &w, &ck.config, ids)?;
    Ok(flatten(tape.value(out)))
}

pub fn forward_token_labels(ck: &Checkpoint, ids: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, ck, None)?;
    let out = token_logits(&mut tape, &w, &ck.config, ids)?;
    Ok(flatten(tape.value(out)))
}

/// [`forward_mlm`] over a batch of `(ids, mask_pos)` inputs.
pub fn forward_mlm_batch(ck: &Checkpoint, batch: &[(Vec<u32>, usize)]) -> Result<Vec<Tensor>> {
    batch.iter().map(|(ids, m)| forward_mlm(ck, ids, *m)).collect()
}
