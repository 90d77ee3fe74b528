//! The epoch loop: rendering, per-example gradients, batch averaging and
//! AdamW updates, with a held-out accuracy trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{build_cloze, build_scaffold, Order, PreferencePair, TemplateSet, Tokenizer, DEFAULT_PREFIXES};
use crate::error::{Error, Result};
use crate::eval::{eval_dataset, EvalReport, ModelScorer};
use crate::model::forward::bind;
use crate::model::{Checkpoint, EncoderWeights, HeadKind};
use crate::peft::{attach_adapters, trainable_manifest};
use crate::tensor::Tensor;
use crate::train::objective::{example_loss, Example};
use crate::train::optim::{clip_global_norm, lr_linear, AdamW};
use crate::train::{OrderPolicy, TrainConfig};

/// Checkpoint metadata keys written by training.
pub const META_VOCAB: &str = "vocab";
pub const META_PREFIX: &str = "prefix";
pub const META_TEMPLATES: &str = "domain_prefixes";

const ADAPTER_SEED_SALT: u64 = 0x00d0_7a5e_ed00;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub heldout_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub tokenizer: Tokenizer,
    pub templates: TemplateSet,
    pub trace: Vec<TraceRow>,
    pub total_steps: usize,
    /// Training pairs that could not be rendered within `max_seq`.
    pub skipped: usize,
    /// Held-out report for the final weights, if a held-out set was given.
    pub heldout: Option<EvalReport>,
}

/// Trace as CSV with header `step,lr,loss,heldout_acc`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,loss,heldout_acc\n");
    for r in trace {
        let acc = r.heldout_acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, acc);
    }
    out
}

/// Pair indices and option orders for one epoch. The permutation and the
/// per-pair orders come from one stream keyed by `(seed, epoch)`.
pub fn epoch_plan(n: usize, seed: u64, epoch: usize, policy: OrderPolicy) -> Vec<(usize, Order)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    if policy == OrderPolicy::Both {
        let mut plan: Vec<(usize, Order)> = (0..n).flat_map(|i| Order::BOTH.map(|o| (i, o))).collect();
        plan.shuffle(&mut rng);
        return plan;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.into_iter()
        .map(|i| {
            let swap = policy == OrderPolicy::Shuffled && rng.random_bool(0.5);
            (i, if swap { Order::Swapped } else { Order::Original })
        })
        .collect()
}

/// Vocabulary over every text the run can render.
pub fn build_tokenizer(templates: &TemplateSet, sets: &[&[PreferencePair]]) -> Tokenizer {
    let mut corpus: Vec<&str> = DEFAULT_PREFIXES.to_vec();
    for t in templates.templates() {
        corpus.extend(t.scaffold_texts());
    }
    for set in sets {
        for p in *set {
            corpus.extend([p.prompt.as_str(), p.chosen.as_str(), p.rejected.as_str()]);
        }
    }
    Tokenizer::build(corpus)
}

/// Tokenizer stored in a checkpoint's metadata.
pub fn checkpoint_tokenizer(ck: &Checkpoint) -> Result<Tokenizer> {
    let json = ck
        .meta
        .get(META_VOCAB)
        .ok_or_else(|| Error::Format("checkpoint has no stored vocabulary".into()))?;
    Tokenizer::from_json(json)
}

/// Prompt templates recorded in a checkpoint's metadata.
pub fn checkpoint_templates(ck: &Checkpoint) -> Result<TemplateSet> {
    if ck.meta.get(META_TEMPLATES).is_some_and(|v| v == "true") {
        return Ok(TemplateSet::domain_prefixes());
    }
    let prefix = ck.meta.get(META_PREFIX).map_or(DEFAULT_PREFIXES[0], String::as_str);
    Ok(TemplateSet::single(crate::data::ClozeTemplate::with_prefix(prefix)))
}

fn render(
    pair: &PreferencePair,
    templates: &TemplateSet,
    order: Order,
    tok: &Tokenizer,
    head: HeadKind,
    max_seq: usize,
) -> Result<Example> {
    let t = templates.for_domain(pair.domain);
    Ok(match head {
        HeadKind::Mlm => Example::Cloze(build_cloze(pair, t, order, tok, max_seq)?),
        _ => Example::Scaffold(build_scaffold(pair, t, order, tok, max_seq)?),
    })
}

/// Loss and gradients of one example with respect to `trainable`.
fn example_grads(
    ck: &Checkpoint,
    trainable: &BTreeSet<String>,
    ex: &Example,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, ck, Some(trainable))?;
    let loss = example_loss(&mut tape, &w, &ck.config, ex)?;
    let value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;
    let out = w
        .trainable
        .iter()
        .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
        .collect();
    Ok((value, out))
}

/// Trains with one prefix for every pair.
pub fn train(
    cfg: &TrainConfig,
    train_pairs: &[PreferencePair],
    heldout: &[PreferencePair],
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let templates = TemplateSet::single(crate::data::ClozeTemplate::with_prefix(cfg.prefix.clone()));
    train_with_templates(cfg, &templates, train_pairs, heldout, init)
}

/// All-at-once training: every tagged dataset is concatenated in the given
/// order, each pair is rendered with its domain's prefix, and the union is
/// shuffled and trained as a single run.
pub fn train_aao(
    cfg: &TrainConfig,
    datasets: &[(String, Vec<PreferencePair>)],
    heldout: &[PreferencePair],
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if datasets.len() < 2 {
        return Err(Error::config("all-at-once training needs at least two datasets"));
    }
    let all: Vec<PreferencePair> = datasets.iter().flat_map(|(_, d)| d.iter().cloned()).collect();
    train_with_templates(cfg, &TemplateSet::domain_prefixes(), &all, heldout, init)
}

pub fn train_with_templates(
    cfg: &TrainConfig,
    templates: &TemplateSet,
    train_pairs: &[PreferencePair],
    heldout: &[PreferencePair],
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::config("training set is empty"));
    }

    let (mut ck, tok) = match init {
        Some(base) => {
            if base.config.head_kind != cfg.head_kind() {
                return Err(Error::config(format!(
                    "initial checkpoint has a {} head, objective `{}` needs {}",
                    base.config.head_kind,
                    cfg.objective,
                    cfg.head_kind()
                )));
            }
            (base.clone(), checkpoint_tokenizer(base)?)
        }
        None => {
            let tok = build_tokenizer(templates, &[train_pairs, heldout]);
            {
                let config = cfg.model_config(tok.len());
                let weights = EncoderWeights::init(&config, cfg.seed, cfg.init_std)?;
                (Checkpoint::new(config, weights)?, tok)
            }
        }
    };
    ck.meta.insert(META_VOCAB.into(), tok.to_json());
    if templates.per_domain.is_empty() {
        ck.meta.insert(META_PREFIX.into(), templates.default.prefix.clone());
        ck.meta.remove(META_TEMPLATES);
    } else {
        ck.meta.insert(META_TEMPLATES.into(), "true".into());
        ck.meta.remove(META_PREFIX);
    }
    if let Some(spec) = &cfg.dora {
        attach_adapters(&mut ck, spec, &cfg.freeze, cfg.seed ^ ADAPTER_SEED_SALT)?;
    }
    let trainable = trainable_manifest(&ck, &cfg.freeze)?;
    let mut opt = AdamW::for_manifest(&ck.weights, &trainable, cfg.weight_decay)?;

    let head = ck.config.head_kind;
    let max_seq = ck.config.max_seq;
    let mut rendered: Vec<Option<[Example; 2]>> = Vec::with_capacity(train_pairs.len());
    let mut skipped = 0;
    for p in train_pairs {
        let pair = Order::BOTH.map(|o| render(p, templates, o, &tok, head, max_seq));
        match pair {
            [Ok(a), Ok(b)] => rendered.push(Some([a, b])),
            [Err(Error::Skip { .. }), _] | [_, Err(Error::Skip { .. })] => {
                skipped += 1;
                rendered.push(None);
            }
            [Err(e), _] | [_, Err(e)] => return Err(e),
        }
    }
    if skipped == train_pairs.len() {
        return Err(Error::config("no training pair fits within max_seq"));
    }

    let per_pair = if cfg.order_policy == OrderPolicy::Both { 2 } else { 1 };
    let per_epoch = (per_pair * (train_pairs.len() - skipped)).div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan: Vec<&Example> = epoch_plan(train_pairs.len(), cfg.seed, epoch, cfg.order_policy)
            .into_iter()
            .filter_map(|(i, o)| rendered[i].as_ref().map(|r| &r[o.gold_option()]))
            .collect();
        for batch in plan.chunks(cfg.batch_size) {
            let lr = lr_linear(step, total_steps, cfg.lr);
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut loss_sum = 0.0;
            for ex in batch {
                let (loss, grads) = example_grads(&ck, &trainable, ex)?;
                loss_sum += loss;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let loss = loss_sum / batch.len() as f64;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let scale = 1.0 / batch.len() as f32;
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut sum, max);
            }
            opt.step(&mut ck.weights, &sum, lr)?;

            let due = step == total_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
            let heldout_acc = if due && !heldout.is_empty() {
                Some(eval_dataset(&ModelScorer::new(&ck, &tok, templates)?, heldout)?.overall)
            } else {
                None
            };
            trace.push(TraceRow {
                step,
                lr,
                loss,
                heldout_acc,
            });
        }
    }
    if !ck.weights.iter().all(|(_, t)| t.is_finite()) {
        return Err(Error::Divergence {
            step,
            loss: f64::NAN,
        });
    }
    let report = if heldout.is_empty() {
        None
    } else {
        Some(eval_dataset(&ModelScorer::new(&ck, &tok, templates)?, heldout)?)
    };
    Ok(TrainOutcome {
        checkpoint: ck,
        tokenizer: tok,
        templates: templates.clone(),
        trace,
        total_steps,
        skipped,
        heldout: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_is_a_permutation() {
        let plan = epoch_plan(100, 3, 0, OrderPolicy::Shuffled);
        let mut idx: Vec<usize> = plan.iter().map(|p| p.0).collect();
        idx.sort();
        assert_eq!(idx, (0..100).collect::<Vec<_>>());
        assert!(plan.iter().any(|p| p.1 == Order::Swapped));
        assert!(plan.iter().any(|p| p.1 == Order::Original));
        assert_ne!(plan, epoch_plan(100, 3, 1, OrderPolicy::Shuffled));
        assert_eq!(plan, epoch_plan(100, 3, 0, OrderPolicy::Shuffled));
    }

    #[test]
    fn fixed_policy_keeps_original_order() {
        assert!(epoch_plan(50, 1, 0, OrderPolicy::Fixed)
            .iter()
            .all(|p| p.1 == Order::Original));
    }

    #[test]
    fn trace_csv_header() {
        let csv = trace_csv(&[TraceRow {
            step: 1,
            lr: 0.5,
            loss: 0.25,
            heldout_acc: None,
        }]);
        assert_eq!(csv, "step,lr,loss,heldout_acc\n1,0.5,0.25,\n");
    }
}
