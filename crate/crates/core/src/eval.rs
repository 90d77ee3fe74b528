//! Pairwise preference scoring, category aggregation, the inference cost
//! model, and tradeoff emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::VERBALIZER_IDS;
use crate::data::{build_cloze, build_scaffold, ClozeInstance, Domain, Order, PreferencePair, TemplateSet, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{count_params, forward_mlm, forward_pooled, forward_token_labels, Checkpoint, HeadKind};
use crate::peft::merge_adapters;

/// Two-way probabilities closer than this count as a tie.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    One,
    Two,
    Tie,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResult {
    pub p1: f64,
    pub p2: f64,
    pub prediction: Prediction,
    pub source_id: String,
    pub order: Order,
}

impl ScoreResult {
    /// Restricted two-way softmax over the logits of options 1 and 2.
    pub fn from_logits(l1: f64, l2: f64, source_id: impl Into<String>, order: Order) -> Self {
        let p1 = 1.0 / (1.0 + (l2 - l1).exp());
        let p2 = 1.0 - p1;
        let prediction = if (p1 - p2).abs() < TIE_EPS {
            Prediction::Tie
        } else if p1 > p2 {
            Prediction::One
        } else {
            Prediction::Two
        };
        ScoreResult {
            p1,
            p2,
            prediction,
            source_id: source_id.into(),
            order,
        }
    }

    /// 1 if the prediction names the option holding the chosen response,
    /// 0.5 for a tie, else 0.
    pub fn credit(&self) -> f64 {
        match (self.prediction, self.order.gold_option()) {
            (Prediction::Tie, _) => 0.5,
            (Prediction::One, 0) | (Prediction::Two, 1) => 1.0,
            _ => 0.0,
        }
    }
}

/// Scores a cloze instance from the verbalizer logits at the mask slot.
pub fn score_pair(ck: &Checkpoint, inst: &ClozeInstance) -> Result<ScoreResult> {
    let logits = forward_mlm(ck, &inst.token_ids, inst.mask_position)?;
    let l = logits.data();
    Ok(ScoreResult::from_logits(
        l[VERBALIZER_IDS[0] as usize] as f64,
        l[VERBALIZER_IDS[1] as usize] as f64,
        &inst.source_id,
        inst.order,
    ))
}

/// Anything that can score one pair in one order.
pub trait PairScorer {
    fn score(&self, pair: &PreferencePair, order: Order) -> Result<ScoreResult>;

    fn gflops_per_token(&self) -> f64;
}

/// Scores pairs with a checkpoint under any of the three heads. Adapters are
/// merged up front so scoring runs on plain weights.
pub struct ModelScorer<'a> {
    ck: Checkpoint,
    tok: &'a Tokenizer,
    templates: &'a TemplateSet,
}

impl<'a> ModelScorer<'a> {
    pub fn new(ck: &Checkpoint, tok: &'a Tokenizer, templates: &'a TemplateSet) -> Result<Self> {
        let ck = if ck.has_adapters() { merge_adapters(ck)? } else { ck.clone() };
        Ok(ModelScorer { ck, tok, templates })
    }
}

impl PairScorer for ModelScorer<'_> {
    fn score(&self, pair: &PreferencePair, order: Order) -> Result<ScoreResult> {
        let cfg = &self.ck.config;
        let template = self.templates.for_domain(pair.domain);
        match cfg.head_kind {
            HeadKind::Mlm => {
                let inst = build_cloze(pair, template, order, self.tok, cfg.max_seq)?;
                score_pair(&self.ck, &inst)
            }
            HeadKind::PooledClassifier => {
                let inst = build_scaffold(pair, template, order, self.tok, cfg.max_seq)?;
                let l = forward_pooled(&self.ck, &inst.token_ids)?;
                Ok(ScoreResult::from_logits(l.data()[0] as f64, l.data()[1] as f64, &pair.id, order))
            }
            HeadKind::TokenClassifier => {
                let inst = build_scaffold(pair, template, order, self.tok, cfg.max_seq)?;
                let scores = forward_token_labels(&self.ck, &inst.token_ids)?;
                let mean = |k: usize| {
                    let span = inst.option_spans[k].clone();
                    let n = span.len().max(1) as f64;
                    scores.data()[span].iter().map(|&x| x as f64).sum::<f64>() / n
                };
                Ok(ScoreResult::from_logits(mean(0), mean(1), &pair.id, order))
            }
        }
    }

    fn gflops_per_token(&self) -> f64 {
        let c = &self.ck.config;
        flops_per_token(count_params(c), c.n_layers, c.hidden) / 1e9
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub name: String,
    pub accuracy: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub accuracy: f64,
    pub n_pairs: usize,
    /// Present only when the category's pairs carry subset labels.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subsets: Vec<SubsetScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chat: Option<CategoryScore>,
    pub reasoning: Option<CategoryScore>,
    pub safety: Option<CategoryScore>,
    /// Unweighted mean of the categories present.
    pub overall: f64,
    pub accuracy_original: f64,
    pub accuracy_swapped: f64,
    pub position_bias: f64,
    pub n_pairs: usize,
    pub n_skipped: usize,
    pub gflops_per_token: f64,
}

impl EvalReport {
    pub fn category(&self, d: Domain) -> Option<&CategoryScore> {
        match d {
            Domain::Chat => self.chat.as_ref(),
            Domain::Reasoning => self.reasoning.as_ref(),
            Domain::Safety => self.safety.as_ref(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>7}", "category", "accuracy", "pairs");
        for d in Domain::ALL {
            if let Some(c) = self.category(d) {
                let _ = writeln!(out, "{:<16} {:>8.4} {:>7}", d.as_str(), c.accuracy, c.n_pairs);
                for s in &c.subsets {
                    let _ = writeln!(out, "  {:<14} {:>8.4} {:>7}", s.name, s.accuracy, s.n_pairs);
                }
            }
        }
        let _ = writeln!(out, "{:<16} {:>8.4} {:>7}", "overall", self.overall, self.n_pairs);
        let _ = writeln!(out, "{:<16} {:>8.4}", "original-order", self.accuracy_original);
        let _ = writeln!(out, "{:<16} {:>8.4}", "swapped-order", self.accuracy_swapped);
        let _ = writeln!(out, "{:<16} {:>8.4}", "position-bias", self.position_bias);
        let _ = writeln!(out, "{:<16} {:>8}", "skipped", self.n_skipped);
        let _ = writeln!(out, "{:<16} {}", "gflops/token", format_gflops(self.gflops_per_token * 1e9));
        out
    }
}

#[derive(Default)]
struct Tally {
    credit: f64,
    trials: usize,
}

impl Tally {
    fn add(&mut self, c: f64) {
        self.credit += c;
        self.trials += 1;
    }

    fn accuracy(&self) -> f64 {
        self.credit / self.trials as f64
    }
}

/// Scores every pair in both orders, one trial per order. Pairs whose
/// rendering does not fit are skipped and counted.
pub fn eval_dataset(scorer: &impl PairScorer, pairs: &[PreferencePair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluation needs at least one pair"));
    }
    let mut by_order = [Tally::default(), Tally::default()];
    let mut by_domain: BTreeMap<Domain, BTreeMap<Option<&str>, Tally>> = BTreeMap::new();
    let mut n_skipped = 0;
    'pairs: for pair in pairs {
        let mut results = Vec::with_capacity(2);
        for order in Order::BOTH {
            match scorer.score(pair, order) {
                Ok(r) => results.push(r),
                Err(Error::Skip { .. }) => {
                    n_skipped += 1;
                    continue 'pairs;
                }
                Err(e) => return Err(e),
            }
        }
        let subsets = by_domain.entry(pair.domain).or_default();
        let tally = subsets.entry(pair.subset.as_deref()).or_default();
        for r in results {
            let c = r.credit();
            by_order[r.order.gold_option()].add(c);
            tally.add(c);
        }
    }
    if by_domain.is_empty() {
        return Err(Error::contract("every pair was skipped"));
    }

    let mut cats: BTreeMap<Domain, CategoryScore> = BTreeMap::new();
    for (d, subsets) in &by_domain {
        let parts: Vec<(f64, usize)> = subsets.values().map(|t| (t.accuracy(), t.trials)).collect();
        let accuracy = aggregate_chat(&parts)?;
        let labelled = subsets.keys().any(Option::is_some);
        let subsets_out = if labelled {
            subsets
                .iter()
                .map(|(name, t)| SubsetScore {
                    name: name.unwrap_or(d.as_str()).to_string(),
                    accuracy: t.accuracy(),
                    n_pairs: t.trials / 2,
                })
                .collect()
        } else {
            Vec::new()
        };
        cats.insert(
            *d,
            CategoryScore {
                accuracy,
                n_pairs: subsets.values().map(|t| t.trials).sum::<usize>() / 2,
                subsets: subsets_out,
            },
        );
    }
    let overall = cats.values().map(|c| c.accuracy).sum::<f64>() / cats.len() as f64;
    let (acc_o, acc_s) = (by_order[0].accuracy(), by_order[1].accuracy());
    Ok(EvalReport {
        chat: cats.remove(&Domain::Chat),
        reasoning: cats.remove(&Domain::Reasoning),
        safety: cats.remove(&Domain::Safety),
        overall,
        accuracy_original: acc_o,
        accuracy_swapped: acc_s,
        position_bias: (acc_o - acc_s).abs(),
        n_pairs: by_order[0].trials,
        n_skipped,
        gflops_per_token: scorer.gflops_per_token(),
    })
}

/// Trial-weighted mean `Σ accᵢ·nᵢ / Σ nᵢ`.
pub fn aggregate_chat(parts: &[(f64, usize)]) -> Result<f64> {
    if parts.is_empty() {
        return Err(Error::contract("no sub-scores to aggregate"));
    }
    if parts.iter().any(|&(_, n)| n == 0) {
        return Err(Error::contract("sub-score with zero examples"));
    }
    let total = parts.iter().map(|&(_, n)| n).sum::<usize>() as f64;
    Ok(parts.iter().map(|&(a, n)| a * (n as f64 / total)).sum())
}

/// Unweighted mean of the three category accuracies.
pub fn overall(chat: f64, reasoning: f64, safety: f64) -> f64 {
    (chat + reasoning + safety) / 3.0
}

/// Inference cost per token: `2N + 6N·L/H`.
pub fn flops_per_token(n_params: u64, layers: usize, hidden: usize) -> f64 {
    let n = n_params as f64;
    2.0 * n + 6.0 * n * layers as f64 / hidden as f64
}

/// `flops` in GFLOPs with three significant digits.
pub fn format_gflops(flops: f64) -> String {
    let g = flops / 1e9;
    if g == 0.0 || !g.is_finite() {
        return format!("{g:.2}");
    }
    let decimals = |x: f64| (2 - x.abs().log10().floor() as i32).max(0) as usize;
    let d = decimals(g);
    let s = format!("{g:.d$}");
    // Rounding can carry into a new leading digit (9.996 → 10.00).
    let d2 = decimals(s.parse::<f64>().unwrap_or(g));
    if d2 < d {
        format!("{g:.d2$}")
    } else {
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub gflops_per_token: f64,
    pub accuracy: f64,
}

/// CSV text for `points`, sorted by cost (stable for equal costs).
pub fn tradeoff_csv(points: &[TradeoffPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::contract("tradeoff needs at least one point"));
    }
    if let Some(p) = points.iter().find(|p| !(p.gflops_per_token > 0.0)) {
        return Err(Error::contract(format!("`{}` has non-positive cost", p.label)));
    }
    let mut sorted: Vec<&TradeoffPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.gflops_per_token.total_cmp(&b.gflops_per_token));
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in sorted {
        w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_tradeoff(points: &[TradeoffPoint], path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), tradeoff_csv(points)?.as_bytes())
}

pub fn parse_tradeoff(text: &str) -> Result<Vec<TradeoffPoint>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub objective: String,
    pub train_pairs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>6} {:>6} {:>6} {:>10} {:>6} {:>8}",
            "objective", "pairs", "steps", "batch", "epochs", "lr", "seed", "accuracy"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>7} {:>6} {:>6} {:>6} {:>10} {:>6} {:>8.4}",
                r.objective, r.train_pairs, r.steps, r.batch_size, r.epochs, r.lr, r.seed, r.heldout_accuracy
            );
        }
        out
    }
}

/// Trains one model per objective from `base` (same data, seed and budget)
/// and reports held-out accuracy side by side. The trained runs are returned
/// in row order.
pub fn compare_objectives(
    train: &[PreferencePair],
    heldout: &[PreferencePair],
    base: &crate::train::TrainConfig,
) -> Result<(CompareReport, Vec<crate::train::TrainOutcome>)> {
    use crate::train::Objective;
    if heldout.is_empty() {
        return Err(Error::config("comparison needs held-out pairs"));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for objective in [Objective::Cloze, Objective::Pooled, Objective::TokenLevel] {
        let cfg = crate::train::TrainConfig {
            objective,
            ..base.clone()
        };
        let out = crate::train::train(&cfg, train, heldout, None)?;
        let report = out.heldout.as_ref().expect("held-out set was given");
        rows.push(CompareRow {
            objective: objective.to_string(),
            train_pairs: train.len(),
            steps: out.total_steps,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            lr: cfg.lr,
            seed: cfg.seed,
            heldout_accuracy: report.overall,
        });
        runs.push(out);
    }
    Ok((CompareReport { rows }, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_tie() {
        let r = ScoreResult::from_logits(0.3, 0.3, "x", Order::Original);
        assert_eq!((r.p1, r.p2), (0.5, 0.5));
        assert_eq!(r.prediction, Prediction::Tie);
        assert_eq!(r.credit(), 0.5);
    }

    #[test]
    fn logistic_closed_form() {
        let r = ScoreResult::from_logits(10.0, 0.0, "x", Order::Original);
        assert!((r.p1 - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
        assert!((r.p1 - 0.9999546).abs() < 1e-7);
        assert_eq!(r.prediction, Prediction::One);
        assert_eq!(r.credit(), 1.0);
        let s = ScoreResult { order: Order::Swapped, ..r };
        assert_eq!(s.credit(), 0.0);
    }

    #[test]
    fn weighted_chat() {
        assert!((aggregate_chat(&[(0.9, 100), (0.6, 50)]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(aggregate_chat(&[(0.7, 3)]).unwrap(), 0.7);
        assert!((aggregate_chat(&[(0.2, 5), (0.6, 5)]).unwrap() - 0.4).abs() < 1e-12);
        assert!(aggregate_chat(&[]).is_err());
        assert!(aggregate_chat(&[(0.5, 0)]).is_err());
    }

    #[test]
    fn overall_matches_table_rows() {
        assert_eq!(format!("{:.1}", overall(78.8, 91.2, 89.3)), "86.4");
        assert_eq!(format!("{:.1}", overall(71.0, 76.7, 79.2)), "75.6");
        assert_eq!(overall(0.25, 0.25, 0.25), 0.25);
    }

    #[test]
    fn flops_examples() {
        assert_eq!(flops_per_token(1_000_000, 10, 100), 2.6e6);
        assert_eq!(format_gflops(2.6e6), "0.00260");
        assert_eq!(format_gflops(1.234e9), "1.23");
        assert_eq!(format_gflops(123.4e9), "123");
        assert_eq!(format_gflops(9.996e9), "10.0");
    }

    #[test]
    fn flops_tiny_ratio_limit() {
        let n = 1_000_000u64;
        let f = flops_per_token(n, 1, 1_000_000_000);
        // The L/H term leaves a relative excess of exactly 3·L/H over 2N.
        let rel = (f - 2.0 * n as f64) / (2.0 * n as f64);
        assert!((rel - 3e-9).abs() < 1e-6 * 3e-9, "{rel}");
        assert!(rel < f32::EPSILON as f64);
    }

    #[test]
    fn tradeoff_single_point() {
        let pts = vec![TradeoffPoint {
            label: "a".into(),
            gflops_per_token: 0.5,
            accuracy: 0.75,
        }];
        let csv = tradeoff_csv(&pts).unwrap();
        assert_eq!(csv, "label,gflops_per_token,accuracy\na,0.5,0.75\n");
        assert_eq!(parse_tradeoff(&csv).unwrap(), pts);
    }

    #[test]
    fn tradeoff_rejects_nonpositive_cost() {
        let pts = vec![TradeoffPoint {
            label: "z".into(),
            gflops_per_token: 0.0,
            accuracy: 0.5,
        }];
        assert!(tradeoff_csv(&pts).is_err());
        assert!(tradeoff_csv(&[]).is_err());
    }
}
