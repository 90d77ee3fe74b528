//! Both-orders evaluation, forced baselines and the objective comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyrm::data::{synth_generate, Domain, Order, PreferencePair, SynthTask};
use tinyrm::eval::{compare_objectives, eval_dataset, overall, PairScorer, Prediction, ScoreResult};
use tinyrm::train::trainer::{checkpoint_templates, checkpoint_tokenizer};
use tinyrm::train::TrainConfig;
use tinyrm::Result;

/// Scores from a lookup keyed by (pair id, order).
struct Table(Vec<(String, Order, f64, f64)>);

impl PairScorer for Table {
    fn score(&self, pair: &PreferencePair, order: Order) -> Result<ScoreResult> {
        let (_, _, l1, l2) = self.0.iter().find(|r| r.0 == pair.id && r.1 == order).unwrap();
        Ok(ScoreResult::from_logits(*l1, *l2, &pair.id, order))
    }

    fn gflops_per_token(&self) -> f64 {
        1.0
    }
}

/// Always prefers the same option slot.
struct Constant(f64, f64);

impl PairScorer for Constant {
    fn score(&self, pair: &PreferencePair, order: Order) -> Result<ScoreResult> {
        Ok(ScoreResult::from_logits(self.0, self.1, &pair.id, order))
    }

    fn gflops_per_token(&self) -> f64 {
        1.0
    }
}

fn mixed_pairs(n: usize) -> Vec<PreferencePair> {
    let mut out = synth_generate(SynthTask::Arithmetic, n, 1);
    out.extend(synth_generate(SynthTask::Refusal, n, 2));
    out.extend(synth_generate(SynthTask::Verbosity, n, 3));
    out
}

#[test]
fn constant_models_score_one_half() {
    let pairs = mixed_pairs(7);
    for s in [Constant(3.0, -1.0), Constant(-2.0, 5.0)] {
        let r = eval_dataset(&s, &pairs).unwrap();
        assert_eq!(r.overall, 0.5);
        assert_eq!(r.position_bias, 1.0);
        for d in Domain::ALL {
            assert_eq!(r.category(d).unwrap().accuracy, 0.5);
        }
    }
    let tie = eval_dataset(&Constant(0.7, 0.7), &pairs).unwrap();
    assert_eq!(tie.overall, 0.5);
    assert_eq!(tie.position_bias, 0.0);
    assert_eq!(tie.accuracy_original, 0.5);
}

#[test]
fn probabilities_are_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let r = ScoreResult::from_logits(a, b, "x", Order::Original);
        assert!((r.p1 + r.p2 - 1.0).abs() < 1e-6);
        assert_eq!(r.prediction == Prediction::One, a > b && r.p1 - r.p2 >= 1e-9);
    }
}

#[test]
fn four_pairs_against_brute_force() {
    let pairs: Vec<PreferencePair> = synth_generate(SynthTask::Arithmetic, 4, 9);
    // Logit rows: (pair, order, option-1 logit, option-2 logit).
    let rows = vec![
        (pairs[0].id.clone(), Order::Original, 2.0, 1.0), // right
        (pairs[0].id.clone(), Order::Swapped, 2.0, 1.0),  // wrong
        (pairs[1].id.clone(), Order::Original, 0.0, 3.0), // wrong
        (pairs[1].id.clone(), Order::Swapped, 0.0, 3.0),  // right
        (pairs[2].id.clone(), Order::Original, 1.0, 1.0), // tie
        (pairs[2].id.clone(), Order::Swapped, -1.0, 4.0), // right
        (pairs[3].id.clone(), Order::Original, 5.0, 0.0), // right
        (pairs[3].id.clone(), Order::Swapped, 0.0, 5.0),  // right
    ];
    let mut correct = 0.0;
    let (mut orig, mut swap) = (0.0, 0.0);
    for (_, order, l1, l2) in &rows {
        let gold_is_one = *order == Order::Original;
        let credit = if l1 == l2 {
            0.5
        } else if (l1 > l2) == gold_is_one {
            1.0
        } else {
            0.0
        };
        correct += credit;
        if gold_is_one {
            orig += credit;
        } else {
            swap += credit;
        }
    }
    let r = eval_dataset(&Table(rows), &pairs).unwrap();
    assert_eq!(r.overall, correct / 8.0);
    assert_eq!(r.overall, 5.5 / 8.0);
    assert_eq!(r.accuracy_original, orig / 4.0);
    assert_eq!(r.accuracy_swapped, swap / 4.0);
    assert_eq!(r.position_bias, (orig / 4.0 - swap / 4.0).abs());
    assert_eq!(r.n_pairs, 4);
}

#[test]
fn overall_averages_present_categories() {
    let pairs = mixed_pairs(4);
    let rows: Vec<_> = pairs
        .iter()
        .flat_map(|p| {
            let right = p.domain != Domain::Safety;
            Order::BOTH.map(|o| {
                let prefer_one = (o == Order::Original) == right;
                (p.id.clone(), o, if prefer_one { 1.0 } else { 0.0 }, if prefer_one { 0.0 } else { 1.0 })
            })
        })
        .collect();
    let r = eval_dataset(&Table(rows), &pairs).unwrap();
    assert_eq!(r.overall, overall(1.0, 1.0, 0.0));
    let only: Vec<_> = pairs.iter().filter(|p| p.domain == Domain::Safety).cloned().collect();
    let r = eval_dataset(&Constant(1.0, 0.0), &only).unwrap();
    assert!(r.chat.is_none() && r.reasoning.is_none());
    assert_eq!(r.overall, 0.5);
}

#[test]
fn empty_input_is_rejected() {
    assert!(eval_dataset(&Constant(1.0, 0.0), &[]).is_err());
}

#[test]
fn comparison_rows_cross_check() {
    let train = synth_generate(SynthTask::Refusal, 24, 1);
    let held = synth_generate(SynthTask::Refusal, 8, 2);
    let base = TrainConfig {
        n_layers: 1,
        hidden: 16,
        n_heads: 2,
        ffn_mult: 2,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let (report, runs) = compare_objectives(&train, &held, &base).unwrap();
    assert_eq!(report.rows.len(), 3);
    let names: Vec<&str> = report.rows.iter().map(|r| r.objective.as_str()).collect();
    assert_eq!(names, ["cloze", "pooled", "token-level"]);
    for (row, run) in report.rows.iter().zip(&runs) {
        let first = &report.rows[0];
        assert_eq!(
            (row.train_pairs, row.steps, row.batch_size, row.epochs, row.lr, row.seed),
            (first.train_pairs, first.steps, first.batch_size, first.epochs, first.lr, first.seed)
        );
        let tok = checkpoint_tokenizer(&run.checkpoint).unwrap();
        let templates = checkpoint_templates(&run.checkpoint).unwrap();
        let scorer = tinyrm::eval::ModelScorer::new(&run.checkpoint, &tok, &templates).unwrap();
        assert_eq!(eval_dataset(&scorer, &held).unwrap().overall, row.heldout_accuracy);
    }
    let (again, _) = compare_objectives(&train, &held, &base).unwrap();
    assert_eq!(again, report);
}
