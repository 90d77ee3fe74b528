//! Property tests over randomly generated inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinyrm::data::{synth_generate, Order, PreferencePair, SynthTask};
use tinyrm::eval::{eval_dataset, flops_per_token, PairScorer, ScoreResult};
use tinyrm::model::{EncoderWeights, HeadKind, Pooling};
use tinyrm::peft::{dora_effective, dora_init, weight_average};
use tinyrm::train::{lr_linear, AdamW};
use tinyrm::{Checkpoint, ModelConfig, Tensor};

struct Logits(Vec<(f64, f64)>);

impl PairScorer for Logits {
    fn score(&self, pair: &PreferencePair, order: Order) -> tinyrm::Result<ScoreResult> {
        let i: usize = pair.id.parse().unwrap();
        let (l1, l2) = self.0[2 * i + order.gold_option()];
        Ok(ScoreResult::from_logits(l1, l2, &pair.id, order))
    }

    fn gflops_per_token(&self) -> f64 {
        1.0
    }
}

fn numbered(n: usize) -> Vec<PreferencePair> {
    synth_generate(SynthTask::Arithmetic, n, 0)
        .into_iter()
        .enumerate()
        .map(|(i, mut p)| {
            p.id = i.to_string();
            p
        })
        .collect()
}

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        hidden: 4,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: vocab,
        max_seq: 6,
        head_kind: HeadKind::Mlm,
        pooling: Pooling::Cls,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn restricted_softmax_is_normalised(a in -80.0f64..80.0, b in -80.0f64..80.0) {
        let r = ScoreResult::from_logits(a, b, "p", Order::Original);
        prop_assert!((r.p1 + r.p2 - 1.0).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&r.p1));
    }

    #[test]
    fn both_orders_accuracy_matches_brute_force(
        logits in prop::collection::vec((-3i32..3, -3i32..3), 2..40)
    ) {
        let n = logits.len() / 2;
        prop_assume!(n > 0);
        let table: Vec<(f64, f64)> = logits[..2 * n].iter().map(|&(a, b)| (a as f64, b as f64)).collect();
        let mut credit = 0.0;
        for (k, &(l1, l2)) in table.iter().enumerate() {
            let gold_one = k % 2 == 0;
            credit += if l1 == l2 { 0.5 } else if (l1 > l2) == gold_one { 1.0 } else { 0.0 };
        }
        let r = eval_dataset(&Logits(table), &numbered(n)).unwrap();
        prop_assert_eq!(r.overall, credit / (2 * n) as f64);
    }

    #[test]
    fn constant_prediction_scores_one_half(a in -5.0f64..5.0, b in -5.0f64..5.0, n in 1usize..30) {
        let r = eval_dataset(&Logits(vec![(a, b); 2 * n]), &numbered(n)).unwrap();
        prop_assert_eq!(r.overall, 0.5);
    }

    #[test]
    fn flops_monotone(n in 1u64..1u64 << 40, l in 0usize..200, h in 1usize..10_000) {
        let f = flops_per_token(n, l, h);
        prop_assert!(flops_per_token(n + 1, l, h) > f);
        prop_assert!(flops_per_token(n, l + 1, h) > f);
        if l > 0 {
            prop_assert!(flops_per_token(n, l, h + 1) < f);
        }
    }

    #[test]
    fn schedule_is_bounded_and_non_increasing(total in 1usize..10_000, lr in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for step in [0, total / 3, total / 2, total] {
            let x = lr_linear(step, total, lr);
            prop_assert!((0.0..=lr).contains(&x));
            prop_assert!(x <= prev);
            prev = x;
        }
    }

    #[test]
    fn zero_gradient_steps_decay_geometrically(
        p0 in prop::collection::vec(-10.0f32..10.0, 1..16),
        lr in 1e-4f64..1e-2,
        wd in 0.0f64..1.0,
        n in 1i32..50,
    ) {
        let mut w = EncoderWeights::new();
        w.insert("p", Tensor::new(vec![p0.len()], p0.clone()).unwrap());
        let mut opt = AdamW::new([("p", w.get("p").unwrap())], wd);
        let zero: BTreeMap<String, Tensor> = [("p".to_string(), Tensor::zeros(vec![p0.len()]))].into();
        for _ in 0..n {
            opt.step(&mut w, &zero, lr).unwrap();
        }
        let factor = (1.0 - lr * wd).powi(n);
        for (&got, &x) in w.get("p").unwrap().data().iter().zip(&p0) {
            let want = x as f64 * factor;
            prop_assert!((got as f64 - want).abs() <= 1e-5 * want.abs().max(1e-6));
        }
    }

    #[test]
    fn fresh_dora_is_identity(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| ((i * 7 + seed as usize) % 11) as f32 - 5.0).collect()).unwrap();
        let rank = 1 + (seed as usize) % rows.min(cols);
        let adapter = dora_init("w", &w0, rank, &mut rng).unwrap();
        prop_assert!(dora_effective(&w0, &adapter).unwrap().max_abs_diff(&w0) < 1e-5);
    }

    #[test]
    fn averaging_is_permutation_invariant(seeds in prop::collection::vec(0u64..1000, 1..5)) {
        let cks: Vec<Checkpoint> = seeds.iter().map(|&s| Checkpoint::init(small_config(8), s).unwrap()).collect();
        let avg = weight_average(&cks).unwrap();
        let mut rev = cks.clone();
        rev.reverse();
        prop_assert_eq!(&weight_average(&rev).unwrap().weights, &avg.weights);
        prop_assert_eq!(&weight_average(&[avg.clone(), avg.clone()]).unwrap().weights, &avg.weights);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000, vocab in 6usize..20) {
        let ck = Checkpoint::init(small_config(vocab), seed).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        prop_assert_eq!(back, ck);
    }
}
