//! Encoder forward passes against a plain-loop f64 reference, plus the
//! structural properties of the heads.

use tinyrm::data::tokenizer::{CLS_ID, MASK_ID};
use tinyrm::model::{forward_mlm, forward_mlm_batch, forward_pooled, forward_token_labels, names, MatrixRole};
use tinyrm::model::{EncoderWeights, HeadKind, Pooling};
use tinyrm::{Checkpoint, ModelConfig, Tensor};

fn config(layers: usize, head_kind: HeadKind, pooling: Pooling) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        hidden: 8,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: 12,
        max_seq: 10,
        head_kind,
        pooling,
    }
}

fn checkpoint(cfg: ModelConfig, seed: u64) -> Checkpoint {
    // A larger init keeps attention away from uniform so the oracle is a real check.
    let w = EncoderWeights::init(&cfg, seed, 0.3).unwrap();
    Checkpoint::new(cfg, w).unwrap()
}

fn mat(ck: &Checkpoint, name: &str) -> Vec<Vec<f64>> {
    let t = ck.weights.get(name).unwrap();
    (0..t.rows()).map(|r| t.row(r).iter().map(|&x| x as f64).collect()).collect()
}

fn vector(ck: &Checkpoint, name: &str) -> Vec<f64> {
    ck.weights.get(name).unwrap().data().iter().map(|&x| x as f64).collect()
}

/// y = W x for W stored `d_out × d_in`.
fn apply(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Final hidden states, one row per token, written as nested loops.
fn reference_hidden(ck: &Checkpoint, ids: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &ck.config;
    let (h, heads) = (cfg.hidden, cfg.n_heads);
    let d = h / heads;
    let tok = mat(ck, names::TOKEN_EMBED);
    let pos = mat(ck, names::POS_EMBED);
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (0..h).map(|c| tok[id as usize][c] + pos[i][c]).collect())
        .collect();
    for l in 0..cfg.n_layers {
        let g1 = vector(ck, &names::ln(l, 1, "gamma"));
        let b1 = vector(ck, &names::ln(l, 1, "beta"));
        let hn: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &g1, &b1)).collect();
        let [wq, wk, wv, wo] = [MatrixRole::Wq, MatrixRole::Wk, MatrixRole::Wv, MatrixRole::Wo]
            .map(|r| mat(ck, &r.tensor_name(l)));
        let q: Vec<_> = hn.iter().map(|r| apply(&wq, r)).collect();
        let k: Vec<_> = hn.iter().map(|r| apply(&wk, r)).collect();
        let v: Vec<_> = hn.iter().map(|r| apply(&wv, r)).collect();
        let n = ids.len();
        let mut ctx = vec![vec![0.0; h]; n];
        for hd in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|c| q[i][hd * d + c] * k[j][hd * d + c]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let p = (scores[j] - m).exp() / z;
                    for c in 0..d {
                        ctx[i][hd * d + c] += p * v[j][hd * d + c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = apply(&wo, &ctx[i]);
            for c in 0..h {
                x[i][c] += o[c];
            }
        }
        let g2 = vector(ck, &names::ln(l, 2, "gamma"));
        let b2 = vector(ck, &names::ln(l, 2, "beta"));
        let w1 = mat(ck, &MatrixRole::W1.tensor_name(l));
        let w2 = mat(ck, &MatrixRole::W2.tensor_name(l));
        for row in x.iter_mut() {
            let up: Vec<f64> = apply(&w1, &layer_norm(row, &g2, &b2)).into_iter().map(gelu).collect();
            let down = apply(&w2, &up);
            for c in 0..h {
                row[c] += down[c];
            }
        }
    }
    let g = vector(ck, names::FINAL_LN_GAMMA);
    let b = vector(ck, names::FINAL_LN_BETA);
    x.iter().map(|r| layer_norm(r, &g, &b)).collect()
}

fn reference_head(ck: &Checkpoint, features: &[f64]) -> Vec<f64> {
    let w = mat(ck, names::HEAD_WEIGHT);
    let b = vector(ck, names::HEAD_BIAS);
    apply(&w, features).iter().zip(&b).map(|(a, b)| a + b).collect()
}

fn assert_close(got: &Tensor, want: &[f64], tol: f64) {
    assert_eq!(got.numel(), want.len());
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        assert!((g as f64 - w).abs() <= tol * (1.0 + w.abs()), "element {i}: {g} vs {w}");
    }
}

const IDS: [u32; 6] = [CLS_ID, 7, 9, MASK_ID, 4, 11];

#[test]
fn mlm_matches_loop_reference() {
    for layers in [1, 2] {
        for seed in 0..3 {
            let ck = checkpoint(config(layers, HeadKind::Mlm, Pooling::Cls), seed);
            let got = forward_mlm(&ck, &IDS, 3).unwrap();
            let want = reference_head(&ck, &reference_hidden(&ck, &IDS)[3]);
            assert_close(&got, &want, 1e-4);
        }
    }
}

#[test]
fn pooled_matches_reference_for_both_poolings() {
    let ck = checkpoint(config(2, HeadKind::PooledClassifier, Pooling::Cls), 4);
    let hidden = reference_hidden(&ck, &IDS);
    assert_close(&forward_pooled(&ck, &IDS).unwrap(), &reference_head(&ck, &hidden[0]), 1e-4);

    let ck = checkpoint(config(2, HeadKind::PooledClassifier, Pooling::Mean), 4);
    let hidden = reference_hidden(&ck, &IDS);
    let mean: Vec<f64> = (0..8).map(|c| hidden.iter().map(|r| r[c]).sum::<f64>() / IDS.len() as f64).collect();
    assert_close(&forward_pooled(&ck, &IDS).unwrap(), &reference_head(&ck, &mean), 1e-4);
}

#[test]
fn token_head_matches_reference() {
    let ck = checkpoint(config(2, HeadKind::TokenClassifier, Pooling::Cls), 5);
    let hidden = reference_hidden(&ck, &IDS);
    let want: Vec<f64> = hidden.iter().flat_map(|r| reference_head(&ck, r)).collect();
    assert_close(&forward_token_labels(&ck, &IDS).unwrap(), &want, 1e-4);
}

#[test]
fn attention_is_bidirectional() {
    // Changing a token after the mask moves the mask logits.
    let ck = checkpoint(config(2, HeadKind::Mlm, Pooling::Cls), 1);
    let a = forward_mlm(&ck, &IDS, 3).unwrap();
    let mut later = IDS;
    later[5] = 6;
    let b = forward_mlm(&ck, &later, 3).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-4);
}

#[test]
fn zero_weights_give_the_head_bias() {
    let cfg = config(2, HeadKind::Mlm, Pooling::Cls);
    let mut w = EncoderWeights::zeros(&cfg);
    let bias: Vec<f32> = (0..cfg.vocab_size).map(|i| i as f32 * 0.25 - 1.0).collect();
    w.insert(names::HEAD_BIAS, Tensor::new(vec![cfg.vocab_size], bias.clone()).unwrap());
    let ck = Checkpoint::new(cfg, w).unwrap();
    assert_eq!(forward_mlm(&ck, &IDS, 3).unwrap().data(), bias.as_slice());
}

#[test]
fn mean_pooling_ignores_token_order_without_positions() {
    let cfg = config(2, HeadKind::PooledClassifier, Pooling::Mean);
    let mut ck = checkpoint(cfg.clone(), 8);
    *ck.weights.get_mut(names::POS_EMBED).unwrap() = Tensor::zeros(vec![cfg.max_seq, cfg.hidden]);
    let a = forward_pooled(&ck, &[CLS_ID, 4, 5, 6, 7]).unwrap();
    let b = forward_pooled(&ck, &[7, 6, CLS_ID, 5, 4]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn batch_entries_are_independent() {
    let ck = checkpoint(config(2, HeadKind::Mlm, Pooling::Cls), 2);
    let single = forward_mlm(&ck, &IDS, 3).unwrap();
    let batch = vec![
        (vec![CLS_ID, MASK_ID, 4], 1),
        (IDS.to_vec(), 3),
        (vec![CLS_ID, 8, 8, 8, 8, 8, 8, MASK_ID], 7),
    ];
    let out = forward_mlm_batch(&ck, &batch).unwrap();
    assert_eq!(out[1], single);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut ck = checkpoint(config(2, HeadKind::Mlm, Pooling::Cls), 3);
    ck.meta.insert("note".into(), "x=1\ny".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.trm");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert_eq!(forward_mlm(&back, &IDS, 3).unwrap(), forward_mlm(&ck, &IDS, 3).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let ck = checkpoint(config(1, HeadKind::Mlm, Pooling::Cls), 0);
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());
}
