//! Seeded random search over learning rate, adapter rank, frozen layers and
//! instruction prefix.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::peft::{AdapterSpec, AdapterTargets, FreezeSpec};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    /// Inclusive bounds of the log-uniform learning-rate range.
    pub lr_range: (f64, f64),
    /// Candidate adapter ranks; 0 means full finetuning.
    pub ranks: Vec<usize>,
    /// Inclusive range of frozen lower layers.
    pub frozen_range: (usize, usize),
    pub prefixes: Vec<String>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            lr_range: (1e-4, 3e-3),
            ranks: vec![0, 4, 8],
            frozen_range: (0, 1),
            prefixes: crate::data::DEFAULT_PREFIXES.iter().map(|s| s.to_string()).collect(),
            trials: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialParams {
    pub trial: usize,
    pub lr: f64,
    pub rank: usize,
    pub frozen_layers: usize,
    pub prefix: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub params: TrialParams,
    pub accuracy: f64,
    pub gflops_per_token: f64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lr_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("learning-rate range must satisfy 0 < lo <= hi"));
        }
        if self.ranks.is_empty() || self.prefixes.is_empty() {
            return Err(Error::config("rank and prefix choice sets must be non-empty"));
        }
        if self.frozen_range.0 > self.frozen_range.1 {
            return Err(Error::config("frozen-layer range is empty"));
        }
        if self.trials == 0 {
            return Err(Error::config("trial count must be at least 1"));
        }
        Ok(())
    }

    /// Draws every trial's hyperparameters up front, in trial order.
    pub fn sample(&self) -> Result<Vec<TrialParams>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.lr_range;
        Ok((0..self.trials)
            .map(|trial| {
                let lr = if lo == hi {
                    lo
                } else {
                    rng.random_range(lo.ln()..hi.ln()).exp().clamp(lo, hi)
                };
                TrialParams {
                    trial,
                    lr,
                    rank: *self.ranks.choose(&mut rng).expect("non-empty"),
                    frozen_layers: rng.random_range(self.frozen_range.0..=self.frozen_range.1),
                    prefix: self.prefixes.choose(&mut rng).expect("non-empty").clone(),
                }
            })
            .collect())
    }
}

impl TrialParams {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let targets = base.dora.as_ref().map(|d| d.targets.clone()).unwrap_or_else(AdapterTargets::default);
        TrainConfig {
            lr: self.lr,
            freeze: FreezeSpec::lower(self.frozen_layers),
            dora: (self.rank > 0).then(|| AdapterSpec {
                rank: self.rank,
                targets,
            }),
            prefix: self.prefix.clone(),
            ..base.clone()
        }
    }
}

/// Trains and evaluates every trial, then ranks by held-out accuracy
/// (descending), cost (ascending) and trial index.
pub fn sweep(
    spec: &SweepSpec,
    base: &TrainConfig,
    train_pairs: &[PreferencePair],
    heldout: &[PreferencePair],
) -> Result<Vec<TrialRow>> {
    if heldout.is_empty() {
        return Err(Error::config("sweep needs a held-out split"));
    }
    if spec.frozen_range.1 > base.n_layers {
        return Err(Error::config(format!(
            "cannot freeze up to {} of {} layers",
            spec.frozen_range.1, base.n_layers
        )));
    }
    let mut rows = Vec::with_capacity(spec.trials);
    for params in spec.sample()? {
        let out = train(&params.apply(base), train_pairs, heldout, None)?;
        let report = out.heldout.expect("held-out split is non-empty");
        rows.push(TrialRow {
            params,
            accuracy: report.overall,
            gflops_per_token: report.gflops_per_token,
        });
    }
    rank_trials(&mut rows);
    Ok(rows)
}

pub fn rank_trials(rows: &mut [TrialRow]) {
    rows.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(a.gflops_per_token.total_cmp(&b.gflops_per_token))
            .then(a.params.trial.cmp(&b.params.trial))
    });
}

pub fn sweep_csv(rows: &[TrialRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["trial", "lr", "dora_rank", "frozen_layers", "prefix", "accuracy", "gflops_per_token"])
        .map_err(err)?;
    for r in rows {
        let p = &r.params;
        let mut fields = [String::new(), String::new(), String::new(), String::new()];
        let _ = write!(fields[0], "{}", p.trial);
        let _ = write!(fields[1], "{}", p.lr);
        let _ = write!(fields[2], "{}", p.rank);
        let _ = write!(fields[3], "{}", p.frozen_layers);
        w.write_record([
            fields[0].as_str(),
            &fields[1],
            &fields[2],
            &fields[3],
            &p.prefix,
            &r.accuracy.to_string(),
            &r.gflops_per_token.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_lrs_stay_in_range() {
        let spec = SweepSpec {
            lr_range: (1e-5, 1e-3),
            trials: 100,
            seed: 11,
            ..SweepSpec::default()
        };
        let trials = spec.sample().unwrap();
        assert_eq!(trials.len(), 100);
        for t in &trials {
            assert!((1e-5..=1e-3).contains(&t.lr), "{}", t.lr);
            assert!(spec.ranks.contains(&t.rank));
            assert!(t.frozen_layers <= 1);
            assert!(spec.prefixes.contains(&t.prefix));
        }
        assert_eq!(trials, spec.sample().unwrap());
    }

    #[test]
    fn empty_ranges_rejected() {
        let bad = |f: fn(&mut SweepSpec)| {
            let mut s = SweepSpec::default();
            f(&mut s);
            s.validate().is_err()
        };
        assert!(bad(|s| s.ranks.clear()));
        assert!(bad(|s| s.prefixes.clear()));
        assert!(bad(|s| s.lr_range = (1e-3, 1e-4)));
        assert!(bad(|s| s.frozen_range = (2, 1)));
        assert!(bad(|s| s.trials = 0));
    }

    #[test]
    fn ranking_breaks_ties_by_cost_then_index() {
        let row = |trial, accuracy, gflops_per_token| TrialRow {
            params: TrialParams {
                trial,
                lr: 1e-3,
                rank: 0,
                frozen_layers: 0,
                prefix: "p".into(),
            },
            accuracy,
            gflops_per_token,
        };
        let mut rows = vec![row(0, 0.5, 1.0), row(1, 0.9, 2.0), row(2, 0.9, 1.0), row(3, 0.9, 1.0)];
        rank_trials(&mut rows);
        let order: Vec<usize> = rows.iter().map(|r| r.params.trial).collect();
        assert_eq!(order, vec![2, 3, 1, 0]);
    }
}
