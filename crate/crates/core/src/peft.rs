//! Weight-decomposed low-rank adapters, layer freezing, adapter merging and
//! checkpoint averaging.
//!
//! An adapted matrix `W0` (`d_out×d_in`) is replaced at forward time by
//!
//! ```text
//! W' = m ⊙ (W0 + B·A) / rownorm(W0 + B·A)
//! ```
//!
//! with `A: r×d_in`, `B: d_out×r`, `m: d_out`. Norms are taken per output
//! feature (per stored row). `W0` itself never receives gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::checkpoint::ADAPTER_PREFIX;
use crate::model::{names, Checkpoint, MatrixRole};
use crate::tensor::{expect_matrix, kernels, Tensor};

/// Floor on row norms inside the direction normalisation.
pub const DORA_EPS: f64 = 1e-8;

/// Which matrix roles receive adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterTargets(BTreeSet<MatrixRole>);

impl AdapterTargets {
    pub fn new(roles: impl IntoIterator<Item = MatrixRole>) -> Result<Self> {
        let set: BTreeSet<_> = roles.into_iter().collect();
        if set.is_empty() {
            return Err(Error::config("adapter targets must be non-empty"));
        }
        Ok(AdapterTargets(set))
    }

    pub fn contains(&self, role: MatrixRole) -> bool {
        self.0.contains(&role)
    }

    pub fn iter(&self) -> impl Iterator<Item = MatrixRole> + '_ {
        self.0.iter().copied()
    }
}

impl Default for AdapterTargets {
    fn default() -> Self {
        AdapterTargets(MatrixRole::ALL.into_iter().collect())
    }
}

impl fmt::Display for AdapterTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|r| r.as_str()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for AdapterTargets {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let roles = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(MatrixRole::from_str)
            .collect::<Result<Vec<_>>>()?;
        AdapterTargets::new(roles)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterSpec {
    pub rank: usize,
    pub targets: AdapterTargets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoraAdapter {
    pub base: String,
    pub a: Tensor,
    pub b: Tensor,
    pub m: Tensor,
    pub rank: usize,
}

/// Tensor names `[A, B, m]` of the adapter attached to `base`.
pub fn adapter_names(base: &str) -> [String; 3] {
    ["a", "b", "m"].map(|p| format!("{ADAPTER_PREFIX}{base}.{p}"))
}

fn row_norms(w: &Tensor) -> Vec<f32> {
    (0..w.rows()).map(|r| kernels::dot(w.row(r), w.row(r)).sqrt()).collect()
}

/// Identity-initialised adapter: `B = 0`, `m = rownorm(W0)`, `A` uniform in
/// `±1/√d_in`.
pub fn dora_init(base: &str, w0: &Tensor, rank: usize, rng: &mut impl Rng) -> Result<DoraAdapter> {
    let (d_out, d_in) = expect_matrix(w0, "adapter base must be a matrix")?;
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::config(format!(
            "rank {rank} outside 1..={} for `{base}`",
            d_out.min(d_in)
        )));
    }
    let bound = 1.0 / (d_in as f32).sqrt();
    let a = (0..rank * d_in).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(DoraAdapter {
        base: base.to_string(),
        a: Tensor::from_parts(vec![rank, d_in], a),
        b: Tensor::zeros(vec![d_out, rank]),
        m: Tensor::from_parts(vec![d_out], row_norms(w0)),
        rank,
    })
}

/// The effective weight `m ⊙ (W0 + B·A) / max(rownorm(W0 + B·A), ε)`,
/// computed with the same kernels as the training path.
pub fn dora_effective(w0: &Tensor, adapter: &DoraAdapter) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w0v = tape.constant(w0.clone());
    let a = tape.constant(adapter.a.clone());
    let b = tape.constant(adapter.b.clone());
    let m = tape.constant(adapter.m.clone());
    let delta = tape.matmul(b, a)?;
    let w = tape.add(w0v, delta)?;
    let out = tape.row_rescale(w, m, DORA_EPS)?;
    Ok(tape.value(out).clone())
}

/// Plain weight equal to the adapter's effective weight.
pub fn dora_merge(w0: &Tensor, adapter: DoraAdapter) -> Result<Tensor> {
    dora_effective(w0, &adapter)
}

impl DoraAdapter {
    fn from_checkpoint(ck: &Checkpoint, base: &str) -> Result<Option<Self>> {
        let [a, b, m] = adapter_names(base);
        if !ck.weights.contains(&a) {
            return Ok(None);
        }
        let a = ck.weights.get(&a)?.clone();
        let rank = a.shape()[0];
        Ok(Some(DoraAdapter {
            base: base.to_string(),
            a,
            b: ck.weights.get(&b)?.clone(),
            m: ck.weights.get(&m)?.clone(),
            rank,
        }))
    }
}

/// Which lower layers (and whether embeddings) are excluded from training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeSpec {
    pub n_frozen_layers: usize,
    pub freeze_embeddings: bool,
}

impl FreezeSpec {
    /// Freezes embeddings whenever any layer is frozen.
    pub fn lower(k: usize) -> Self {
        FreezeSpec {
            n_frozen_layers: k,
            freeze_embeddings: k > 0,
        }
    }

    pub fn none() -> Self {
        FreezeSpec::lower(0)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        if self.freeze_embeddings && names::is_embedding(name) {
            return true;
        }
        names::layer_of(name).is_some_and(|l| l < self.n_frozen_layers)
    }
}

impl Default for FreezeSpec {
    fn default() -> Self {
        FreezeSpec::none()
    }
}

/// Attaches identity-initialised adapters to every targeted matrix of the
/// non-frozen layers.
pub fn attach_adapters(ck: &mut Checkpoint, spec: &AdapterSpec, freeze: &FreezeSpec, seed: u64) -> Result<usize> {
    if ck.has_adapters() {
        return Err(Error::contract("checkpoint already carries adapters; merge them first"));
    }
    if freeze.n_frozen_layers > ck.config.n_layers {
        return Err(Error::config(format!(
            "cannot freeze {} of {} layers",
            freeze.n_frozen_layers, ck.config.n_layers
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attached = 0;
    for layer in freeze.n_frozen_layers..ck.config.n_layers {
        for role in spec.targets.iter() {
            let base = role.tensor_name(layer);
            let adapter = dora_init(&base, ck.weights.get(&base)?, spec.rank, &mut rng)?;
            let [a, b, m] = adapter_names(&base);
            ck.weights.insert(a, adapter.a);
            ck.weights.insert(b, adapter.b);
            ck.weights.insert(m, adapter.m);
            attached += 1;
        }
    }
    ck.adapter = Some(spec.clone());
    Ok(attached)
}

/// Folds every adapter into its base matrix and drops the adapter tensors.
pub fn merge_adapters(ck: &Checkpoint) -> Result<Checkpoint> {
    let mut out = ck.clone();
    let bases: Vec<String> = ck
        .weights
        .names()
        .filter(|n| !n.starts_with(ADAPTER_PREFIX))
        .cloned()
        .collect();
    for base in bases {
        if let Some(adapter) = DoraAdapter::from_checkpoint(ck, &base)? {
            let merged = dora_merge(ck.weights.get(&base)?, adapter)?;
            *out.weights.get_mut(&base)? = merged;
            for n in adapter_names(&base) {
                out.weights.remove(&n);
            }
        }
    }
    if let Some(stray) = out.weights.names().find(|n| n.starts_with(ADAPTER_PREFIX)) {
        return Err(Error::Manifest(stray.clone()));
    }
    out.adapter = None;
    Ok(out)
}

/// Names of the tensors the optimizer may update under `spec`.
pub fn trainable_manifest(ck: &Checkpoint, spec: &FreezeSpec) -> Result<BTreeSet<String>> {
    if spec.n_frozen_layers > ck.config.n_layers {
        return Err(Error::config(format!(
            "cannot freeze {} of {} layers",
            spec.n_frozen_layers, ck.config.n_layers
        )));
    }
    let adapted: BTreeSet<String> = ck
        .weights
        .names()
        .filter_map(|n| n.strip_prefix(ADAPTER_PREFIX)?.strip_suffix(".a").map(str::to_string))
        .collect();
    Ok(ck
        .weights
        .names()
        .filter(|n| !spec.is_frozen(n) && !adapted.contains(n.as_str()))
        .cloned()
        .collect())
}

/// Elementwise uniform mean of checkpoints sharing one config and manifest.
/// Each element is summed in sorted order in f64, so the result does not
/// depend on the order of `checkpoints`.
pub fn weight_average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::contract("weight averaging needs at least one checkpoint"))?;
    for ck in checkpoints {
        if ck.has_adapters() {
            return Err(Error::contract("merge adapters before averaging"));
        }
    }
    for ck in &checkpoints[1..] {
        check_same_manifest(first, ck)?;
    }

    let n = checkpoints.len() as f64;
    let mut out = first.clone();
    let mut column = Vec::with_capacity(checkpoints.len());
    for (name, t) in out.weights.iter_mut() {
        let sources: Vec<&[f32]> = checkpoints
            .iter()
            .map(|c| c.weights.get(name).map(|t| t.data()))
            .collect::<Result<_>>()?;
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(sources.iter().map(|s| s[i] as f64));
            column.sort_by(f64::total_cmp);
            *x = (pairwise_sum(&column) / n) as f32;
        }
    }
    Ok(out)
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

fn check_same_manifest(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let shapes = |c: &Checkpoint| -> BTreeMap<String, Vec<usize>> {
        c.weights
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    };
    let (sa, sb) = (shapes(a), shapes(b));
    let all: BTreeSet<&String> = sa.keys().chain(sb.keys()).collect();
    for name in all {
        if sa.get(name) != sb.get(name) {
            return Err(Error::Manifest(name.clone()));
        }
    }
    if a.config != b.config {
        return Err(Error::Manifest("config".into()));
    }
    if a.meta.get("vocab") != b.meta.get("vocab") {
        return Err(Error::Manifest("meta.vocab".into()));
    }
    Ok(())
}
