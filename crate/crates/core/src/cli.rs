//! The `tinyrm` command line.
//!
//! Exit codes: 0 success, 1 validation or configuration error, 2 I/O error,
//! 3 numerical divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::data::synth::{synth_generate_with, SynthConfig};
use crate::data::{load_jsonl, write_jsonl, Domain, PreferencePair, SynthTask};
use crate::error::{Error, Result};
use crate::eval::{
    compare_objectives, emit_tradeoff, eval_dataset, flops_per_token, format_gflops, parse_tradeoff, ModelScorer,
    TradeoffPoint,
};
use crate::io::write_atomic;
use crate::model::{count_params, Checkpoint};
use crate::peft::{merge_adapters, weight_average};
use crate::train::config::parse_kv;
use crate::train::sweep::{sweep_csv, SweepSpec};
use crate::train::trainer::{checkpoint_templates, checkpoint_tokenizer, trace_csv};
use crate::train::{sweep, train, train_aao, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "tinyrm", version, about = "Train and evaluate small encoder reward models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic preference dataset as JSONL
    Synth(SynthArgs),
    /// Train a reward model on a JSONL dataset
    Train(TrainArgs),
    /// Random hyperparameter search over learning rate, rank, freezing and prefix
    Sweep(SweepArgs),
    /// Score a checkpoint on a JSONL dataset in both option orders
    Eval(EvalArgs),
    /// Fold adapters into their base weights
    Merge(MergeArgs),
    /// Elementwise mean of checkpoints sharing one architecture
    Average(AverageArgs),
    /// Inference cost per token in GFLOPs
    Flops(FlopsArgs),
    /// Train cloze, pooled and token-level models under one budget and compare
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Task: arithmetic, refusal or verbosity
    #[arg(long)]
    pub task: String,
    /// Number of pairs
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest arithmetic operand
    #[arg(long, default_value_t = SynthConfig::default().max_operand)]
    pub max_operand: u32,
    /// Output JSONL path
    #[arg(long)]
    pub out: PathBuf,
}

/// Run settings shared by `train`, `sweep` and `compare`. Flags given on the
/// command line override the `--config` file, which overrides the defaults.
#[derive(Args, Debug)]
pub struct RunFlags {
    /// Flat key=value run configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Peak learning rate
    #[arg(long, default_value = "0.001")]
    pub lr: String,
    #[arg(long, default_value = "0.00001")]
    pub weight_decay: String,
    #[arg(long, default_value = "256")]
    pub batch_size: String,
    #[arg(long, default_value = "1")]
    pub epochs: String,
    #[arg(long, default_value = "0")]
    pub seed: String,
    /// Number of lower encoder layers to freeze
    #[arg(long, default_value = "0")]
    pub frozen_layers: String,
    /// Freeze the embedding tables [default: true when any layer is frozen]
    #[arg(long)]
    pub freeze_embeddings: Option<String>,
    /// Adapter rank; 0 trains the full weights
    #[arg(long, default_value = "0")]
    pub dora_rank: String,
    /// Comma-separated adapted matrices
    #[arg(long, default_value = "wq,wk,wv,wo,w1,w2")]
    pub dora_targets: String,
    /// cloze, pooled or token-level
    #[arg(long, default_value = "cloze")]
    pub objective: String,
    /// Instruction prefix of the prompt
    #[arg(long, default_value = crate::data::DEFAULT_PREFIXES[0])]
    pub prefix: String,
    /// fixed, shuffled or both
    #[arg(long, default_value = "shuffled")]
    pub order_policy: String,
    /// Global gradient-norm cap, or off
    #[arg(long, default_value = "off")]
    pub clip_norm: String,
    /// Trace held-out accuracy every N steps (0: final step only)
    #[arg(long, default_value = "0")]
    pub eval_every: String,
    #[arg(long, default_value = "2")]
    pub layers: String,
    #[arg(long, default_value = "64")]
    pub hidden: String,
    #[arg(long, default_value = "4")]
    pub heads: String,
    #[arg(long, default_value = "4")]
    pub ffn_mult: String,
    #[arg(long, default_value = "64")]
    pub max_seq: String,
    /// cls or mean (pooled objective)
    #[arg(long, default_value = "cls")]
    pub pooling: String,
    /// Standard deviation of fresh weight initialisation
    #[arg(long, default_value = "0.02")]
    pub init_std: String,
}

/// Config keys settable by flag, in application order.
const RUN_KEYS: [&str; 21] = [
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

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training JSONL
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out JSONL for the accuracy trace
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialisation
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Train all domains at once, each with its own prefix
    #[arg(long)]
    pub aao: bool,
    /// Abort on any malformed data line
    #[arg(long)]
    pub strict: bool,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics trace CSV
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub heldout: PathBuf,
    #[arg(long)]
    pub strict: bool,
    /// Ranked trial table CSV
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub trials: usize,
    /// Seed of the hyperparameter sampler
    #[arg(long, default_value_t = 0)]
    pub sweep_seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 3e-3)]
    pub lr_max: f64,
    /// Comma-separated candidate ranks (0: full finetuning)
    #[arg(long, default_value = "0,4,8")]
    pub ranks: String,
    #[arg(long, default_value_t = 0)]
    pub frozen_min: usize,
    #[arg(long, default_value_t = 1)]
    pub frozen_max: usize,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub strict: bool,
    /// Also write the report as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Add this model to a tradeoff CSV (created if missing)
    #[arg(long)]
    pub tradeoff: Option<PathBuf>,
    /// Label of the tradeoff point [default: checkpoint file stem]
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AverageArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Parameter count
    #[arg(long, required_unless_present = "model", requires_all = ["layers", "hidden"])]
    pub params: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Read the architecture from a checkpoint instead
    #[arg(long, conflicts_with_all = ["params", "layers", "hidden"])]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub heldout: PathBuf,
    #[arg(long)]
    pub strict: bool,
    /// Also write the report as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_INVALID;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match dispatch(cli.command, sub) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Records { errors, .. } = &e {
                for le in errors {
                    eprintln!("  {le}");
                }
            }
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_INVALID,
    }
}

fn dispatch(cmd: Command, m: &ArgMatches) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, m),
        Command::Sweep(a) => cmd_sweep(a, m),
        Command::Eval(a) => cmd_eval(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Average(a) => cmd_average(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Compare(a) => cmd_compare(a, m),
    }
}

/// Defaults, then the config file, then flags given on the command line.
fn resolve_config(flags: &RunFlags, m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_kv(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for key in RUN_KEYS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            let v = m.get_one::<String>(key).expect("run flags are strings");
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_pairs(path: &Path, strict: bool) -> Result<Vec<PreferencePair>> {
    let (pairs, errors) = load_jsonl(path, strict)?;
    for e in &errors {
        eprintln!("warning: {}: skipped {e}", path.display());
    }
    if pairs.is_empty() {
        return Err(Error::config(format!("{} holds no valid pairs", path.display())));
    }
    Ok(pairs)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let task: SynthTask = a.task.parse()?;
    if a.n == 0 {
        return Err(Error::config("--n must be positive"));
    }
    let cfg = SynthConfig {
        max_operand: a.max_operand,
        ..SynthConfig::default()
    };
    let pairs = synth_generate_with(task, a.n, a.seed, &cfg);
    write_atomic(&a.out, write_jsonl(&pairs).as_bytes())
}

fn cmd_train(a: TrainArgs, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(&a.run, m)?;
    let pairs = load_pairs(&a.data, a.strict)?;
    let heldout = match &a.heldout {
        Some(p) => load_pairs(p, a.strict)?,
        None => Vec::new(),
    };
    let init = a.init.as_ref().map(Checkpoint::load).transpose()?;
    let out = if a.aao {
        let mut by_domain: BTreeMap<Domain, Vec<PreferencePair>> = BTreeMap::new();
        for p in pairs {
            by_domain.entry(p.domain).or_default().push(p);
        }
        let datasets: Vec<(String, Vec<PreferencePair>)> =
            by_domain.into_iter().map(|(d, v)| (d.to_string(), v)).collect();
        train_aao(&cfg, &datasets, &heldout, init.as_ref())?
    } else {
        train(&cfg, &pairs, &heldout, init.as_ref())?
    };
    let mut ck = out.checkpoint;
    ck.meta.insert("train_config".into(), cfg.to_kv());
    ck.save(&a.out)?;
    if let Some(path) = &a.trace {
        write_atomic(path, trace_csv(&out.trace).as_bytes())?;
    }
    let last = out.trace.last().map_or(f64::NAN, |r| r.loss);
    println!("steps {}  final loss {last:.6}  skipped {}", out.total_steps, out.skipped);
    if let Some(r) = &out.heldout {
        println!("held-out accuracy {:.4}  position bias {:.4}", r.overall, r.position_bias);
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, m: &ArgMatches) -> Result<()> {
    let base = resolve_config(&a.run, m)?;
    let ranks = a
        .ranks
        .split(',')
        .map(|r| {
            r.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("invalid rank `{r}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = SweepSpec {
        lr_range: (a.lr_min, a.lr_max),
        ranks,
        frozen_range: (a.frozen_min, a.frozen_max),
        trials: a.trials,
        seed: a.sweep_seed,
        ..SweepSpec::default()
    };
    let pairs = load_pairs(&a.data, a.strict)?;
    let heldout = load_pairs(&a.heldout, a.strict)?;
    let rows = sweep(&spec, &base, &pairs, &heldout)?;
    let csv = sweep_csv(&rows)?;
    write_atomic(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let tok = checkpoint_tokenizer(&ck)?;
    let templates = checkpoint_templates(&ck)?;
    let pairs = load_pairs(&a.data, a.strict)?;
    let report = eval_dataset(&ModelScorer::new(&ck, &tok, &templates)?, &pairs)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.json {
        write_atomic(path, report.to_json().as_bytes())?;
    }
    if let Some(path) = &a.tradeoff {
        let label = a.label.clone().unwrap_or_else(|| {
            a.model
                .file_stem()
                .map_or("model".into(), |s| s.to_string_lossy().into_owned())
        });
        let mut points = match std::fs::read_to_string(path) {
            Ok(text) => parse_tradeoff(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        points.retain(|p| p.label != label);
        points.push(TradeoffPoint {
            label,
            gflops_per_token: report.gflops_per_token,
            accuracy: report.overall,
        });
        emit_tradeoff(&points, path)?;
    }
    Ok(())
}

fn cmd_merge(a: MergeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.input)?;
    if !ck.has_adapters() {
        return Err(Error::config(format!("{} carries no adapters", a.input.display())));
    }
    merge_adapters(&ck)?.save(&a.out)
}

fn cmd_average(a: AverageArgs) -> Result<()> {
    let cks = a.inputs.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    weight_average(&cks)?.save(&a.out)
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let (n, layers, hidden) = match &a.model {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (count_params(&ck.config), ck.config.n_layers, ck.config.hidden)
        }
        None => (
            a.params.expect("clap requires --params"),
            a.layers.expect("clap requires --layers"),
            a.hidden.expect("clap requires --hidden"),
        ),
    };
    if n == 0 || hidden == 0 {
        return Err(Error::config("--params and --hidden must be positive"));
    }
    println!("{} GFLOPs/token", format_gflops(flops_per_token(n, layers, hidden)));
    Ok(())
}

fn cmd_compare(a: CompareArgs, m: &ArgMatches) -> Result<()> {
    let base = resolve_config(&a.run, m)?;
    let pairs = load_pairs(&a.data, a.strict)?;
    let heldout = load_pairs(&a.heldout, a.strict)?;
    let (report, _) = compare_objectives(&pairs, &heldout, &base)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.json {
        write_atomic(path, report.to_json().as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_defaults_match_config_defaults() {
        let m = Cli::command().get_matches_from(["tinyrm", "train", "--data", "d", "--out", "o"]);
        let (_, sub) = m.subcommand().unwrap();
        let defaults = TrainConfig::default().to_kv();
        let mut cfg = TrainConfig::default();
        for key in RUN_KEYS {
            if let (Some(v), false) = (sub.get_one::<String>(key), key == "dora_targets") {
                cfg.set(key, v).unwrap();
            }
        }
        assert_eq!(cfg.to_kv(), defaults);
    }

    #[test]
    fn config_keys_match() {
        let kv = TrainConfig {
            dora: Some(crate::peft::AdapterSpec {
                rank: 4,
                targets: Default::default(),
            }),
            ..TrainConfig::default()
        }
        .to_kv();
        let keys: Vec<&str> = kv.lines().map(|l| l.split_once('=').unwrap().0).collect();
        assert_eq!(keys, RUN_KEYS);
    }
}
