//! Command-line surface: synthetic data generation, training,
//! evaluation, attention/representation export, and hyperparameter
//! sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use xsta::checkpoint;
use xsta::config::Config;
use xsta::data::{self, ParallelExample, SynthConfig};
use xsta::error::{Error, Result};
use xsta::export::{self, ReprMode};
use xsta::sweep;
use xsta::trainer;

#[derive(Parser)]
#[command(name = "xsta", about = "Cross-lingual extractive QA experiments", version)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Every config field, overridable as `--key value`. Values are parsed by
/// the same code path as the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)] lr: Option<String>,
    #[arg(long, global = true)] batch_size: Option<String>,
    #[arg(long, global = true)] warmup_fraction: Option<String>,
    #[arg(long, global = true)] epochs: Option<String>,
    #[arg(long, global = true)] alpha: Option<String>,
    #[arg(long, global = true)] gamma: Option<String>,
    #[arg(long, global = true)] sigma_s: Option<String>,
    #[arg(long, global = true)] eta_t: Option<String>,
    #[arg(long, global = true)] tau: Option<String>,
    #[arg(long, global = true)] lambda0: Option<String>,
    #[arg(long, global = true)] epsilon: Option<String>,
    #[arg(long, global = true)] clip_norm: Option<String>,
    #[arg(long, global = true)] norm_momentum: Option<String>,
    #[arg(long, global = true)] max_answer_len: Option<String>,
    #[arg(long, global = true)] log_every: Option<String>,
    #[arg(long, global = true)] negatives_scope: Option<String>,
    #[arg(long, global = true)] adam_beta2: Option<String>,
    #[arg(long, global = true)] cosine_lr: Option<String>,
    #[arg(long, global = true)] transfer_contrast: Option<String>,
    #[arg(long, global = true)] renormalize_transfer: Option<String>,
    #[arg(long, global = true)] context_only_transfer_keys: Option<String>,
    #[arg(long, global = true)] eca_on_attention: Option<String>,
    #[arg(long, global = true)] no_gdks: Option<String>,
    #[arg(long, global = true)] no_atgc: Option<String>,
    #[arg(long, global = true)] no_atgc_inference: Option<String>,
    #[arg(long, global = true)] no_norm: Option<String>,
    #[arg(long, global = true)] no_align_s: Option<String>,
    #[arg(long, global = true)] no_align_t: Option<String>,
    #[arg(long, global = true)] num_layers: Option<String>,
    #[arg(long, global = true)] hidden_size: Option<String>,
    #[arg(long, global = true)] num_heads: Option<String>,
    #[arg(long, global = true)] ffn_size: Option<String>,
    #[arg(long, global = true)] max_seq_len: Option<String>,
    #[arg(long, global = true)] dropout_rate: Option<String>,
    #[arg(long, global = true)] gdks_layer: Option<String>,
    #[arg(long, global = true)] gdks_skip_ffn: Option<String>,
    #[arg(long, global = true)] f_source_only: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut Config) -> Result<()> {
        let fields: [(&str, &Option<String>); 37] = [
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("warmup_fraction", &self.warmup_fraction),
            ("epochs", &self.epochs),
            ("alpha", &self.alpha),
            ("gamma", &self.gamma),
            ("sigma_s", &self.sigma_s),
            ("eta_t", &self.eta_t),
            ("tau", &self.tau),
            ("lambda0", &self.lambda0),
            ("epsilon", &self.epsilon),
            ("clip_norm", &self.clip_norm),
            ("norm_momentum", &self.norm_momentum),
            ("max_answer_len", &self.max_answer_len),
            ("log_every", &self.log_every),
            ("negatives_scope", &self.negatives_scope),
            ("adam_beta2", &self.adam_beta2),
            ("cosine_lr", &self.cosine_lr),
            ("transfer_contrast", &self.transfer_contrast),
            ("renormalize_transfer", &self.renormalize_transfer),
            ("context_only_transfer_keys", &self.context_only_transfer_keys),
            ("eca_on_attention", &self.eca_on_attention),
            ("no_gdks", &self.no_gdks),
            ("no_atgc", &self.no_atgc),
            ("no_atgc_inference", &self.no_atgc_inference),
            ("no_norm", &self.no_norm),
            ("no_align_s", &self.no_align_s),
            ("no_align_t", &self.no_align_t),
            ("num_layers", &self.num_layers),
            ("hidden_size", &self.hidden_size),
            ("num_heads", &self.num_heads),
            ("ffn_size", &self.ffn_size),
            ("max_seq_len", &self.max_seq_len),
            ("dropout_rate", &self.dropout_rate),
            ("gdks_layer", &self.gdks_layer),
            ("gdks_skip_ffn", &self.gdks_skip_ffn),
            ("f_source_only", &self.f_source_only),
        ];
        for (key, value) in fields {
            if let Some(v) = value {
                cfg.set_field(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic parallel corpus (JSON lines).
    GenData {
        #[arg(long, default_value_t = 2000)]
        num_examples: usize,
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0.8)]
        shift_strength: f64,
        #[arg(long, default_value_t = 0.3)]
        self_pair_fraction: f64,
        #[arg(long, default_value_t = 3)]
        clauses_min: usize,
        #[arg(long, default_value_t = 6)]
        clauses_max: usize,
        #[arg(long, default_value_t = 13)]
        lexicon_seed: u64,
        /// Fraction of distractor values spanning two tokens.
        #[arg(long, default_value_t = 0.5)]
        multi_token_value_rate: f64,
        /// Fraction of answers spanning two tokens.
        #[arg(long, default_value_t = 0.1)]
        multi_token_answer_rate: f64,
        /// Output file; default <out-dir>/pairs.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes best.ckpt and metrics.jsonl to the output dir.
    Train {
        /// Training pairs (JSON lines).
        #[arg(long)]
        train: PathBuf,
        /// Validation pairs; defaults to the last 10% of the training file.
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes predictions.json and metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Average the transferred source distribution into the target
        /// prediction.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        calibrate: bool,
    },
    /// Export attention matrices for one pair as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Which pair of the file to export.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Export pooled sentence representations as CSV.
    ExportRepr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "raw")]
        mode: String,
        /// Output file; default <out-dir>/representations.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid sweep: full train+evaluate per cell.
    Sweep {
        /// Grid spec, e.g. "gamma=0,0.1,0.3;gdks_layer=0,1,2".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Evaluation pairs; defaults to the validation split.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Deterministic 90/10 split when no validation file is given.
fn split_valid(pairs: Vec<ParallelExample>) -> (Vec<ParallelExample>, Vec<ParallelExample>) {
    let cut = pairs.len() - pairs.len() / 10;
    let (train, valid) = pairs.split_at(cut);
    (train.to_vec(), valid.to_vec())
}

fn load_split(
    train: &PathBuf,
    valid: &Option<PathBuf>,
) -> Result<(Vec<ParallelExample>, Vec<ParallelExample>)> {
    let train_pairs = data::read_pairs_jsonl(train)?;
    match valid {
        Some(v) => Ok((train_pairs, data::read_pairs_jsonl(v)?)),
        None => Ok(split_valid(train_pairs)),
    }
}

fn write_json(path: &PathBuf, value: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn print_report(report: &trainer::EvalReport) {
    println!("{:<10} {:>8} {:>8}", "language", "EM", "F1");
    for (lang, (em, f1)) in &report.per_language {
        println!("{lang:<10} {em:>8.2} {f1:>8.2}");
    }
    println!("{:<10} {:>8.2} {:>8.2}", "mean", report.mean_em, report.mean_f1);
}

fn report_json(report: &trainer::EvalReport) -> IndexMap<String, serde_json::Value> {
    let mut out = IndexMap::new();
    let langs: IndexMap<String, IndexMap<String, f64>> = report
        .per_language
        .iter()
        .map(|(l, (em, f1))| {
            let mut m = IndexMap::new();
            m.insert("em".to_string(), *em);
            m.insert("f1".to_string(), *f1);
            (l.clone(), m)
        })
        .collect();
    out.insert(
        "per_language".into(),
        serde_json::to_value(langs).expect("serializable"),
    );
    out.insert("mean_em".into(), report.mean_em.into());
    out.insert("mean_f1".into(), report.mean_f1.into());
    out
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| Error::io(cli.out_dir.display().to_string(), e))?;
    match &cli.cmd {
        Cmd::GenData {
            num_examples,
            vocab_size,
            shift_strength,
            self_pair_fraction,
            clauses_min,
            clauses_max,
            lexicon_seed,
            multi_token_value_rate,
            multi_token_answer_rate,
            out,
        } => {
            let scfg = SynthConfig {
                seed: cfg.train.seed,
                lexicon_seed: *lexicon_seed,
                vocab_size: *vocab_size,
                num_examples: *num_examples,
                context_clauses_min: *clauses_min,
                context_clauses_max: *clauses_max,
                shift_strength: *shift_strength,
                self_pair_fraction: *self_pair_fraction,
                multi_token_value_rate: *multi_token_value_rate,
                multi_token_answer_rate: *multi_token_answer_rate,
            };
            let pairs = data::synth_corpus(&scfg)?;
            let path = out.clone().unwrap_or_else(|| cli.out_dir.join("pairs.jsonl"));
            data::write_pairs_jsonl(&path, &pairs)?;
            println!("wrote {} pairs to {}", pairs.len(), path.display());
        }
        Cmd::Train { train, valid } => {
            let (train_pairs, valid_pairs) = load_split(train, valid)?;
            let outcome = trainer::train(&cfg, &train_pairs, &valid_pairs, &cli.out_dir)?;
            println!(
                "best mean F1 {:.2}; checkpoint {}",
                outcome.best_f1,
                outcome.checkpoint_path.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            pairs,
            calibrate,
        } => {
            let ckpt = checkpoint::load(checkpoint)?;
            let eval_pairs = data::read_pairs_jsonl(pairs)?;
            let report = trainer::evaluate(&ckpt, &eval_pairs, *calibrate)?;
            write_json(&cli.out_dir.join("predictions.json"), &report.predictions)?;
            write_json(&cli.out_dir.join("metrics.json"), &report_json(&report))?;
            print_report(&report);
        }
        Cmd::ExportAttention {
            checkpoint,
            pairs,
            index,
        } => {
            let ckpt = checkpoint::load(checkpoint)?;
            let all = data::read_pairs_jsonl(pairs)?;
            let pair = all.get(*index).ok_or_else(|| {
                Error::invalid(format!("pair index {index} out of range ({} pairs)", all.len()))
            })?;
            export::export_attention(&ckpt, pair, &cli.out_dir)?;
            println!("wrote attention CSVs to {}", cli.out_dir.display());
        }
        Cmd::ExportRepr {
            checkpoint,
            pairs,
            mode,
            out,
        } => {
            let ckpt = checkpoint::load(checkpoint)?;
            let all = data::read_pairs_jsonl(pairs)?;
            let mode = match mode.as_str() {
                "raw" => ReprMode::Raw,
                "normalized" => ReprMode::Normalized,
                other => return Err(Error::Parse(format!("unknown repr mode {other:?}"))),
            };
            let path = out
                .clone()
                .unwrap_or_else(|| cli.out_dir.join("representations.csv"));
            export::export_representations(&ckpt, &all, mode, &path)?;
            println!("wrote representations to {}", path.display());
        }
        Cmd::Sweep {
            grid,
            train,
            valid,
            eval,
        } => {
            let (train_pairs, valid_pairs) = load_split(train, valid)?;
            let eval_pairs = match eval {
                Some(p) => data::read_pairs_jsonl(p)?,
                None => valid_pairs.clone(),
            };
            let results = sweep::sweep(
                &cfg,
                grid,
                &train_pairs,
                &valid_pairs,
                &eval_pairs,
                &cli.out_dir,
            )?;
            let failures = results.iter().filter(|c| !c.ok).count();
            println!(
                "sweep finished: {} cells, {failures} failed; table at {}",
                results.len(),
                cli.out_dir.join("sweep.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
