//! Command-line interface.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    gen_toy_nli, load_checkpoint, load_embeddings, parse_snli, save_checkpoint, write_snli, Checkpoint, EmbeddingTable,
    NliExample, Vocab,
};
use crate::encoder::{EncoderConfig, Variant};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::head::{Activation, HeadConfig, DEFAULT_FC_DIM};
use crate::model::{check_model_gradients, Model, ModelCheckSpec};
use crate::train::{fit, EpochReport, TrainConfig};
use crate::transfer::{encode_dataset, evaluate_tasks, load_tasks, toy_probe_tasks, write_tasks};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sufisent", version, about = "Suffix-window LSTM sentence encoders for NLI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic entailment dataset in SNLI line format.
    GenToy(GenToyArgs),
    /// Train an encoder and classifier; writes the best checkpoint.
    Train(TrainArgs),
    /// Encode one sentence per input line.
    Encode(EncodeArgs),
    /// Transfer evaluation with linear probes on frozen encodings.
    Eval(EvalArgs),
    /// Compare backprop gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
    pub count: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the toy probe tasks to this directory.
    #[arg(long)]
    pub tasks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value = "sufisent")]
    pub variant: Variant,
    /// LSTM hidden size.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Word embedding size.
    #[arg(long, default_value_t = 64)]
    pub e: usize,
    /// Pretrained vectors, one `token v1 … ve` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Update word embeddings during training.
    #[arg(long)]
    pub train_embeddings: bool,
    #[arg(long, default_value_t = 0.1)]
    pub lr0: f64,
    #[arg(long, default_value_t = 0.99)]
    pub epoch_decay: f64,
    #[arg(long, default_value_t = 0.2)]
    pub drop_decay: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub min_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_FC_DIM)]
    pub fc_dim: usize,
    #[arg(long, default_value = "tanh")]
    pub activation: Activation,
    /// Minimum token frequency for the vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics, one JSON object per line. Defaults to
    /// `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            epoch_decay: self.epoch_decay,
            drop_decay: self.drop_decay,
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            min_lr: self.min_lr,
            seed: self.seed,
        }
    }

    fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| {
            let mut s = self.out.clone().into_os_string();
            s.push(".metrics.jsonl");
            PathBuf::from(s)
        })
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text file, one sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of `*.jsonl` task files.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "sufisent")]
    pub variant: Variant,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 6)]
    pub e: usize,
    /// Sentence length.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Width of the classifier's hidden layers.
    #[arg(long, default_value_t = 16)]
    pub fc_dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Check at most this many entries per parameter array.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Perturb one analytic gradient entry; the check should then fail.
    #[arg(long)]
    pub corrupt_grad: bool,
}

fn print_config(command: &str, entries: &[(&str, String)]) {
    println!("{command} config:");
    let w = entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in entries {
        println!("  {k:<w$} = {v}");
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match cli.command {
        Command::GenToy(a) => cmd_gen_toy(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Encode(a) => cmd_encode(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn cmd_gen_toy(a: &GenToyArgs) -> Result<i32> {
    print_config(
        "gen-toy",
        &[
            ("seed", a.seed.to_string()),
            ("count", a.count.to_string()),
            ("out", a.out.display().to_string()),
            ("tasks_out", opt_path(&a.tasks_out)),
        ],
    );
    let pairs = gen_toy_nli(a.seed, a.count as usize)?;
    write_snli(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    if let Some(dir) = &a.tasks_out {
        let tasks = toy_probe_tasks(a.seed)?;
        write_tasks(dir, &tasks)?;
        println!("wrote {} probe tasks to {}", tasks.len(), dir.display());
    }
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = a.train_config();
    let metrics_path = a.metrics_path();
    print_config(
        "train",
        &[
            ("train", a.train.display().to_string()),
            ("val", a.val.display().to_string()),
            ("variant", a.variant.to_string()),
            ("d", a.d.to_string()),
            ("e", a.e.to_string()),
            ("encoding_dim", a.variant.encoding_dim(a.d).to_string()),
            ("embeddings", opt_path(&a.embeddings)),
            ("train_embeddings", a.train_embeddings.to_string()),
            ("lr0", cfg.lr0.to_string()),
            ("epoch_decay", cfg.epoch_decay.to_string()),
            ("drop_decay", cfg.drop_decay.to_string()),
            ("clip_norm", cfg.clip_norm.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("max_epochs", cfg.max_epochs.to_string()),
            ("min_lr", cfg.min_lr.to_string()),
            ("seed", cfg.seed.to_string()),
            ("fc", format!("{}x2", a.fc_dim)),
            ("activation", a.activation.to_string()),
            ("min_count", a.min_count.to_string()),
            ("out", a.out.display().to_string()),
            ("metrics", metrics_path.display().to_string()),
        ],
    );
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return Ok(EXIT_USAGE);
    }
    let enc = match EncoderConfig::new(a.variant, a.d, a.e) {
        Ok(enc) if a.fc_dim > 0 && a.min_count > 0 => enc,
        Ok(_) => {
            eprintln!("error: --fc-dim and --min-count must be positive");
            return Ok(EXIT_USAGE);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_USAGE);
        }
    };

    let train = parse_snli(&a.train)?;
    let val = parse_snli(&a.val)?;
    println!(
        "loaded {} train pairs ({} skipped), {} val pairs ({} skipped)",
        train.pairs.len(),
        train.skipped,
        val.pairs.len(),
        val.skipped
    );
    let vocab = Vocab::build(&train.pairs, a.min_count);
    let table = match &a.embeddings {
        Some(path) => {
            let (table, report) = load_embeddings(path, &vocab, a.e, a.seed)?;
            println!(
                "embeddings: {}/{} vocabulary tokens pretrained, {} duplicate lines",
                report.pretrained, report.vocab_tokens, report.duplicates
            );
            table
        }
        None => EmbeddingTable::random(vocab.len(), a.e, a.seed),
    }
    .with_trainable(a.train_embeddings);
    let head = HeadConfig {
        encoding_dim: enc.encoding_dim(),
        fc_dim: a.fc_dim,
        activation: a.activation,
    };
    let mut model = Model::init(enc, head, table, a.seed)?;
    let to_ids = |pairs: &[crate::corpus::TextPair]| -> Vec<NliExample> { pairs.iter().map(|p| vocab.encode_pair(p)).collect() };
    let (train_ids, val_ids) = (to_ids(&train.pairs), to_ids(&val.pairs));

    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut write_err = None;
    let outcome = fit(&mut model, &train_ids, &val_ids, &cfg, |r: &EpochReport| {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}  lr {:.6} -> {:.6}",
            r.epoch, r.train_loss, r.train_acc, r.val_acc, r.lr, r.next_lr
        );
        let line = serde_json::to_string(r).map_err(Error::from).and_then(|s| Ok(writeln!(metrics, "{s}")?));
        match line {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                write_err = Some(e);
                ControlFlow::Break(())
            }
        }
    });
    metrics.flush()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("training stopped; metrics so far are in {}", metrics_path.display());
            return Err(e);
        }
    };
    let ckpt = Checkpoint {
        train: cfg,
        vocab,
        model: outcome.best_model,
        best_val_acc: outcome.best_val_acc,
    };
    save_checkpoint(&a.out, &ckpt)?;
    println!(
        "best val accuracy {:.4} at epoch {}; encoding dim {}; checkpoint {}",
        outcome.best_val_acc,
        outcome.best_epoch,
        ckpt.model.encoding_dim(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().collect::<std::io::Result<_>>()?)
}

fn cmd_encode(a: &EncodeArgs) -> Result<i32> {
    print_config(
        "encode",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("input", a.input.display().to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let sentences = read_lines(&a.input)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    if !sentences.is_empty() {
        let enc = encode_dataset(&ckpt.model, &ckpt.vocab, &sentences)?;
        for r in 0..enc.rows() {
            let row: Vec<String> = enc.row(r).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    w.flush()?;
    println!(
        "encoded {} sentences ({} values each) to {}",
        sentences.len(),
        ckpt.model.encoding_dim(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    print_config(
        "eval",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("tasks", a.tasks.display().to_string()),
            ("seed", a.seed.to_string()),
            ("out", opt_path(&a.out)),
        ],
    );
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let tasks = load_tasks(&a.tasks)?;
    let report = evaluate_tasks(&ckpt.model, &ckpt.vocab, &tasks, a.seed)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        report.write_jsonl(out)?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    print_config(
        "gradcheck",
        &[
            ("variant", a.variant.to_string()),
            ("d", a.d.to_string()),
            ("e", a.e.to_string()),
            ("n", a.n.to_string()),
            ("seed", a.seed.to_string()),
            ("fc", format!("{}x2", a.fc_dim)),
            ("step", "1e-6".to_string()),
            ("tolerance", a.tolerance.to_string()),
            ("sample", a.sample.map_or_else(|| "all".to_string(), |s| s.to_string())),
            ("corrupt_grad", a.corrupt_grad.to_string()),
        ],
    );
    if a.d == 0 || a.e == 0 || a.n == 0 || a.fc_dim == 0 {
        eprintln!("error: --d, --e, --n and --fc-dim must be positive");
        return Ok(EXIT_USAGE);
    }
    let spec = ModelCheckSpec {
        fc_dim: a.fc_dim,
        corrupt: a.corrupt_grad,
        ..ModelCheckSpec::new(a.variant, a.d, a.e, a.n, a.seed)
    };
    let cfg = GradCheckConfig {
        tolerance: a.tolerance,
        max_per_param: a.sample,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let report = check_model_gradients(&spec, &cfg)?;
    for p in report.worst(3) {
        println!(
            "  {:<24} max rel error {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
            p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
        );
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: {} scalars, worst relative error {:.3e} (tolerance {:.0e})",
        report.scalars_checked(),
        report.max_rel_error(),
        report.tolerance
    );
    Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERIC })
}
