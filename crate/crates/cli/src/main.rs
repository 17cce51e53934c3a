use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use rlm_core::corpus::{generate_corpus, read_corpus, write_corpus, CorpusConfig};
use rlm_core::decoder::{transfer, DecodeFlags};
use rlm_core::metrics::evaluate_run;
use rlm_core::model::ModelParams;
use rlm_core::objectives::QClassifier;
use rlm_core::oracle::{compare_on_random_instances, compare_stepwise_full_pool};
use rlm_core::trainer::{
    load_checkpoint, run_training, save_checkpoint, AdamW, Checkpoint, Precision, TrainConfig,
};

#[derive(Parser)]
#[command(name = "rlm", about = "Replacing language model for style transfer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic style corpus into a directory.
    GenCorpus(GenCorpusArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Rewrite sentences from stdin (or a file) into a target style.
    Transfer(TransferArgs),
    /// Score a checkpoint against the corpus eval split.
    Eval(EvalArgs),
    /// Cross-check the decoder against the brute-force oracle.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Corpus config JSON; omitted means the built-in toy config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Train config JSON; omitted means defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSONL metrics stream, one record per logging interval.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Resume from an existing checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Model init seed (weights; the data order comes from the train config).
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    /// Model size config JSON; omitted means the desk-scale default.
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct FlagArgs {
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    no_delete: bool,
    #[arg(long)]
    no_insert: bool,
    #[arg(long, default_value_t = 4)]
    max_insert: usize,
}

impl FlagArgs {
    fn to_flags(&self) -> DecodeFlags {
        DecodeFlags {
            top_k: self.top_k,
            allow_delete: !self.no_delete,
            allow_insert: !self.no_insert,
            max_insert: if self.no_insert { 1 } else { self.max_insert },
        }
    }
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Target style name, e.g. "pos".
    #[arg(long)]
    style: String,
    /// Input file of whitespace-tokenized sentences; omitted reads stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file; omitted writes stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    flags: FlagArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Write the full EvalReport JSON here; omitted prints a summary only.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: FlagArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the full candidate pool (top_k = V + 1) and compare per step.
    #[arg(long)]
    full_pool: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Transfer(a) => run_transfer(a),
        Command::Eval(a) => eval(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {path:?}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {path:?}"))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path)?;
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Record what produced the artifacts in `dir`: the command line and a
/// digest per produced file, so runs can be compared byte-for-byte.
fn write_manifest(dir: &Path, files: &[&Path]) -> Result<()> {
    let mut entries = serde_json::Map::new();
    for f in files {
        let name = f
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("artifact")
            .to_string();
        entries.insert(name, serde_json::Value::String(sha256_file(f)?));
    }
    let manifest = serde_json::json!({
        "argv": std::env::args().collect::<Vec<_>>(),
        "sha256": entries,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let cfg: CorpusConfig = match &a.config {
        Some(p) => read_json(p, "corpus config")?,
        None => CorpusConfig::toy(),
    };
    let corpus = generate_corpus(&cfg, a.seed)?;
    write_corpus(&corpus, &a.out)?;
    let files: Vec<PathBuf> = ["train.jsonl", "eval.jsonl", "lexicon.json", "vocab.json"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    write_manifest(&a.out, &files.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
    if corpus.overlap_flagged() {
        eprintln!(
            "warning: {:.1}% of eval references also appear in train",
            corpus.ref_train_overlap * 100.0
        );
    }
    println!(
        "wrote {} train sentences, {} eval pairs, vocab {} to {}",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p, "train config")?,
        None => TrainConfig::default(),
    };
    if cfg.precision != Precision::F32 {
        bail!("only f32 training is wired into the CLI; edit the config");
    }
    let mut log_writer: Option<Box<dyn Write>> = match &a.log {
        Some(p) => Some(Box::new(BufWriter::new(fs::File::create(p)?))),
        None => None,
    };

    let (mut model, mut q, mut opt_main, mut opt_q, start_step) = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let ckpt = match ckpt {
                rlm_core::trainer::AnyCheckpoint::F32(c) => c,
                rlm_core::trainer::AnyCheckpoint::F64(_) => {
                    bail!("cannot resume f32 training from an f64 checkpoint")
                }
            };
            let om = ckpt
                .opt_main
                .context("checkpoint has no optimizer state to resume from")?;
            let oq = ckpt.opt_q.context("checkpoint has no Q optimizer state")?;
            (ckpt.model, ckpt.q, om, oq, ckpt.step as usize)
        }
        None => {
            let mcfg = match &a.model_config {
                Some(p) => read_json(p, "model config")?,
                None => rlm_core::model::ModelConfig::desk_scale(
                    corpus.vocab.len(),
                    corpus.style_names.len(),
                ),
            };
            let model = ModelParams::<f32>::init(mcfg, a.model_seed);
            let q = QClassifier::init(
                model.cfg.dim,
                corpus.style_names.len(),
                a.model_seed.wrapping_add(1),
            );
            let opt_main = AdamW::new(&model.set, cfg.lr, cfg.weight_decay);
            let opt_q = AdamW::new(&q.set, cfg.q_lr, 0.0);
            (model, q, opt_main, opt_q, 0)
        }
    };

    let report = run_training(
        &corpus,
        &mut model,
        &mut q,
        &mut opt_main,
        &mut opt_q,
        &cfg,
        start_step,
        log_writer.as_deref_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(mut w) = log_writer {
        w.flush()?;
    }

    let ckpt = Checkpoint {
        model,
        q,
        vocab: corpus.vocab.clone(),
        style_names: corpus.style_names.clone(),
        step: cfg.steps as u64,
        opt_main: Some(opt_main),
        opt_q: Some(opt_q),
    };
    save_checkpoint(&a.out, &ckpt)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_manifest(dir, &[&a.out])?;
    }
    match report.last {
        Some(last) => println!(
            "trained {} steps; final total loss {:.4} (pred {:.4} recon {:.4})",
            report.steps_run, last.total, last.pred, last.recon
        ),
        None => println!("no steps run (already at target step count)"),
    }
    Ok(())
}

fn run_transfer(a: TransferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?.to_f64();
    let style = ckpt
        .style_names
        .iter()
        .position(|s| *s == a.style)
        .with_context(|| format!("unknown style {:?}; have {:?}", a.style, ckpt.style_names))?;
    let flags = a.flags.to_flags();

    let input = match &a.input {
        Some(p) => fs::read_to_string(p)?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for line in input.lines() {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            continue;
        }
        let ids = ckpt.vocab.encode(&words)?;
        let result = transfer(&ckpt.model, &ids, style, &flags)?;
        writeln!(out, "{}", ckpt.vocab.decode(&result.y).join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?.to_f64();
    let corpus = read_corpus(&a.corpus)?;
    if corpus.vocab.tokens() != ckpt.vocab.tokens() {
        bail!("checkpoint vocabulary does not match the corpus");
    }
    let report = evaluate_run(&ckpt.model, &corpus, &a.flags.to_flags())?;
    println!(
        "ACC {:.1}  Ref-BLEU {:.1}  Self-BLEU {:.1}  GM {:.1}  ({} transfers)",
        report.acc, report.r_bleu, report.s_bleu, report.gm, report.n
    );
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

fn oracle_check(a: OracleArgs) -> Result<()> {
    let report = if a.full_pool {
        compare_stepwise_full_pool(a.instances, a.seed)?
    } else {
        compare_on_random_instances(a.instances, a.seed)?
    };
    println!(
        "{}/{} instances agree; max score gap {:.3e}; max rescore gap {:.3e}",
        report.agreements, report.instances, report.max_score_gap, report.max_rescore_gap
    );
    if !report.all_agree() || report.max_rescore_gap >= 1e-9 {
        bail!("decoder disagrees with the oracle");
    }
    Ok(())
}
