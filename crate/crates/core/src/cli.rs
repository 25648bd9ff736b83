//! Command-line entry point.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ResolvedConfig, RunConfig, CONFIG_ENV};
use crate::data::{build_vocab, ParallelCorpus, ToySpec, ToyTask, Vocabulary};
use crate::evalbench::{bench_model, bleu, compare_runs, BenchReport};
use crate::inference::{translate_all, DecodeMode};
use crate::model::Model;
use crate::selfcheck;
use crate::training::{load_checkpoint, save_checkpoint, TrainLog, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "ctc-nmt",
    version,
    about = "Non-autoregressive CTC translation: train, translate, benchmark"
)]
pub struct Cli {
    /// Config file with flat dotted keys.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.k=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary from whitespace-tokenized text files.
    Vocab {
        /// Output vocabulary file [paths.vocab].
        #[arg(long)]
        output: Option<String>,
        /// Entries including reserved ones [data.vocab_max_size].
        #[arg(long)]
        max_size: Option<usize>,
        /// [data.vocab_min_freq]
        #[arg(long)]
        min_freq: Option<usize>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Train a model on a parallel corpus.
    Train(TrainArgs),
    /// Translate lines from a file or standard input.
    Translate {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Output file [paths.output]; standard output when unset.
        #[arg(long)]
        output: Option<String>,
    },
    /// Time decoding and write a report.
    Bench {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Untimed leading sentences [decode.warmup].
        #[arg(long)]
        warmup: Option<usize>,
        /// Report file [paths.report].
        #[arg(long)]
        report: Option<String>,
        /// Also write the translations here [paths.output].
        #[arg(long)]
        output: Option<String>,
    },
    /// Tabulate benchmark reports against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
    /// Corpus BLEU of hypotheses against references.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Run the CTC oracle, gradient and shape suites.
    Selfcheck {
        /// Fewer random instances.
        #[arg(long)]
        quick: bool,
    },
    /// Write a synthetic copy or reversal corpus with its vocabulary.
    ToyData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "reverse")]
        task: ToyTask,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the effective configuration and where each value came from.
    ShowConfig,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Source side of the corpus [paths.source].
    #[arg(long)]
    source: Option<String>,
    /// Target side of the corpus [paths.target].
    #[arg(long)]
    target: Option<String>,
    /// [paths.vocab]
    #[arg(long)]
    vocab: Option<String>,
    /// Checkpoint written during training [paths.checkpoint].
    #[arg(long)]
    checkpoint: Option<String>,
    /// Step log file [paths.log].
    #[arg(long)]
    log: Option<String>,
    /// [train.total_steps]
    #[arg(long)]
    steps: Option<u64>,
    /// [train.base_lr]
    #[arg(long)]
    lr: Option<f64>,
    /// [train.warmup_steps]
    #[arg(long)]
    warmup: Option<u64>,
    /// Continue from the checkpoint if it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// [paths.checkpoint]
    #[arg(long)]
    checkpoint: Option<String>,
    /// Input file [paths.input]; standard input when unset or `-`.
    #[arg(long)]
    input: Option<String>,
    /// One sentence per model call.
    #[arg(long, conflicts_with = "batch")]
    latency: bool,
    /// Sentences per model call [decode.batch_size].
    #[arg(long)]
    batch: Option<usize>,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn push<T: ToString>(out: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

impl DecodeArgs {
    fn overrides(&self, out: &mut Vec<(String, String)>) {
        push(out, "paths.checkpoint", &self.checkpoint);
        push(out, "paths.input", &self.input);
        if self.latency {
            out.push(("decode.mode".into(), "latency".into()));
        } else if let Some(b) = self.batch {
            out.push(("decode.mode".into(), "batched".into()));
            out.push(("decode.batch_size".into(), b.to_string()));
        }
    }
}

impl Command {
    /// Config keys set by subcommand flags.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        match self {
            Command::Vocab {
                output,
                max_size,
                min_freq,
                ..
            } => {
                push(&mut out, "paths.vocab", output);
                push(&mut out, "data.vocab_max_size", max_size);
                push(&mut out, "data.vocab_min_freq", min_freq);
            }
            Command::Train(a) => {
                push(&mut out, "paths.source", &a.source);
                push(&mut out, "paths.target", &a.target);
                push(&mut out, "paths.vocab", &a.vocab);
                push(&mut out, "paths.checkpoint", &a.checkpoint);
                push(&mut out, "paths.log", &a.log);
                push(&mut out, "train.total_steps", &a.steps);
                push(&mut out, "train.base_lr", &a.lr);
                push(&mut out, "train.warmup_steps", &a.warmup);
            }
            Command::Translate { decode, output } => {
                decode.overrides(&mut out);
                push(&mut out, "paths.output", output);
            }
            Command::Bench {
                decode,
                warmup,
                report,
                output,
            } => {
                decode.overrides(&mut out);
                push(&mut out, "decode.warmup", warmup);
                push(&mut out, "paths.report", report);
                push(&mut out, "paths.output", output);
            }
            _ => {}
        }
        out
    }
}

fn require(cfg: &ResolvedConfig, name: &str) -> Result<PathBuf, String> {
    cfg.path(name)
        .ok_or_else(|| format!("no {name} path given (flag --{name} or config key paths.{name})"))
}

fn read_lines(path: Option<PathBuf>) -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let mut text = String::new();
    match path {
        Some(p) if p.as_os_str() != "-" => {
            text = fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        }
        _ => {
            io::stdin().read_to_string(&mut text)?;
        }
    }
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: Option<PathBuf>, lines: &[String]) -> CliResult {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    match path {
        Some(p) if p.as_os_str() != "-" => fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display()))?,
        _ => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_train(cfg: &ResolvedConfig, resume: bool) -> CliResult {
    let source = require(cfg, "source")?;
    let target = require(cfg, "target")?;
    let vocab_path = require(cfg, "vocab")?;
    let ckpt_path = require(cfg, "checkpoint")?;
    for p in [&source, &target, &vocab_path] {
        if !p.exists() {
            return Err(format!("{}: no such file", p.display()).into());
        }
    }
    let vocab = Vocabulary::load(&vocab_path)?;
    let corpus = ParallelCorpus::load(&source, &target, &vocab)?;
    let train_cfg = cfg.config.train.clone();
    let hash = cfg.hash();

    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint::<f32>(&ckpt_path)?;
        if ckpt.vocab != vocab {
            return Err("checkpoint vocabulary differs from --vocab".into());
        }
        Trainer::resume(ckpt, train_cfg)?
    } else {
        let model = Model::<f32>::new(cfg.config.model.model_config(vocab.len()))?;
        Trainer::new(model, train_cfg)?
    };
    let mut log = TrainLog::new(cfg.path("log").as_deref(), true)?;
    let every = trainer.cfg.checkpoint_every;
    trainer.fit(&corpus, &mut log, |t, m| {
        if m.step % every == 0 || m.step == t.cfg.total_steps {
            save_checkpoint(&ckpt_path, &t.model, Some(&t.opt), t.step(), &vocab, &hash)?;
        }
        Ok(())
    })?;
    save_checkpoint(
        &ckpt_path,
        &trainer.model,
        Some(&trainer.opt),
        trainer.step(),
        &vocab,
        &hash,
    )?;
    eprintln!(
        "trained to step {} on {} pairs; checkpoint {}",
        trainer.step(),
        corpus.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn run_bench(cfg: &ResolvedConfig) -> CliResult {
    let ckpt_path = require(cfg, "checkpoint")?;
    let lines = read_lines(cfg.path("input"))?;
    let start = std::time::Instant::now();
    let ckpt = load_checkpoint::<f32>(&ckpt_path)?;
    let load_seconds = start.elapsed().as_secs_f64();
    let d = &cfg.config.decode;
    let (mut report, out) = bench_model(&ckpt.model, &ckpt.vocab, &lines, d.mode, d.batch_size, d.warmup)?;
    report.load_seconds = load_seconds;
    report.config_hash = cfg.hash();
    if let Some(p) = cfg.path("report") {
        fs::write(&p, report.to_toml()).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    if let Some(p) = cfg.path("output") {
        write_lines(Some(p), &out)?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn run_selfcheck(quick: bool) -> CliResult {
    let outcomes = selfcheck::run_all(quick);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(format!("{failed} of {} self-checks failed", outcomes.len()).into());
    }
    println!("all {} self-checks passed", outcomes.len());
    Ok(())
}

fn run_toy_data(out_dir: &Path, task: ToyTask, train: usize, test: usize, seed: u64) -> CliResult {
    fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let spec = ToySpec {
        task,
        ..ToySpec::default()
    };
    for (name, n, s) in [("train", train, seed), ("test", test, seed.wrapping_add(1_000_003))] {
        let pairs = spec.generate(n, s);
        let src: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<String> = pairs.into_iter().map(|p| p.1).collect();
        write_lines(Some(out_dir.join(format!("{name}.src"))), &src)?;
        write_lines(Some(out_dir.join(format!("{name}.tgt"))), &tgt)?;
    }
    spec.vocabulary().save(&out_dir.join("vocab.txt"))?;
    println!("wrote {train} training and {test} test pairs to {}", out_dir.display());
    Ok(())
}

fn execute(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| format!("cannot configure {n} threads: {e}"))?;
    }
    let mut overrides = cli.overrides.clone();
    overrides.extend(cli.command.overrides());
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::Vocab { files, .. } => {
            let out = require(&cfg, "vocab")?;
            let v = build_vocab(files, cfg.config.data.vocab_max_size, cfg.config.data.vocab_min_freq)?;
            v.save(&out)?;
            println!("{} entries written to {}", v.len(), out.display());
        }
        Command::Train(a) => run_train(&cfg, a.resume)?,
        Command::Translate { .. } => {
            let ckpt = load_checkpoint::<f32>(&require(&cfg, "checkpoint")?)?;
            let lines = read_lines(cfg.path("input"))?;
            let b = match cfg.config.decode.mode {
                DecodeMode::Latency => 1,
                DecodeMode::Batched => cfg.config.decode.batch_size,
            };
            let (out, _) = translate_all(&ckpt.model, &ckpt.vocab, &lines, b, 1)?;
            write_lines(cfg.path("output"), &out)?;
        }
        Command::Bench { .. } => run_bench(&cfg)?,
        Command::Compare { reports } => {
            let parsed = reports
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                    BenchReport::from_toml(&text).map_err(|e| format!("{}: {e}", p.display()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", compare_runs(&parsed)?);
        }
        Command::Score { hyp, reference } => {
            let h = read_lines(Some(hyp.clone()))?;
            let r = read_lines(Some(reference.clone()))?;
            let h: Vec<&str> = h.iter().map(String::as_str).collect();
            let r: Vec<&str> = r.iter().map(String::as_str).collect();
            println!("BLEU = {:.2}", bleu(&h, &r)?);
        }
        Command::Selfcheck { quick } => run_selfcheck(*quick)?,
        Command::ToyData {
            out_dir,
            task,
            train,
            test,
            seed,
        } => run_toy_data(out_dir, *task, *train, *test, *seed)?,
        Command::ShowConfig => {
            print!("{}", cfg.describe());
            println!("# config hash {}", cfg.hash());
        }
    }
    Ok(())
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        let part = s.to_string();
        if !msg.contains(&part) {
            msg.push_str(": ");
            msg.push_str(&part);
        }
        src = s.source();
    }
    msg
}

/// Parses `args` (including the program name) and runs the command.
///
/// Returns 0 on success, 1 on a runtime failure and 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", error_chain(e.as_ref()));
            1
        }
    }
}
