use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use afadapter::data::{read_corpus, write_corpus, Domain, Lexicon, LexiconConfig};
use afadapter::harness::{emit_plots, forgetting_report, run_compare, CompareConfig, EvalConfig, EvalSet};
use afadapter::model::ModelConfig;
use afadapter::surgery::{extend_checkpoint, lora_attach, Checkpoint, InitPolicy, Technique, DEFAULT_LORA_TARGETS};
use afadapter::train::{run_pretraining_with, MetricsLog, StepRecord, TrainConfig};
use afadapter::Error;
use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "afadapter", version, about = "Width-extension continual pretraining on a small BERT-style encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (and its vocabulary file `<out>.vocab`).
    SynthData {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        sentences: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of domain words shared with the general domain.
        #[arg(long)]
        overlap: Option<f64>,
        /// Lexicon settings as JSON; must match between corpora that are used together.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Train a base model from random init on a general-domain corpus.
    PretrainBase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Add attention heads and FFN units to every layer.
    Extend {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        ffn: usize,
        #[arg(long, default_value = "zero_output")]
        init: InitPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continual MLM pretraining with one technique.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        technique: Technique,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Adapter rank when `lora` is requested on a checkpoint without adapters.
        #[arg(long, default_value_t = 8)]
        lora_rank: usize,
        #[arg(long, default_value_t = 16.0)]
        lora_alpha: f64,
    },
    /// Print total and trainable parameter counts.
    Params {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Masked-token accuracy of several checkpoints on one held-out set.
    EvalForgetting {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        tuned: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation settings as JSON (mask_rate, seed, max_seq_len, batch_size).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train every technique from the same base and report forgetting.
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        general: PathBuf,
        #[arg(long)]
        domain: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smoothed loss curves from metrics CSVs.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG chart per run.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct PretrainFile {
    /// `vocab_size` 0 means "take it from the corpus".
    model: Option<ModelConfig>,
    train: TrainConfig,
    init_seed: u64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("parsing {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_corpus(path: &Path, vocab_size: Option<usize>) -> anyhow::Result<Vec<afadapter::data::AnnotatedSequence>> {
    let (vocab, sentences) = read_corpus(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(v) = vocab_size {
        if vocab.len() != v {
            return Err(Error::VocabMismatch(format!(
                "{} has {} tokens, checkpoint expects {v}",
                path.display(),
                vocab.len()
            ))
            .into());
        }
    }
    Ok(sentences)
}

fn progress(label: &str, total: usize) -> impl FnMut(&StepRecord) + '_ {
    let every = (total / 20).max(1);
    let start = Instant::now();
    move |r: &StepRecord| {
        if r.step.is_multiple_of(every) || r.step + 1 == total {
            eprintln!(
                "{label} step {:>6}/{total}  lr {:.2e}  loss {:.4}  {:.0}s",
                r.step,
                r.lr,
                r.raw_loss,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData {
            domain,
            sentences,
            seed,
            out,
            overlap,
            lexicon,
        } => {
            let mut cfg: LexiconConfig = match lexicon {
                Some(p) => read_json(&p)?,
                None => LexiconConfig::default(),
            };
            if let Some(o) = overlap {
                cfg.overlap = o;
            }
            let lex = Lexicon::new(cfg)?;
            let corpus = lex.gen_corpus(domain, sentences, seed)?;
            write_corpus(&out, lex.vocab(), &corpus)?;
            println!("wrote {sentences} {domain} sentences to {}", out.display());
        }
        Command::PretrainBase {
            config,
            data,
            out,
            metrics,
        } => {
            let file: PretrainFile = read_json(&config)?;
            let (vocab, sentences) = read_corpus(&data).with_context(|| format!("reading {}", data.display()))?;
            let mut model = file.model.unwrap_or_else(|| ModelConfig::tiny(0));
            if model.vocab_size == 0 {
                model.vocab_size = vocab.len();
            } else if model.vocab_size != vocab.len() {
                return Err(Error::VocabMismatch(format!(
                    "config vocab_size {} but {} has {} tokens",
                    model.vocab_size,
                    data.display(),
                    vocab.len()
                ))
                .into());
            }
            let init = Checkpoint::init_base(&model, file.init_seed)?;
            let (ckpt, log) = run_pretraining_with(
                &init,
                Technique::FineTuning,
                &sentences,
                &file.train,
                progress("base", file.train.total_steps),
            )?;
            ckpt.save(&out)?;
            if let Some(m) = metrics {
                log.save(&m)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Extend {
            input,
            heads,
            ffn,
            init,
            seed,
            out,
        } => {
            let base = load_ckpt(&input)?;
            let ext = extend_checkpoint(&base, heads, ffn, init, seed)?;
            ext.save(&out)?;
            let c = ext.count_params();
            println!("wrote {}: {} trainable of {} ({:.2}%)", out.display(), c.trainable, c.total, 100.0 * c.ratio);
        }
        Command::Train {
            input,
            technique,
            data,
            config,
            out,
            metrics,
            lora_rank,
            lora_alpha,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            let mut ckpt = load_ckpt(&input)?;
            if technique == Technique::Lora && ckpt.config().lora.is_none() {
                ckpt = lora_attach(&ckpt, lora_rank, lora_alpha, &DEFAULT_LORA_TARGETS, cfg.seed)?;
            }
            let sentences = load_corpus(&data, Some(ckpt.config().vocab_size))?;
            let (tuned, log) =
                run_pretraining_with(&ckpt, technique, &sentences, &cfg, progress(technique.as_str(), cfg.total_steps))?;
            tuned.save(&out)?;
            log.save(&metrics)?;
            println!("wrote {} and {}", out.display(), metrics.display());
        }
        Command::Params { input } => {
            let c = load_ckpt(&input)?.count_params();
            println!("total      {}", c.total);
            println!("trainable  {}", c.trainable);
            println!("ratio      {:.2}%", 100.0 * c.ratio);
        }
        Command::EvalForgetting {
            base,
            tuned,
            data,
            out,
            config,
        } => {
            let base_ckpt = load_ckpt(&base)?;
            let eval: EvalConfig = match config {
                Some(p) => read_json(&p)?,
                None => EvalConfig {
                    max_seq_len: EvalConfig::default().max_seq_len.min(base_ckpt.config().max_seq_len),
                    ..EvalConfig::default()
                },
            };
            let others = tuned
                .iter()
                .map(|p| {
                    let tag = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                    Ok((tag, load_ckpt(p)?))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let heldout = load_corpus(&data, Some(base_ckpt.config().vocab_size))?;
            let set = EvalSet::new(&heldout, &eval, base_ckpt.config().vocab_size)?;
            let report = forgetting_report(&base_ckpt, &others, &set)?;
            fs::write(&out, report.to_csv())?;
            print!("{}", report.to_table());
        }
        Command::Compare {
            base,
            general,
            domain,
            config,
            out,
        } => {
            let cfg: CompareConfig = match config {
                Some(p) => read_json(&p)?,
                None => CompareConfig::default(),
            };
            let base_ckpt = load_ckpt(&base)?;
            let vocab = Some(base_ckpt.config().vocab_size);
            let general = load_corpus(&general, vocab)?;
            let domain = load_corpus(&domain, vocab)?;
            let every = (cfg.train.total_steps / 10).max(1);
            let report = run_compare(&base_ckpt, &general, &domain, &cfg, |t, step, loss| {
                if step % every == 0 {
                    eprintln!("{t} step {step:>6}/{}  loss {loss:.4}", cfg.train.total_steps);
                }
            })?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("comparison.csv"), report.to_csv())?;
            for (log, ckpt) in report.metrics.iter().zip(&report.checkpoints) {
                log.save(out.join(format!("{}.csv", log.meta.technique)))?;
                ckpt.save(out.join(format!("{}.ckpt", log.meta.technique)))?;
            }
            print!("{}", report.to_table());
            for f in &report.flags {
                eprintln!("note: {f}");
            }
        }
        Command::Plot {
            metrics,
            alpha,
            out,
            svg,
        } => {
            let mut runs = Vec::new();
            for p in &metrics {
                let tag = match p.file_stem() {
                    Some(s) => s.to_string_lossy().into_owned(),
                    None => bail!(Usage(format!("cannot derive a run name from {}", p.display()))),
                };
                runs.push((tag, MetricsLog::load(p).with_context(|| format!("reading {}", p.display()))?));
            }
            for f in emit_plots(&runs, alpha, &out, svg)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite(_) => 3,
                Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
