use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use cocktail::corpus::{Corpus, Split};
use cocktail::dsp::export_image;
use cocktail::extractor::{split_channels, Variant};
use cocktail::selfcheck;
use cocktail::train::{self, load_checkpoint, Models, Stage};
use cocktail::{Error, RunConfig};
use cocktail_tensor::{DType, OpKind, Tape, Unary};

/// Environment variable setting the worker thread count.
const THREADS_VAR: &str = "COCKTAIL_THREADS";

#[derive(Parser)]
#[command(name = "cocktail", version, about = "Speaker identification in two-speaker mixtures")]
struct Cli {
    /// JSON run config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus and write it to a directory.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage.
    Train {
        /// pretrain_extractor, pretrain_classifier or joint.
        #[arg(long)]
        stage: String,
        #[arg(long)]
        resume: bool,
        /// Replace the attention stages with dilated blocks; checkpoints go
        /// to an `ablation` subdirectory.
        #[arg(long)]
        ablation: bool,
        /// Overrides trainer.checkpoint_dir.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Overrides trainer.corpus_dir.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Evaluate a stage checkpoint and write report.json and report.txt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "validation")]
        split: String,
        #[arg(long)]
        n_sources: Option<usize>,
        /// Report directory; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write mixture, reference and estimate spectrograms of one mixture.
    ExportSpectrograms {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "validation")]
        split: String,
        #[arg(long, default_value = "spectrograms")]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Gradient checks, PIT oracle and loss-inequality suites.
    Selfcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sign-flips the backward rule of one op (test harness hook).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// The checkpoint's own config unless one was given explicitly.
fn checkpoint_config(explicit: Option<&Path>, checkpoint: &Path) -> anyhow::Result<RunConfig> {
    if let Some(p) = explicit {
        return Ok(RunConfig::load(p)?);
    }
    let manifest = cocktail_tensor::checkpoint::load_manifest(checkpoint)
        .map_err(|e| Error::MissingPrerequisite(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let cfg: RunConfig = serde_json::from_value(manifest.metadata["config"].clone())
        .map_err(|e| Error::Config(format!("checkpoint {} has no readable config: {e}", checkpoint.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn open_corpus(cfg: &mut RunConfig, dir: Option<PathBuf>) -> anyhow::Result<Corpus> {
    if dir.is_some() {
        cfg.trainer.corpus_dir = dir;
    }
    Ok(Corpus::open(&cfg.corpus, cfg.trainer.corpus_dir.as_ref())?)
}

fn parse_fault(name: &str) -> anyhow::Result<OpKind> {
    Ok(match name {
        "add" => OpKind::Add,
        "sub" => OpKind::Sub,
        "mul" => OpKind::Mul,
        "scale" => OpKind::Scale,
        "relu" => OpKind::Unary(Unary::Relu),
        "sigmoid" => OpKind::Unary(Unary::Sigmoid),
        "tanh" => OpKind::Unary(Unary::Tanh),
        "conv2d" => OpKind::Conv2d,
        "pool2d" => OpKind::Pool2d,
        "upsample2x" => OpKind::Upsample2x,
        "affine" => OpKind::Affine,
        "softmax" => OpKind::Softmax,
        "channel_max" => OpKind::ChannelMax,
        "reduce" => OpKind::Reduce,
        other => bail!(Error::Config(format!("unknown op {other:?} for fault injection"))),
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.config.as_deref();
    if cli.print_config {
        println!("{}", load_config(config)?.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!(Error::Config("no command given (see --help)".into()));
    };
    match command {
        Command::GenCorpus { out, force } => {
            let cfg = load_config(config)?;
            let corpus = Corpus::synthesize(&cfg.corpus)?;
            corpus.write(&out, force)?;
            let m = corpus.manifest();
            println!(
                "wrote {} speakers x {} segments to {} (train {}, validation {}, test {})",
                cfg.corpus.n_speakers,
                cfg.corpus.segments_per_speaker,
                out.display(),
                m.split.counts.train,
                m.split.counts.validation,
                m.split.counts.test
            );
            println!("corpus hash {}", m.corpus_hash);
            println!("silence fraction {:.4}", m.silence_fraction);
        }
        Command::Train {
            stage,
            resume,
            ablation,
            checkpoint_dir,
            corpus,
        } => {
            let stage: Stage = stage.parse()?;
            let mut cfg = load_config(config)?;
            if let Some(dir) = checkpoint_dir {
                cfg.trainer.checkpoint_dir = dir;
            }
            if ablation {
                cfg.extractor.variant = Variant::Ablation;
                cfg.trainer.checkpoint_dir = cfg.trainer.checkpoint_dir.join("ablation");
            }
            cfg.validate()?;
            let corpus = open_corpus(&mut cfg, corpus)?;
            let outcome = train::train_stage(&cfg, &corpus, stage, resume)?;
            for r in outcome.log.iter().filter(|r| r.val_metrics.is_some()) {
                println!("{}", serde_json::to_string(r)?);
            }
            println!(
                "{stage}: {} epochs, {} steps, best epoch {}{}; checkpoint {}",
                outcome.epochs_run,
                outcome.steps,
                outcome.best_epoch,
                if outcome.stopped_early { " (stopped early)" } else { "" },
                outcome.dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            n_sources,
            out,
            corpus,
        } => {
            let split: Split = split.parse()?;
            let mut cfg = checkpoint_config(config, &checkpoint)?;
            if let Some(n) = n_sources {
                if n != cfg.n_sources() {
                    bail!(Error::Config(format!(
                        "--n-sources {n} does not match the checkpoint's {} sources",
                        cfg.n_sources()
                    )));
                }
            }
            let corpus = open_corpus(&mut cfg, corpus)?;
            let report = train::evaluate(&cfg, &corpus, &checkpoint, split)?;
            let (json, text) = report.write(out.as_deref().unwrap_or(&checkpoint))?;
            print!("{}", report.table());
            println!("wrote {} and {}", json.display(), text.display());
        }
        Command::ExportSpectrograms {
            checkpoint,
            index,
            split,
            out,
            corpus,
        } => {
            let split: Split = split.parse()?;
            let mut cfg = checkpoint_config(config, &checkpoint)?;
            let corpus = open_corpus(&mut cfg, corpus)?;
            let sample = train::eval_mixture(&cfg, &corpus, split, index)?;
            let estimates = match cfg.precision {
                DType::F32 => extract::<f32>(&cfg, &checkpoint, &sample.mixture)?,
                DType::F64 => extract::<f64>(&cfg, &checkpoint, &sample.mixture)?,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut written = vec![export_image(&sample.mixture, &out.join("mixture"))?];
            for (i, r) in sample.references.iter().enumerate() {
                written.push(export_image(r, &out.join(format!("reference{i}")))?);
            }
            for (c, e) in estimates.iter().enumerate() {
                written.push(export_image(e, &out.join(format!("estimate{c}")))?);
            }
            for (pgm, csv) in &written {
                println!("{} {}", pgm.display(), csv.display());
            }
        }
        Command::Selfcheck { seed, inject_fault } => {
            let fault = inject_fault.as_deref().map(parse_fault).transpose()?;
            let report = selfcheck::run(seed, fault)?;
            for line in &report.lines {
                println!("{line}");
            }
            let failed = report.lines.iter().filter(|l| !l.passed).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", report.lines.len());
            }
            println!("all {} checks passed", report.lines.len());
        }
    }
    Ok(())
}

fn extract<T: cocktail_tensor::Element>(
    cfg: &RunConfig,
    checkpoint: &Path,
    mixture: &cocktail::dsp::Spectrogram,
) -> anyhow::Result<Vec<cocktail::dsp::Spectrogram>> {
    let (tensors, _) = load_checkpoint::<T>(cfg, checkpoint)?;
    let mut models = Models::<T>::new(cfg);
    models.extractor.store.load_values(&tensors)?;
    let mut tape = Tape::new();
    let x = tape.constant(mixture.to_tensor());
    let y = models.extractor.forward(&mut tape, x)?;
    Ok(split_channels(tape.value(y), mixture.frames())?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Invalid(_) | Error::HashMismatch { .. }) => 2,
        Some(Error::MissingPrerequisite(_)) => 3,
        Some(Error::NonFinite(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var(THREADS_VAR) {
        let threads = match n.parse::<usize>() {
            Ok(t) if t > 0 => t,
            _ => {
                eprintln!("error: {THREADS_VAR} must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
