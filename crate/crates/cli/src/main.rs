//! `g2p`: generate a synthetic corpus, train, evaluate, export alignment
//! heatmaps and run the gradient oracle.
//!
//! Exit codes: 0 success, 2 usage or rejected input, 3 I/O or file format,
//! 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use g2p::evalkit::{alignment_maps, alignment_metrics, evaluate, export_heatmap, EvalOptions};
use g2p::seqmodel::ModelParams;
use g2p::synthcorpus::{generate, Corpus, CorpusManifest, Split};
use g2p::trainer::{grad_check, train, Ablation, CheckedLoss, TrainConfig, TrainOptions};
use g2p::Error;

#[derive(Parser, Debug)]
#[command(name = "g2p", version, about = "Gloss-to-pose production with cross-modal alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus file.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of glosses (at least 5).
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 8)]
        joints: usize,
        #[arg(long, default_value_t = 600)]
        train: usize,
        #[arg(long, default_value_t = 60)]
        dev: usize,
        #[arg(long, default_value_t = 60)]
        test: usize,
        #[arg(long, default_value_t = 0.02)]
        noise_std: f64,
    },
    /// Train a model; writes log, checkpoints and the best dev report.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Key-value run config; built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = AblationArg::Full)]
        ablation: AblationArg,
        /// Continue from the saved state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Save state and stop after this many optimizer steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Decode a split autoregressively and write its metric report.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Cap on decoded frames per sample.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Export one sample's similarity and cross-attention heatmaps.
    Align {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
        #[arg(long)]
        sample: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, value_enum, default_value_t = WhichArg::All)]
        which: WhichArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    Full,
    NoCsa,
    NoMsc,
    None,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoCsa => Ablation::NoCsa,
            AblationArg::NoMsc => Ablation::NoMsc,
            AblationArg::None => Ablation::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WhichArg {
    Acc,
    Ali,
    Com,
    All,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Io(m) => ("io", m),
            Failure::Numeric(m) => ("numeric", m),
        };
        // Keep the message on one line for scripts.
        format!("error[{kind}]: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Shape { .. } | Error::InvalidInput(_) => Failure::Usage(msg),
            Error::Io { .. } | Error::Format { .. } => Failure::Io(msg),
            Error::NonFinite { .. } | Error::Domain { .. } => Failure::Numeric(msg),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", Failure::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenCorpus {
            seed,
            out,
            vocab,
            joints,
            train,
            dev,
            test,
            noise_std,
        } => {
            let manifest = CorpusManifest {
                seed,
                glosses: vocab,
                joints,
                train,
                dev,
                test,
                noise_std,
            };
            manifest.validate()?;
            let corpus = generate(&manifest)?;
            corpus.save(&out)?;
            println!(
                "corpus {}: seed={} glosses={} joints={} train={} dev={} test={} noise_std={}",
                out.display(),
                manifest.seed,
                manifest.glosses,
                manifest.joints,
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                manifest.noise_std
            );
            Ok(())
        }
        Command::Train {
            corpus,
            config,
            out_dir,
            ablation,
            resume,
            stop_after,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let base = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            let cfg = base.with_ablation(ablation.into());
            let outcome = train(&cfg, &corpus, &out_dir, TrainOptions { resume, stop_after })?;
            println!(
                "steps={} finished={} out_dir={}",
                outcome.state.step,
                outcome.finished,
                out_dir.display()
            );
            for (epoch, report) in &outcome.evaluations {
                println!("dev epoch={epoch} {}", one_line(&report.to_kv()));
            }
            if let Some((epoch, dtw)) = outcome.state.best_dev {
                println!("best dev epoch={epoch} dtw_p={dtw}");
            }
            Ok(())
        }
        Command::Evaluate {
            corpus,
            checkpoint,
            split,
            out,
            max_len,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let params = ModelParams::load(&checkpoint)?;
            check_joints(&corpus, &params)?;
            let report = evaluate(&params, corpus.split(split.into()), EvalOptions { max_len })?;
            report.write(&out)?;
            print!("{}", report.to_kv());
            Ok(())
        }
        Command::Align {
            corpus,
            checkpoint,
            split,
            sample,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let params = ModelParams::load(&checkpoint)?;
            check_joints(&corpus, &params)?;
            let split: Split = split.into();
            let samples = corpus.split(split);
            let s = samples.get(sample).ok_or_else(|| {
                Failure::Usage(format!(
                    "sample {sample} out of range: {} split has {} samples",
                    split.name(),
                    samples.len()
                ))
            })?;
            let (sim, attention) = alignment_maps(&params, s)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
            let (sim_csv, sim_pgm) = export_heatmap(&sim, out.join("similarity"))?;
            let (att_csv, att_pgm) = export_heatmap(&attention, out.join("cross_attention"))?;
            let scores = alignment_metrics(&sim, &s.alignment)?;
            for p in [&sim_csv, &sim_pgm, &att_csv, &att_pgm] {
                println!("wrote {}", p.display());
            }
            println!("tau={} segment_accuracy={}", scores.tau, scores.segment_accuracy);
            Ok(())
        }
        Command::GradCheck { which, seed } => {
            let losses: &[CheckedLoss] = match which {
                WhichArg::Acc => &[CheckedLoss::Acc],
                WhichArg::Ali => &[CheckedLoss::Ali],
                WhichArg::Com => &[CheckedLoss::Com],
                WhichArg::All => &CheckedLoss::ALL,
            };
            let cfg = TrainConfig::default();
            println!("loss  seed  coords  redraws  max_rel_error  status  shape");
            let mut failed = Vec::new();
            for &loss in losses {
                let r = grad_check(loss, seed, cfg.tau, cfg.sigma)?;
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{:<4}  {:<4}  {:<6}  {:<7}  {:<13.3e}  {:<6}  {}",
                    loss.name(),
                    r.seed,
                    r.coordinates,
                    r.redraws,
                    r.max_rel_error,
                    status,
                    r.shape
                );
                if !r.passed() {
                    failed.push(loss.name());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Numeric(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn check_joints(corpus: &Corpus, params: &ModelParams) -> CliResult {
    if corpus.manifest.joints != params.config.joints {
        return Err(Failure::Usage(format!(
            "corpus has {} joints, checkpoint expects {}",
            corpus.manifest.joints, params.config.joints
        )));
    }
    Ok(())
}

fn one_line(kv: &str) -> String {
    kv.lines().collect::<Vec<_>>().join(" ")
}
