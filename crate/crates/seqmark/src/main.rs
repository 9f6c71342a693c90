//! `seqmark` — locate and mark rumor spans in token sequences.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqmark::config::{load_config, ConfigFile, ModelConfig};
use seqmark::eval::MetricsReport;
use seqmark::model::{run_gradcheck, Ablation};
use seqmark::pipeline::{
    evaluate_checkpoint, mark_with_checkpoint, synth_to_file, train_to_checkpoint, SYNTH_MAX_LEN,
    SYNTH_VOCAB_SIZE,
};

/// Worst acceptable relative error between analytic and finite-difference
/// gradients before `gradcheck` fails the run.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "seqmark",
    about = "Locate and mark rumor spans in token sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus.
    Synth {
        /// Generator seed; the same seed reproduces the corpus bitwise.
        #[arg(long)]
        seed: u64,
        /// Number of sequences to generate.
        #[arg(long)]
        count: usize,
        /// Output dataset file (token TAB label lines, blank-line separated).
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary size (at least 20).
        #[arg(long, default_value_t = SYNTH_VOCAB_SIZE)]
        vocab_size: usize,
        /// Longest sentence to generate (at least 8).
        #[arg(long, default_value_t = SYNTH_MAX_LEN)]
        max_len: usize,
    },
    /// Train on a dataset file (split 8:1:1) and write a checkpoint.
    Train {
        /// Dataset file to train on.
        #[arg(long)]
        data: PathBuf,
        /// Optional key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Train a single-component ablation instead of the full model.
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Score a checkpoint against a dataset file.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file with gold labels.
        #[arg(long)]
        data: PathBuf,
        /// Emit one machine-readable JSON object instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Mark rumor spans in a raw text line.
    Mark {
        /// Checkpoint to decode with.
        #[arg(long)]
        ckpt: PathBuf,
        /// Text to tokenize and mark.
        #[arg(long)]
        text: String,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Optional key=value config file; a compact desk-scale
        /// configuration is checked when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the probe's parameters and its random input sequence.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Prints one line to stdout. When the reader has gone away (say,
/// `seqmark eval --json | head`) the process stops quietly like any
/// well-behaved filter; other write failures are reported as errors.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            eprintln!("error: cannot write to stdout: {e}");
            std::process::exit(1);
        }
    }};
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!(
            "unknown ablation {s:?}; expected one of: {}",
            names.join(", ")
        )
    })
}

fn print_metrics(report: &MetricsReport) {
    outln!(
        "{:<8} {:>9} {:>9} {:>9} {:>9}",
        "label",
        "accuracy",
        "precision",
        "recall",
        "f1"
    );
    for m in &report.per_label {
        outln!(
            "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            m.label,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        );
    }
    outln!(
        "sentence accuracy {:.4} over {} sequences ({} tokens)",
        report.sentence_accuracy,
        report.sequences,
        report.tokens
    );
}

fn run(cli: Cli) -> seqmark::Result<bool> {
    match cli.command {
        Command::Synth {
            seed,
            count,
            out,
            vocab_size,
            max_len,
        } => {
            let written = synth_to_file(seed, count, vocab_size, max_len, &out)?;
            outln!("wrote {written} sequences to {}", out.display());
        }
        Command::Train {
            data,
            config,
            out,
            ablation,
        } => {
            let ConfigFile { model, train } = match config {
                Some(path) => load_config(&path)?,
                None => ConfigFile::default(),
            };
            let report = train_to_checkpoint(&data, model, train, ablation, &out)?;
            let (n_train, n_val, n_test) = report.split_sizes;
            outln!(
                "split {n_train}/{n_val}/{n_test}, vocabulary {} tokens",
                report.vocab_len
            );
            for e in &report.outcome.history {
                outln!(
                    "epoch {:>3}: train loss {:.4}, val loss {:.4}, val sentence acc {:.4}",
                    e.epoch,
                    e.train_loss,
                    e.val_loss,
                    e.val_sentence_acc
                );
            }
            if report.outcome.stopped_early {
                outln!("stopped early; kept epoch {}", report.outcome.best_epoch);
            } else {
                outln!("kept epoch {}", report.outcome.best_epoch);
            }
            outln!("test split metrics:");
            print_metrics(&report.test_metrics);
            outln!("wrote checkpoint to {}", out.display());
        }
        Command::Eval { ckpt, data, json } => {
            let report = evaluate_checkpoint(&ckpt, &data)?;
            if json {
                outln!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report is serializable")
                );
            } else {
                print_metrics(&report);
            }
        }
        Command::Mark { ckpt, text } => {
            let marked = mark_with_checkpoint(&ckpt, &text)?;
            if marked.spans.is_empty() {
                outln!("no rumor spans");
            }
            for span in &marked.spans {
                outln!("[{}, {}) {}", span.start, span.end, span.text);
            }
            outln!("{}", marked.rendered);
        }
        Command::Gradcheck { config, seed } => {
            let model = match config {
                Some(path) => load_config(&path)?.model,
                None => ModelConfig::gradcheck_desk(),
            };
            let report = run_gradcheck(&model, seed)?;
            for group in &report.groups {
                outln!("{:<24} max rel err {:.3e}", group.name, group.max_rel_err);
            }
            if report.max_rel_err >= GRADCHECK_TOLERANCE {
                let worst = report.worst_group().expect("checked groups exist");
                eprintln!(
                    "gradcheck FAILED: group {} at {:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})",
                    worst.name, worst.max_rel_err
                );
                return Ok(false);
            }
            outln!(
                "gradcheck passed: worst {:.3e} < {GRADCHECK_TOLERANCE:.0e}",
                report.max_rel_err
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
