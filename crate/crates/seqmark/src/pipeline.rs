//! File-level workflows behind the command-line surface: corpus synthesis,
//! train-from-file to checkpoint, checkpoint evaluation, and span marking
//! of raw text.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{
    parse_dataset, serialize_dataset, split_dataset, synth_generate, tokenize, LabeledExample,
    Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mark, render_marked, MetricsReport, RumorSpan};
use crate::model::{Ablation, Model};
use crate::train::{encode_examples, train, TrainOutcome};

/// Default vocabulary size for generated corpora.
pub const SYNTH_VOCAB_SIZE: usize = 50;
/// Default maximum sentence length for generated corpora.
pub const SYNTH_MAX_LEN: usize = 32;

/// Generates a corpus and writes it in the dataset file format.
/// Returns the number of examples written.
pub fn synth_to_file(
    seed: u64,
    count: usize,
    vocab_size: usize,
    max_len: usize,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let examples = synth_generate(seed, count, vocab_size, max_len)?;
    let file = File::create(path)?;
    serialize_dataset(&examples, BufWriter::new(file))?;
    Ok(examples.len())
}

/// Reads a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let file = File::open(path)?;
    parse_dataset(BufReader::new(file))
}

/// Everything `train_to_checkpoint` leaves behind besides the checkpoint.
#[derive(Debug)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub split_sizes: (usize, usize, usize),
    pub vocab_len: usize,
    /// Metrics of the retained (best-validation) model on the test split.
    pub test_metrics: MetricsReport,
}

/// Trains on a dataset file and writes a checkpoint.
///
/// The file is split 8:1:1 with the training seed, the vocabulary is built
/// from the training split only, and the model config's `vocab_size` and
/// `n_max` are adjusted to fit the data before assembly (the checkpoint
/// stores the adjusted config). After training, the retained model is
/// scored on the test split.
pub fn train_to_checkpoint(
    data_path: impl AsRef<Path>,
    mut model_config: ModelConfig,
    train_config: TrainConfig,
    ablation: Option<Ablation>,
    out_path: impl AsRef<Path>,
) -> Result<TrainReport> {
    let examples = load_dataset(data_path)?;
    let split = split_dataset(examples, train_config.seed)?;
    let vocab = Vocab::build(&split.train, 1);

    if let Some(ablation) = ablation {
        ablation.apply(&mut model_config);
    }
    model_config.vocab_size = vocab.len();
    let longest = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .map(|ex| ex.len())
        .max()
        .unwrap_or(0);
    model_config.n_max = model_config.n_max.max(longest);

    let mut model = Model::assemble(model_config)?;
    let train_set = encode_examples(&vocab, &split.train);
    let val_set = encode_examples(&vocab, &split.validation);
    let test_set = encode_examples(&vocab, &split.test);

    let outcome = train(&mut model, &train_config, &train_set, &val_set)?;
    let test_metrics = evaluate(&model, &test_set)?;
    save_checkpoint(&model, &vocab, out_path)?;

    Ok(TrainReport {
        outcome,
        split_sizes: (split.train.len(), split.validation.len(), split.test.len()),
        vocab_len: vocab.len(),
        test_metrics,
    })
}

/// Scores a checkpoint against every sequence in a dataset file.
pub fn evaluate_checkpoint(
    ckpt_path: impl AsRef<Path>,
    data_path: impl AsRef<Path>,
) -> Result<MetricsReport> {
    let (model, vocab) = load_checkpoint(ckpt_path)?;
    let examples = load_dataset(data_path)?;
    let encoded = encode_examples(&vocab, &examples);
    evaluate(&model, &encoded)
}

/// Result of marking one line of raw text.
#[derive(Debug)]
pub struct Marked {
    pub tokens: Vec<String>,
    pub spans: Vec<RumorSpan>,
    /// The input rendered with every span wrapped in brackets.
    pub rendered: String,
}

/// Tokenizes raw text with the checkpoint's tokenizer mode, decodes it, and
/// returns the rumor spans plus a bracket-rendered line.
pub fn mark_with_checkpoint(ckpt_path: impl AsRef<Path>, text: &str) -> Result<Marked> {
    let (model, vocab) = load_checkpoint(ckpt_path)?;
    let tokens = tokenize(text, model.config.tokenize);
    if tokens.is_empty() {
        return Err(Error::Config(
            "nothing to mark: the input has no tokens".into(),
        ));
    }
    let spans = mark(&model, &vocab, &tokens)?;
    let rendered = render_marked(&tokens, &spans, model.config.tokenize);
    Ok(Marked {
        tokens,
        spans,
        rendered,
    })
}
