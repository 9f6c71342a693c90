//! Trains a small tagger end to end: corpus, split, vocabulary, training
//! with early stopping, held-out metrics, and a checkpoint round trip.
//!
//! Run with: `cargo run --release --example train_quickstart`

use seqmark::checkpoint::{load_checkpoint, save_checkpoint};
use seqmark::config::{ModelConfig, TrainConfig};
use seqmark::data::{split_dataset, synth_generate, TokenizeMode, Vocab};
use seqmark::eval::evaluate;
use seqmark::model::Model;
use seqmark::train::{encode_examples, train};

fn main() -> seqmark::Result<()> {
    let corpus = synth_generate(21, 120, 40, 24)?;
    let split = split_dataset(corpus, 0)?;
    println!(
        "split: {} train / {} validation / {} test",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    // The vocabulary comes from training data only; unseen test tokens fall
    // back to the shared <unk> entry.
    let vocab = Vocab::build(&split.train, 1);
    println!("vocabulary: {} token types", vocab.len());

    let config = ModelConfig {
        d_model: 16,
        encoder_depth: 1,
        d_ff: 32,
        d_adj: 16,
        d_inner: 32,
        d_state: 4,
        h1: 16,
        h2: 8,
        n_max: 24,
        vocab_size: vocab.len(),
        tokenize: TokenizeMode::Whitespace,
        ..ModelConfig::default()
    };
    let mut model = Model::assemble(config)?;

    let train_set = encode_examples(&vocab, &split.train);
    let val_set = encode_examples(&vocab, &split.validation);
    let test_set = encode_examples(&vocab, &split.test);

    let schedule = TrainConfig {
        lr: 1e-3,
        epochs: 12,
        patience: Some(4),
        seed: 0,
    };
    let outcome = train(&mut model, &schedule, &train_set, &val_set)?;
    for stats in &outcome.history {
        println!(
            "epoch {:>2}  train loss {:>7.4}  val loss {:>7.4}  val acc {:.3}",
            stats.epoch, stats.train_loss, stats.val_loss, stats.val_sentence_acc
        );
    }
    println!(
        "kept epoch {} (val loss {:.4}), stopped early: {}",
        outcome.best_epoch, outcome.best_val_loss, outcome.stopped_early
    );

    let report = evaluate(&model, &test_set)?;
    println!("\ntest sentence accuracy: {:.3}", report.sentence_accuracy);
    for m in &report.per_label {
        println!(
            "  {:<7}  precision {:.3}  recall {:.3}  f1 {:.3}",
            m.label, m.precision, m.recall, m.f1
        );
    }

    // A checkpoint carries the configuration, every parameter tensor, and
    // the vocabulary; loading reproduces the model exactly.
    let dir = std::env::temp_dir().join("seqmark_quickstart");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&model, &vocab, &path)?;
    let (reloaded, _) = load_checkpoint(&path)?;
    let probe = &test_set[0];
    assert_eq!(model.decode(&probe.ids)?, reloaded.decode(&probe.ids)?);
    println!(
        "\ncheckpoint at {} reloads to identical decisions",
        path.display()
    );
    Ok(())
}
