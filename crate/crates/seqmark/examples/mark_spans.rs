//! Marks rumor spans in raw text with a freshly trained model.
//!
//! Run with: `cargo run --release --example mark_spans`

use seqmark::config::{ModelConfig, TrainConfig};
use seqmark::data::{synth_generate, tokenize, TokenizeMode, Vocab};
use seqmark::eval::{mark, render_marked};
use seqmark::model::Model;
use seqmark::train::{encode_examples, train};

fn main() -> seqmark::Result<()> {
    // Fit a small tagger on a synthetic corpus. Rumor phrases use the r*
    // sub-vocabulary, so the model learns to bracket runs of those tokens.
    let corpus = synth_generate(3, 120, 40, 24)?;
    let vocab = Vocab::build(&corpus, 1);
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
        constrained_decode: true,
        ..ModelConfig::default()
    };
    let mut model = Model::assemble(config)?;
    let encoded = encode_examples(&vocab, &corpus);
    let schedule = TrainConfig {
        lr: 1e-3,
        epochs: 12,
        patience: None,
        seed: 0,
    };
    train(&mut model, &schedule, &encoded, &encoded)?;

    for text in [
        "w3 w11 r2 r3 r5 r6 r8 r9 r0 r2 r3 r4 r6 r7 r9 w6 w0 w9",
        "w1 w4 w7 w2 w12 w5 w9 w3",
        "r0 r1 r3 r4 w2 w8 r5 r7 r8 r9",
    ] {
        let tokens = tokenize(text, model.config.tokenize);
        let spans = mark(&model, &vocab, &tokens)?;
        println!("input:  {text}");
        println!(
            "marked: {}",
            render_marked(&tokens, &spans, model.config.tokenize)
        );
        for span in &spans {
            println!("  [{}, {})  {}", span.start, span.end, span.text);
        }
        println!();
    }
    Ok(())
}
