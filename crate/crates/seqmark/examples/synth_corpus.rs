//! Generates a synthetic rumor corpus and tours what is in it.
//!
//! Background tokens (`w12`, `w3`, ...) carry the `O` label. Planted rumor
//! phrases walk a reserved sub-vocabulary (`r0`, `r1`, ...) in small steps,
//! so their bigrams are characteristic; the first phrase token is `B-Rumor`
//! and the rest are `I-Rumor`. The generator steers the corpus mix toward
//! roughly 1% B / 19% I / 80% O.
//!
//! Run with: `cargo run --example synth_corpus`

use seqmark::data::{
    dataset_to_string, label_fractions, parse_dataset_str, synth_generate, BigramRumorBaseline,
};
use seqmark::eval::spans_from_labels;

fn main() -> seqmark::Result<()> {
    let examples = synth_generate(7, 200, 50, 32)?;

    println!("generated {} sequences\n", examples.len());
    for ex in examples.iter().take(3) {
        // Render with [ ... ] around each rumor span.
        let spans = spans_from_labels(&ex.labels);
        let mut rendered = String::new();
        for (t, token) in ex.tokens.iter().enumerate() {
            if spans.iter().any(|&(s, _)| s == t) {
                rendered.push_str("[ ");
            }
            rendered.push_str(token);
            if spans.iter().any(|&(_, e)| e == t + 1) {
                rendered.push_str(" ]");
            }
            rendered.push(' ');
        }
        println!("{}", rendered.trim_end());
        println!("  {} tokens, {} rumor spans\n", ex.len(), spans.len());
    }

    let [b, i, o] = label_fractions(&examples);
    println!("label mix: B {b:.3}  I {i:.3}  O {o:.3}");

    // An independent frequency model should find the phrases easily; this is
    // the same certificate the evaluation harness uses before trusting a
    // corpus.
    let half = examples.len() / 2;
    let baseline = BigramRumorBaseline::fit(&examples[..half]);
    println!(
        "bigram baseline rumor recall on held-out half: {:.3}",
        baseline.rumor_recall(&examples[half..])
    );

    // The on-disk format is one `token<TAB>label` line per token with a
    // blank line between sequences, and it round-trips exactly.
    let text = dataset_to_string(&examples);
    let reparsed = parse_dataset_str(&text)?;
    assert_eq!(reparsed, examples);
    let first_lines: Vec<&str> = text.lines().take(4).collect();
    println!("\nfile format starts:\n{}", first_lines.join("\n"));
    Ok(())
}
