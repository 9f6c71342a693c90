//! Pokes the linear-chain CRF directly: path scores, the global partition
//! function, and what constrained decoding does to scheme-breaking paths.
//!
//! Run with: `cargo run --example crf_playground`

use seqmark::data::{bio_violations, Label};
use seqmark::marking::{crf_log_partition, crf_score, viterbi_decode};
use seqmark::tensor::Tensor;

fn main() -> seqmark::Result<()> {
    // Three positions, three labels (B-Rumor, I-Rumor, O). The middle
    // position's emissions scream I-Rumor; the first position slightly
    // prefers it too, which no valid tagging allows.
    let emissions = Tensor::new(
        vec![3, 3],
        vec![
            0.2, 0.5, 0.1, // position 0
            0.0, 2.0, 0.0, // position 1
            0.1, 0.3, 0.4, // position 2
        ],
    )?;
    let transitions = Tensor::new(vec![3, 3], vec![0.0; 9])?;
    let start = Tensor::new(vec![3], vec![0.0; 3])?;
    let end = Tensor::new(vec![3], vec![0.0; 3])?;

    let free = viterbi_decode(&emissions, &transitions, &start, &end, false)?;
    let legal = viterbi_decode(&emissions, &transitions, &start, &end, true)?;
    let names = |path: &[Label]| -> Vec<&str> { path.iter().map(|l| l.name()).collect() };
    println!(
        "unconstrained: {:?}  violations at {:?}",
        names(&free),
        bio_violations(&free)
    );
    println!(
        "constrained:   {:?}  violations at {:?}",
        names(&legal),
        bio_violations(&legal)
    );

    // The partition function normalizes path scores into probabilities.
    // Summing exp(score) over all 27 paths by hand gives the same value.
    let log_z = crf_log_partition(&emissions, &transitions, &start, &end)?;
    let mut by_hand = 0.0;
    for a in Label::ALL {
        for b in Label::ALL {
            for c in Label::ALL {
                by_hand += crf_score(&emissions, &transitions, &start, &end, &[a, b, c])?.exp();
            }
        }
    }
    println!("\nlog partition  {log_z:.6}");
    println!("enumerated     {:.6}", by_hand.ln());

    let best = crf_score(&emissions, &transitions, &start, &end, &free)?;
    println!("\nbest path probability: {:.4}", (best - log_z).exp());

    // Transition scores shift mass between paths without touching emissions:
    // reward O -> O and the decoder starts ignoring the weak rumor evidence.
    let sticky_o = Tensor::new(
        vec![3, 3],
        vec![
            0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, //
            0.0, 0.0, 3.0, // O -> O
        ],
    )?;
    let swayed = viterbi_decode(&emissions, &sticky_o, &start, &end, true)?;
    println!("\nwith a strong O->O bonus: {:?}", names(&swayed));
    Ok(())
}
