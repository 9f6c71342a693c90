//! Token-level evaluation (one-vs-rest per-label metrics plus full-sentence
//! accuracy) and conversion of decoded label sequences into rumor spans.

use serde::Serialize;

use crate::data::{Label, TokenizeMode, Vocab, NUM_LABELS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::EncodedExample;

/// One-vs-rest token metrics for a single label.
#[derive(Debug, Clone, Serialize)]
pub struct LabelMetrics {
    pub label: String,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Evaluation summary: per-label token metrics in label order
/// (B-Rumor, I-Rumor, O), exact-match sentence accuracy, and corpus size.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelMetrics>,
    pub sentence_accuracy: f64,
    pub sequences: usize,
    pub tokens: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Computes the report from (gold, predicted) label-sequence pairs.
pub fn evaluate_pairs(pairs: &[(Vec<Label>, Vec<Label>)]) -> Result<MetricsReport> {
    let mut tp = [0usize; NUM_LABELS];
    let mut fp = [0usize; NUM_LABELS];
    let mut fn_ = [0usize; NUM_LABELS];
    let mut tokens = 0usize;
    let mut exact = 0usize;
    for (gold, pred) in pairs {
        if gold.len() != pred.len() {
            return Err(Error::Dimension(format!(
                "gold has {} labels but prediction has {}",
                gold.len(),
                pred.len()
            )));
        }
        if gold == pred {
            exact += 1;
        }
        tokens += gold.len();
        for (&g, &p) in gold.iter().zip(pred) {
            if g == p {
                tp[g.index()] += 1;
            } else {
                fp[p.index()] += 1;
                fn_[g.index()] += 1;
            }
        }
    }

    let per_label = Label::ALL
        .iter()
        .map(|&label| {
            let i = label.index();
            let (tp, fp, fn_) = (tp[i], fp[i], fn_[i]);
            let tn = tokens - tp - fp - fn_;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            LabelMetrics {
                label: label.name().to_string(),
                true_positives: tp,
                false_positives: fp,
                false_negatives: fn_,
                true_negatives: tn,
                accuracy: ratio(tp + tn, tokens),
                precision,
                recall,
                f1,
            }
        })
        .collect();

    Ok(MetricsReport {
        per_label,
        sentence_accuracy: ratio(exact, pairs.len()),
        sequences: pairs.len(),
        tokens,
    })
}

/// Decodes every example and scores the predictions against the gold labels.
pub fn evaluate(model: &Model, examples: &[EncodedExample]) -> Result<MetricsReport> {
    let mut pairs = Vec::with_capacity(examples.len());
    for ex in examples {
        let pred = model.decode(&ex.ids)?;
        pairs.push((ex.labels.clone(), pred));
    }
    evaluate_pairs(&pairs)
}

/// A marked rumor span: half-open token range plus the covered text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RumorSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Converts a label sequence to half-open token spans. A span opens at each
/// B-Rumor — or at an I-Rumor that does not continue one (tolerant reading)
/// — and runs through the consecutive I-Rumor labels that follow.
pub fn spans_from_labels(labels: &[Label]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &label) in labels.iter().enumerate() {
        match label {
            Label::BRumor => {
                if let Some(start) = open.take() {
                    spans.push((start, t));
                }
                open = Some(t);
            }
            Label::IRumor => {
                if open.is_none() {
                    open = Some(t);
                }
            }
            Label::Outside => {
                if let Some(start) = open.take() {
                    spans.push((start, t));
                }
            }
        }
    }
    if let Some(start) = open {
        spans.push((start, labels.len()));
    }
    spans
}

fn join_tokens(tokens: &[String], mode: TokenizeMode) -> String {
    match mode {
        TokenizeMode::Char => tokens.concat(),
        TokenizeMode::Whitespace => tokens.join(" "),
    }
}

/// Decodes a raw token sequence and returns its rumor spans with text.
pub fn mark(model: &Model, vocab: &Vocab, tokens: &[String]) -> Result<Vec<RumorSpan>> {
    let ids = vocab.encode(tokens);
    let labels = model.decode(&ids)?;
    let mode = model.config.tokenize;
    Ok(spans_from_labels(&labels)
        .into_iter()
        .map(|(start, end)| RumorSpan {
            start,
            end,
            text: join_tokens(&tokens[start..end], mode),
        })
        .collect())
}

/// Renders the token sequence with every span wrapped in brackets, e.g.
/// `he said [the moon is cheese] today`.
pub fn render_marked(tokens: &[String], spans: &[RumorSpan], mode: TokenizeMode) -> String {
    let sep = match mode {
        TokenizeMode::Char => "",
        TokenizeMode::Whitespace => " ",
    };
    let mut pieces: Vec<String> = Vec::with_capacity(tokens.len());
    for (t, token) in tokens.iter().enumerate() {
        let mut piece = String::new();
        if spans.iter().any(|s| s.start == t) {
            piece.push('[');
        }
        piece.push_str(token);
        if spans.iter().any(|s| s.end == t + 1) {
            piece.push(']');
        }
        pieces.push(piece);
    }
    pieces.join(sep)
}
