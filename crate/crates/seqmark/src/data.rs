//! Labeled token sequences: file format, BIO scheme, corpus splitting,
//! vocabulary construction, and a synthetic corpus generator.
//!
//! Dataset text format: one `token<TAB>label` pair per line, examples
//! separated by blank lines. Labels are exactly `B-Rumor`, `I-Rumor`, `O`
//! (case-sensitive).

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of distinct labels.
pub const NUM_LABELS: usize = 3;

/// Token string reserved for the unknown id (vocabulary line 0).
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// BIO label over the single span class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// First token of a rumor span.
    BRumor = 0,
    /// Continuation token of a rumor span.
    IRumor = 1,
    /// Token outside every rumor span.
    Outside = 2,
}

impl Label {
    pub const ALL: [Label; NUM_LABELS] = [Label::BRumor, Label::IRumor, Label::Outside];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Label> {
        Label::ALL.get(i).copied().ok_or(Error::Lookup {
            what: "label",
            id: i,
            limit: NUM_LABELS,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::BRumor => "B-Rumor",
            Label::IRumor => "I-Rumor",
            Label::Outside => "O",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "B-Rumor" => Some(Label::BRumor),
            "I-Rumor" => Some(Label::IRumor),
            "O" => Some(Label::Outside),
            _ => None,
        }
    }

    /// True for `B-Rumor` and `I-Rumor`.
    pub fn is_rumor(self) -> bool {
        self != Label::Outside
    }
}

/// One token sequence with its gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<String>,
    pub labels: Vec<Label>,
}

impl LabeledExample {
    pub fn new(tokens: Vec<String>, labels: Vec<Label>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "example needs equal, nonzero token/label counts (got {}/{})",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(LabeledExample { tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads a dataset stream of blank-line-separated `token<TAB>label` blocks.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<LabeledExample>> {
    let mut examples = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, labels: &mut Vec<Label>| -> Result<()> {
        if !tokens.is_empty() {
            examples.push(LabeledExample::new(
                std::mem::take(tokens),
                std::mem::take(labels),
            )?);
        }
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            flush(&mut tokens, &mut labels)?;
            continue;
        }
        let mut fields = line.split('\t');
        let (token, label) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(l), None) => (t, l),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected `token<TAB>label`, got {line:?}"),
                })
            }
        };
        if token.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty token".to_string(),
            });
        }
        let label = Label::parse(label).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("unknown label {label:?}"),
        })?;
        tokens.push(token.to_string());
        labels.push(label);
    }
    flush(&mut tokens, &mut labels)?;
    Ok(examples)
}

/// Parses a dataset held in a string.
pub fn parse_dataset_str(text: &str) -> Result<Vec<LabeledExample>> {
    parse_dataset(text.as_bytes())
}

/// Writes examples in the same format [`parse_dataset`] reads.
pub fn serialize_dataset<W: Write>(examples: &[LabeledExample], mut w: W) -> std::io::Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        for (tok, lab) in ex.tokens.iter().zip(&ex.labels) {
            writeln!(w, "{tok}\t{}", lab.name())?;
        }
    }
    Ok(())
}

/// Serializes examples to a string.
pub fn dataset_to_string(examples: &[LabeledExample]) -> String {
    let mut buf = Vec::new();
    serialize_dataset(examples, &mut buf).expect("write to vec");
    String::from_utf8(buf).expect("dataset text is utf-8")
}

/// Positions that break the BIO scheme: an `I-Rumor` at the start of the
/// sequence or directly after an `O`. Valid sequences return an empty vec.
pub fn bio_violations(labels: &[Label]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l == Label::IRumor && (i == 0 || labels[i - 1] == Label::Outside))
        .map(|(i, _)| i)
        .collect()
}

/// Train / validation / test partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Shuffles with the seed and splits 8:1:1 (train gets floor(0.8 n),
/// validation floor(0.1 n), test the rest). Requires at least 10 examples.
pub fn split_dataset(mut examples: Vec<LabeledExample>, seed: u64) -> Result<DatasetSplit> {
    let n = examples.len();
    if n < 10 {
        return Err(Error::Config(format!(
            "need at least 10 examples to split 8:1:1, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = examples.split_off(n_train + n_val);
    let validation = examples.split_off(n_train);
    Ok(DatasetSplit {
        train: examples,
        validation,
        test,
    })
}

/// Token-id mapping. Id 0 is the unknown token; real tokens get ids ordered
/// by descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from examples, dropping tokens seen fewer than
    /// `min_count` times (they map to the unknown id).
    pub fn build(examples: &[LabeledExample], min_count: usize) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in examples {
            for tok in &ex.tokens {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = Vec::with_capacity(kept.len() + 1);
        tokens.push(UNKNOWN_TOKEN.to_string());
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Vocab::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    /// Wraps an id-ordered token list (index 0 must be the unknown token slot).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.is_empty() {
            return Err(Error::Config(
                "vocabulary must have at least the unknown token".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token; unseen tokens map to the unknown id 0.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Lookup {
                what: "token",
                id,
                limit: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Writes one token per line; the line number is the token id.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Reads the format written by [`Vocab::write_to`].
    pub fn read_from<R: BufRead>(reader: R) -> Result<Vocab> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            tokens.push(line.trim_end_matches('\r').to_string());
        }
        Vocab::from_tokens(tokens)
    }
}

/// How raw `mark` input text becomes tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    /// One token per non-whitespace character (suits scripts written
    /// without word separators).
    Char,
    /// Tokens split on whitespace runs.
    Whitespace,
}

/// Splits raw text into tokens. Whitespace never becomes a token; empty or
/// all-whitespace text yields an empty list.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        TokenizeMode::Whitespace => text.split_whitespace().map(String::from).collect(),
    }
}

/// Per-label token counts over a corpus, indexed by [`Label::index`].
pub fn label_counts(examples: &[LabeledExample]) -> [usize; NUM_LABELS] {
    let mut counts = [0usize; NUM_LABELS];
    for ex in examples {
        for &l in &ex.labels {
            counts[l.index()] += 1;
        }
    }
    counts
}

/// Per-label token fractions over a corpus.
pub fn label_fractions(examples: &[LabeledExample]) -> [f64; NUM_LABELS] {
    let counts = label_counts(examples);
    let total: usize = counts.iter().sum();
    if total == 0 {
        return [0.0; NUM_LABELS];
    }
    counts.map(|c| c as f64 / total as f64)
}

// Aggregate label mix the generator steers toward (fractions of all tokens).
// A span of mean length ~19 yields one B per ~18 I tokens, so steering the
// combined rumor share hits both label targets at once.
const TARGET_B_FRACTION: f64 = 0.011;
const TARGET_I_FRACTION: f64 = 0.194;
const TARGET_RUMOR_FRACTION: f64 = TARGET_B_FRACTION + TARGET_I_FRACTION;
const MEAN_PHRASE_LEN: f64 = 19.0;
const MIN_SENTENCE_LEN: usize = 8;

/// Generates a labeled synthetic corpus.
///
/// Each example is a stream of background tokens with zero to three planted
/// rumor phrases. Phrase tokens come from a reserved sub-vocabulary and walk
/// it in small steps, so phrases carry characteristic bigrams and the task is
/// learnable; the aggregate label mix is steered toward roughly 1% `B-Rumor`,
/// 19% `I-Rumor`, 80% `O`. Same seed, same corpus.
pub fn synth_generate(
    seed: u64,
    count: usize,
    vocab_size: usize,
    max_len: usize,
) -> Result<Vec<LabeledExample>> {
    if count == 0 {
        return Err(Error::Config("synthetic corpus needs count >= 1".into()));
    }
    if vocab_size < 20 {
        return Err(Error::Config(format!(
            "synthetic vocabulary needs at least 20 token types, got {vocab_size}"
        )));
    }
    if max_len < MIN_SENTENCE_LEN {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot honor the target label proportions; need >= {MIN_SENTENCE_LEN}"
        )));
    }

    let rumor_types = (vocab_size / 4).max(4);
    let background_types = vocab_size - rumor_types;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(count);
    let mut total_tokens = 0usize;
    let mut rumor_tokens = 0usize;

    for _ in 0..count {
        let len = rng.random_range(MIN_SENTENCE_LEN..=max_len);

        // Plan phrases: randomized rounding of the corpus rumor-token
        // deficit, in phrase units, decides how many to plant here (up to
        // three, space permitting). Planting shrinks the deficit, quiet
        // sentences grow it, so the mix self-corrects.
        let deficit = TARGET_RUMOR_FRACTION * (total_tokens + len) as f64 - rumor_tokens as f64;
        let want = (deficit / MEAN_PHRASE_LEN).max(0.0);
        let mut n_phrases = (want.floor() as usize).min(3);
        if n_phrases < 3 && rng.random::<f64>() < want.fract() {
            n_phrases += 1;
        }
        let mut phrase_lens: Vec<usize> = Vec::new();
        let mut free = len;
        for _ in 0..n_phrases {
            if free < 2 {
                break;
            }
            let hi = free.min(26);
            let lo = hi.min(12);
            let l = rng.random_range(lo..=hi);
            free -= l;
            rumor_tokens += l;
            phrase_lens.push(l);
        }
        total_tokens += len;

        // Distribute the leftover background tokens across the gaps around
        // the phrases (gaps of zero give back-to-back phrases).
        let gaps = phrase_lens.len() + 1;
        let mut gap_lens = vec![0usize; gaps];
        let mut remaining = free;
        for g in gap_lens.iter_mut().take(gaps - 1) {
            *g = rng.random_range(0..=remaining);
            remaining -= *g;
        }
        gap_lens[gaps - 1] = remaining;

        let mut tokens = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        for (pi, &phrase_len) in phrase_lens.iter().enumerate() {
            for _ in 0..gap_lens[pi] {
                tokens.push(format!("w{}", rng.random_range(0..background_types)));
                labels.push(Label::Outside);
            }
            let mut idx = rng.random_range(0..rumor_types);
            for offset in 0..phrase_len {
                tokens.push(format!("r{idx}"));
                labels.push(if offset == 0 {
                    Label::BRumor
                } else {
                    Label::IRumor
                });
                idx = (idx + rng.random_range(1..=2)) % rumor_types;
            }
        }
        for _ in 0..gap_lens[gaps - 1] {
            tokens.push(format!("w{}", rng.random_range(0..background_types)));
            labels.push(Label::Outside);
        }
        examples.push(LabeledExample::new(tokens, labels)?);
    }
    Ok(examples)
}

/// Bigram-frequency rumor detector, used to certify that a corpus is
/// learnable without consulting the model under test.
///
/// Scores each position by the add-one-smoothed likelihood ratio of its
/// (previous token, token) bigram under rumor vs. non-rumor positions.
pub struct BigramRumorBaseline {
    rumor: HashMap<(String, String), usize>,
    other: HashMap<(String, String), usize>,
    rumor_total: usize,
    other_total: usize,
    distinct: usize,
}

const BOS: &str = "<s>";

impl BigramRumorBaseline {
    pub fn fit(examples: &[LabeledExample]) -> Self {
        let mut rumor: HashMap<(String, String), usize> = HashMap::new();
        let mut other: HashMap<(String, String), usize> = HashMap::new();
        let (mut rumor_total, mut other_total) = (0usize, 0usize);
        for ex in examples {
            for (i, tok) in ex.tokens.iter().enumerate() {
                let prev = if i == 0 {
                    BOS
                } else {
                    ex.tokens[i - 1].as_str()
                };
                let key = (prev.to_string(), tok.clone());
                if ex.labels[i].is_rumor() {
                    *rumor.entry(key).or_default() += 1;
                    rumor_total += 1;
                } else {
                    *other.entry(key).or_default() += 1;
                    other_total += 1;
                }
            }
        }
        let mut keys: std::collections::HashSet<&(String, String)> = rumor.keys().collect();
        keys.extend(other.keys());
        let distinct = keys.len().max(1);
        BigramRumorBaseline {
            rumor,
            other,
            rumor_total,
            other_total,
            distinct,
        }
    }

    /// Per-position rumor decision for one token sequence.
    pub fn predict(&self, tokens: &[String]) -> Vec<bool> {
        (0..tokens.len())
            .map(|i| {
                let prev = if i == 0 { BOS } else { tokens[i - 1].as_str() };
                let key = (prev.to_string(), tokens[i].clone());
                let pr = (self.rumor.get(&key).copied().unwrap_or(0) + 1) as f64
                    / (self.rumor_total + self.distinct) as f64;
                let po = (self.other.get(&key).copied().unwrap_or(0) + 1) as f64
                    / (self.other_total + self.distinct) as f64;
                pr.ln() > po.ln()
            })
            .collect()
    }

    /// Fraction of gold rumor tokens (`B-Rumor` or `I-Rumor`) the baseline
    /// recovers on `examples`. Returns 0 when there are none.
    pub fn rumor_recall(&self, examples: &[LabeledExample]) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for ex in examples {
            let pred = self.predict(&ex.tokens);
            for (i, &l) in ex.labels.iter().enumerate() {
                if l.is_rumor() {
                    total += 1;
                    if pred[i] {
                        hit += 1;
                    }
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}
