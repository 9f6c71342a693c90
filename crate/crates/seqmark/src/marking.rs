//! Emission head and linear-chain CRF over the three span labels.
//!
//! The head turns fused features into per-position label scores; the CRF
//! adds start, transition, and end scores, normalizes globally, and decodes
//! with Viterbi. Score ties decode deterministically: at every step the
//! lowest label index wins, which picks the max-score path whose labels are
//! lexicographically smallest when read from the last position backwards.

use rand_chacha::ChaCha8Rng;

use crate::data::{Label, NUM_LABELS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax_low, Tensor};

/// Two-layer SiLU head whose second layer also sees the raw fused features
/// through a column concatenation.
#[derive(Debug, Clone, Copy)]
pub struct SkipNetParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    d_in: usize,
}

impl SkipNetParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        h1: usize,
        h2: usize,
    ) -> SkipNetParams {
        SkipNetParams {
            w1: store.add_uniform("head.w1", vec![d_in, h1], d_in, rng),
            b1: store.add_uniform("head.b1", vec![h1], d_in, rng),
            w2: store.add_uniform("head.w2", vec![d_in + h1, h2], d_in + h1, rng),
            b2: store.add_uniform("head.b2", vec![h2], d_in + h1, rng),
            w3: store.add_uniform("head.w3", vec![h2, NUM_LABELS], h2, rng),
            b3: store.add_uniform("head.b3", vec![NUM_LABELS], h2, rng),
            d_in,
        }
    }

    /// `[n, d_in] -> [n, 3]` label scores.
    pub fn emissions(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::Dimension(format!(
                "emission head expects [n, {}], got {shape:?}",
                self.d_in
            )));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let pre1 = tape.matmul(x, w1);
        let pre1 = tape.add_bias_rows(pre1, b1);
        let x1 = tape.silu(pre1);

        let cat = tape.concat_cols(x, x1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let pre2 = tape.matmul(cat, w2);
        let pre2 = tape.add_bias_rows(pre2, b2);
        let x2 = tape.silu(pre2);

        let w3 = tape.param(store, self.w3);
        let b3 = tape.param(store, self.b3);
        let out = tape.matmul(x2, w3);
        let out = tape.add_bias_rows(out, b3);
        tape.value(out).check_finite("emission scores")?;
        Ok(out)
    }
}

/// Single affine head used when the skip-connection head is ablated.
#[derive(Debug, Clone, Copy)]
pub struct PlainHeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
    d_in: usize,
}

impl PlainHeadParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_in: usize) -> PlainHeadParams {
        PlainHeadParams {
            weight: store.add_uniform("head.weight", vec![d_in, NUM_LABELS], d_in, rng),
            bias: store.add_uniform("head.bias", vec![NUM_LABELS], d_in, rng),
            d_in,
        }
    }

    /// `[n, d_in] -> [n, 3]` label scores.
    pub fn emissions(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::Dimension(format!(
                "emission head expects [n, {}], got {shape:?}",
                self.d_in
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let out = tape.matmul(x, w);
        let out = tape.add_bias_rows(out, b);
        tape.value(out).check_finite("emission scores")?;
        Ok(out)
    }
}

/// CRF parameters: `transitions[i][j]` scores label `i` followed by `j`;
/// `start`/`end` score the first and last label.
#[derive(Debug, Clone, Copy)]
pub struct CrfParams {
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

impl CrfParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> CrfParams {
        CrfParams {
            transitions: store.add_uniform(
                "crf.transitions",
                vec![NUM_LABELS, NUM_LABELS],
                NUM_LABELS,
                rng,
            ),
            start: store.add_uniform("crf.start", vec![NUM_LABELS], NUM_LABELS, rng),
            end: store.add_uniform("crf.end", vec![NUM_LABELS], NUM_LABELS, rng),
        }
    }
}

fn expect_emissions(emissions: &Tensor) -> Result<usize> {
    let shape = emissions.shape();
    if shape.len() != 2 || shape[1] != NUM_LABELS || shape[0] == 0 {
        return Err(Error::Dimension(format!(
            "emissions must be [n >= 1, {NUM_LABELS}], got {shape:?}"
        )));
    }
    Ok(shape[0])
}

fn expect_labels(n: usize, labels: &[Label]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "got {} labels for {n} emission rows",
            labels.len()
        )));
    }
    Ok(())
}

/// Unnormalized log-score of one label path.
///
/// Accumulation order matches the Viterbi recursion term for term, so equal
/// paths produce bit-identical scores.
pub fn crf_score(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
    labels: &[Label],
) -> Result<f64> {
    let n = expect_emissions(emissions)?;
    expect_labels(n, labels)?;
    let mut score = start.data()[labels[0].index()] + emissions.at2(0, labels[0].index());
    for t in 1..n {
        score += transitions.at2(labels[t - 1].index(), labels[t].index());
        score += emissions.at2(t, labels[t].index());
    }
    Ok(score + end.data()[labels[n - 1].index()])
}

/// Log of the summed exponentiated scores of all `3^n` label paths.
pub fn crf_log_partition(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> Result<f64> {
    let n = expect_emissions(emissions)?;
    let mut alpha: Vec<f64> = (0..NUM_LABELS)
        .map(|j| start.data()[j] + emissions.at2(0, j))
        .collect();
    let mut next = vec![0.0; NUM_LABELS];
    for t in 1..n {
        for (j, slot) in next.iter_mut().enumerate() {
            let terms: Vec<f64> = (0..NUM_LABELS)
                .map(|i| alpha[i] + transitions.at2(i, j))
                .collect();
            *slot = crate::tensor::logsumexp(&terms)? + emissions.at2(t, j);
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let final_terms: Vec<f64> = (0..NUM_LABELS).map(|j| alpha[j] + end.data()[j]).collect();
    crate::tensor::logsumexp(&final_terms)
}

/// Max-score label path. On ties the lowest label index wins at every step.
///
/// With `constrained` set, paths that break the BIO scheme (an initial
/// `I-Rumor`, or `O -> I-Rumor`) are excluded from the search.
pub fn viterbi_decode(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
    constrained: bool,
) -> Result<Vec<Label>> {
    let n = expect_emissions(emissions)?;
    let forbidden_start = |j: usize| constrained && j == Label::IRumor.index();
    let forbidden_step = |i: usize, j: usize| {
        constrained && i == Label::Outside.index() && j == Label::IRumor.index()
    };

    let mut delta: Vec<f64> = (0..NUM_LABELS)
        .map(|j| {
            if forbidden_start(j) {
                f64::NEG_INFINITY
            } else {
                start.data()[j] + emissions.at2(0, j)
            }
        })
        .collect();
    let mut backptr: Vec<[usize; NUM_LABELS]> = Vec::with_capacity(n.saturating_sub(1));
    for t in 1..n {
        let mut next = [0.0; NUM_LABELS];
        let mut bp = [0usize; NUM_LABELS];
        for j in 0..NUM_LABELS {
            let cand: Vec<f64> = (0..NUM_LABELS)
                .map(|i| {
                    if forbidden_step(i, j) {
                        f64::NEG_INFINITY
                    } else {
                        delta[i] + transitions.at2(i, j)
                    }
                })
                .collect();
            let best = argmax_low(&cand);
            bp[j] = best;
            next[j] = cand[best] + emissions.at2(t, j);
        }
        delta.copy_from_slice(&next);
        backptr.push(bp);
    }

    let final_scores: Vec<f64> = (0..NUM_LABELS).map(|j| delta[j] + end.data()[j]).collect();
    let mut state = argmax_low(&final_scores);
    let mut path = vec![state; n];
    for t in (1..n).rev() {
        state = backptr[t - 1][state];
        path[t - 1] = state;
    }
    path.into_iter().map(Label::from_index).collect()
}

/// Per-row argmax decode for the CRF-less ablation; ties pick the lowest
/// label index.
pub fn argmax_decode(emissions: &Tensor) -> Result<Vec<Label>> {
    let n = expect_emissions(emissions)?;
    (0..n)
        .map(|t| Label::from_index(argmax_low(emissions.row(t))))
        .collect()
}

/// Negative log-likelihood of the gold path under the CRF, on the tape.
///
/// Returns `log Z - score(gold)`, a non-negative scalar.
pub fn crf_nll(
    tape: &mut Tape,
    store: &ParamStore,
    crf: &CrfParams,
    emissions: Var,
    labels: &[Label],
) -> Result<Var> {
    let n = expect_emissions(tape.value(emissions))?;
    expect_labels(n, labels)?;
    let transitions = tape.param(store, crf.transitions);
    let start = tape.param(store, crf.start);
    let end = tape.param(store, crf.end);

    // Gold path score, gathered entry by entry.
    let mut gold = tape.entry(start, labels[0].index());
    let e0 = tape.entry(emissions, labels[0].index());
    gold = tape.add(gold, e0);
    for t in 1..n {
        let tr = tape.entry(
            transitions,
            labels[t - 1].index() * NUM_LABELS + labels[t].index(),
        );
        gold = tape.add(gold, tr);
        let em = tape.entry(emissions, t * NUM_LABELS + labels[t].index());
        gold = tape.add(gold, em);
    }
    let fin = tape.entry(end, labels[n - 1].index());
    gold = tape.add(gold, fin);

    // Forward recursion in log space.
    let e0 = tape.row(emissions, 0);
    let mut alpha = tape.add(e0, start);
    for t in 1..n {
        let shifted = tape.add_bias_cols(transitions, alpha);
        let reduced = tape.logsumexp_cols(shifted);
        let e_t = tape.row(emissions, t);
        alpha = tape.add(reduced, e_t);
    }
    let final_scores = tape.add(alpha, end);
    let log_z = tape.logsumexp_vec(final_scores);

    let nll = tape.sub(log_z, gold);
    tape.value(nll).check_finite("sequence loss")?;
    Ok(nll)
}

/// Summed per-token cross-entropy of the gold labels under row-softmax
/// emissions, on the tape. Used when the CRF is ablated.
pub fn token_ce_loss(tape: &mut Tape, emissions: Var, labels: &[Label]) -> Result<Var> {
    let n = expect_emissions(tape.value(emissions))?;
    expect_labels(n, labels)?;
    let mut total: Option<Var> = None;
    for (t, label) in labels.iter().enumerate() {
        let row = tape.row(emissions, t);
        let lse = tape.logsumexp_vec(row);
        let gold = tape.entry(emissions, t * NUM_LABELS + label.index());
        let term = tape.sub(lse, gold);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let loss = total.expect("n >= 1 guaranteed by shape check");
    tape.value(loss).check_finite("token loss")?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{grad_check, TapeObjective};
    use rand::{Rng, SeedableRng};

    fn zeros_crf() -> (Tensor, Tensor, Tensor) {
        (
            Tensor::zeros(vec![NUM_LABELS, NUM_LABELS]),
            Tensor::zeros(vec![NUM_LABELS]),
            Tensor::zeros(vec![NUM_LABELS]),
        )
    }

    fn random_crf(rng: &mut ChaCha8Rng, scale: f64) -> (Tensor, Tensor, Tensor) {
        let draw = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        (
            draw(rng, vec![NUM_LABELS, NUM_LABELS]),
            draw(rng, vec![NUM_LABELS]),
            draw(rng, vec![NUM_LABELS]),
        )
    }

    fn integer_crf(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
        let draw = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| rng.random_range(-1i32..=1) as f64)
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        (
            draw(rng, vec![NUM_LABELS, NUM_LABELS]),
            draw(rng, vec![NUM_LABELS]),
            draw(rng, vec![NUM_LABELS]),
        )
    }

    fn all_paths(n: usize) -> Vec<Vec<Label>> {
        let total = NUM_LABELS.pow(n as u32);
        (0..total)
            .map(|mut p| {
                let mut path = Vec::with_capacity(n);
                for _ in 0..n {
                    path.push(Label::from_index(p % NUM_LABELS).unwrap());
                    p /= NUM_LABELS;
                }
                path
            })
            .collect()
    }

    /// Exhaustive best path under the decode tie rule: maximize score, then
    /// prefer the path whose reversed label tuple is lexicographically
    /// smallest.
    fn brute_force_best(
        emissions: &Tensor,
        t: &Tensor,
        s: &Tensor,
        e: &Tensor,
    ) -> (Vec<Label>, f64) {
        let n = emissions.shape()[0];
        let mut best: Option<(Vec<Label>, f64)> = None;
        for path in all_paths(n) {
            let score = crf_score(emissions, t, s, e, &path).unwrap();
            let better = match &best {
                None => true,
                Some((bp, bs)) => {
                    if score != *bs {
                        score > *bs
                    } else {
                        let rev: Vec<usize> = path.iter().rev().map(|l| l.index()).collect();
                        let brev: Vec<usize> = bp.iter().rev().map(|l| l.index()).collect();
                        rev < brev
                    }
                }
            };
            if better {
                best = Some((path, score));
            }
        }
        best.unwrap()
    }

    fn brute_force_log_partition(emissions: &Tensor, t: &Tensor, s: &Tensor, e: &Tensor) -> f64 {
        let n = emissions.shape()[0];
        let scores: Vec<f64> = all_paths(n)
            .iter()
            .map(|p| crf_score(emissions, t, s, e, p).unwrap())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    }

    fn random_emissions(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let data = (0..n * NUM_LABELS)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Tensor::new(vec![n, NUM_LABELS], data).unwrap()
    }

    #[test]
    fn zero_scores_partition_is_path_count() {
        let (t, s, e) = zeros_crf();
        let em1 = Tensor::zeros(vec![1, 3]);
        assert!((crf_log_partition(&em1, &t, &s, &e).unwrap() - 3f64.ln()).abs() < 1e-12);
        let em2 = Tensor::zeros(vec![2, 3]);
        assert!((crf_log_partition(&em2, &t, &s, &e).unwrap() - 9f64.ln()).abs() < 1e-12);
        let em4 = Tensor::zeros(vec![4, 3]);
        assert!((crf_log_partition(&em4, &t, &s, &e).unwrap() - 81f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_decode_all_first_label() {
        let (t, s, e) = zeros_crf();
        let em = Tensor::zeros(vec![5, 3]);
        let path = viterbi_decode(&em, &t, &s, &e, false).unwrap();
        assert_eq!(path, vec![Label::BRumor; 5]);
    }

    #[test]
    fn hand_worked_two_step_decode() {
        let (mut t, mut s, mut e) = zeros_crf();
        for i in 0..3 {
            t.set2(i, i, 0.1);
        }
        s.data_mut()[0] = 0.2;
        e.data_mut()[2] = 0.3;
        let em = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        // Best path is (B, I): 0.2 + 1 + 0 + 1 = 2.2.
        let path = viterbi_decode(&em, &t, &s, &e, false).unwrap();
        assert_eq!(path, vec![Label::BRumor, Label::IRumor]);
        let score = crf_score(&em, &t, &s, &e, &path).unwrap();
        assert!((score - 2.2).abs() < 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=5 {
            for _ in 0..10 {
                let (t, s, e) = random_crf(&mut rng, 1.5);
                let em = random_emissions(n, &mut rng, 2.0);
                let got = crf_log_partition(&em, &t, &s, &e).unwrap();
                let want = brute_force_log_partition(&em, &t, &s, &e);
                assert!((got - want).abs() < 1e-10, "n={n} got {got} want {want}");
            }
        }
    }

    #[test]
    fn decode_matches_enumeration_on_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=5 {
            for _ in 0..10 {
                let (t, s, e) = random_crf(&mut rng, 1.5);
                let em = random_emissions(n, &mut rng, 2.0);
                let got = viterbi_decode(&em, &t, &s, &e, false).unwrap();
                let (want, _) = brute_force_best(&em, &t, &s, &e);
                assert_eq!(got, want, "n={n}");
            }
        }
    }

    #[test]
    fn decode_matches_enumeration_under_heavy_ties() {
        // Integer-valued scores make exact ties common, exercising the
        // lowest-index rule; integer sums are exact in floating point, so
        // the enumeration oracle sees the same ties the decoder does.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..=5 {
            for _ in 0..20 {
                let (t, s, e) = integer_crf(&mut rng);
                let data = (0..n * NUM_LABELS)
                    .map(|_| rng.random_range(-1i32..=1) as f64)
                    .collect();
                let em = Tensor::new(vec![n, NUM_LABELS], data).unwrap();
                let got = viterbi_decode(&em, &t, &s, &e, false).unwrap();
                let (want, best_score) = brute_force_best(&em, &t, &s, &e);
                assert_eq!(got, want, "n={n}");
                let got_score = crf_score(&em, &t, &s, &e, &got).unwrap();
                assert_eq!(got_score, best_score);
            }
        }
    }

    #[test]
    fn constrained_decode_never_breaks_the_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (mut t, mut s, e) = random_crf(&mut rng, 1.0);
            // Stack the deck toward violations.
            s.data_mut()[Label::IRumor.index()] += 3.0;
            t.set2(Label::Outside.index(), Label::IRumor.index(), 4.0);
            let em = random_emissions(6, &mut rng, 1.0);
            let free = viterbi_decode(&em, &t, &s, &e, false).unwrap();
            let constrained = viterbi_decode(&em, &t, &s, &e, true).unwrap();
            assert!(crate::data::bio_violations(&constrained).is_empty());
            // The biased scores should produce at least some violations in
            // free mode across the trials; tolerate individual clean draws.
            let _ = free;
        }

        // Single position that screams I-Rumor: constrained mode refuses.
        let (t, s, e) = zeros_crf();
        let em = Tensor::new(vec![1, 3], vec![-10.0, 10.0, -10.0]).unwrap();
        assert_eq!(
            viterbi_decode(&em, &t, &s, &e, false).unwrap(),
            vec![Label::IRumor]
        );
        assert_eq!(
            viterbi_decode(&em, &t, &s, &e, true).unwrap(),
            vec![Label::BRumor]
        );
    }

    #[test]
    fn constrained_decode_still_finds_the_best_legal_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (t, s, e) = random_crf(&mut rng, 1.5);
            let em = random_emissions(4, &mut rng, 2.0);
            let got = viterbi_decode(&em, &t, &s, &e, true).unwrap();
            // Enumerate only scheme-legal paths.
            let mut best: Option<(Vec<Label>, f64)> = None;
            for path in all_paths(4) {
                if !crate::data::bio_violations(&path).is_empty() {
                    continue;
                }
                let score = crf_score(&em, &t, &s, &e, &path).unwrap();
                let better = match &best {
                    None => true,
                    Some((_, bs)) => score > *bs,
                };
                if better {
                    best = Some((path, score));
                }
            }
            let (want, want_score) = best.unwrap();
            let got_score = crf_score(&em, &t, &s, &e, &got).unwrap();
            assert!((got_score - want_score).abs() < 1e-12);
            let _ = want;
        }
    }

    #[test]
    fn nll_is_nonnegative_and_exponentiates_to_path_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=5 {
            let mut store = ParamStore::new();
            let mut prng = ChaCha8Rng::seed_from_u64(50 + n as u64);
            let crf = CrfParams::register(&mut store, &mut prng);
            let em = random_emissions(n, &mut rng, 1.5);
            let labels: Vec<Label> = (0..n)
                .map(|_| Label::from_index(rng.random_range(0..3)).unwrap())
                .collect();

            let mut tape = Tape::new();
            let emv = tape.constant(em.clone());
            let nll = crf_nll(&mut tape, &store, &crf, emv, &labels).unwrap();
            let nll = tape.value(nll).item();
            assert!(nll >= 0.0);

            let t = store.get(crf.transitions);
            let s = store.get(crf.start);
            let e = store.get(crf.end);
            let log_z = brute_force_log_partition(&em, t, s, e);
            let gold = crf_score(&em, t, s, e, &labels).unwrap();
            let want = log_z - gold;
            assert!((nll - want).abs() < 1e-10, "n={n} got {nll} want {want}");
            let prob = (-nll).exp();
            assert!(prob > 0.0 && prob < 1.0);
        }
    }

    #[test]
    fn uniform_emission_shift_leaves_nll_and_decode_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, s, e) = random_crf(&mut rng, 1.0);
        let em = random_emissions(5, &mut rng, 1.0);
        let mut shifted = em.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 7.5);

        assert_eq!(
            viterbi_decode(&em, &t, &s, &e, false).unwrap(),
            viterbi_decode(&shifted, &t, &s, &e, false).unwrap()
        );
        let labels = viterbi_decode(&em, &t, &s, &e, false).unwrap();
        let nll_a = crf_log_partition(&em, &t, &s, &e).unwrap()
            - crf_score(&em, &t, &s, &e, &labels).unwrap();
        let nll_b = crf_log_partition(&shifted, &t, &s, &e).unwrap()
            - crf_score(&shifted, &t, &s, &e, &labels).unwrap();
        assert!((nll_a - nll_b).abs() < 1e-9);
    }

    #[test]
    fn nll_emission_gradient_recovers_label_marginals() {
        // d nll / d em[t][j] = P(y_t = j) - [gold_t == j]; the probabilities
        // come from exhaustive enumeration.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(70);
        let crf = CrfParams::register(&mut store, &mut prng);
        let em = random_emissions(n, &mut rng, 1.0);
        let labels = vec![Label::Outside, Label::BRumor, Label::IRumor, Label::Outside];

        let mut tape = Tape::new();
        let emv = tape.constant(em.clone());
        let nll = crf_nll(&mut tape, &store, &crf, emv, &labels).unwrap();
        tape.backward(nll);
        let grad = tape.grad(emv).to_vec();

        let t = store.get(crf.transitions).clone();
        let s = store.get(crf.start).clone();
        let e = store.get(crf.end).clone();
        let log_z = brute_force_log_partition(&em, &t, &s, &e);
        let mut marginal = vec![0.0; n * NUM_LABELS];
        for path in all_paths(n) {
            let p = (crf_score(&em, &t, &s, &e, &path).unwrap() - log_z).exp();
            for (t_idx, l) in path.iter().enumerate() {
                marginal[t_idx * NUM_LABELS + l.index()] += p;
            }
        }
        for t_idx in 0..n {
            for j in 0..NUM_LABELS {
                let want = marginal[t_idx * NUM_LABELS + j]
                    - if labels[t_idx].index() == j { 1.0 } else { 0.0 };
                let got = grad[t_idx * NUM_LABELS + j];
                assert!(
                    (got - want).abs() < 1e-10,
                    "t={t_idx} j={j} got {got} want {want}"
                );
            }
        }
    }

    #[test]
    fn token_ce_on_uniform_emissions_is_n_ln3() {
        let mut tape = Tape::new();
        let em = tape.constant(Tensor::zeros(vec![4, 3]));
        let labels = vec![Label::BRumor, Label::IRumor, Label::Outside, Label::BRumor];
        let loss = token_ce_loss(&mut tape, em, &labels).unwrap();
        assert!((tape.value(loss).item() - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn token_ce_matches_manual_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let em = random_emissions(5, &mut rng, 2.0);
        let labels: Vec<Label> = (0..5)
            .map(|_| Label::from_index(rng.random_range(0..3)).unwrap())
            .collect();
        let mut tape = Tape::new();
        let emv = tape.constant(em.clone());
        let loss = token_ce_loss(&mut tape, emv, &labels).unwrap();
        let got = tape.value(loss).item();

        let mut want = 0.0;
        for (t, l) in labels.iter().enumerate() {
            let row = em.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            want -= row[l.index()] - m - z.ln();
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn head_and_crf_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = SkipNetParams::register(&mut store, &mut rng, 5, 6, 4);
        let crf = CrfParams::register(&mut store, &mut rng);
        let mut xr = ChaCha8Rng::seed_from_u64(90);
        let data = (0..4 * 5).map(|_| xr.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![4, 5], data).unwrap();
        let labels = vec![Label::BRumor, Label::IRumor, Label::IRumor, Label::Outside];
        let mut objective = TapeObjective::new(move |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.constant(x.clone());
            let em = head.emissions(tape, store, xv).unwrap();
            crf_nll(tape, store, &crf, em, &labels).unwrap()
        });
        let report = grad_check(&mut store, &mut objective, 1e-5);
        assert!(
            report.max_rel_err < 1e-6,
            "worst group {:?}",
            report.worst_group()
        );
    }

    #[test]
    fn plain_head_shapes_and_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let head = PlainHeadParams::register(&mut store, &mut rng, 5);
        let mut xr = ChaCha8Rng::seed_from_u64(100);
        let data = (0..3 * 5).map(|_| xr.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![3, 5], data).unwrap();
        {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let em = head.emissions(&mut tape, &store, xv).unwrap();
            assert_eq!(tape.value(em).shape(), &[3, NUM_LABELS]);
        }
        let labels = vec![Label::Outside, Label::Outside, Label::BRumor];
        let mut objective = TapeObjective::new(move |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.constant(x.clone());
            let em = head.emissions(tape, store, xv).unwrap();
            token_ce_loss(tape, em, &labels).unwrap()
        });
        let report = grad_check(&mut store, &mut objective, 1e-5);
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn emission_inputs_are_validated() {
        let (t, s, e) = zeros_crf();
        let bad = Tensor::zeros(vec![2, 4]);
        assert!(viterbi_decode(&bad, &t, &s, &e, false).is_err());
        assert!(crf_log_partition(&bad, &t, &s, &e).is_err());
        let em = Tensor::zeros(vec![2, 3]);
        assert!(crf_score(&em, &t, &s, &e, &[Label::Outside]).is_err());
    }
}
