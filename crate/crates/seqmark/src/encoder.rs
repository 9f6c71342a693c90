//! Contextual token encoder: summed token, segment, and position embeddings
//! refined by a stack of residual single-head attention + feed-forward
//! layers.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Embedding lookup tables. The segment table has two rows; this engine only
/// feeds single-segment sequences, so row 1 stays untouched by training.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
}

/// One residual attention + feed-forward layer (single head, no biases on
/// the attention projections, no normalization).
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

/// Full encoder parameter handles plus the dimensions needed to validate
/// inputs.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub tables: EmbeddingTables,
    pub layers: Vec<EncoderLayer>,
    vocab_size: usize,
    n_max: usize,
    d_model: usize,
}

impl EncoderParams {
    /// Registers all encoder parameters in the store, in a fixed order.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        n_max: usize,
        d_model: usize,
        d_ff: usize,
        depth: usize,
    ) -> EncoderParams {
        let tables = EmbeddingTables {
            token: store.add_uniform(
                "encoder.token_table",
                vec![vocab_size, d_model],
                d_model,
                rng,
            ),
            segment: store.add_uniform("encoder.segment_table", vec![2, d_model], d_model, rng),
            position: store.add_uniform(
                "encoder.position_table",
                vec![n_max, d_model],
                d_model,
                rng,
            ),
        };
        let layers = (0..depth)
            .map(|i| {
                let p = |suffix: &str| format!("encoder.layer{i}.{suffix}");
                EncoderLayer {
                    w_query: store.add_uniform(p("w_query"), vec![d_model, d_model], d_model, rng),
                    w_key: store.add_uniform(p("w_key"), vec![d_model, d_model], d_model, rng),
                    w_value: store.add_uniform(p("w_value"), vec![d_model, d_model], d_model, rng),
                    ffn_w1: store.add_uniform(p("ffn_w1"), vec![d_model, d_ff], d_model, rng),
                    ffn_b1: store.add_uniform(p("ffn_b1"), vec![d_ff], d_model, rng),
                    ffn_w2: store.add_uniform(p("ffn_w2"), vec![d_ff, d_model], d_ff, rng),
                    ffn_b2: store.add_uniform(p("ffn_b2"), vec![d_model], d_ff, rng),
                }
            })
            .collect();
        EncoderParams {
            tables,
            layers,
            vocab_size,
            n_max,
            d_model,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    fn validate_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Dimension("cannot encode an empty sequence".into()));
        }
        if ids.len() > self.n_max {
            return Err(Error::Dimension(format!(
                "sequence length {} exceeds the position table ({} rows)",
                ids.len(),
                self.n_max
            )));
        }
        for &id in ids {
            if id >= self.vocab_size {
                return Err(Error::Lookup {
                    what: "token id",
                    id,
                    limit: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Sum of token, segment (always segment 0), and position embeddings.
    /// Shape `[n, d_model]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        self.validate_ids(ids)?;
        let n = ids.len();
        let token_table = tape.param(store, self.tables.token);
        let segment_table = tape.param(store, self.tables.segment);
        let position_table = tape.param(store, self.tables.position);
        let tok = tape.embed_rows(token_table, ids);
        let seg = tape.embed_rows(segment_table, &vec![0; n]);
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embed_rows(position_table, &positions);
        let sum = tape.add(tok, seg);
        Ok(tape.add(sum, pos))
    }

    /// Runs embeddings through every layer. With zero layers this is exactly
    /// [`EncoderParams::embed`]. Shape `[n, d_model]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed(tape, store, ids)?;
        let scale = 1.0 / (self.d_model as f64).sqrt();
        for layer in &self.layers {
            let wq = tape.param(store, layer.w_query);
            let wk = tape.param(store, layer.w_key);
            let wv = tape.param(store, layer.w_value);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let kt = tape.transpose(k);
            let raw = tape.matmul(q, kt);
            let scores = tape.scale(raw, scale);
            let weights = tape.softmax_rows(scores);
            let att = tape.matmul(weights, v);
            x = tape.add(x, att);

            let w1 = tape.param(store, layer.ffn_w1);
            let b1 = tape.param(store, layer.ffn_b1);
            let w2 = tape.param(store, layer.ffn_w2);
            let b2 = tape.param(store, layer.ffn_b2);
            let pre = tape.matmul(x, w1);
            let pre = tape.add_bias_rows(pre, b1);
            let h = tape.relu(pre);
            let post = tape.matmul(h, w2);
            let f = tape.add_bias_rows(post, b2);
            x = tape.add(x, f);
        }
        tape.value(x).check_finite("encoder output")?;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{grad_check, TapeObjective};
    use rand::SeedableRng;

    fn small_encoder(depth: usize, seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::register(&mut store, &mut rng, 10, 6, 8, 16, depth);
        (store, params)
    }

    fn encode_values(store: &ParamStore, params: &EncoderParams, ids: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let out = params.encode(&mut tape, store, ids).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn embed_sums_the_three_tables() {
        let (mut store, params) = small_encoder(0, 1);
        let d = params.d_model();
        for r in 0..10 {
            for c in 0..d {
                store.get_mut(params.tables.token).data_mut()[r * d + c] = (r * 100 + c) as f64;
            }
        }
        for c in 0..d {
            store.get_mut(params.tables.segment).data_mut()[c] = 0.5;
        }
        for r in 0..6 {
            for c in 0..d {
                store.get_mut(params.tables.position).data_mut()[r * d + c] = r as f64 * 0.1;
            }
        }
        let mut tape = Tape::new();
        let out = params.embed(&mut tape, &store, &[3, 0]).unwrap();
        let out = tape.value(out);
        assert_eq!(out.shape(), &[2, 8]);
        for c in 0..8 {
            assert_eq!(out.at2(0, c), (300 + c) as f64 + 0.5 + 0.0);
            assert_eq!(out.at2(1, c), c as f64 + 0.5 + 0.1);
        }
    }

    #[test]
    fn zero_depth_encode_is_the_embedding() {
        let (store, params) = small_encoder(0, 2);
        let ids = [1, 4, 2];
        let mut tape = Tape::new();
        let emb = params.embed(&mut tape, &store, &ids).unwrap();
        let enc = params.encode(&mut tape, &store, &ids).unwrap();
        assert_eq!(tape.value(emb).data(), tape.value(enc).data());
    }

    #[test]
    fn rejects_out_of_range_ids_and_lengths() {
        let (store, params) = small_encoder(1, 3);
        let mut tape = Tape::new();
        let err = params
            .encode(&mut tape, &store, &[0, 10])
            .unwrap_err()
            .to_string();
        assert!(err.contains("10") && err.contains("token id"), "{err}");
        assert!(params.encode(&mut tape, &store, &[0; 7]).is_err());
        assert!(params.encode(&mut tape, &store, &[]).is_err());
    }

    #[test]
    fn output_shape_tracks_sequence_length() {
        let (store, params) = small_encoder(2, 4);
        for n in [1, 3, 6] {
            let ids: Vec<usize> = (0..n).map(|i| i % 10).collect();
            let mut tape = Tape::new();
            let out = params.encode(&mut tape, &store, &ids).unwrap();
            assert_eq!(tape.value(out).shape(), &[n, 8]);
        }
    }

    #[test]
    fn positions_break_order_symmetry() {
        // Same multiset of tokens in different order must encode differently
        // even at depth zero, because position embeddings differ.
        let (store, params) = small_encoder(0, 5);
        let a = encode_values(&store, &params, &[1, 2]);
        let b = encode_values(&store, &params, &[2, 1]);
        let max_diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "order change left encoding fixed");
    }

    #[test]
    fn attention_spreads_context_across_positions() {
        // Changing the first token must move the representation of the last
        // position once at least one attention layer runs.
        let (store, params) = small_encoder(1, 6);
        let a = encode_values(&store, &params, &[1, 2, 3, 4]);
        let b = encode_values(&store, &params, &[5, 2, 3, 4]);
        let d = params.d_model();
        let last_diff = (0..d)
            .map(|c| (a[3 * d + c] - b[3 * d + c]).abs())
            .fold(0.0f64, f64::max);
        assert!(last_diff > 1e-9, "context change did not reach position 3");

        // Without layers the change stays local.
        let (store0, params0) = small_encoder(0, 6);
        let a0 = encode_values(&store0, &params0, &[1, 2, 3, 4]);
        let b0 = encode_values(&store0, &params0, &[5, 2, 3, 4]);
        for c in 0..d {
            assert_eq!(a0[3 * d + c], b0[3 * d + c]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, params) = small_encoder(1, 7);
        let ids = vec![3usize, 1, 4, 1, 5, 9];
        let mut objective = TapeObjective::new(move |tape: &mut Tape, store: &ParamStore| {
            let out = params.encode(tape, store, &ids).unwrap();
            tape.sum_all(out)
        });
        let report = grad_check(&mut store, &mut objective, 1e-5);
        assert!(
            report.max_rel_err < 1e-4,
            "worst group {:?}",
            report.worst_group()
        );
    }

    #[test]
    fn unused_table_rows_get_zero_gradient() {
        let (mut store, params) = small_encoder(1, 8);
        let ids = vec![1, 2, 3usize];
        let mut tape = Tape::new();
        let out = params.encode(&mut tape, &store, &ids).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss);
        tape.accumulate_param_grads(&mut store);

        let d = params.d_model();
        let seg_grad = store.get(params.tables.segment).grad().unwrap();
        assert!(seg_grad[..d].iter().any(|&g| g != 0.0), "segment 0 is used");
        assert!(
            seg_grad[d..].iter().all(|&g| g == 0.0),
            "segment 1 is never used"
        );

        let tok_grad = store.get(params.tables.token).grad().unwrap();
        assert!(tok_grad[0..d].iter().all(|&g| g == 0.0), "token 0 absent");
        assert!(
            tok_grad[d..2 * d].iter().any(|&g| g != 0.0),
            "token 1 present"
        );
    }
}
