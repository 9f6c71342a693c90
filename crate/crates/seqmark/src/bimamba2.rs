//! Bidirectional sequence extraction and direction fusion.
//!
//! Two independent blocks read the adjusted embeddings, one left-to-right
//! and one right-to-left (implemented by flipping rows before and after the
//! block). Their outputs are fused by dot-product attention: each direction
//! attends over the other's similarity structure and the two attended
//! streams are summed. A drop-in bidirectional LSTM with the same interface
//! serves as the comparison extractor.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mamba2::{Mamba2Dims, Mamba2Params};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Affine width map, used for the encoder-to-extractor adjustment
/// (`fc_in.*`) and for the concatenation projection that replaces attention
/// fusion when that is ablated (`fusion.*`).
#[derive(Debug, Clone, Copy)]
pub struct FcIn {
    pub weight: ParamId,
    pub bias: ParamId,
    d_in: usize,
    d_out: usize,
}

impl FcIn {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> FcIn {
        FcIn {
            weight: store.add_uniform(format!("{prefix}.weight"), vec![d_in, d_out], d_in, rng),
            bias: store.add_uniform(format!("{prefix}.bias"), vec![d_out], d_in, rng),
            d_in,
            d_out,
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::Dimension(format!(
                "width adjustment expects [n, {}], got {shape:?}",
                self.d_in
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        Ok(tape.add_bias_rows(y, b))
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }
}

/// Forward and backward feature streams, both `[n, d]` in input order.
#[derive(Debug, Clone, Copy)]
pub struct DirectionStreams {
    pub forward: Var,
    pub backward: Var,
}

/// The two direction blocks of the bidirectional extractor.
#[derive(Debug, Clone, Copy)]
pub struct BiMamba2Params {
    pub fwd: Mamba2Params,
    pub bwd: Mamba2Params,
}

impl BiMamba2Params {
    /// Registers both direction blocks (`mamba_fwd.*` then `mamba_bwd.*`).
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_adj: usize,
        d_inner: usize,
        d_state: usize,
        conv_kernel: usize,
    ) -> BiMamba2Params {
        let dims = Mamba2Dims {
            d_in: d_adj,
            d_inner,
            d_state,
            conv_kernel,
            d_out: d_adj,
        };
        BiMamba2Params {
            fwd: Mamba2Params::register(store, rng, "mamba_fwd", dims),
            bwd: Mamba2Params::register(store, rng, "mamba_bwd", dims),
        }
    }

    /// Runs both directions over `[n, d_adj]` rows. The backward stream is
    /// produced on flipped rows and flipped back, so both outputs align with
    /// the input order.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<DirectionStreams> {
        let forward = self.fwd.block(tape, store, x)?;
        let flipped = tape.flip_rows(x);
        let scanned = self.bwd.block(tape, store, flipped)?;
        let backward = tape.flip_rows(scanned);
        Ok(DirectionStreams { forward, backward })
    }
}

/// Fused stream plus the two attention maps that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub fused: Var,
    /// Row-stochastic weights the forward stream is mixed with.
    pub w_forward: Var,
    /// Row-stochastic weights the backward stream is mixed with.
    pub w_backward: Var,
}

/// Dot-product attention fusion of the two direction streams.
///
/// `S = x_f x_b^T / sqrt(d)`; the fused output is
/// `softmax_rows(S) x_f + softmax_rows(S^T) x_b`.
pub fn dot_product_fusion(tape: &mut Tape, x_f: Var, x_b: Var) -> Result<Fusion> {
    let sf = tape.value(x_f).shape().to_vec();
    let sb = tape.value(x_b).shape().to_vec();
    if sf.len() != 2 || sf != sb {
        return Err(Error::Dimension(format!(
            "fusion expects two equal [n, d] streams, got {sf:?} and {sb:?}"
        )));
    }
    let d = sf[1];
    let x_b_t = tape.transpose(x_b);
    let raw = tape.matmul(x_f, x_b_t);
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let scores_t = tape.transpose(scores);
    let w_forward = tape.softmax_rows(scores);
    let w_backward = tape.softmax_rows(scores_t);
    let from_f = tape.matmul(w_forward, x_f);
    let from_b = tape.matmul(w_backward, x_b);
    let fused = tape.add(from_f, from_b);
    Ok(Fusion {
        fused,
        w_forward,
        w_backward,
    })
}

/// One LSTM gate's affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmGate {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl LstmGate {
    fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        gate: &str,
        d_in: usize,
        d_hidden: usize,
    ) -> LstmGate {
        LstmGate {
            w_x: store.add_uniform(
                format!("{prefix}.{gate}.w_x"),
                vec![d_in, d_hidden],
                d_in,
                rng,
            ),
            w_h: store.add_uniform(
                format!("{prefix}.{gate}.w_h"),
                vec![d_hidden, d_hidden],
                d_hidden,
                rng,
            ),
            bias: store.add_uniform(
                format!("{prefix}.{gate}.bias"),
                vec![d_hidden],
                d_hidden,
                rng,
            ),
        }
    }

    /// `x_t W_x (+ h_prev W_h) + bias`, all rank-1.
    fn pre(&self, tape: &mut Tape, store: &ParamStore, x_t: Var, h_prev: Option<Var>) -> Var {
        let w_x = tape.param(store, self.w_x);
        let bias = tape.param(store, self.bias);
        let mut acc = tape.vecmat(x_t, w_x);
        if let Some(h) = h_prev {
            let w_h = tape.param(store, self.w_h);
            let rec = tape.vecmat(h, w_h);
            acc = tape.add(acc, rec);
        }
        tape.add(acc, bias)
    }
}

/// One direction of the comparison LSTM.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirParams {
    pub input_gate: LstmGate,
    pub forget_gate: LstmGate,
    pub cell_gate: LstmGate,
    pub output_gate: LstmGate,
    d_in: usize,
}

impl LstmDirParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
    ) -> LstmDirParams {
        LstmDirParams {
            input_gate: LstmGate::register(store, rng, prefix, "input", d_in, d_hidden),
            forget_gate: LstmGate::register(store, rng, prefix, "forget", d_in, d_hidden),
            cell_gate: LstmGate::register(store, rng, prefix, "cell", d_in, d_hidden),
            output_gate: LstmGate::register(store, rng, prefix, "output", d_in, d_hidden),
            d_in,
        }
    }

    /// Standard LSTM scan over `[n, d_in]`, returning hidden states `[n, d_hidden]`.
    pub fn scan(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.d_in || shape[0] == 0 {
            return Err(Error::Dimension(format!(
                "lstm scan expects [n >= 1, {}], got {shape:?}",
                self.d_in
            )));
        }
        let n = shape[0];
        let mut h_prev: Option<Var> = None;
        let mut c_prev: Option<Var> = None;
        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            let x_t = tape.row(x, t);
            let pre_i = self.input_gate.pre(tape, store, x_t, h_prev);
            let pre_f = self.forget_gate.pre(tape, store, x_t, h_prev);
            let pre_g = self.cell_gate.pre(tape, store, x_t, h_prev);
            let pre_o = self.output_gate.pre(tape, store, x_t, h_prev);
            let i = tape.sigmoid(pre_i);
            let f = tape.sigmoid(pre_f);
            let g = tape.tanh(pre_g);
            let o = tape.sigmoid(pre_o);
            let write = tape.mul(i, g);
            let c = match c_prev {
                None => write,
                Some(cp) => {
                    let kept = tape.mul(f, cp);
                    tape.add(kept, write)
                }
            };
            let c_act = tape.tanh(c);
            let h = tape.mul(o, c_act);
            tape.value(h)
                .check_finite(&format!("lstm state at step {t}"))?;
            h_prev = Some(h);
            c_prev = Some(c);
            outputs.push(h);
        }
        Ok(tape.stack_rows(&outputs))
    }
}

/// Bidirectional LSTM with the same calling convention as [`BiMamba2Params`].
#[derive(Debug, Clone, Copy)]
pub struct BiLstmParams {
    pub fwd: LstmDirParams,
    pub bwd: LstmDirParams,
}

impl BiLstmParams {
    /// Registers both directions (`lstm_fwd.*` then `lstm_bwd.*`); hidden
    /// width equals `d_adj` so downstream fusion sees the same shapes.
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_adj: usize) -> BiLstmParams {
        BiLstmParams {
            fwd: LstmDirParams::register(store, rng, "lstm_fwd", d_adj, d_adj),
            bwd: LstmDirParams::register(store, rng, "lstm_bwd", d_adj, d_adj),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<DirectionStreams> {
        let forward = self.fwd.scan(tape, store, x)?;
        let flipped = tape.flip_rows(x);
        let scanned = self.bwd.scan(tape, store, flipped)?;
        let backward = tape.flip_rows(scanned);
        Ok(DirectionStreams { forward, backward })
    }
}
