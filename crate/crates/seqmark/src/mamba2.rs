//! Single-direction Mamba2 block: input projection, causal depthwise
//! convolution, SiLU gate, selective state-space scan, residual, RMS norm,
//! output projection.
//!
//! The scan keeps a `[d_inner, d_state]` state matrix. Per step `t` with
//! channel activations `x_t`:
//!
//! ```text
//! delta_t = softplus(x_t W_delta + b_delta)      per-channel step size
//! A       = -exp(a_log)                          per-channel decay (< 0)
//! h      <- exp(delta_t * A) * h  (row-wise)  +  (delta_t * x_t) outer B_t
//! y_t     = h C_t            with B_t = x_t W_b,  C_t = x_t W_c
//! ```
//!
//! `exp(delta_t * A)` lies in (0, 1), so the state never amplifies.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Sizes of one Mamba2 block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mamba2Dims {
    /// Width of the incoming rows.
    pub d_in: usize,
    /// Channel count inside the block.
    pub d_inner: usize,
    /// State columns per channel.
    pub d_state: usize,
    /// Causal convolution taps.
    pub conv_kernel: usize,
    /// Width of the outgoing rows.
    pub d_out: usize,
}

/// Parameter handles for one direction's block.
#[derive(Debug, Clone, Copy)]
pub struct Mamba2Params {
    pub dims: Mamba2Dims,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub conv_kernels: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub norm_gain: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl Mamba2Params {
    /// Registers one block's parameters under `prefix` (e.g. `mamba_fwd`),
    /// in a fixed order.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: Mamba2Dims,
    ) -> Mamba2Params {
        assert!(
            dims.d_in > 0
                && dims.d_inner > 0
                && dims.d_state > 0
                && dims.conv_kernel > 0
                && dims.d_out > 0,
            "block dimensions must be positive"
        );
        let p = |suffix: &str| format!("{prefix}.{suffix}");
        Mamba2Params {
            dims,
            w_z: store.add_uniform(p("w_z"), vec![dims.d_in, dims.d_inner], dims.d_in, rng),
            b_z: store.add_uniform(p("b_z"), vec![dims.d_inner], dims.d_in, rng),
            conv_kernels: store.add_uniform(
                p("conv_kernels"),
                vec![dims.conv_kernel, dims.d_inner],
                dims.conv_kernel,
                rng,
            ),
            w_delta: store.add_uniform(
                p("w_delta"),
                vec![dims.d_inner, dims.d_inner],
                dims.d_inner,
                rng,
            ),
            delta_bias: store.add_uniform(p("delta_bias"), vec![dims.d_inner], dims.d_inner, rng),
            a_log: store.add_uniform(p("a_log"), vec![dims.d_inner], dims.d_inner, rng),
            w_b: store.add_uniform(
                p("w_b"),
                vec![dims.d_inner, dims.d_state],
                dims.d_inner,
                rng,
            ),
            w_c: store.add_uniform(
                p("w_c"),
                vec![dims.d_inner, dims.d_state],
                dims.d_inner,
                rng,
            ),
            norm_gain: store.add_ones(p("norm_gain"), vec![dims.d_inner]),
            w_out: store.add_uniform(
                p("w_out"),
                vec![dims.d_inner, dims.d_out],
                dims.d_inner,
                rng,
            ),
            b_out: store.add_uniform(p("b_out"), vec![dims.d_out], dims.d_inner, rng),
        }
    }

    fn expect_rows(&self, tape: &Tape, x: Var, want_cols: usize, what: &str) -> Result<usize> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != want_cols || shape[0] == 0 {
            return Err(Error::Dimension(format!(
                "{what} expects [n >= 1, {want_cols}], got {shape:?}"
            )));
        }
        Ok(shape[0])
    }

    /// Affine projection into the block's channel space: `[n, d_in] -> [n, d_inner]`.
    pub fn input_projection(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.expect_rows(tape, x, self.dims.d_in, "input projection")?;
        let w = tape.param(store, self.w_z);
        let b = tape.param(store, self.b_z);
        let z = tape.matmul(x, w);
        Ok(tape.add_bias_rows(z, b))
    }

    /// Selective scan over pre-activated channels: `[n, d_inner] -> [n, d_inner]`.
    ///
    /// Errors with the step position if any state row turns non-finite.
    pub fn selective_scan(&self, tape: &mut Tape, store: &ParamStore, act: Var) -> Result<Var> {
        let n = self.expect_rows(tape, act, self.dims.d_inner, "selective scan")?;
        // 13 nodes per step plus the parameter bindings and the final stack.
        tape.reserve(13 * n + 8);
        let w_delta = tape.param(store, self.w_delta);
        let delta_bias = tape.param(store, self.delta_bias);
        let a_log = tape.param(store, self.a_log);
        let w_b = tape.param(store, self.w_b);
        let w_c = tape.param(store, self.w_c);
        let a_pos = tape.exp(a_log);
        let neg_a = tape.scale(a_pos, -1.0);

        let mut state: Option<Var> = None;
        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            let x_t = tape.row(act, t);
            let pre = tape.vecmat(x_t, w_delta);
            let pre = tape.add(pre, delta_bias);
            let delta = tape.softplus(pre);
            let decay_log = tape.mul(delta, neg_a);
            let decay = tape.exp(decay_log);
            let b_t = tape.vecmat(x_t, w_b);
            let c_t = tape.vecmat(x_t, w_c);
            let dx = tape.mul(delta, x_t);
            let inject = tape.outer(dx, b_t);
            let h = match state {
                None => inject,
                Some(prev) => {
                    let kept = tape.scale_rows(prev, decay);
                    tape.add(kept, inject)
                }
            };
            state = Some(h);
            let y_t = tape.matvec(h, c_t);
            if !tape.value(y_t).is_finite() {
                return Err(Error::NonFinite(format!("scan output at step {t}")));
            }
            outputs.push(y_t);
        }
        Ok(tape.stack_rows(&outputs))
    }

    /// Full block: `[n, d_in] -> [n, d_out]`.
    pub fn block(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.expect_rows(tape, x, self.dims.d_in, "block input")?;
        let z = self.input_projection(tape, store, x)?;
        let kernels = tape.param(store, self.conv_kernels);
        let conv = tape.causal_conv(z, kernels);
        let act = tape.silu(conv);
        let scanned = self.selective_scan(tape, store, act)?;
        let res = tape.add(scanned, act);
        let gain = tape.param(store, self.norm_gain);
        let normed = tape.rmsnorm_rows(res, gain);
        let w_out = tape.param(store, self.w_out);
        let b_out = tape.param(store, self.b_out);
        let proj = tape.matmul(normed, w_out);
        let out = tape.add_bias_rows(proj, b_out);
        tape.value(out).check_finite("block output")?;
        Ok(out)
    }
}
