//! Times the selective scan forward pass at doubling sequence lengths.
//!
//! The state-space recurrence does constant work per step, so wall-clock
//! time should grow roughly linearly with sequence length — unlike a
//! self-attention layer, whose score matrix alone grows quadratically.
//!
//! Run with: `cargo run --release --example scan_scaling`

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqmark::mamba2::{Mamba2Dims, Mamba2Params};
use seqmark::params::ParamStore;
use seqmark::tape::Tape;
use seqmark::tensor::Tensor;

fn main() {
    let dims = Mamba2Dims {
        d_in: 8,
        d_inner: 8,
        d_state: 4,
        conv_kernel: 3,
        d_out: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let params = Mamba2Params::register(&mut store, &mut rng, "scan", dims);

    let mut time_once = |n: usize| -> Duration {
        let data: Vec<f64> = (0..n * dims.d_inner)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::new(vec![n, dims.d_inner], data).unwrap();
        let started = Instant::now();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = params.selective_scan(&mut tape, &store, xv).unwrap();
        std::hint::black_box(tape.value(out).data());
        started.elapsed()
    };
    let median = |mut runs: Vec<Duration>| -> Duration {
        runs.sort();
        runs[runs.len() / 2]
    };

    let lengths = [128usize, 256, 512, 1024, 2048, 4096];
    // Warm every length first so the allocator settles before any timing;
    // then interleave the timed runs so all lengths see the same heap state.
    for _ in 0..3 {
        for &n in &lengths {
            time_once(n);
        }
    }
    let mut runs: Vec<Vec<Duration>> = vec![Vec::new(); lengths.len()];
    for _ in 0..5 {
        for (i, &n) in lengths.iter().enumerate() {
            runs[i].push(time_once(n));
        }
    }

    println!(
        "{:>6}  {:>12}  {:>8}  {:>8}",
        "n", "median", "us/step", "vs prev"
    );
    let mut prev: Option<Duration> = None;
    for (i, &n) in lengths.iter().enumerate() {
        let t = median(runs[i].clone());
        let ratio = prev
            .map(|p| format!("{:.2}x", t.as_secs_f64() / p.as_secs_f64()))
            .unwrap_or_else(|| "-".into());
        println!(
            "{n:>6}  {:>12?}  {:>8.2}  {ratio:>8}",
            t,
            t.as_secs_f64() * 1e6 / n as f64
        );
        prev = Some(t);
    }
}
