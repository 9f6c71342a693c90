//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an eagerly evaluated computation graph: each op computes its
//! value immediately and records how to push gradients back to its inputs.
//! Calling [`Tape::backward`] on a scalar node fills the gradient buffer of
//! every node; [`Tape::accumulate_param_grads`] then adds leaf gradients into
//! the persistent [`ParamStore`] buffers. Binding the same parameter more than
//! once is fine: each binding contributes additively.
//!
//! Shape agreement between op inputs is a programming error, not a runtime
//! condition, so the constructors assert rather than return `Result`.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor, RMSNORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    FlipRows(Var),
    Silu(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    RmsNormRows(Var, Var),
    ScaleRows(Var, Var),
    Outer(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    AddBiasRows(Var, Var),
    AddBiasCols(Var, Var),
    LogSumExpVec(Var),
    LogSumExpCols(Var),
    Row(Var, usize),
    Entry(Var, usize),
    StackRows(Vec<Var>),
    CausalConv(Var, Var),
    EmbedRows(Var, Vec<usize>),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Eager computation graph with reverse-mode gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        // Gradient buffers stay empty until `backward` runs, so forward-only
        // tapes (decoding, evaluation) never pay for them.
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    /// Gradient of the last `backward` target with respect to this node.
    /// Empty until `backward` has run on this tape.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reserves room for `additional` upcoming nodes. Long loops (such as a
    /// sequence scan) call this once instead of growing the node list
    /// doubling-step by doubling-step.
    pub fn reserve(&mut self, additional: usize) {
        self.nodes.reserve(additional);
    }

    /// Introduces a value the graph treats as an input (gradient is tracked
    /// but not tied to any parameter).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let stripped = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(stripped, Op::Const)
    }

    /// Binds a stored parameter's current value as a leaf node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(copy, Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add shapes");
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "sub shapes");
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul shapes");
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.val(a).data().iter().map(|x| x * c).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = tensor::matmul(self.val(a), self.val(b)).expect("matmul shapes");
        self.push(value, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.val(a);
        assert_eq!(t.rank(), 2, "transpose rank");
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.at2(i, j);
            }
        }
        self.push(Tensor::new(vec![c, r], data).unwrap(), Op::Transpose(a))
    }

    /// Column-wise concatenation of two rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tb.rank(), 2);
        assert_eq!(ta.rows(), tb.rows(), "concat_cols rows");
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        self.push(
            Tensor::new(vec![r, ca + cb], data).unwrap(),
            Op::ConcatCols(a, b),
        )
    }

    /// Reverses the row order of a rank-2 tensor (time flip).
    pub fn flip_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        assert_eq!(t.rank(), 2, "flip_rows rank");
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in (0..r).rev() {
            data.extend_from_slice(t.row(i));
        }
        self.push(Tensor::new(vec![r, c], data).unwrap(), Op::FlipRows(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = tensor::silu(self.val(a));
        self.push(value, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self
            .val(a)
            .data()
            .iter()
            .map(|&x| tensor::softplus(x))
            .collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .val(a)
            .data()
            .iter()
            .map(|&x| tensor::sigmoid(x))
            .collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = tensor::softmax_rows(self.val(a)).expect("softmax_rows rank");
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row RMS normalization with a shared per-channel gain vector.
    pub fn rmsnorm_rows(&mut self, x: Var, gain: Var) -> Var {
        let (tx, tg) = (self.val(x), self.val(gain));
        assert_eq!(tx.rank(), 2, "rmsnorm_rows rank");
        assert_eq!(tg.numel(), tx.cols(), "rmsnorm_rows gain width");
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(tensor::rmsnorm(tx.row(i), tg.data()).expect("rmsnorm widths"));
        }
        self.push(
            Tensor::new(vec![r, c], data).unwrap(),
            Op::RmsNormRows(x, gain),
        )
    }

    /// Multiplies row `i` of `m` by `v[i]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (self.val(m), self.val(v));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tv.numel(), tm.rows(), "scale_rows length");
        let (r, c) = (tm.rows(), tm.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = tv.data()[i];
            data.extend(tm.row(i).iter().map(|x| x * s));
        }
        self.push(Tensor::new(vec![r, c], data).unwrap(), Op::ScaleRows(m, v))
    }

    /// Outer product of two vectors: `out[i][j] = u[i] * v[j]`.
    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let (tu, tv) = (self.val(u), self.val(v));
        assert_eq!(tu.rank(), 1);
        assert_eq!(tv.rank(), 1);
        let (r, c) = (tu.numel(), tv.numel());
        let mut data = Vec::with_capacity(r * c);
        for &a in tu.data() {
            data.extend(tv.data().iter().map(|&b| a * b));
        }
        self.push(Tensor::new(vec![r, c], data).unwrap(), Op::Outer(u, v))
    }

    /// Matrix-vector product: `(r x c) . (c) -> (r)`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let (tm, tx) = (self.val(m), self.val(x));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tx.numel(), tm.cols(), "matvec width");
        let data = (0..tm.rows())
            .map(|i| {
                tm.row(i)
                    .iter()
                    .zip(tx.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        let r = tm.rows();
        self.push(Tensor::new(vec![r], data).unwrap(), Op::MatVec(m, x))
    }

    /// Vector-matrix product: `(r) . (r x c) -> (c)`.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Var {
        let (tx, tm) = (self.val(x), self.val(m));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tx.numel(), tm.rows(), "vecmat height");
        let (r, c) = (tm.rows(), tm.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            let xi = tx.data()[i];
            if xi == 0.0 {
                continue;
            }
            for (o, &mv) in data.iter_mut().zip(tm.row(i)) {
                *o += xi * mv;
            }
        }
        self.push(Tensor::new(vec![c], data).unwrap(), Op::VecMat(x, m))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_bias_rows(&mut self, m: Var, b: Var) -> Var {
        let (tm, tb) = (self.val(m), self.val(b));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tb.numel(), tm.cols(), "add_bias_rows width");
        let (r, c) = (tm.rows(), tm.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(tm.row(i).iter().zip(tb.data()).map(|(x, y)| x + y));
        }
        self.push(
            Tensor::new(vec![r, c], data).unwrap(),
            Op::AddBiasRows(m, b),
        )
    }

    /// Adds `v[i]` to every element of row `i`.
    pub fn add_bias_cols(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (self.val(m), self.val(v));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tv.numel(), tm.rows(), "add_bias_cols height");
        let (r, c) = (tm.rows(), tm.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = tv.data()[i];
            data.extend(tm.row(i).iter().map(|x| x + s));
        }
        self.push(
            Tensor::new(vec![r, c], data).unwrap(),
            Op::AddBiasCols(m, v),
        )
    }

    /// `log(sum(exp(.)))` over a vector, yielding a scalar node.
    pub fn logsumexp_vec(&mut self, v: Var) -> Var {
        let value = tensor::logsumexp(self.val(v).data()).expect("logsumexp nonempty");
        self.push(Tensor::scalar(value), Op::LogSumExpVec(v))
    }

    /// Column-wise `log(sum(exp(.)))` of a rank-2 tensor, yielding one value per column.
    pub fn logsumexp_cols(&mut self, m: Var) -> Var {
        let tm = self.val(m);
        assert_eq!(tm.rank(), 2);
        let (r, c) = (tm.rows(), tm.cols());
        assert!(r > 0, "logsumexp_cols on zero rows");
        let data = (0..c)
            .map(|j| {
                let col: Vec<f64> = (0..r).map(|i| tm.at2(i, j)).collect();
                tensor::logsumexp(&col).unwrap()
            })
            .collect();
        self.push(Tensor::new(vec![c], data).unwrap(), Op::LogSumExpCols(m))
    }

    /// Selects row `i` of a rank-2 tensor as a vector node.
    pub fn row(&mut self, m: Var, i: usize) -> Var {
        let tm = self.val(m);
        assert_eq!(tm.rank(), 2);
        assert!(i < tm.rows(), "row index");
        let data = tm.row(i).to_vec();
        let c = tm.cols();
        self.push(Tensor::new(vec![c], data).unwrap(), Op::Row(m, i))
    }

    /// Selects one element (by flat index) as a scalar node.
    pub fn entry(&mut self, t: Var, flat: usize) -> Var {
        let tt = self.val(t);
        assert!(flat < tt.numel(), "entry index");
        let value = tt.data()[flat];
        self.push(Tensor::scalar(value), Op::Entry(t, flat))
    }

    /// Stacks equal-length vector nodes into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows needs at least one row");
        let c = self.val(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * c);
        for &p in parts {
            let tp = self.val(p);
            assert_eq!(tp.numel(), c, "stack_rows widths");
            data.extend_from_slice(tp.data());
        }
        let r = parts.len();
        self.push(
            Tensor::new(vec![r, c], data).unwrap(),
            Op::StackRows(parts.to_vec()),
        )
    }

    /// Depthwise causal convolution along rows.
    ///
    /// `out[t][c] = sum_j kernels[j][c] * z[t - k + 1 + j][c]`, with positions
    /// before the first row reading as zero (left padding).
    pub fn causal_conv(&mut self, z: Var, kernels: Var) -> Var {
        let (tz, tk) = (self.val(z), self.val(kernels));
        assert_eq!(tz.rank(), 2);
        assert_eq!(tk.rank(), 2);
        assert_eq!(tz.cols(), tk.cols(), "causal_conv channels");
        let (n, d, k) = (tz.rows(), tz.cols(), tk.rows());
        let mut data = vec![0.0; n * d];
        for t in 0..n {
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let zrow = tz.row(src as usize);
                let krow = tk.row(j);
                let orow = &mut data[t * d..(t + 1) * d];
                for c in 0..d {
                    orow[c] += krow[c] * zrow[c];
                }
            }
        }
        self.push(
            Tensor::new(vec![n, d], data).unwrap(),
            Op::CausalConv(z, kernels),
        )
    }

    /// Gathers table rows by id into a matrix (embedding lookup).
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.val(table);
        assert_eq!(tt.rank(), 2);
        assert!(!ids.is_empty(), "embed_rows needs at least one id");
        let d = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < tt.rows(), "embed id {id} out of {}", tt.rows());
            data.extend_from_slice(tt.row(id));
        }
        let n = ids.len();
        self.push(
            Tensor::new(vec![n, d], data).unwrap(),
            Op::EmbedRows(table, ids.to_vec()),
        )
    }

    /// Sum of every element, yielding a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value: f64 = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(value), Op::SumAll(a))
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        let g = &mut self.nodes[v.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Runs reverse-mode accumulation from a scalar node. All node gradients
    /// are reset first, so calling this twice on the same tape is safe.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward target must be scalar"
        );
        for node in &mut self.nodes {
            node.grad.clear();
            node.grad.resize(node.value.numel(), 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = self.nodes[idx].grad.clone();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Const | Op::Param(_) => {}
                Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(b).data())
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(gi, av)| gi * av)
                        .collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    self.add_grad(a, &da);
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.val(a), self.val(b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let brow = tb.row(p);
                            let grow = &g[i * n..(i + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    for p in 0..k {
                        for i in 0..m {
                            let av = ta.at2(i, p);
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Transpose(a) => {
                    let ta = self.val(a);
                    let (r, c) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::ConcatCols(a, b) => {
                    let (ra, ca) = (self.val(a).rows(), self.val(a).cols());
                    let cb = self.val(b).cols();
                    let mut da = vec![0.0; ra * ca];
                    let mut db = vec![0.0; ra * cb];
                    for i in 0..ra {
                        let grow = &g[i * (ca + cb)..(i + 1) * (ca + cb)];
                        da[i * ca..(i + 1) * ca].copy_from_slice(&grow[..ca]);
                        db[i * cb..(i + 1) * cb].copy_from_slice(&grow[ca..]);
                    }
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::FlipRows(a) => {
                    let (r, c) = (self.val(a).rows(), self.val(a).cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c..(i + 1) * c].copy_from_slice(&g[(r - 1 - i) * c..(r - i) * c]);
                    }
                    self.add_grad(a, &da);
                }
                Op::Silu(a) => {
                    let da: Vec<f64> = self
                        .val(a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, gi)| {
                            let s = tensor::sigmoid(x);
                            gi * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = self
                        .val(a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, gi)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Softplus(a) => {
                    let da: Vec<f64> = self
                        .val(a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, gi)| gi * tensor::sigmoid(x))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Exp(a) => {
                    let out = self.nodes[idx].value.data().to_vec();
                    let da: Vec<f64> = out.iter().zip(&g).map(|(o, gi)| gi * o).collect();
                    self.add_grad(a, &da);
                }
                Op::Sigmoid(a) => {
                    let out = self.nodes[idx].value.data().to_vec();
                    let da: Vec<f64> = out
                        .iter()
                        .zip(&g)
                        .map(|(o, gi)| gi * o * (1.0 - o))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Tanh(a) => {
                    let out = self.nodes[idx].value.data().to_vec();
                    let da: Vec<f64> = out
                        .iter()
                        .zip(&g)
                        .map(|(o, gi)| gi * (1.0 - o * o))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let out = &self.nodes[idx].value;
                    let (r, c) = (out.rows(), out.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let srow = out.row(i);
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(s, gi)| s * gi).sum();
                        for j in 0..c {
                            da[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::RmsNormRows(x, gain) => {
                    let (tx, tg) = (self.val(x), self.val(gain));
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; r * c];
                    let mut dgain = vec![0.0; c];
                    for i in 0..r {
                        let xrow = tx.row(i);
                        let grow = &g[i * c..(i + 1) * c];
                        let ms = xrow.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let rms = (ms + RMSNORM_EPS).sqrt();
                        let mut dot = 0.0;
                        for j in 0..c {
                            let w = grow[j] * tg.data()[j];
                            dot += w * xrow[j];
                            dgain[j] += grow[j] * xrow[j] / rms;
                            dx[i * c + j] += w / rms;
                        }
                        let scale = dot / (c as f64 * rms * rms * rms);
                        for j in 0..c {
                            dx[i * c + j] -= xrow[j] * scale;
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gain, &dgain);
                }
                Op::ScaleRows(m, v) => {
                    let (tm, tv) = (self.val(m), self.val(v));
                    let (r, c) = (tm.rows(), tm.cols());
                    let mut dm = vec![0.0; r * c];
                    let mut dv = vec![0.0; r];
                    for i in 0..r {
                        let s = tv.data()[i];
                        let grow = &g[i * c..(i + 1) * c];
                        let mrow = tm.row(i);
                        for j in 0..c {
                            dm[i * c + j] = grow[j] * s;
                            dv[i] += grow[j] * mrow[j];
                        }
                    }
                    self.add_grad(m, &dm);
                    self.add_grad(v, &dv);
                }
                Op::Outer(u, v) => {
                    let (tu, tv) = (self.val(u), self.val(v));
                    let (r, c) = (tu.numel(), tv.numel());
                    let mut du = vec![0.0; r];
                    let mut dv = vec![0.0; c];
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..c {
                            du[i] += grow[j] * tv.data()[j];
                            dv[j] += grow[j] * tu.data()[i];
                        }
                    }
                    self.add_grad(u, &du);
                    self.add_grad(v, &dv);
                }
                Op::MatVec(m, x) => {
                    let (tm, tx) = (self.val(m), self.val(x));
                    let (r, c) = (tm.rows(), tm.cols());
                    let mut dm = vec![0.0; r * c];
                    let mut dx = vec![0.0; c];
                    for i in 0..r {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let mrow = tm.row(i);
                        for j in 0..c {
                            dm[i * c + j] = gi * tx.data()[j];
                            dx[j] += gi * mrow[j];
                        }
                    }
                    self.add_grad(m, &dm);
                    self.add_grad(x, &dx);
                }
                Op::VecMat(x, m) => {
                    let (tx, tm) = (self.val(x), self.val(m));
                    let (r, c) = (tm.rows(), tm.cols());
                    let mut dx = vec![0.0; r];
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        let xi = tx.data()[i];
                        let mrow = tm.row(i);
                        for j in 0..c {
                            dx[i] += g[j] * mrow[j];
                            dm[i * c + j] = xi * g[j];
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(m, &dm);
                }
                Op::AddBiasRows(m, b) => {
                    let (r, c) = (self.val(m).rows(), self.val(m).cols());
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    self.add_grad(m, &g);
                    self.add_grad(b, &db);
                }
                Op::AddBiasCols(m, v) => {
                    let (r, c) = (self.val(m).rows(), self.val(m).cols());
                    let mut dv = vec![0.0; r];
                    for i in 0..r {
                        dv[i] = g[i * c..(i + 1) * c].iter().sum();
                    }
                    self.add_grad(m, &g);
                    self.add_grad(v, &dv);
                }
                Op::LogSumExpVec(v) => {
                    let out = self.nodes[idx].value.item();
                    if out.is_finite() {
                        let da: Vec<f64> = self
                            .val(v)
                            .data()
                            .iter()
                            .map(|&x| g[0] * (x - out).exp())
                            .collect();
                        self.add_grad(v, &da);
                    }
                }
                Op::LogSumExpCols(m) => {
                    let out = self.nodes[idx].value.data().to_vec();
                    let tm = self.val(m);
                    let (r, c) = (tm.rows(), tm.cols());
                    let mut dm = vec![0.0; r * c];
                    for j in 0..c {
                        if !out[j].is_finite() {
                            continue;
                        }
                        for i in 0..r {
                            dm[i * c + j] = g[j] * (tm.at2(i, j) - out[j]).exp();
                        }
                    }
                    self.add_grad(m, &dm);
                }
                Op::Row(m, i) => {
                    let c = self.val(m).cols();
                    let mut dm = vec![0.0; self.val(m).numel()];
                    dm[i * c..(i + 1) * c].copy_from_slice(&g);
                    self.add_grad(m, &dm);
                }
                Op::Entry(t, flat) => {
                    let mut dt = vec![0.0; self.val(t).numel()];
                    dt[flat] = g[0];
                    self.add_grad(t, &dt);
                }
                Op::StackRows(parts) => {
                    let c = self.val(parts[0]).numel();
                    for (i, &p) in parts.iter().enumerate() {
                        self.add_grad(p, &g[i * c..(i + 1) * c]);
                    }
                }
                Op::CausalConv(z, kernels) => {
                    let (tz, tk) = (self.val(z), self.val(kernels));
                    let (n, d, k) = (tz.rows(), tz.cols(), tk.rows());
                    let mut dz = vec![0.0; n * d];
                    let mut dk = vec![0.0; k * d];
                    for t in 0..n {
                        let grow = &g[t * d..(t + 1) * d];
                        for j in 0..k {
                            let src = t as isize - (k as isize - 1) + j as isize;
                            if src < 0 {
                                continue;
                            }
                            let src = src as usize;
                            let krow = tk.row(j);
                            let zrow = tz.row(src);
                            for c in 0..d {
                                dz[src * d + c] += krow[c] * grow[c];
                                dk[j * d + c] += zrow[c] * grow[c];
                            }
                        }
                    }
                    self.add_grad(z, &dz);
                    self.add_grad(kernels, &dk);
                }
                Op::EmbedRows(table, ids) => {
                    let d = self.val(table).cols();
                    let mut dt = vec![0.0; self.val(table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[i * d + c];
                        }
                    }
                    self.add_grad(table, &dt);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; self.val(a).numel()];
                    self.add_grad(a, &da);
                }
            }
        }
    }

    /// Adds every parameter leaf's gradient into the store's buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                store.accumulate_grad(id, &node.grad);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Max relative gradient error of `build` over all leaf entries, comparing
    /// the tape's reverse pass against central finite differences.
    #[allow(clippy::needless_range_loop)] // subscript form mirrors the math
    fn fd_max_rel_err(
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        leaves: &[Tensor],
        eps: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss);
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };

        let mut worst: f64 = 0.0;
        for li in 0..leaves.len() {
            for k in 0..leaves[li].numel() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[k] += eps;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[k] -= eps;
                let central = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let rel = (analytic[li][k] - central).abs() / central.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
        worst
    }

    /// Checks one op across 20 random seeds. `shapes` produces leaf shapes for
    /// a seed; `build` wires the op and reduces it to a scalar.
    fn check_op(
        name: &str,
        shapes: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaves = shapes(&mut rng);
            let err = fd_max_rel_err(build, &leaves, 1e-5);
            assert!(err < 1e-4, "{name} seed {seed}: rel err {err:.3e}");
        }
    }

    /// Reduces any node to a scalar with data-dependent weights so gradient
    /// structure is exercised (a plain sum would hide many sign errors).
    fn spiky_sum(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).numel();
        let shape = tape.value(v).shape().to_vec();
        let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i % 5) as f64) - 1.1).collect();
        let w = tape.constant(Tensor::new(shape, weights).unwrap());
        let prod = tape.mul(v, w);
        tape.sum_all(prod)
    }

    #[test]
    fn grad_add_sub_mul_scale() {
        check_op(
            "add",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![
                    random_tensor(rng, vec![r, c]),
                    random_tensor(rng, vec![r, c]),
                ]
            },
            &|tape, vs| {
                let s = tape.add(vs[0], vs[1]);
                spiky_sum(tape, s)
            },
        );
        check_op(
            "sub",
            &|rng| {
                let n = rng.random_range(1..6);
                vec![random_tensor(rng, vec![n]), random_tensor(rng, vec![n])]
            },
            &|tape, vs| {
                let s = tape.sub(vs[0], vs[1]);
                spiky_sum(tape, s)
            },
        );
        check_op(
            "mul",
            &|rng| {
                let n = rng.random_range(1..6);
                vec![random_tensor(rng, vec![n]), random_tensor(rng, vec![n])]
            },
            &|tape, vs| {
                let s = tape.mul(vs[0], vs[1]);
                spiky_sum(tape, s)
            },
        );
        check_op(
            "scale",
            &|rng| vec![random_tensor(rng, vec![4])],
            &|tape, vs| {
                let s = tape.scale(vs[0], -2.5);
                spiky_sum(tape, s)
            },
        );
    }

    #[test]
    fn grad_matmul_transpose() {
        check_op(
            "matmul",
            &|rng| {
                let m = rng.random_range(1..5);
                let k = rng.random_range(1..5);
                let n = rng.random_range(1..5);
                vec![
                    random_tensor(rng, vec![m, k]),
                    random_tensor(rng, vec![k, n]),
                ]
            },
            &|tape, vs| {
                let p = tape.matmul(vs[0], vs[1]);
                spiky_sum(tape, p)
            },
        );
        check_op(
            "transpose",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r, c])]
            },
            &|tape, vs| {
                let t = tape.transpose(vs[0]);
                spiky_sum(tape, t)
            },
        );
    }

    #[test]
    fn grad_concat_flip_stack_row_entry() {
        check_op(
            "concat_cols",
            &|rng| {
                let r = rng.random_range(1..4);
                let ca = rng.random_range(1..4);
                let cb = rng.random_range(1..4);
                vec![
                    random_tensor(rng, vec![r, ca]),
                    random_tensor(rng, vec![r, cb]),
                ]
            },
            &|tape, vs| {
                let c = tape.concat_cols(vs[0], vs[1]);
                spiky_sum(tape, c)
            },
        );
        check_op(
            "flip_rows",
            &|rng| {
                let r = rng.random_range(1..6);
                vec![random_tensor(rng, vec![r, 3])]
            },
            &|tape, vs| {
                let f = tape.flip_rows(vs[0]);
                spiky_sum(tape, f)
            },
        );
        check_op(
            "stack_rows",
            &|rng| {
                (0..3)
                    .map(|_| random_tensor(rng, vec![4]))
                    .collect::<Vec<_>>()
            },
            &|tape, vs| {
                let s = tape.stack_rows(vs);
                spiky_sum(tape, s)
            },
        );
        check_op(
            "row",
            &|rng| vec![random_tensor(rng, vec![4, 3])],
            &|tape, vs| {
                let r = tape.row(vs[0], 2);
                spiky_sum(tape, r)
            },
        );
        check_op(
            "entry",
            &|rng| vec![random_tensor(rng, vec![3, 3])],
            &|tape, vs| tape.entry(vs[0], 5),
        );
    }

    #[test]
    fn grad_pointwise_activations() {
        let vector = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(1..7);
            vec![random_tensor(rng, vec![n])]
        };
        check_op("silu", &vector, &|tape, vs| {
            let y = tape.silu(vs[0]);
            spiky_sum(tape, y)
        });
        check_op("relu", &vector, &|tape, vs| {
            let y = tape.relu(vs[0]);
            spiky_sum(tape, y)
        });
        check_op("softplus", &vector, &|tape, vs| {
            let y = tape.softplus(vs[0]);
            spiky_sum(tape, y)
        });
        check_op("exp", &vector, &|tape, vs| {
            let y = tape.exp(vs[0]);
            spiky_sum(tape, y)
        });
        check_op("sigmoid", &vector, &|tape, vs| {
            let y = tape.sigmoid(vs[0]);
            spiky_sum(tape, y)
        });
        check_op("tanh", &vector, &|tape, vs| {
            let y = tape.tanh(vs[0]);
            spiky_sum(tape, y)
        });
    }

    #[test]
    fn grad_softmax_rmsnorm() {
        check_op(
            "softmax_rows",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(2..5);
                vec![random_tensor(rng, vec![r, c])]
            },
            &|tape, vs| {
                let s = tape.softmax_rows(vs[0]);
                spiky_sum(tape, s)
            },
        );
        check_op(
            "rmsnorm_rows",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r, c]), random_tensor(rng, vec![c])]
            },
            &|tape, vs| {
                let y = tape.rmsnorm_rows(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
    }

    #[test]
    fn grad_row_and_vector_products() {
        check_op(
            "scale_rows",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r, c]), random_tensor(rng, vec![r])]
            },
            &|tape, vs| {
                let y = tape.scale_rows(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
        check_op(
            "outer",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r]), random_tensor(rng, vec![c])]
            },
            &|tape, vs| {
                let y = tape.outer(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
        check_op(
            "matvec",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r, c]), random_tensor(rng, vec![c])]
            },
            &|tape, vs| {
                let y = tape.matvec(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
        check_op(
            "vecmat",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r]), random_tensor(rng, vec![r, c])]
            },
            &|tape, vs| {
                let y = tape.vecmat(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
    }

    #[test]
    fn grad_bias_broadcasts() {
        check_op(
            "add_bias_rows",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r, c]), random_tensor(rng, vec![c])]
            },
            &|tape, vs| {
                let y = tape.add_bias_rows(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
        check_op(
            "add_bias_cols",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r, c]), random_tensor(rng, vec![r])]
            },
            &|tape, vs| {
                let y = tape.add_bias_cols(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
    }

    #[test]
    fn grad_logsumexp_ops() {
        check_op(
            "logsumexp_vec",
            &|rng| {
                let n = rng.random_range(1..7);
                vec![random_tensor(rng, vec![n])]
            },
            &|tape, vs| tape.logsumexp_vec(vs[0]),
        );
        check_op(
            "logsumexp_cols",
            &|rng| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..5);
                vec![random_tensor(rng, vec![r, c])]
            },
            &|tape, vs| {
                let y = tape.logsumexp_cols(vs[0]);
                spiky_sum(tape, y)
            },
        );
    }

    #[test]
    fn grad_causal_conv_and_embed() {
        check_op(
            "causal_conv",
            &|rng| {
                let n = rng.random_range(1..7);
                let d = rng.random_range(1..4);
                let k = rng.random_range(1..4);
                vec![
                    random_tensor(rng, vec![n, d]),
                    random_tensor(rng, vec![k, d]),
                ]
            },
            &|tape, vs| {
                let y = tape.causal_conv(vs[0], vs[1]);
                spiky_sum(tape, y)
            },
        );
        check_op(
            "embed_rows",
            &|rng| vec![random_tensor(rng, vec![5, 3])],
            &|tape, vs| {
                // Repeated id 4 exercises scatter-add accumulation.
                let y = tape.embed_rows(vs[0], &[4, 0, 4, 2]);
                spiky_sum(tape, y)
            },
        );
    }

    #[test]
    fn grad_through_shared_subexpression() {
        check_op(
            "diamond",
            &|rng| vec![random_tensor(rng, vec![4])],
            &|tape, vs| {
                let sq = tape.mul(vs[0], vs[0]);
                let sum = tape.add(sq, vs[0]);
                let y = tape.silu(sum);
                spiky_sum(tape, y)
            },
        );
    }

    #[test]
    fn param_bindings_accumulate_into_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w = store.add_uniform("w", vec![3], 3, &mut rng);

        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        // loss = sum(w * w) through two independent bindings.
        let prod = tape.mul(a, b);
        let loss = tape.sum_all(prod);
        tape.backward(loss);
        store.zero_grads();
        tape.accumulate_param_grads(&mut store);

        let values: Vec<f64> = store.get(w).data().to_vec();
        let grads = store.get(w).grad().unwrap();
        for (v, g) in values.iter().zip(grads) {
            assert!((g - 2.0 * v).abs() < 1e-12, "d/dw sum(w^2) = 2w");
        }
    }

    #[test]
    fn backward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![3, 3]);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v);
        let loss = tape.sum_all(s);
        tape.backward(loss);
        let first = tape.grad(v).to_vec();
        tape.backward(loss);
        assert_eq!(first, tape.grad(v));
    }

    #[test]
    fn causal_conv_identity_kernel() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let y = tape.causal_conv(z, k);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn causal_conv_left_padding() {
        // Kernel [a, b] per channel: out[0] = b*z[0], out[t] = a*z[t-1] + b*z[t].
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0], vec![10.0], vec![100.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let y = tape.causal_conv(z, k);
        assert_eq!(tape.value(y).data(), &[3.0, 32.0, 320.0]);
    }
}
