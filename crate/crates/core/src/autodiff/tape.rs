//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and whatever
//! its backward rule needs. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and `backward` is a single reverse
//! sweep. Leaves created with [`Tape::leaf`] keep a persistent gradient
//! buffer; calling `backward` again accumulates into it.

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which argument of a divergence is the reference distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `D_KL(first || second)`.
    #[default]
    Forward,
    /// `D_KL(second || first)`.
    Reverse,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddColBias(Var, Var),
    Relu(Var),
    SoftmaxCols(Var),
    LogSoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    KlLogCols(Var, Var),
    KlDiv(Var, Var),
    CosineCols {
        a: Var,
        b: Var,
        cos: Vec<f64>,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    Nll {
        logp: Var,
        targets: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // Persistent gradients of trainable leaves, indexed like `nodes`.
    leaf_grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; its gradient is kept after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// An input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        matrix_dims(self.shape(v))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // Primitives

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        let value = Tensor::new(&[c, r], data)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let value = self.map(x, |v| v * factor)?;
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, shift: f32) -> Result<Var> {
        let value = self.map(x, |v| v + shift)?;
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// `x + 1_{1 x n} (x) bias`: adds `bias[r]` to every entry of row `r`.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.value(bias).len() != r {
            return Err(Error::shape("add_col_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &bv) in data.chunks_exact_mut(c).zip(b) {
            for v in row {
                *v += bv;
            }
        }
        let value = Tensor::new(&[r, c], data)?;
        self.push("add_col_bias", value, Op::AddColBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(0.0))?;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Softmax down each column (the row axis is normalized).
    pub fn softmax_columns(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        self.check_input_finite("softmax_columns", x)?;
        let data = kernels::softmax_columns(self.value(x).data(), r, c);
        let value = Tensor::new(self.shape(x), data)?;
        self.push("softmax_columns", value, Op::SoftmaxCols(x), &[x])
    }

    pub fn log_softmax_columns(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        self.check_input_finite("log_softmax_columns", x)?;
        let data = kernels::log_softmax_columns(self.value(x).data(), r, c);
        let value = Tensor::new(self.shape(x), data)?;
        self.push("log_softmax_columns", value, Op::LogSoftmaxCols(x), &[x])
    }

    fn check_input_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Standardizes each column of a `d x n` matrix over its `d` entries,
    /// then applies the per-row affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (d, n) = self.dims(x)?;
        if self.value(gain).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(bias)));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0f64; n];
        for row in xs.chunks_exact(n) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= d as f64);
        let mut var = vec![0.0f64; n];
        for row in xs.chunks_exact(n) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = v as f64 - m;
                *s += c * c;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / d as f64 + eps as f64).sqrt())
            .collect();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0f64; d * n];
        let mut out = vec![0.0f32; d * n];
        for r in 0..d {
            for c in 0..n {
                let idx = r * n + c;
                let h = (xs[idx] as f64 - mean[c]) * inv_std[c];
                xhat[idx] = h;
                out[idx] = (g[r] as f64 * h + b[r] as f64) as f32;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    /// Gathers rows of a `[vocab x d]` table into a `d x n` matrix whose
    /// column `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims(table)?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: vocab,
            });
        }
        let n = ids.len();
        let t = self.value(table).data();
        let mut out = vec![0.0f32; d * n];
        for (i, &id) in ids.iter().enumerate() {
            let row = &t[id as usize * d..(id as usize + 1) * d];
            for (r, &v) in row.iter().enumerate() {
                out[r * n + i] = v;
            }
        }
        let value = Tensor::new(&[d, n], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", value, op, &[table])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(&[len, c], data)?;
        self.push("slice_rows", value, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in src.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(&[r, len], data)?;
        self.push("slice_cols", value, Op::SliceCols(x, start), &[x])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let (_, c) = self.dims(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, c], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let (r, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let value = Tensor::new(&[r, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = kernels::sum(self.value(x).data()) as f32;
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// `sum_c sum_r exp(a[r,c]) (a[r,c] - b[r,c])` for column-wise
    /// log-distributions `a`, `b`: the KL divergence of every column of `a`
    /// from the matching column of `b`, summed.
    pub fn kl_log_columns(&mut self, log_p: Var, log_q: Var) -> Result<Var> {
        self.check_same("kl_log_columns", log_p, log_q)?;
        let a = self.value(log_p).data();
        let b = self.value(log_q).data();
        let total: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64).exp() * (x as f64 - y as f64))
            .sum();
        self.push(
            "kl_log_columns",
            Tensor::scalar(total as f32),
            Op::KlLogCols(log_p, log_q),
            &[log_p, log_q],
        )
    }

    /// `sum_i p_i ln(p_i / q_i)` over probability vectors, `0 ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.check_same("kl_div", p, q)?;
        for (name, v) in [("p", p), ("q", q)] {
            let data = self.value(v).data();
            if data.iter().any(|&x| x < 0.0) {
                return Err(Error::DegenerateInput {
                    op: "kl_div",
                    reason: format!("{name} has negative entries"),
                });
            }
            let s = kernels::sum(data);
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::DegenerateInput {
                    op: "kl_div",
                    reason: format!("{name} sums to {s}, not 1"),
                });
            }
        }
        let ps = self.value(p).data();
        let qs = self.value(q).data();
        let mut total = 0.0f64;
        for (index, (&pi, &qi)) in ps.iter().zip(qs).enumerate() {
            if pi == 0.0 {
                continue;
            }
            if qi == 0.0 {
                return Err(Error::InfiniteDivergence { index, p: pi });
            }
            total += pi as f64 * (pi as f64 / qi as f64).ln();
        }
        self.push("kl_div", Tensor::scalar(total as f32), Op::KlDiv(p, q), &[p, q])
    }

    /// Cosine similarity of matching columns; a `[n]` vector.
    pub fn cosine_columns(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("cosine_columns", a, b)?;
        let (d, n) = self.dims(a)?;
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut dots = vec![0.0f64; n];
        let mut sq_a = vec![0.0f64; n];
        let mut sq_b = vec![0.0f64; n];
        for r in 0..d {
            for c in 0..n {
                let (u, v) = (xa[r * n + c] as f64, xb[r * n + c] as f64);
                dots[c] += u * v;
                sq_a[c] += u * u;
                sq_b[c] += v * v;
            }
        }
        let norm_a: Vec<f64> = sq_a.iter().map(|s| s.sqrt()).collect();
        let norm_b: Vec<f64> = sq_b.iter().map(|s| s.sqrt()).collect();
        if let Some(c) = (0..n).find(|&c| norm_a[c] == 0.0 || norm_b[c] == 0.0) {
            return Err(Error::DegenerateInput {
                op: "cosine",
                reason: format!("zero vector at column {c}"),
            });
        }
        let cos: Vec<f64> = (0..n)
            .map(|c| (dots[c] / (norm_a[c] * norm_b[c])).clamp(-1.0, 1.0))
            .collect();
        let value = Tensor::vector(cos.iter().map(|&v| v as f32).collect());
        let op = Op::CosineCols {
            a,
            b,
            cos,
            norm_a,
            norm_b,
        };
        self.push("cosine_columns", value, op, &[a, b])
    }

    /// Cosine similarity of two vectors of equal length.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (_, n) = self.dims(u)?;
        if n != 1 {
            return Err(Error::shape("cosine_sim", self.shape(u), &[self.value(u).len()]));
        }
        self.cosine_columns(u, v)
    }

    /// `-sum log_p[row, col]` over `(row, col)` targets: the cross-entropy
    /// of one-hot labels against column-wise log-probabilities.
    pub fn nll(&mut self, log_p: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(log_p)?;
        if targets.is_empty() {
            return Err(Error::EmptyInput("nll"));
        }
        let lp = self.value(log_p).data();
        let mut total = 0.0f64;
        for &(row, col) in targets {
            if row >= r || col >= c {
                return Err(Error::shape("nll", &[r, c], &[row, col]));
            }
            total -= lp[row * c + col] as f64;
        }
        let op = Op::Nll {
            logp: log_p,
            targets: targets.to_vec(),
        };
        self.push("nll", Tensor::scalar(total as f32), op, &[log_p])
    }

    /// Cross-entropy of a single one-hot label against a log-prob vector.
    pub fn cross_entropy(&mut self, target: usize, log_p: Var) -> Result<Var> {
        self.nll(log_p, &[(target, 0)])
    }

    // ---------------------------------------------------------------------
    // Reverse sweep

    /// Propagates `d root / d node` to every trainable leaf, adding into the
    /// leaves' persistent gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(root_shape.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, delta: Vec<f32>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], delta);
                }
            };
            match &node.op {
                Op::Leaf => {
                    accumulate(&mut self.leaf_grads[i], g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = matrix_dims(self.shape(*a))?;
                    let (_, n) = matrix_dims(self.shape(*b))?;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.nodes[a.0].requires_grad {
                        send(*a, kernels::matmul_nt(&g, bv, m, n, k));
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, kernels::matmul_tn(av, &g, m, k, n));
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = matrix_dims(self.shape(*x))?;
                    send(*x, kernels::transpose(&g, c, r));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
                Op::Scale(x, factor) => {
                    send(*x, g.iter().map(|v| v * factor).collect());
                }
                Op::AddScalar(x) => send(*x, g),
                Op::AddColBias(x, bias) => {
                    let c = matrix_dims(self.shape(*x))?.1;
                    let db: Vec<f32> = g.chunks_exact(c).map(|row| kernels::sum(row) as f32).collect();
                    send(*bias, db);
                    send(*x, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    send(*x, dx);
                }
                Op::SoftmaxCols(x) => {
                    let (r, c) = matrix_dims(self.shape(*x))?;
                    let y = node.value.data();
                    let mut dots = vec![0.0f64; c];
                    for row in 0..r {
                        for col in 0..c {
                            let idx = row * c + col;
                            dots[col] += g[idx] as f64 * y[idx] as f64;
                        }
                    }
                    let mut dx = vec![0.0f32; r * c];
                    for row in 0..r {
                        for col in 0..c {
                            let idx = row * c + col;
                            dx[idx] = (y[idx] as f64 * (g[idx] as f64 - dots[col])) as f32;
                        }
                    }
                    send(*x, dx);
                }
                Op::LogSoftmaxCols(x) => {
                    let (r, c) = matrix_dims(self.shape(*x))?;
                    let y = node.value.data();
                    let mut sums = vec![0.0f64; c];
                    for row in g.chunks_exact(c) {
                        for (s, &v) in sums.iter_mut().zip(row) {
                            *s += v as f64;
                        }
                    }
                    let mut dx = vec![0.0f32; r * c];
                    for row in 0..r {
                        for col in 0..c {
                            let idx = row * c + col;
                            dx[idx] = (g[idx] as f64 - (y[idx] as f64).exp() * sums[col]) as f32;
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (d, n) = matrix_dims(self.shape(*x))?;
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0f32; d];
                    let mut dbias = vec![0.0f32; d];
                    for r in 0..d {
                        let mut sg = 0.0f64;
                        let mut sb = 0.0f64;
                        for c in 0..n {
                            let idx = r * n + c;
                            sg += g[idx] as f64 * xhat[idx];
                            sb += g[idx] as f64;
                        }
                        dgain[r] = sg as f32;
                        dbias[r] = sb as f32;
                    }
                    if self.nodes[x.0].requires_grad {
                        let mut sum_dh = vec![0.0f64; n];
                        let mut sum_dh_xhat = vec![0.0f64; n];
                        for r in 0..d {
                            for c in 0..n {
                                let idx = r * n + c;
                                let dh = g[idx] as f64 * gv[r] as f64;
                                sum_dh[c] += dh;
                                sum_dh_xhat[c] += dh * xhat[idx];
                            }
                        }
                        let df = d as f64;
                        let mut dx = vec![0.0f32; d * n];
                        for r in 0..d {
                            for c in 0..n {
                                let idx = r * n + c;
                                let dh = g[idx] as f64 * gv[r] as f64;
                                dx[idx] = (inv_std[c] / df
                                    * (df * dh - sum_dh[c] - xhat[idx] * sum_dh_xhat[c]))
                                    as f32;
                            }
                        }
                        send(*x, dx);
                    }
                    send(*gain, dgain);
                    send(*bias, dbias);
                }
                Op::Embedding { table, ids } => {
                    let (vocab, d) = matrix_dims(self.shape(*table))?;
                    let n = ids.len();
                    let mut dt = vec![0.0f32; vocab * d];
                    for (i, &id) in ids.iter().enumerate() {
                        let row = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (r, slot) in row.iter_mut().enumerate() {
                            *slot += g[r * n + i];
                        }
                    }
                    send(*table, dt);
                }
                Op::SliceRows(x, start) => {
                    let (r, c) = matrix_dims(self.shape(*x))?;
                    let mut dx = vec![0.0f32; r * c];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    send(*x, dx);
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = matrix_dims(self.shape(*x))?;
                    let len = g.len() / r;
                    let mut dx = vec![0.0f32; r * c];
                    for row in 0..r {
                        dx[row * c + start..row * c + start + len]
                            .copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                    send(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        send(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Vec::with_capacity(rows * w);
                        for row in 0..rows {
                            dp.extend_from_slice(&g[row * total + col..row * total + col + w]);
                        }
                        send(p, dp);
                        col += w;
                    }
                }
                Op::Sum(x) => {
                    send(*x, vec![g[0]; self.value(*x).len()]);
                }
                Op::KlLogCols(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let scale = g[0] as f64;
                    if self.nodes[a.0].requires_grad {
                        let da = av
                            .iter()
                            .zip(bv)
                            .map(|(&x, &y)| {
                                let (x, y) = (x as f64, y as f64);
                                (scale * x.exp() * (x - y + 1.0)) as f32
                            })
                            .collect();
                        send(*a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = av.iter().map(|&x| (-scale * (x as f64).exp()) as f32).collect();
                        send(*b, db);
                    }
                }
                Op::KlDiv(p, q) => {
                    let pv = self.value(*p).data();
                    let qv = self.value(*q).data();
                    let scale = g[0] as f64;
                    // The derivative in p is undefined where p_i = 0; those
                    // entries receive zero.
                    let dp = pv
                        .iter()
                        .zip(qv)
                        .map(|(&pi, &qi)| {
                            if pi > 0.0 {
                                (scale * ((pi as f64 / qi as f64).ln() + 1.0)) as f32
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let dq = pv
                        .iter()
                        .zip(qv)
                        .map(|(&pi, &qi)| {
                            if pi > 0.0 {
                                (-scale * pi as f64 / qi as f64) as f32
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    send(*p, dp);
                    send(*q, dq);
                }
                Op::CosineCols {
                    a,
                    b,
                    cos,
                    norm_a,
                    norm_b,
                } => {
                    let (d, n) = matrix_dims(self.shape(*a))?;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut da = vec![0.0f32; d * n];
                    let mut db = vec![0.0f32; d * n];
                    for r in 0..d {
                        for c in 0..n {
                            let idx = r * n + c;
                            let (x, y) = (av[idx] as f64, bv[idx] as f64);
                            let gc = g[c] as f64;
                            let denom = norm_a[c] * norm_b[c];
                            da[idx] = (gc * (y / denom - cos[c] * x / (norm_a[c] * norm_a[c]))) as f32;
                            db[idx] = (gc * (x / denom - cos[c] * y / (norm_b[c] * norm_b[c]))) as f32;
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Nll { logp, targets } => {
                    let c = matrix_dims(self.shape(*logp))?.1;
                    let mut dl = vec![0.0f32; self.value(*logp).len()];
                    for &(row, col) in targets {
                        dl[row * c + col] -= g[0];
                    }
                    send(*logp, dl);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}
