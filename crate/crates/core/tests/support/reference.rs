//! Plain `f64` re-implementation of the forward math, written directly from
//! the formulas and sharing no code with the library. Finite differences of
//! these functions are the gradient oracle.

#![allow(dead_code)]

use distil_core::encoder::{EncoderModel, POSITION_OFFSET};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for p in 0..a.cols {
                s += a.get(i, p) * b.get(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.set(c, r, a.get(r, c));
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn add_col_bias(a: &Mat, b: &[f64]) -> Mat {
    let mut out = a.clone();
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[r * a.cols + c] += b[r];
        }
    }
    out
}

pub fn scale(a: &Mat, f: f64) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().map(|x| x * f).collect())
}

/// ReLU, also recording which entries were active.
pub fn relu(a: &Mat, pattern: &mut Vec<bool>) -> Mat {
    pattern.extend(a.data.iter().map(|&x| x > 0.0));
    Mat::new(a.rows, a.cols, a.data.iter().map(|&x| x.max(0.0)).collect())
}

pub fn softmax_columns(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols);
    for c in 0..a.cols {
        let max = (0..a.rows).map(|r| a.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..a.rows).map(|r| (a.get(r, c) - max).exp()).sum();
        for r in 0..a.rows {
            out.set(r, c, (a.get(r, c) - max).exp() / z);
        }
    }
    out
}

pub fn log_softmax_columns(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols);
    for c in 0..a.cols {
        let max = (0..a.rows).map(|r| a.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..a.rows).map(|r| (a.get(r, c) - max).exp()).sum();
        for r in 0..a.rows {
            out.set(r, c, a.get(r, c) - max - z.ln());
        }
    }
    out
}

pub fn layer_norm(a: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols);
    let d = a.rows as f64;
    for c in 0..a.cols {
        let mean = (0..a.rows).map(|r| a.get(r, c)).sum::<f64>() / d;
        let var = (0..a.rows).map(|r| (a.get(r, c) - mean).powi(2)).sum::<f64>() / d;
        for r in 0..a.rows {
            out.set(r, c, gain[r] * (a.get(r, c) - mean) / (var + eps).sqrt() + bias[r]);
        }
    }
    out
}

/// Column `i` of the result is row `ids[i]` of `table`.
pub fn embedding(table: &Mat, ids: &[usize]) -> Mat {
    let mut out = Mat::zeros(table.cols, ids.len());
    for (i, &id) in ids.iter().enumerate() {
        for r in 0..table.cols {
            out.set(r, i, table.get(id, r));
        }
    }
    out
}

pub fn slice_rows(a: &Mat, start: usize, len: usize) -> Mat {
    Mat::new(len, a.cols, a.data[start * a.cols..(start + len) * a.cols].to_vec())
}

pub fn slice_cols(a: &Mat, start: usize, len: usize) -> Mat {
    let mut out = Mat::zeros(a.rows, len);
    for r in 0..a.rows {
        for c in 0..len {
            out.set(r, c, a.get(r, start + c));
        }
    }
    out
}

pub fn concat_rows(parts: &[Mat]) -> Mat {
    let cols = parts[0].cols;
    let rows = parts.iter().map(|p| p.rows).sum();
    Mat::new(rows, cols, parts.iter().flat_map(|p| p.data.iter().copied()).collect())
}

pub fn concat_cols(parts: &[Mat]) -> Mat {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut offset = 0;
    for p in parts {
        for r in 0..rows {
            for c in 0..p.cols {
                out.set(r, offset + c, p.get(r, c));
            }
        }
        offset += p.cols;
    }
    out
}

/// Sum over columns of `sum_r exp(a) (a - b)`.
pub fn kl_log_columns(a: &Mat, b: &Mat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x.exp() * (x - y)).sum()
}

pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn cosine_columns(a: &Mat, b: &Mat) -> Vec<f64> {
    (0..a.cols)
        .map(|c| {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for r in 0..a.rows {
                dot += a.get(r, c) * b.get(r, c);
                na += a.get(r, c).powi(2);
                nb += b.get(r, c).powi(2);
            }
            dot / (na.sqrt() * nb.sqrt())
        })
        .collect()
}

pub fn nll(logp: &Mat, targets: &[(usize, usize)]) -> f64 {
    -targets.iter().map(|&(r, c)| logp.get(r, c)).sum::<f64>()
}

/// `f64` copy of an encoder's parameters in canonical order.
#[derive(Debug, Clone)]
pub struct RefModel {
    pub params: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub positions: usize,
    pub eps: f64,
}

pub struct RefOutput {
    pub hidden: Mat,
    pub log_probs: Mat,
    pub relu_pattern: Vec<bool>,
}

impl RefModel {
    pub fn from_model(model: &EncoderModel) -> Self {
        let cfg = &model.config;
        let leaves = model.leaves();
        Self {
            params: leaves
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .collect(),
            shapes: leaves.iter().map(|t| t.shape().to_vec()).collect(),
            layers: cfg.num_layers,
            d: cfg.hidden_size,
            heads: cfg.num_heads,
            ffn: cfg.ffn_size,
            vocab: cfg.vocab_size,
            positions: cfg.max_positions,
            eps: cfg.layer_norm_eps as f64,
        }
    }

    fn mat(&self, idx: usize) -> Mat {
        let shape = &self.shapes[idx];
        Mat::new(shape[0], shape[1], self.params[idx].clone())
    }

    fn linear(&self, x: &Mat, w: usize) -> Mat {
        add_col_bias(&matmul(&self.mat(w), x), &self.params[w + 1])
    }

    /// Multi-head attention of layer `layer` over packed sequences of the
    /// given lengths.
    pub fn multi_head(&self, layer: usize, h: &Mat, lengths: &[usize]) -> Mat {
        let base = 4 + layer * 16;
        let dk = self.d / self.heads;
        let q = self.linear(h, base);
        let k = self.linear(h, base + 2);
        let v = self.linear(h, base + 4);
        let mut start = 0;
        let mut seg_outputs = Vec::new();
        for &n in lengths {
            let (qs, ks, vs) = (
                slice_cols(&q, start, n),
                slice_cols(&k, start, n),
                slice_cols(&v, start, n),
            );
            let mut heads = Vec::new();
            for j in 0..self.heads {
                let qj = slice_rows(&qs, j * dk, dk);
                let kj = slice_rows(&ks, j * dk, dk);
                let vj = slice_rows(&vs, j * dk, dk);
                // Q^T K: queries x keys; softmax over keys; transpose.
                let scores = scale(&matmul(&transpose(&qj), &kj), 1.0 / (dk as f64).sqrt());
                let weights = transpose(&softmax_columns(&transpose(&scores)));
                heads.push(matmul(&vj, &transpose(&weights)));
            }
            seg_outputs.push(concat_rows(&heads));
            start += n;
        }
        self.linear(&concat_cols(&seg_outputs), base + 6)
    }

    /// Forward pass over packed sequences, following the canonical
    /// parameter order: word, position, emb gain, emb bias, then per layer
    /// q.w q.b k.w k.b v.w v.b o.w o.b ln1.g ln1.b feed.w feed.b fwd.w
    /// fwd.b ln2.g ln2.b, then the MLM-head bias.
    pub fn forward(&self, sequences: &[Vec<u32>]) -> RefOutput {
        let ids: Vec<usize> = sequences.iter().flatten().map(|&i| i as usize).collect();
        let positions: Vec<usize> = sequences
            .iter()
            .flat_map(|s| (0..s.len()).map(|p| p + POSITION_OFFSET))
            .collect();
        let words = embedding(&self.mat(0), &ids);
        let pos = embedding(&self.mat(1), &positions);
        let mut h = layer_norm(&add(&words, &pos), &self.params[2], &self.params[3], self.eps);
        let mut relu_pattern = Vec::new();
        let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
        for l in 0..self.layers {
            let base = 4 + l * 16;
            let attn = self.multi_head(l, &h, &lengths);
            h = layer_norm(&add(&h, &attn), &self.params[base + 8], &self.params[base + 9], self.eps);
            let inner = relu(&self.linear(&h, base + 10), &mut relu_pattern);
            let ff = self.linear(&inner, base + 12);
            h = layer_norm(&add(&h, &ff), &self.params[base + 14], &self.params[base + 15], self.eps);
        }
        let lm_bias = &self.params[self.params.len() - 1];
        let logits = add_col_bias(&matmul(&self.mat(0), &h), lm_bias);
        RefOutput {
            log_probs: log_softmax_columns(&logits),
            hidden: h,
            relu_pattern,
        }
    }
}
