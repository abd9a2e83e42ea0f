//! Finite-difference checks of every differentiable primitive and of the
//! full encoder, against the `f64` reference.

#![allow(dead_code)]

use distil_core::encoder::{encode_batch, multi_head, segments_for, EncoderModel, ModelConfig};
use distil_core::{SplitMix64, Tape, Tensor, Var};

use super::reference::{self as r, Mat, RefModel};
use super::{max_gradient_error, numeric_gradient, numeric_gradient_piecewise, to_f64};

type Forward = dyn Fn(&mut Tape, &[Var]) -> Var;
type Reference = dyn Fn(&[Mat]) -> Vec<f64>;

struct Case {
    inputs: Vec<Tensor>,
    /// Inputs registered as constants rather than leaves.
    frozen: Vec<bool>,
    forward: Box<Forward>,
    reference: Box<Reference>,
}

impl Case {
    fn new(inputs: Vec<Tensor>, forward: Box<Forward>, reference: Box<Reference>) -> Self {
        let frozen = vec![false; inputs.len()];
        Self {
            inputs,
            frozen,
            forward,
            reference,
        }
    }
}

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Entries with magnitude in `[0.1, 1)` and random sign, keeping ReLU
/// inputs away from the kink.
fn away_from_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mag = rng.uniform(0.1, 1.0);
        *v = if rng.next_f32() < 0.5 { -mag } else { mag };
    }
    t
}

fn distribution(len: usize, rng: &mut SplitMix64) -> Tensor {
    let raw: Vec<f32> = (0..len).map(|_| rng.uniform(0.05, 1.0)).collect();
    let total: f32 = raw.iter().sum();
    Tensor::vector(raw.iter().map(|v| v / total).collect())
}

fn as_mat(t: &Tensor) -> Mat {
    let (rows, cols) = t.dims2().unwrap();
    Mat::from_f32(rows, cols, t.data())
}

fn run_case(case: Case, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.frozen)
        .map(|(t, &frozen)| {
            if frozen {
                tape.constant(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        })
        .collect();
    let out = (case.forward)(&mut tape, &vars);
    let mut rng = SplitMix64::derived(seed, 0xfeed);
    let weights = uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let root = tape.sum(prod).unwrap();
    tape.backward(root).unwrap();

    let mut analytic = Vec::new();
    let mut x = Vec::new();
    for (i, (&v, t)) in vars.iter().zip(&case.inputs).enumerate() {
        if case.frozen[i] {
            continue;
        }
        analytic.extend_from_slice(tape.grad(v).unwrap());
        x.extend(to_f64(t.data()));
    }
    let shapes: Vec<(usize, usize)> = case.inputs.iter().map(|t| t.dims2().unwrap()).collect();
    let frozen = case.frozen.clone();
    let fixed: Vec<Mat> = case.inputs.iter().map(as_mat).collect();
    let wv = to_f64(weights.data());
    let objective = |flat: &[f64]| {
        let mut offset = 0;
        let mats: Vec<Mat> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(rows, cols))| {
                if frozen[i] {
                    fixed[i].clone()
                } else {
                    let m = Mat::new(rows, cols, flat[offset..offset + rows * cols].to_vec());
                    offset += rows * cols;
                    m
                }
            })
            .collect();
        let y = (case.reference)(&mats);
        y.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = numeric_gradient(&x, objective);
    max_gradient_error(&analytic, &numeric).0
}

fn case_for(name: &str, seed: u64) -> Case {
    let mut rng = SplitMix64::new(seed);
    match name {
        "matmul" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng), uniform(&[4, 5], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            Box::new(|m| r::matmul(&m[0], &m[1]).data),
        ),
        "transpose" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.transpose(v[0]).unwrap()),
            Box::new(|m| r::transpose(&m[0]).data),
        ),
        "add" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng), uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            Box::new(|m| r::add(&m[0], &m[1]).data),
        ),
        "sub" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng), uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
            Box::new(|m| m[0].data.iter().zip(&m[1].data).map(|(a, b)| a - b).collect()),
        ),
        "mul" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng), uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            Box::new(|m| m[0].data.iter().zip(&m[1].data).map(|(a, b)| a * b).collect()),
        ),
        "scale" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.scale(v[0], -0.7).unwrap()),
            Box::new(|m| r::scale(&m[0], -0.7f32 as f64).data),
        ),
        "add_scalar" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.add_scalar(v[0], 0.25).unwrap()),
            Box::new(|m| m[0].data.iter().map(|x| x + 0.25).collect()),
        ),
        "add_col_bias" => Case::new(
            vec![uniform(&[4, 5], -1.0, 1.0, &mut rng), uniform(&[4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.add_col_bias(v[0], v[1]).unwrap()),
            Box::new(|m| r::add_col_bias(&m[0], &m[1].data).data),
        ),
        "relu" => Case::new(
            vec![away_from_zero(&[4, 5], &mut rng)],
            Box::new(|t, v| t.relu(v[0]).unwrap()),
            Box::new(|m| r::relu(&m[0], &mut Vec::new()).data),
        ),
        "softmax_columns" => Case::new(
            vec![uniform(&[5, 3], -2.0, 2.0, &mut rng)],
            Box::new(|t, v| t.softmax_columns(v[0]).unwrap()),
            Box::new(|m| r::softmax_columns(&m[0]).data),
        ),
        "log_softmax_columns" => Case::new(
            vec![uniform(&[5, 3], -2.0, 2.0, &mut rng)],
            Box::new(|t, v| t.log_softmax_columns(v[0]).unwrap()),
            Box::new(|m| r::log_softmax_columns(&m[0]).data),
        ),
        "layer_norm" => Case::new(
            vec![
                uniform(&[6, 4], -1.0, 1.0, &mut rng),
                uniform(&[6], 0.5, 1.5, &mut rng),
                uniform(&[6], -0.5, 0.5, &mut rng),
            ],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
            Box::new(|m| r::layer_norm(&m[0], &m[1].data, &m[2].data, 1e-5f32 as f64).data),
        ),
        "embedding" => {
            let ids: Vec<u32> = (0..6).map(|_| rng.below(7) as u32).collect();
            let ids_ref: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            Case::new(
                vec![uniform(&[7, 4], -1.0, 1.0, &mut rng)],
                Box::new(move |t, v| t.embedding(v[0], &ids).unwrap()),
                Box::new(move |m| r::embedding(&m[0], &ids_ref).data),
            )
        }
        "slice_rows" => Case::new(
            vec![uniform(&[5, 3], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.slice_rows(v[0], 1, 3).unwrap()),
            Box::new(|m| r::slice_rows(&m[0], 1, 3).data),
        ),
        "slice_cols" => Case::new(
            vec![uniform(&[3, 5], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.slice_cols(v[0], 2, 2).unwrap()),
            Box::new(|m| r::slice_cols(&m[0], 2, 2).data),
        ),
        "concat_rows" => Case::new(
            vec![uniform(&[2, 3], -1.0, 1.0, &mut rng), uniform(&[4, 3], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
            Box::new(|m| r::concat_rows(&[m[0].clone(), m[1].clone()]).data),
        ),
        "concat_cols" => Case::new(
            vec![uniform(&[3, 2], -1.0, 1.0, &mut rng), uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
            Box::new(|m| r::concat_cols(&[m[0].clone(), m[1].clone()]).data),
        ),
        "sum" => Case::new(
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.sum(v[0]).unwrap()),
            Box::new(|m| vec![m[0].data.iter().sum()]),
        ),
        "kl_log_columns" => Case::new(
            vec![uniform(&[5, 3], -3.0, 0.0, &mut rng), uniform(&[5, 3], -3.0, 0.0, &mut rng)],
            Box::new(|t, v| t.kl_log_columns(v[0], v[1]).unwrap()),
            Box::new(|m| vec![r::kl_log_columns(&m[0], &m[1])]),
        ),
        "kl_div" => Case::new(
            vec![distribution(6, &mut rng), distribution(6, &mut rng)],
            Box::new(|t, v| t.kl_div(v[0], v[1]).unwrap()),
            Box::new(|m| vec![r::kl_div(&m[0].data, &m[1].data)]),
        ),
        "cosine_columns" => Case::new(
            vec![uniform(&[5, 3], -1.0, 1.0, &mut rng), uniform(&[5, 3], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.cosine_columns(v[0], v[1]).unwrap()),
            Box::new(|m| r::cosine_columns(&m[0], &m[1])),
        ),
        "cosine_sim" => Case::new(
            vec![uniform(&[6], -1.0, 1.0, &mut rng), uniform(&[6], -1.0, 1.0, &mut rng)],
            Box::new(|t, v| t.cosine_sim(v[0], v[1]).unwrap()),
            Box::new(|m| r::cosine_columns(&m[0], &m[1])),
        ),
        "nll" => {
            let targets: Vec<(usize, usize)> = (0..4).map(|c| (rng.below(6) as usize, c)).collect();
            let t2 = targets.clone();
            Case::new(
                vec![uniform(&[6, 4], -3.0, 0.0, &mut rng)],
                Box::new(move |t, v| t.nll(v[0], &targets).unwrap()),
                Box::new(move |m| vec![r::nll(&m[0], &t2)]),
            )
        }
        "cross_entropy" => {
            let target = rng.below(6) as usize;
            Case::new(
                vec![uniform(&[6], -3.0, 0.0, &mut rng)],
                Box::new(move |t, v| t.cross_entropy(target, v[0]).unwrap()),
                Box::new(move |m| vec![r::nll(&m[0], &[(target, 0)])]),
            )
        }
        "composite" => Case::new(
            vec![
                uniform(&[4, 3], -1.0, 1.0, &mut rng),
                uniform(&[3, 5], -1.0, 1.0, &mut rng),
                uniform(&[4, 5], -1.0, 1.0, &mut rng),
                uniform(&[4], 0.5, 1.5, &mut rng),
                uniform(&[4], -0.5, 0.5, &mut rng),
            ],
            // softmax(LN(A B + C) + LN(A B + C)^2), then log-softmax.
            Box::new(|t, v| {
                let ab = t.matmul(v[0], v[1]).unwrap();
                let s = t.add(ab, v[2]).unwrap();
                let n = t.layer_norm(s, v[3], v[4], 1e-5).unwrap();
                let sq = t.mul(n, n).unwrap();
                let z = t.add(n, sq).unwrap();
                let p = t.softmax_columns(z).unwrap();
                t.log_softmax_columns(p).unwrap()
            }),
            Box::new(|m| {
                let s = r::add(&r::matmul(&m[0], &m[1]), &m[2]);
                let n = r::layer_norm(&s, &m[3].data, &m[4].data, 1e-5f32 as f64);
                let sq = Mat::new(n.rows, n.cols, n.data.iter().map(|x| x * x).collect());
                let p = r::softmax_columns(&r::add(&n, &sq));
                r::log_softmax_columns(&p).data
            }),
        ),
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_col_bias",
    "relu",
    "softmax_columns",
    "log_softmax_columns",
    "layer_norm",
    "embedding",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "sum",
    "kl_log_columns",
    "kl_div",
    "cosine_columns",
    "cosine_sim",
    "nll",
    "cross_entropy",
    "composite",
];

/// Worst gradient error of one primitive for one seed.
pub fn primitive_error(name: &str, seed: u64) -> f64 {
    run_case(case_for(name, seed), seed)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        ffn_size: 16,
        vocab_size: 11,
        max_positions: 16,
        layer_norm_eps: 1e-5,
    }
}

/// Tiny model with parameters spread wider than the default init so every
/// path carries signal.
pub fn spread_model(config: &ModelConfig, seed: u64) -> EncoderModel {
    let mut rng = SplitMix64::new(seed);
    let base = EncoderModel::zeros(config).unwrap();
    base.map(&mut |name, t: &Tensor| {
        if name.ends_with(".gain") {
            uniform(t.shape(), 0.7, 1.3, &mut rng)
        } else if name.ends_with(".bias") {
            uniform(t.shape(), -0.2, 0.2, &mut rng)
        } else {
            uniform(t.shape(), -0.5, 0.5, &mut rng)
        }
    })
}

/// Worst gradient error of the MLM loss over every parameter of a tiny
/// two-layer encoder.
pub fn full_model_error(seed: u64) -> f64 {
    let config = tiny_config();
    let model = spread_model(&config, seed);
    let mut rng = SplitMix64::derived(seed, 7);
    let sequences: Vec<Vec<u32>> = [5usize, 4]
        .iter()
        .map(|&n| {
            std::iter::once(0)
                .chain((1..n).map(|_| 2 + rng.below(9) as u32))
                .collect()
        })
        .collect();
    // Masked positions (packed column, true id).
    let targets: Vec<(usize, usize)> = vec![(4 + rng.below(7) as usize, 1), (4 + rng.below(7) as usize, 3), (4 + rng.below(7) as usize, 6)];
    let count = targets.len() as f32;

    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, true);
    let refs: Vec<&[u32]> = sequences.iter().map(Vec::as_slice).collect();
    let out = encode_batch(&mut tape, &enc, &refs).unwrap();
    let nll = tape.nll(out.log_probs, &targets).unwrap();
    let loss = tape.scale(nll, 1.0 / count).unwrap();
    tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for &v in enc.leaves() {
        analytic.extend_from_slice(tape.grad(v).unwrap());
    }

    let reference = RefModel::from_model(&model);
    let sizes: Vec<usize> = reference.params.iter().map(Vec::len).collect();
    let x: Vec<f64> = reference.params.iter().flatten().copied().collect();
    let objective = |flat: &[f64]| {
        let mut m = reference.clone();
        let mut offset = 0;
        for (p, &len) in m.params.iter_mut().zip(&sizes) {
            p.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        let out = m.forward(&sequences);
        let loss = r::nll(&out.log_probs, &targets) / count as f64;
        (loss, out.relu_pattern)
    };
    let numeric = numeric_gradient_piecewise(&x, objective);
    max_gradient_error(&analytic, &numeric).0
}

/// Worst gradient error of `sum(w * multi_head(H))` with respect to `H` and
/// every attention parameter of layer 0, over two packed sequences.
pub fn multi_head_error(seed: u64) -> f64 {
    let config = tiny_config();
    let model = spread_model(&config, seed);
    let lengths = [3usize, 2];
    let n: usize = lengths.iter().sum();
    let mut rng = SplitMix64::derived(seed, 11);
    let h = uniform(&[config.hidden_size, n], -1.0, 1.0, &mut rng);
    let weights = uniform(&[config.hidden_size, n], -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, true);
    let hv = tape.leaf(h.clone());
    let out = multi_head(&mut tape, &enc, 0, hv, &segments_for(&lengths)).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let root = tape.sum(prod).unwrap();
    tape.backward(root).unwrap();
    // Canonical indices 4..12: query, key, value, output (weight, bias).
    let attention: Vec<Var> = enc.leaves()[4..12].iter().map(|v| **v).collect();
    let mut analytic = tape.grad(hv).unwrap().to_vec();
    for &v in &attention {
        analytic.extend_from_slice(tape.grad(v).unwrap());
    }

    let reference = RefModel::from_model(&model);
    let sizes: Vec<usize> = reference.params[4..12].iter().map(Vec::len).collect();
    let mut x = to_f64(h.data());
    for p in &reference.params[4..12] {
        x.extend_from_slice(p);
    }
    let wv = to_f64(weights.data());
    let d = config.hidden_size;
    let objective = |flat: &[f64]| {
        let hm = Mat::new(d, n, flat[..d * n].to_vec());
        let mut m = reference.clone();
        let mut offset = d * n;
        for (p, &len) in m.params[4..12].iter_mut().zip(&sizes) {
            p.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        let y = m.multi_head(0, &hm, &lengths);
        y.data.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = numeric_gradient(&x, objective);
    max_gradient_error(&analytic, &numeric).0
}
