//! Small quantized networks with 64-bit reference forwards, for gradient checks.
//!
//! The quantizer is piecewise constant, so its true derivative is useless as a
//! reference. The check instead differentiates the surrogate
//! `eff(W) = W + γ·c`, where `γ` and `c = W_q - W/γ` are frozen at the base
//! point. At the base point `eff` equals `γ·W_q`, and its derivative is the
//! identity, which is exactly the gradient the straight-through rule promises.

use lowbit::nn::{max_pool2d, Activation, Attention, Conv2d, Dense, Forward, ParamStore, Precision};
use lowbit::quant::{QuantSpec, DEFAULT_BETA};
use lowbit::tensor::{Prng, Purpose, Tape, Tensor, Var};
use lowbit::train::CE_EPS;
use lowbit::Result;
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
pub const GRAD_FLOOR: f64 = 1e-6;
/// Weights closer than this (in lattice units) to a rounding boundary are not sampled.
pub const BOUNDARY_MARGIN: f64 = 0.05;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub forward_gap: f64,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

type Oracle<'a> = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a>;

struct Problem<'a> {
    store: ParamStore,
    /// Grid size for each parameter slot that is quantized.
    quant: Vec<Option<u16>>,
    x: Tensor,
    y: Tensor,
    rows: usize,
    build: Box<dyn Fn(&mut Forward, Var) -> Result<Var> + 'a>,
    oracle: Oracle<'a>,
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn run(p: Problem, samples: usize, seed: u64) -> GradReport {
    let mut tape = Tape::new();
    let dropout = Prng::new(seed).substream(Purpose::Dropout, 0, 0);
    let mut f = Forward::training(&mut tape, &p.store, dropout);
    let x = f.tape.constant(p.x.clone()).unwrap();
    let probs = (p.build)(&mut f, x).unwrap();
    let bindings = f.bindings();
    let loss = tape.cross_entropy(probs, &p.y, CE_EPS).unwrap();
    let tape_loss = tape.value(loss).data()[0] as f64;
    tape.backward(loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = p.store.iter().map(|(_, q)| vec![0.0; q.value.len()]).collect();
    for (id, var) in bindings {
        if let Some(g) = tape.grad(var) {
            analytic[id.index()] = to64(g);
        }
    }

    let mut masters: Vec<Vec<f64>> = p.store.iter().map(|(_, q)| to64(&q.value)).collect();
    // (γ, c) per quantized slot, from the independent 64-bit quantizer.
    let frozen: Vec<Option<(f64, Vec<f64>)>> = p
        .store
        .iter()
        .zip(&p.quant)
        .map(|((_, param), n)| {
            n.map(|n| {
                let gamma = gamma64(param.value.data(), DEFAULT_BETA as f64);
                let grid = grid64(n);
                let c = param
                    .value
                    .data()
                    .iter()
                    .map(|&w| {
                        let w_norm = w as f64 / gamma;
                        nearest_grid(w_norm, &grid).0 - w_norm
                    })
                    .collect();
                (gamma, c)
            })
        })
        .collect();
    let y64 = to64(&p.y);
    let objective = |m: &[Vec<f64>]| -> f64 {
        let eff: Vec<Vec<f64>> = m
            .iter()
            .zip(&frozen)
            .map(|(w, fr)| match fr {
                Some((gamma, c)) => w.iter().zip(c).map(|(w, c)| w + gamma * c).collect(),
                None => w.clone(),
            })
            .collect();
        cross_entropy64(&(p.oracle)(&eff), &y64, p.rows, CE_EPS as f64)
    };

    let mut report = GradReport {
        forward_gap: (objective(&masters) - tape_loss).abs(),
        ..Default::default()
    };
    if report.forward_gap > 1e-5 * (1.0 + tape_loss.abs()) {
        report.failures.push(format!("forward loss {tape_loss} vs reference {}", objective(&masters)));
    }

    let mut candidates = Vec::new();
    for (slot, param) in p.store.iter() {
        let slot = slot.index();
        for (i, &w) in param.value.data().iter().enumerate() {
            let eligible = match (&frozen[slot], p.quant[slot]) {
                (Some((gamma, _)), Some(n)) => boundary_distance(w as f64 / gamma, n) > BOUNDARY_MARGIN,
                _ => true,
            };
            if eligible {
                candidates.push((slot, i));
            }
        }
    }
    let mut r = super::rng(seed ^ 0x5eed);
    candidates.shuffle(&mut r);
    candidates.truncate(samples);

    for (slot, i) in candidates {
        let numeric = {
            let orig = masters[slot][i];
            masters[slot][i] = orig + FD_STEP;
            let plus = objective(&masters);
            masters[slot][i] = orig - FD_STEP;
            let minus = objective(&masters);
            masters[slot][i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        };
        let a = analytic[slot][i];
        let scale = a.abs().max(numeric.abs());
        // Below the absolute floor the relative error is just float noise.
        if scale > GRAD_FLOOR {
            report.worst_rel = report.worst_rel.max((a - numeric).abs() / scale);
        }
        if !grads_agree(a, numeric, FD_REL_TOL) {
            let name = &p.store.iter().nth(slot).unwrap().1.name;
            report.failures.push(format!("{name}[{i}]: analytic {a:.6e} numeric {numeric:.6e}"));
        }
        report.checked += 1;
    }
    report
}

fn labels(rows: usize, classes: usize, seed: u64) -> Tensor {
    let mut r = super::rng(seed);
    let mut y = vec![0.0; rows * classes];
    for row in 0..rows {
        y[row * classes + r.random_range(0..classes)] = 1.0;
    }
    Tensor::new([rows, classes], y).unwrap()
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(&mut super::rng(seed), n, 1.0)).unwrap()
}

fn quant_slots(store: &ParamStore, n: u16) -> Vec<Option<u16>> {
    store.iter().map(|(_, p)| p.quantized.then_some(n)).collect()
}

/// Zero-initialized biases would hide bias-gradient mistakes behind symmetry.
fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut r = super::rng(seed);
    for (_, p) in store.iter_mut() {
        if !p.quantized {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.2..0.2);
            }
        }
    }
}

/// `softmax(W2 · relu(W1 x + b1) + b2)` with both weight matrices quantized;
/// `dims` is `[inputs, hidden, classes]`.
pub fn dense_dense(dims: [usize; 3], n: u16, seed: u64, samples: usize) -> GradReport {
    let [inp, hidden, classes] = dims;
    let rows = 5;
    let mut store = ParamStore::seeded(Prng::new(seed));
    let q = Precision::Quantized(QuantSpec::new(n));
    let l1 = Dense::new(&mut store, "fc1", inp, hidden, Activation::Relu, q, true).unwrap();
    let l2 = Dense::new(&mut store, "fc2", hidden, classes, Activation::Softmax, q, true).unwrap();
    jitter_biases(&mut store, seed + 1);
    let x = input(&[rows, inp], seed + 2);
    let x64 = to64(&x);
    let (w1, b1, w2, b2) = (l1.weight.index(), l1.bias.unwrap().index(), l2.weight.index(), l2.bias.unwrap().index());
    let problem = Problem {
        quant: quant_slots(&store, n),
        store,
        x,
        y: labels(rows, classes, seed + 3),
        rows,
        build: Box::new(move |f, x| {
            let h = l1.forward(f, x)?;
            l2.forward(f, h)
        }),
        oracle: Box::new(move |e| {
            let h: Vec<f64> = dense64(&x64, rows, &e[w1], Some(&e[b1]), inp, hidden).into_iter().map(relu).collect();
            let mut z = dense64(&h, rows, &e[w2], Some(&e[b2]), hidden, classes);
            softmax_rows(&mut z, classes);
            z
        }),
    };
    run(problem, samples, seed)
}

/// 3×3 same-padded convolution, ReLU, 2×2 max pooling, flatten, softmax dense layer.
pub fn conv_dense(n: u16, seed: u64, samples: usize) -> GradReport {
    let (b, h, w, c, oc, classes) = (2, 6, 6, 2, 3, 4);
    let mut store = ParamStore::seeded(Prng::new(seed));
    let q = Precision::Quantized(QuantSpec::new(n));
    let conv = Conv2d::new(&mut store, "conv", c, oc, 3, Activation::Relu, q).unwrap();
    let flat = (h / 2) * (w / 2) * oc;
    let fc = Dense::new(&mut store, "fc", flat, classes, Activation::Softmax, q, true).unwrap();
    jitter_biases(&mut store, seed + 1);
    let x = input(&[b, h, w, c], seed + 2);
    let x64 = to64(&x);
    let (k, kb, fw, fb) = (conv.weight.index(), conv.bias.index(), fc.weight.index(), fc.bias.unwrap().index());
    let problem = Problem {
        quant: quant_slots(&store, n),
        store,
        x,
        y: labels(b, classes, seed + 3),
        rows: b,
        build: Box::new(move |f, x| {
            let y = conv.forward(f, x)?;
            let y = max_pool2d(f.tape, y, 2, 2)?;
            let y = f.tape.flatten(y)?;
            fc.forward(f, y)
        }),
        oracle: Box::new(move |e| {
            let mut y = conv64(&x64, b, h, w, c, &e[k], oc, 3);
            for (i, v) in y.iter_mut().enumerate() {
                *v = relu(*v + e[kb][i % oc]);
            }
            let pooled = pool64(&y, b, h, w, oc);
            let mut z = dense64(&pooled, b, &e[fw], Some(&e[fb]), flat, classes);
            softmax_rows(&mut z, classes);
            z
        }),
    };
    run(problem, samples, seed)
}

/// Two-head self-attention, flatten, softmax dense layer. Attention dropout is
/// zero so that the reference is deterministic.
pub fn attention_dense(n: u16, seed: u64, samples: usize) -> GradReport {
    let (b, seq, emb, heads, classes) = (2, 5, 8, 2, 3);
    let mut store = ParamStore::seeded(Prng::new(seed));
    let q = Precision::Quantized(QuantSpec::new(n));
    let attn = Attention::new(&mut store, "attn", emb, heads, 0.0, q).unwrap();
    let fc = Dense::new(&mut store, "fc", seq * emb, classes, Activation::Softmax, q, true).unwrap();
    jitter_biases(&mut store, seed + 1);
    let x = input(&[b, seq, emb], seed + 2);
    let x64 = to64(&x);
    let ids = [attn.query.weight, attn.key.weight, attn.value.weight, attn.output.weight].map(|p| p.index());
    let (fw, fb) = (fc.weight.index(), fc.bias.unwrap().index());
    let problem = Problem {
        quant: quant_slots(&store, n),
        store,
        x,
        y: labels(b, classes, seed + 3),
        rows: b,
        build: Box::new(move |f, x| {
            let y = attn.forward(f, x)?.output;
            let y = f.tape.flatten(y)?;
            fc.forward(f, y)
        }),
        oracle: Box::new(move |e| {
            let out = attention64(&x64, b, seq, emb, heads, [&e[ids[0]], &e[ids[1]], &e[ids[2]], &e[ids[3]]]);
            let mut z = dense64(&out, b, &e[fw], Some(&e[fb]), seq * emb, classes);
            softmax_rows(&mut z, classes);
            z
        }),
    };
    run(problem, samples, seed)
}

/// Multi-head self-attention over `x [b, seq, emb]` with bias-free projections `[q, k, v, o]`.
pub fn attention64(x: &[f64], b: usize, seq: usize, emb: usize, heads: usize, w: [&[f64]; 4]) -> Vec<f64> {
    let dk = emb / heads;
    let rows = b * seq;
    let q = dense64(x, rows, w[0], None, emb, emb);
    let k = dense64(x, rows, w[1], None, emb, emb);
    let v = dense64(x, rows, w[2], None, emb, emb);
    let mut ctx = vec![0.0; rows * emb];
    for n in 0..b {
        for h in 0..heads {
            for i in 0..seq {
                let mut scores: Vec<f64> = (0..seq)
                    .map(|j| {
                        (0..dk)
                            .map(|d| q[(n * seq + i) * emb + h * dk + d] * k[(n * seq + j) * emb + h * dk + d])
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                softmax_rows(&mut scores, seq);
                for d in 0..dk {
                    ctx[(n * seq + i) * emb + h * dk + d] =
                        (0..seq).map(|j| scores[j] * v[(n * seq + j) * emb + h * dk + d]).sum();
                }
            }
        }
    }
    dense64(&ctx, rows, w[3], None, emb, emb)
}
