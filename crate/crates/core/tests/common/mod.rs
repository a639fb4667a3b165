//! 64-bit reference implementations shared by the integration tests.
//!
//! The numerical references never call into the library's numerical code;
//! the tests compare the library against them.

#![allow(dead_code)]

pub mod nets;

use lowbit::nn::{Forward, ParamStore};
use lowbit::tensor::{Prng, Purpose, Tape, Tensor, Var};
use lowbit::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, limit: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// `γ = β · mean|w|` accumulated in 64 bits.
pub fn gamma64(w: &[f32], beta: f64) -> f64 {
    beta * w.iter().map(|&v| (v as f64).abs()).sum::<f64>() / w.len() as f64
}

/// Grid points `-1 .. +1` for `n` values.
pub fn grid64(n: u16) -> Vec<f64> {
    let v = (n as f64 - 1.0) / 2.0;
    (0..n).map(|k| (k as f64 - v) / v).collect()
}

/// Nearest grid value to `clamp(x, -1, 1)` by exhaustive search, with the
/// distance from `x` to the closest decision midpoint (small means near a tie).
pub fn nearest_grid(x: f64, grid: &[f64]) -> (f64, f64) {
    let c = x.clamp(-1.0, 1.0);
    let mut best = grid[0];
    for &g in grid {
        if (g - c).abs() < (best - c).abs() {
            best = g;
        }
    }
    let tie_gap = grid
        .windows(2)
        .map(|w| (c - (w[0] + w[1]) / 2.0).abs())
        .fold(f64::INFINITY, f64::min);
    (best, tie_gap)
}

/// `|frac(w_norm · v_max + v_max) - 0.5|`: distance of a weight from a rounding boundary.
pub fn boundary_distance(w_norm: f64, n: u16) -> f64 {
    let v = (n as f64 - 1.0) / 2.0;
    let lattice = w_norm * v + v;
    (lattice - lattice.floor() - 0.5).abs()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Mean over rows of `-Σ y ln(p + eps)`.
pub fn cross_entropy64(p: &[f64], y: &[f64], rows: usize, eps: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&q, &t)| -t * (q + eps).ln())
        .sum();
    total / rows as f64
}

/// `x [rows, in] · w[out, in]ᵀ + b`.
pub fn dense64(x: &[f64], rows: usize, w: &[f64], b: Option<&[f64]>, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..inp {
                s += x[r * inp + i] * w[o * inp + i];
            }
            y[r * out + o] = s;
        }
    }
    y
}

/// Same-padded cross-correlation: `x [b, h, w, c]`, `k [o, c, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv64(x: &[f64], b: usize, h: usize, w: usize, c: usize, k: &[f64], o: usize, ks: usize) -> Vec<f64> {
    let p = (ks / 2) as isize;
    let mut y = vec![0.0; b * h * w * o];
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for oc in 0..o {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for di in 0..ks {
                            for dj in 0..ks {
                                let (si, sj) = (i as isize + di as isize - p, j as isize + dj as isize - p);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * h + si as usize) * w + sj as usize) * c + ic];
                                s += xv * k[((oc * c + ic) * ks + di) * ks + dj];
                            }
                        }
                    }
                    y[((n * h + i) * w + j) * o + oc] = s;
                }
            }
        }
    }
    y
}

/// 2×2 max pooling with stride 2 over `[b, h, w, c]`.
pub fn pool64(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![f64::NEG_INFINITY; b * oh * ow * c];
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            m = m.max(x[((n * h + 2 * i + di) * w + 2 * j + dj) * c + ch]);
                        }
                    }
                    y[((n * oh + i) * ow + j) * c + ch] = m;
                }
            }
        }
    }
    y
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Relative agreement with a small absolute floor for near-zero gradients.
pub fn grads_agree(analytic: f64, numeric: f64, rel: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + nets::GRAD_FLOOR
}

/// Output of `layer` on `x`, once in inference mode and once in training mode.
pub fn both_modes(store: &ParamStore, x: &Tensor, layer: impl Fn(&mut Forward, Var) -> Result<Var>) -> (Tensor, Tensor) {
    let run = |training: bool| {
        let mut tape = Tape::new();
        let mut f = if training {
            Forward::training(&mut tape, store, Prng::new(3).substream(Purpose::Dropout, 0, 0))
        } else {
            Forward::inference(&mut tape, store)
        };
        let v = f.tape.constant(x.clone()).unwrap();
        let out = layer(&mut f, v).unwrap();
        tape.value(out).clone()
    };
    (run(false), run(true))
}
