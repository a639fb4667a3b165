//! Weight grids and the layer-wise quantizer.
//!
//! A layer's 32-bit weights `W` are normalized by `γ = β · W̄`, mapped onto the
//! integer lattice `round(W_norm · v_max + v_max)` with `v_max = (n - 1) / 2`,
//! shifted back to `[-1, +1]`, and finally clamped so that anything beyond the
//! outer grid points becomes exactly `±1`. The layer then computes with
//! `γ · W_q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_BETA: f32 = 1.4;

/// How `W̄` is taken from a layer's weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    /// Mean of `|W|`.
    #[default]
    Abs,
    /// Plain signed mean of `W`. Near zero for symmetric initializations.
    Signed,
}

/// Everything the quantizer needs for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub n_values: u16,
    pub beta: f32,
    pub mean_mode: MeanMode,
}

impl QuantSpec {
    pub fn new(n_values: u16) -> Self {
        QuantSpec {
            n_values,
            beta: DEFAULT_BETA,
            mean_mode: MeanMode::Abs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values < 2 {
            return Err(Error::invalid(format!("n_values must be at least 2, got {}", self.n_values)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// The sorted set of values a quantized weight may take.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    n_values: u16,
    values: Vec<f32>,
}

impl GridSpec {
    pub fn new(n_values: u16) -> Result<Self> {
        if n_values < 2 {
            return Err(Error::invalid(format!("a grid needs at least 2 values, got {n_values}")));
        }
        let v_max = v_max(n_values);
        let values = (0..n_values).map(|k| (k as f32 - v_max) / v_max).collect();
        Ok(GridSpec { n_values, values })
    }

    pub fn n_values(&self) -> u16 {
        self.n_values
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `log2(n_values)`.
    pub fn bits(&self) -> f64 {
        (self.n_values as f64).log2()
    }

    pub fn v_max(&self) -> f32 {
        v_max(self.n_values)
    }

    /// Grid index of a normalized weight: lattice rounding (half away from zero)
    /// followed by the clamp to the outer grid points.
    pub fn snap(&self, w_norm: f32) -> u16 {
        let v_max = self.v_max();
        let lattice = (w_norm * v_max + v_max).round();
        lattice.clamp(0.0, (self.n_values - 1) as f32) as u16
    }

    pub fn value(&self, digit: u16) -> f32 {
        self.values[digit as usize]
    }

    /// Inverse of [`GridSpec::value`]; `None` for anything not bit-equal to a grid point.
    pub fn digit_of(&self, value: f32) -> Option<u16> {
        let v_max = self.v_max();
        let guess = (value * v_max + v_max).round();
        if !(0.0..self.n_values as f32).contains(&guess) {
            return None;
        }
        let d = guess as u16;
        (self.values[d as usize] == value).then_some(d)
    }
}

fn v_max(n_values: u16) -> f32 {
    (n_values as f32 - 1.0) / 2.0
}

pub fn grid_values(n_values: u16) -> Result<GridSpec> {
    GridSpec::new(n_values)
}

/// Grid-valued weights and the scale that restores their magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantResult {
    pub w_q: Tensor,
    pub gamma: f32,
}

impl QuantResult {
    /// `γ · W_q`, the weights a quantized layer actually computes with.
    pub fn effective(&self) -> Tensor {
        self.w_q.map(|v| self.gamma * v)
    }
}

/// `γ = β · W̄` for a layer.
pub fn scale_of(w: &Tensor, spec: &QuantSpec) -> Result<f32> {
    spec.validate()?;
    if w.is_empty() {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    let n = w.len() as f64;
    let mean = match spec.mean_mode {
        MeanMode::Abs => w.data().iter().map(|&v| v.abs() as f64).sum::<f64>() / n,
        MeanMode::Signed => w.data().iter().map(|&v| v as f64).sum::<f64>() / n,
    } as f32;
    let gamma = spec.beta * mean;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::DegenerateScale { mean });
    }
    Ok(gamma)
}

fn normalize(w: &[f32], gamma: f32) -> impl Iterator<Item = f32> + '_ {
    let inv = 1.0 / gamma;
    w.iter().map(move |&v| v * inv)
}

fn snap_all(grid: &GridSpec, w_norm: impl Iterator<Item = f32>) -> Vec<f32> {
    w_norm.map(|v| grid.value(grid.snap(v))).collect()
}

/// Quantize with the default absolute-mean normalization.
pub fn quantize(w: &Tensor, n_values: u16, beta: f32) -> Result<QuantResult> {
    quantize_with(
        w,
        &QuantSpec {
            n_values,
            beta,
            mean_mode: MeanMode::Abs,
        },
    )
}

pub fn quantize_with(w: &Tensor, spec: &QuantSpec) -> Result<QuantResult> {
    let gamma = scale_of(w, spec)?;
    let grid = GridSpec::new(spec.n_values)?;
    let data = snap_all(&grid, normalize(w.data(), gamma));
    Ok(QuantResult {
        w_q: Tensor::new(w.shape().to_vec(), data)?,
        gamma,
    })
}

/// Training-path quantization of a recorded weight tensor.
///
/// Returns `W_q` as a tape value equal to [`quantize_with`]'s `w_q`, whose
/// gradient flows straight through the rounding to `W_norm = W / γ`, together
/// with `γ`. The scale itself is treated as a constant of the step.
pub fn quantize_ste(tape: &mut Tape, w: Var, spec: &QuantSpec) -> Result<(Var, f32)> {
    let gamma = scale_of(tape.value(w), spec)?;
    let grid = GridSpec::new(spec.n_values)?;
    let w_norm = tape.scale(w, 1.0 / gamma)?;
    let w_q = snap_ste(tape, w_norm, &grid)?;
    Ok((w_q, gamma))
}

/// `W_norm + stop_gradient(quant(W_norm) - W_norm)` for an already normalized tensor,
/// with the forward value exactly on the grid.
pub fn snap_ste(tape: &mut Tape, w_norm: Var, grid: &GridSpec) -> Result<Var> {
    let snapped = snap_all(grid, tape.value(w_norm).data().iter().copied());
    let snapped = Tensor::new(tape.shape(w_norm).to_vec(), snapped)?;
    tape.straight_through(w_norm, snapped)
}
