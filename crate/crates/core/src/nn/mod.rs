//! Layers, parameter storage and the forward-pass context.
//!
//! Parameters live in a [`ParamStore`] owned by the model; layers keep
//! [`ParamId`]s into it. A [`Forward`] binds parameters onto a tape for one
//! pass and decides, per weight, how it is presented to the computation:
//! raw (32-bit layers), straight-through quantized (training), or plainly
//! quantized (inference). The last two produce identical values.

mod attention;
mod conv;
mod dense;
mod norm;
mod patch;

pub use attention::{Attention, AttentionOutput};
pub use conv::{max_pool2d, Conv2d};
pub use dense::Dense;
pub use norm::{LayerNorm, LAYER_NORM_EPS};
pub use patch::{assemble_patches, extract_patches, extract_patches_tensor, PatchEncoder};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantize_ste, quantize_with, QuantResult, QuantSpec};
use crate::tensor::{Prng, Purpose, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Gelu,
    Softmax,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Softmax => tape.softmax(x),
        }
    }
}

/// Representation of a layer's connection weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    /// Plain 32-bit weights.
    Full,
    Quantized(QuantSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    PositionEmbedding,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    /// Weights only ever enter the computation through the quantizer.
    pub quantized: bool,
    pub trainable: bool,
    /// Stored `(W_q, γ)` for models loaded from a packed file, used instead of
    /// re-quantizing `value`.
    pub frozen: Option<QuantResult>,
}

/// A weight tensor and its optional bias, the unit that gets serialized.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Arena of a model's parameters in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    groups: Vec<ParamGroup>,
    prng: Option<Prng>,
}

impl ParamStore {
    /// Store whose initializers draw from `prng`, one stream per parameter slot.
    pub fn seeded(prng: Prng) -> Self {
        ParamStore {
            prng: Some(prng),
            ..Default::default()
        }
    }

    /// Stream for the next parameter to be added.
    pub(crate) fn init_rng(&self) -> ChaCha8Rng {
        self.prng
            .unwrap_or(Prng::new(0))
            .substream(Purpose::Init, 0, self.params.len() as u64)
    }

    pub fn add(&mut self, param: Param) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn add_group(&mut self, name: impl Into<String>, weight: ParamId, bias: Option<ParamId>) {
        self.groups.push(ParamGroup {
            name: name.into(),
            weight,
            bias,
        });
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }
}

/// One forward pass: the tape, the parameters bound onto it, and the mode.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn inference(tape: &'a mut Tape, params: &'a ParamStore) -> Self {
        Forward {
            bound: vec![None; params.len()],
            tape,
            params,
            dropout_rng: None,
        }
    }

    /// Training pass; `dropout_rng` feeds every dropout mask drawn during the pass.
    pub fn training(tape: &'a mut Tape, params: &'a ParamStore, dropout_rng: ChaCha8Rng) -> Self {
        Forward {
            bound: vec![None; params.len()],
            tape,
            params,
            dropout_rng: Some(dropout_rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// The parameter as a leaf; it takes a gradient only in training mode.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = self.params.get(id);
        let requires_grad = self.is_training() && p.trainable;
        let v = self.tape.leaf(p.value.clone(), requires_grad)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Weights as the layer computes with them: `γ · W_q` for quantized layers.
    pub fn weight(&mut self, id: ParamId, precision: Precision) -> Result<Var> {
        let spec = match precision {
            Precision::Full => return self.param(id),
            Precision::Quantized(spec) => spec,
        };
        let p = self.params.get(id);
        let (w_q, gamma) = if let Some(frozen) = &p.frozen {
            (self.tape.constant(frozen.w_q.clone())?, frozen.gamma)
        } else if self.is_training() && p.trainable {
            let master = self.param(id)?;
            quantize_ste(self.tape, master, &spec)?
        } else {
            let q = quantize_with(&p.value, &spec)?;
            (self.tape.constant(q.w_q)?, q.gamma)
        };
        self.tape.scale(w_q, gamma)
    }

    /// Inverted dropout, active only in training passes.
    pub fn dropout(&mut self, x: Var, rate: f32) -> Result<Var> {
        dropout(self.tape, x, rate, self.dropout_rng.as_mut())
    }

    /// `(parameter, leaf)` pairs bound during this pass.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

/// Zero each element with probability `rate` and scale survivors by `1 / (1 - rate)`.
/// Without an `rng` (inference) the input passes through untouched.
pub fn dropout(tape: &mut Tape, x: Var, rate: f32, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, mask)
}
