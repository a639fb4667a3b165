use super::{Forward, Param, ParamId, ParamRole, ParamStore};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-example normalization over the last axis with 32-bit scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub features: usize,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        let scale = store.add(Param {
            name: format!("{name}.scale"),
            value: Tensor::full([features], 1.0),
            role: ParamRole::NormScale,
            quantized: false,
            trainable: true,
            frozen: None,
        });
        let shift = store.add(Param {
            name: format!("{name}.shift"),
            value: Tensor::zeros([features]),
            role: ParamRole::NormShift,
            quantized: false,
            trainable: true,
            frozen: None,
        });
        store.add_group(name, scale, Some(shift));
        LayerNorm {
            scale,
            shift,
            features,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let scale = f.param(self.scale)?;
        let shift = f.param(self.shift)?;
        f.tape.layer_norm(x, scale, shift, self.eps)
    }
}
