use super::{Activation, Forward, Param, ParamId, ParamRole, ParamStore, Precision};
use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Tensor, Var};

/// Fully connected layer. `weight` is `[units, in_features]`, Glorot-uniform
/// initialized; the optional bias starts at zero and is never quantized.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub units: usize,
    pub activation: Activation,
    pub precision: Precision,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        units: usize,
        activation: Activation,
        precision: Precision,
        use_bias: bool,
    ) -> Result<Self> {
        let w = glorot_uniform(in_features, units, [units, in_features], &mut store.init_rng())?;
        let weight = store.add(Param {
            name: format!("{name}.weight"),
            value: w,
            role: ParamRole::Weight,
            quantized: matches!(precision, Precision::Quantized(_)),
            trainable: true,
            frozen: None,
        });
        let bias = use_bias.then(|| {
            store.add(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros([units]),
                role: ParamRole::Bias,
                quantized: false,
                trainable: true,
                frozen: None,
            })
        });
        store.add_group(name, weight, bias);
        Ok(Dense {
            weight,
            bias,
            in_features,
            units,
            activation,
            precision,
        })
    }

    /// `activation(x · (γ W_q)ᵀ + b)` over the last axis of `x`; leading axes are kept.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_features) {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: shape,
                rhs: vec![self.units, self.in_features],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let w = f.weight(self.weight, self.precision)?;
        let flat = if shape.len() == 2 { x } else { f.tape.reshape(x, [rows, self.in_features])? };
        let mut y = f.tape.matmul_nt(flat, w)?;
        if let Some(b) = self.bias {
            let b = f.param(b)?;
            y = f.tape.add_broadcast(y, b)?;
        }
        if shape.len() != 2 {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.units;
            y = f.tape.reshape(y, out_shape)?;
        }
        self.activation.apply(f.tape, y)
    }
}
