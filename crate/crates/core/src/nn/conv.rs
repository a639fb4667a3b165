use super::{Activation, Forward, Param, ParamId, ParamRole, ParamStore, Precision};
use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Tape, Tensor, Var};

/// Stride-1, same-padded 2-D convolution over `[batch, h, w, channels]` input.
/// Filters are `[out_ch, in_ch, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub precision: Precision,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
        precision: Precision,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("same padding needs an odd filter size, got {kernel}")));
        }
        let area = kernel * kernel;
        let w = glorot_uniform(
            area * in_channels,
            area * out_channels,
            [out_channels, in_channels, kernel, kernel],
            &mut store.init_rng(),
        )?;
        let weight = store.add(Param {
            name: format!("{name}.weight"),
            value: w,
            role: ParamRole::Weight,
            quantized: matches!(precision, Precision::Quantized(_)),
            trainable: true,
            frozen: None,
        });
        let bias = store.add(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros([out_channels]),
            role: ParamRole::Bias,
            quantized: false,
            trainable: true,
            frozen: None,
        });
        store.add_group(name, weight, Some(bias));
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            activation,
            precision,
        })
    }

    /// `activation(conv(γ W_q, x) + b)`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.weight(self.weight, self.precision)?;
        let y = f.tape.conv2d(x, w)?;
        let b = f.param(self.bias)?;
        let y = f.tape.add_broadcast(y, b)?;
        self.activation.apply(f.tape, y)
    }
}

pub fn max_pool2d(tape: &mut Tape, x: Var, window: usize, stride: usize) -> Result<Var> {
    tape.max_pool2d(x, window, stride)
}
