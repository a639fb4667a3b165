use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Tensor;
use crate::error::{Error, Result};

/// Half-width of the Glorot uniform interval, `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> Result<f32> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "glorot_uniform needs positive fans, got fan_in={fan_in} fan_out={fan_out}"
        )));
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt() as f32)
}

pub fn glorot_uniform(
    fan_in: usize,
    fan_out: usize,
    shape: impl Into<Vec<usize>>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let limit = glorot_limit(fan_in, fan_out)?;
    uniform(limit, shape, rng)
}

/// I.i.d. samples from `[-limit, +limit]`.
pub fn uniform(limit: f32, shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Result<Tensor> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-limit, limit)
        .map_err(|e| Error::invalid(format!("uniform({limit}): {e}")))?;
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data)
}
