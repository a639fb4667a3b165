use super::{Activation, Dense, Forward, ParamStore, Precision};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Multi-head self-attention with quantized, bias-free projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub emb_dim: usize,
    pub num_heads: usize,
    pub dropout: f32,
}

pub struct AttentionOutput {
    /// `[batch, seq, emb_dim]`.
    pub output: Var,
    /// Attention probabilities `[batch, heads, seq, seq]` before dropout.
    pub probs: Var,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        emb_dim: usize,
        num_heads: usize,
        dropout: f32,
        precision: Precision,
    ) -> Result<Self> {
        if num_heads == 0 || emb_dim % num_heads != 0 {
            return Err(Error::invalid(format!("{emb_dim} features do not split into {num_heads} heads")));
        }
        let mut proj = |part: &str| {
            Dense::new(store, &format!("{name}.{part}"), emb_dim, emb_dim, Activation::Linear, precision, false)
        };
        Ok(Attention {
            query: proj("query")?,
            key: proj("key")?,
            value: proj("value")?,
            output: proj("output")?,
            emb_dim,
            num_heads,
            dropout,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.num_heads
    }

    /// Self-attention: query, key and value all come from `x`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<AttentionOutput> {
        let shape = f.tape.shape(x).to_vec();
        let &[batch, seq, emb] = shape.as_slice() else {
            return Err(Error::invalid(format!("attention expects [batch, seq, emb], got {shape:?}")));
        };
        let (heads, dk) = (self.num_heads, self.head_dim());
        let split = |f: &mut Forward, layer: &Dense, perm: &[usize]| -> Result<Var> {
            let y = layer.forward(f, x)?;
            let y = f.tape.reshape(y, [batch, seq, heads, dk])?;
            f.tape.permute(y, perm)
        };
        let q = split(f, &self.query, &[0, 2, 1, 3])?;
        let k = split(f, &self.key, &[0, 2, 3, 1])?;
        let v = split(f, &self.value, &[0, 2, 1, 3])?;

        let scores = f.tape.batch_matmul(q, k)?;
        let scores = f.tape.scale(scores, 1.0 / (dk as f32).sqrt())?;
        let probs = f.tape.softmax(scores)?;
        let dropped = f.dropout(probs, self.dropout)?;
        let context = f.tape.batch_matmul(dropped, v)?;
        let context = f.tape.permute(context, &[0, 2, 1, 3])?;
        let context = f.tape.reshape(context, [batch, seq, emb])?;
        let output = self.output.forward(f, context)?;
        Ok(AttentionOutput { output, probs })
    }
}
