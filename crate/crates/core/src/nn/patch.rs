use super::{Activation, Dense, Forward, Param, ParamId, ParamRole, ParamStore, Precision};
use crate::error::{Error, Result};
use crate::tensor::{permute_tensor, uniform, Tape, Tensor, Var};

const PATCH_PERM: [usize; 6] = [0, 1, 3, 2, 4, 5];
const POSITION_INIT_LIMIT: f32 = 0.05;

fn grid(shape: &[usize], patch: usize) -> Result<[usize; 6]> {
    let &[b, h, w, c] = shape else {
        return Err(Error::invalid(format!("patches need a [batch, h, w, c] input, got {shape:?}")));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!("{h}x{w} image does not divide into {patch}x{patch} patches")));
    }
    Ok([b, h / patch, patch, w / patch, patch, c])
}

/// `[batch, h, w, c]` → `[batch, (h/p)·(w/p), p·p·c]`, patches in row-major order.
pub fn extract_patches(tape: &mut Tape, x: Var, patch: usize) -> Result<Var> {
    let g = grid(tape.shape(x), patch)?;
    let split = tape.reshape(x, g)?;
    let grouped = tape.permute(split, &PATCH_PERM)?;
    tape.reshape(grouped, [g[0], g[1] * g[3], patch * patch * g[5]])
}

pub fn extract_patches_tensor(x: &Tensor, patch: usize) -> Result<Tensor> {
    let g = grid(x.shape(), patch)?;
    let grouped = permute_tensor(&x.clone().reshape(g)?, &PATCH_PERM)?;
    grouped.reshape([g[0], g[1] * g[3], patch * patch * g[5]])
}

/// Inverse of [`extract_patches_tensor`] for an image of `height × width`.
pub fn assemble_patches(patches: &Tensor, patch: usize, height: usize, width: usize) -> Result<Tensor> {
    let &[b, n, dim] = patches.shape() else {
        return Err(Error::invalid(format!("expected [batch, patches, dim], got {:?}", patches.shape())));
    };
    if patch == 0 || height % patch != 0 || width % patch != 0 || dim % (patch * patch) != 0 {
        return Err(Error::invalid("patch geometry does not match the image size"));
    }
    let (gh, gw, c) = (height / patch, width / patch, dim / (patch * patch));
    if gh * gw != n {
        return Err(Error::invalid(format!("{n} patches cannot tile a {height}x{width} image")));
    }
    let split = patches.clone().reshape([b, gh, gw, patch, patch, c])?;
    permute_tensor(&split, &PATCH_PERM)?.reshape([b, height, width, c])
}

/// Linear projection of each patch plus a learned per-position embedding, all 32-bit.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub projection: Dense,
    pub position: ParamId,
    pub num_patches: usize,
    pub emb_dim: usize,
}

impl PatchEncoder {
    pub fn new(store: &mut ParamStore, name: &str, patch_dim: usize, num_patches: usize, emb_dim: usize) -> Result<Self> {
        let projection = Dense::new(
            store,
            &format!("{name}.projection"),
            patch_dim,
            emb_dim,
            Activation::Linear,
            Precision::Full,
            true,
        )?;
        let value = uniform(POSITION_INIT_LIMIT, [num_patches, emb_dim], &mut store.init_rng())?;
        let position = store.add(Param {
            name: format!("{name}.position"),
            value,
            role: ParamRole::PositionEmbedding,
            quantized: false,
            trainable: true,
            frozen: None,
        });
        store.add_group(format!("{name}.position"), position, None);
        Ok(PatchEncoder {
            projection,
            position,
            num_patches,
            emb_dim,
        })
    }

    pub fn forward(&self, f: &mut Forward, patches: Var) -> Result<Var> {
        let shape = f.tape.shape(patches).to_vec();
        if shape.len() != 3 || shape[1] != self.num_patches {
            return Err(Error::ShapeMismatch {
                op: "patch_encoder",
                lhs: shape,
                rhs: vec![self.num_patches, self.projection.in_features],
            });
        }
        let projected = self.projection.forward(f, patches)?;
        let position = f.param(self.position)?;
        f.tape.add_broadcast(projected, position)
    }
}
