//! The six classifier architectures and their parameter inventory.
//!
//! Every model maps a `[batch, 32, 32, 3]` image tensor to `[batch, 10]` class
//! probabilities. Connection weights of dense, convolution and attention
//! layers go through the quantizer; biases, layer norms, the patch
//! projection and position embeddings stay 32-bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    extract_patches, max_pool2d, Activation, Attention, Conv2d, Dense, Forward, LayerNorm, ParamRole, ParamStore,
    PatchEncoder, Precision,
};
use crate::quant::{MeanMode, QuantSpec, DEFAULT_BETA};
use crate::tensor::{Prng, Tape, Tensor, Var};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;

pub const PATCH_SIZE: usize = 4;
pub const NUM_PATCHES: usize = (IMAGE_SIZE / PATCH_SIZE) * (IMAGE_SIZE / PATCH_SIZE);
pub const EMB_DIM: usize = 64;
pub const NUM_HEADS: usize = 4;
pub const TRANSFORMER_UNITS: [usize; 2] = [EMB_DIM * 2, EMB_DIM];
pub const BLOCK_DROPOUT: f32 = 0.1;
pub const HEAD_DROPOUT: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "FCNN1")]
    Fcnn1,
    #[serde(rename = "FCNN2")]
    Fcnn2,
    #[serde(rename = "CVNN1")]
    Cvnn1,
    #[serde(rename = "CVNN2")]
    Cvnn2,
    #[serde(rename = "VIT1")]
    Vit1,
    #[serde(rename = "VIT2")]
    Vit2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Fcnn1,
        ModelKind::Fcnn2,
        ModelKind::Cvnn1,
        ModelKind::Cvnn2,
        ModelKind::Vit1,
        ModelKind::Vit2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fcnn1 => "FCNN1",
            ModelKind::Fcnn2 => "FCNN2",
            ModelKind::Cvnn1 => "CVNN1",
            ModelKind::Cvnn2 => "CVNN2",
            ModelKind::Vit1 => "VIT1",
            ModelKind::Vit2 => "VIT2",
        }
    }

    /// One-byte tag used in model files.
    pub fn tag(self) -> u8 {
        ModelKind::ALL.iter().position(|&k| k == self).unwrap() as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        ModelKind::ALL.get((tag as usize).checked_sub(1)?).copied()
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ModelKind::Cvnn1 | ModelKind::Cvnn2)
    }

    pub fn is_vit(self) -> bool {
        matches!(self, ModelKind::Vit1 | ModelKind::Vit2)
    }

    /// Fixed learning rate used for this family.
    pub fn default_lr(self) -> f32 {
        if self.is_vit() {
            0.01
        } else {
            0.001
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Grid size for quantized layers; `None` builds the 32-bit baseline.
    pub n_values: Option<u16>,
    pub beta: f32,
    pub mean_mode: MeanMode,
    /// Convolution filter size, 3 or 5. Ignored outside the CVNN family.
    pub conv_filter_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, n_values: Option<u16>) -> Self {
        ModelConfig {
            kind,
            n_values,
            beta: DEFAULT_BETA,
            mean_mode: MeanMode::Abs,
            conv_filter_size: 3,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn precision(&self) -> Precision {
        match self.n_values {
            None => Precision::Full,
            Some(n) => Precision::Quantized(QuantSpec {
                n_values: n,
                beta: self.beta,
                mean_mode: self.mean_mode,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Precision::Quantized(spec) = self.precision() {
            spec.validate()?;
        }
        if self.kind.is_conv() && !matches!(self.conv_filter_size, 3 | 5) {
            return Err(Error::invalid(format!(
                "conv_filter_size must be 3 or 5, got {}",
                self.conv_filter_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvStage {
    convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attention: Attention,
    norm2: LayerNorm,
    mlp: [Dense; 2],
}

#[derive(Clone, Debug)]
enum Body {
    Mlp {
        layers: Vec<Dense>,
    },
    Conv {
        stages: Vec<ConvStage>,
        head: Vec<Dense>,
    },
    Vit {
        encoder: PatchEncoder,
        blocks: Vec<Block>,
        norm: LayerNorm,
        head: Vec<Dense>,
        classifier: Dense,
    },
}

/// One row of the parameter inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InventoryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub quantized: bool,
    pub is_bias: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Elements that go through the quantizer.
    pub quantized: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    body: Body,
    inference_only: bool,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::seeded(Prng::new(config.seed));
    let p = config.precision();
    let s = &mut store;
    let flat = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
    let body = match config.kind {
        ModelKind::Fcnn1 => Body::Mlp {
            layers: dense_stack(s, "fc", flat, &[512, 256, 128], Activation::Relu, p)?,
        },
        ModelKind::Fcnn2 => Body::Mlp {
            layers: dense_stack(s, "fc", flat, &[1024, 512, 256, 128], Activation::Relu, p)?,
        },
        ModelKind::Cvnn1 => conv_body(s, &[&[64], &[128], &[256]], 128, config.conv_filter_size, p)?,
        ModelKind::Cvnn2 => conv_body(s, &[&[128, 128], &[256, 256], &[512, 512]], 512, config.conv_filter_size, p)?,
        ModelKind::Vit1 => vit_body(s, 2, [1024, 512], p)?,
        ModelKind::Vit2 => vit_body(s, 4, [2048, 1024], p)?,
    };
    Ok(Model {
        config: config.clone(),
        params: store,
        body,
        inference_only: false,
    })
}

/// Hidden layers with `activation`, then the 10-way softmax output layer.
fn dense_stack(
    s: &mut ParamStore,
    prefix: &str,
    inputs: usize,
    hidden: &[usize],
    activation: Activation,
    p: Precision,
) -> Result<Vec<Dense>> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = inputs;
    for (i, &units) in hidden.iter().enumerate() {
        layers.push(Dense::new(s, &format!("{prefix}{}", i + 1), width, units, activation, p, true)?);
        width = units;
    }
    layers.push(Dense::new(s, "output", width, NUM_CLASSES, Activation::Softmax, p, true)?);
    Ok(layers)
}

fn conv_body(s: &mut ParamStore, stages: &[&[usize]], hidden: usize, k: usize, p: Precision) -> Result<Body> {
    let mut in_ch = CHANNELS;
    let mut built = Vec::new();
    for (i, widths) in stages.iter().enumerate() {
        let mut convs = Vec::new();
        for (j, &out) in widths.iter().enumerate() {
            let name = format!("conv{}_{}", i + 1, j + 1);
            convs.push(Conv2d::new(s, &name, in_ch, out, k, Activation::Relu, p)?);
            in_ch = out;
        }
        built.push(ConvStage { convs });
    }
    let side = IMAGE_SIZE >> stages.len();
    let head = dense_stack(s, "fc", side * side * in_ch, &[hidden], Activation::Relu, p)?;
    Ok(Body::Conv { stages: built, head })
}

fn vit_body(s: &mut ParamStore, layers: usize, mlp_head: [usize; 2], p: Precision) -> Result<Body> {
    let patch_dim = PATCH_SIZE * PATCH_SIZE * CHANNELS;
    let encoder = PatchEncoder::new(s, "encoder", patch_dim, NUM_PATCHES, EMB_DIM)?;
    let mut blocks = Vec::with_capacity(layers);
    for i in 1..=layers {
        let name = format!("block{i}");
        let norm1 = LayerNorm::new(s, &format!("{name}.norm1"), EMB_DIM);
        let attention = Attention::new(s, &format!("{name}.attention"), EMB_DIM, NUM_HEADS, BLOCK_DROPOUT, p)?;
        let norm2 = LayerNorm::new(s, &format!("{name}.norm2"), EMB_DIM);
        let [u0, u1] = TRANSFORMER_UNITS;
        let mlp = [
            Dense::new(s, &format!("{name}.mlp1"), EMB_DIM, u0, Activation::Gelu, p, true)?,
            Dense::new(s, &format!("{name}.mlp2"), u0, u1, Activation::Gelu, p, true)?,
        ];
        blocks.push(Block {
            norm1,
            attention,
            norm2,
            mlp,
        });
    }
    let norm = LayerNorm::new(s, "norm", EMB_DIM);
    let mut width = NUM_PATCHES * EMB_DIM;
    let mut head = Vec::new();
    for (i, units) in mlp_head.into_iter().enumerate() {
        head.push(Dense::new(s, &format!("head{}", i + 1), width, units, Activation::Gelu, p, true)?);
        width = units;
    }
    let classifier = Dense::new(s, "output", width, NUM_CLASSES, Activation::Softmax, p, true)?;
    Ok(Body::Vit {
        encoder,
        blocks,
        norm,
        head,
        classifier,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Set for models restored from a packed file: they hold only `(W_q, γ)`
    /// and cannot be trained further.
    pub fn inference_only(&self) -> bool {
        self.inference_only
    }

    pub(crate) fn set_inference_only(&mut self) {
        self.inference_only = true;
        for (_, p) in self.params.iter_mut() {
            p.trainable = false;
        }
    }

    /// Class probabilities `[batch, 10]` for `x` of shape `[batch, 32, 32, 3]`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x);
        if shape.len() != 4 || shape[1..] != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: shape.to_vec(),
                rhs: vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS],
            });
        }
        match &self.body {
            Body::Mlp { layers } => {
                let h = f.tape.flatten(x)?;
                run_dense(f, layers, h)
            }
            Body::Conv { stages, head } => {
                let mut h = x;
                for stage in stages {
                    for conv in &stage.convs {
                        h = conv.forward(f, h)?;
                    }
                    h = max_pool2d(f.tape, h, 2, 2)?;
                }
                let h = f.tape.flatten(h)?;
                run_dense(f, head, h)
            }
            Body::Vit {
                encoder,
                blocks,
                norm,
                head,
                classifier,
            } => {
                let patches = extract_patches(f.tape, x, PATCH_SIZE)?;
                let mut encoded = encoder.forward(f, patches)?;
                for block in blocks {
                    let x1 = block.norm1.forward(f, encoded)?;
                    let attended = block.attention.forward(f, x1)?.output;
                    let x2 = f.tape.add(attended, encoded)?;
                    let mut x3 = block.norm2.forward(f, x2)?;
                    for layer in &block.mlp {
                        x3 = layer.forward(f, x3)?;
                        x3 = f.dropout(x3, BLOCK_DROPOUT)?;
                    }
                    encoded = f.tape.add(x3, x2)?;
                }
                let r = norm.forward(f, encoded)?;
                let r = f.tape.flatten(r)?;
                let mut h = f.dropout(r, HEAD_DROPOUT)?;
                for layer in head {
                    h = layer.forward(f, h)?;
                    h = f.dropout(h, HEAD_DROPOUT)?;
                }
                classifier.forward(f, h)
            }
        }
    }

    /// Inference-mode probabilities for a batch of images.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut f = Forward::inference(&mut tape, &self.params);
        let xv = f.tape.constant(x.clone())?;
        let y = self.forward(&mut f, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn inventory(&self) -> Vec<InventoryEntry> {
        self.params
            .iter()
            .map(|(_, p)| InventoryEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                count: p.value.len(),
                quantized: p.quantized,
                is_bias: p.role == ParamRole::Bias,
            })
            .collect()
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount {
            total: 0,
            quantized: 0,
            bias: 0,
        };
        for e in self.inventory() {
            c.total += e.count;
            if e.quantized {
                c.quantized += e.count;
            }
            if e.is_bias {
                c.bias += e.count;
            }
        }
        c
    }
}

fn run_dense(f: &mut Forward, layers: &[Dense], mut h: Var) -> Result<Var> {
    for layer in layers {
        h = layer.forward(f, h)?;
    }
    Ok(h)
}

/// [`Model::predict`] as a free function.
pub fn model_forward(model: &Model, x: &Tensor) -> Result<Tensor> {
    model.predict(x)
}
