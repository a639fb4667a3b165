//! Base-N weight packing and the `LBQ1` model file.
//!
//! A weight that can take `n` values is stored as its grid index ("digit")
//! `d ∈ 0..n`. `k` digits share one byte, `byte = Σ dᵢ · nⁱ` with the first
//! weight in the least significant position, where `k` is the largest power
//! with `nᵏ ≤ 256`.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! header   "LBQ1" | version u16 | kind u8 | n_values u16 (0 = 32-bit model) | records u32
//! record   name_len u16 | name | rank u8 | dims u32 × rank | gamma f32
//!          | has_bias u8 | bias f32 × dims[0] | payload_len u32 | payload
//! ```
//!
//! `gamma = 0` marks a raw record whose payload is the tensor as `f32`s.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig, ModelKind};
use crate::nn::Precision;
use crate::quant::{quantize_with, GridSpec, QuantResult};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LBQ1";
pub const FORMAT_VERSION: u16 = 1;

/// Largest `k` with `n_values^k ≤ 256`.
pub fn weights_per_byte(n_values: u16) -> Result<usize> {
    if !(2..=256).contains(&n_values) {
        return Err(Error::invalid(format!("cannot pack {n_values}-valued weights into bytes")));
    }
    let (mut k, mut span) = (0, 1u32);
    while span * n_values as u32 <= 256 {
        span *= n_values as u32;
        k += 1;
    }
    Ok(k)
}

/// Storage saving against 32-bit floats.
pub fn memory_reduction(n_values: u16) -> Result<usize> {
    Ok(4 * weights_per_byte(n_values)?)
}

/// Bytes needed for `count` weights.
pub fn packed_len(count: usize, n_values: u16) -> Result<usize> {
    Ok(count.div_ceil(weights_per_byte(n_values)?))
}

pub fn pack_digits(digits: &[u16], n_values: u16) -> Result<Vec<u8>> {
    let k = weights_per_byte(n_values)?;
    digits
        .chunks(k)
        .map(|group| {
            let mut byte = 0u32;
            for &d in group.iter().rev() {
                if d >= n_values {
                    return Err(Error::invalid(format!("digit {d} out of range for {n_values} values")));
                }
                byte = byte * n_values as u32 + d as u32;
            }
            Ok(byte as u8)
        })
        .collect()
}

pub fn unpack_digits(bytes: &[u8], n_values: u16, count: usize) -> Result<Vec<u16>> {
    let k = weights_per_byte(n_values)?;
    if bytes.len() != count.div_ceil(k) {
        return Err(Error::CorruptPayload(format!(
            "{count} weights need {} bytes, payload has {}",
            count.div_ceil(k),
            bytes.len()
        )));
    }
    let n = n_values as u32;
    let mut out = Vec::with_capacity(count);
    for (i, &b) in bytes.iter().enumerate() {
        let mut rest = b as u32;
        let used = k.min(count - i * k);
        for _ in 0..used {
            out.push((rest % n) as u16);
            rest /= n;
        }
        if rest != 0 {
            return Err(Error::CorruptPayload(format!("byte {i} ({b}) holds digits outside 0..{n_values}")));
        }
    }
    Ok(out)
}

/// Grid-valued weights to packed bytes.
pub fn pack_layer(w_q: &[f32], n_values: u16) -> Result<Vec<u8>> {
    let grid = GridSpec::new(n_values)?;
    let digits = w_q
        .iter()
        .enumerate()
        .map(|(index, &value)| grid.digit_of(value).ok_or(Error::OffGrid { index, value, n_values }))
        .collect::<Result<Vec<_>>>()?;
    pack_digits(&digits, n_values)
}

pub fn unpack_layer(bytes: &[u8], n_values: u16, count: usize) -> Result<Vec<f32>> {
    let grid = GridSpec::new(n_values)?;
    Ok(unpack_digits(bytes, n_values, count)?
        .into_iter()
        .map(|d| grid.value(d))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileHeader {
    pub version: u16,
    pub kind: ModelKind,
    /// `None` for a 32-bit model.
    pub n_values: Option<u16>,
}

/// One weight tensor and its bias as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    /// `0.0` for raw 32-bit records.
    pub gamma: f32,
    pub bias: Option<Vec<f32>>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn is_raw(&self) -> bool {
        self.gamma == 0.0
    }

    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedFile {
    pub header: FileHeader,
    pub records: Vec<Record>,
}

impl PackedFile {
    pub fn from_model(model: &Model) -> Result<Self> {
        let n_values = match model.config().precision() {
            Precision::Full => None,
            Precision::Quantized(spec) => {
                weights_per_byte(spec.n_values)?;
                Some(spec.n_values)
            }
        };
        let store = model.params();
        let mut records = Vec::with_capacity(store.groups().len());
        for group in store.groups() {
            let w = store.get(group.weight);
            let (gamma, payload) = match (w.quantized, n_values) {
                (true, Some(n)) => {
                    let q = match &w.frozen {
                        Some(q) => q.clone(),
                        None => match model.config().precision() {
                            Precision::Quantized(spec) => quantize_with(&w.value, &spec)?,
                            Precision::Full => unreachable!(),
                        },
                    };
                    (q.gamma, pack_layer(q.w_q.data(), n)?)
                }
                _ => (0.0, floats_to_bytes(w.value.data())),
            };
            records.push(Record {
                name: group.name.clone(),
                dims: w.value.shape().to_vec(),
                gamma,
                bias: group.bias.map(|b| store.get(b).value.data().to_vec()),
                payload,
            });
        }
        Ok(PackedFile {
            header: FileHeader {
                version: FORMAT_VERSION,
                kind: model.kind(),
                n_values,
            },
            records,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(self.header.version.to_le_bytes());
        out.push(self.header.kind.tag());
        out.extend(self.header.n_values.unwrap_or(0).to_le_bytes());
        out.extend(u32_of(self.records.len(), "record count")?.to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            out.extend(u16::try_from(name.len()).map_err(|_| Error::invalid("layer name too long"))?.to_le_bytes());
            out.extend(name);
            out.push(u8::try_from(r.dims.len()).map_err(|_| Error::invalid("tensor rank too large"))?);
            for &d in &r.dims {
                out.extend(u32_of(d, "dimension")?.to_le_bytes());
            }
            out.extend(r.gamma.to_le_bytes());
            match &r.bias {
                Some(b) => {
                    out.push(1);
                    out.extend(floats_to_bytes(b));
                }
                None => out.push(0),
            }
            out.extend(u32_of(r.payload.len(), "payload length")?.to_le_bytes());
            out.extend(&r.payload);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = c.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let tag = c.u8("model kind")?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown model kind tag {tag}")))?;
        let n_values = match c.u16("n_values")? {
            0 => None,
            1 => return Err(Error::Format("n_values 1 is not a valid grid".into())),
            n => Some(n),
        };
        let n_records = c.u32("record count")? as usize;
        let mut records = Vec::with_capacity(n_records.min(1024));
        for _ in 0..n_records {
            let name_len = c.u16("name length")? as usize;
            let name = String::from_utf8(c.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
            let rank = c.u8("rank")? as usize;
            let dims = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let gamma = f32::from_le_bytes(c.take(4, "gamma")?.try_into().unwrap());
            if !(gamma.is_finite() && gamma >= 0.0) {
                return Err(Error::Format(format!("layer {name}: invalid scale {gamma}")));
            }
            let bias = match c.u8("bias flag")? {
                0 => None,
                1 => {
                    let len = *dims.first().ok_or_else(|| Error::Format(format!("layer {name}: bias on a scalar")))?;
                    Some(bytes_to_floats(c.take(4 * len, "bias")?))
                }
                f => return Err(Error::Format(format!("layer {name}: bias flag {f}"))),
            };
            let payload_len = c.u32("payload length")? as usize;
            let expected = if gamma == 0.0 {
                4 * count
            } else {
                let n = n_values.ok_or_else(|| Error::Format(format!("layer {name}: quantized record in a 32-bit model")))?;
                packed_len(count, n)?
            };
            if payload_len != expected {
                return Err(Error::CorruptPayload(format!(
                    "layer {name}: payload of {payload_len} bytes, expected {expected}"
                )));
            }
            let payload = c.take(payload_len, "payload")?.to_vec();
            records.push(Record {
                name,
                dims,
                gamma,
                bias,
                payload,
            });
        }
        if c.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(PackedFile {
            header: FileHeader { version, kind, n_values },
            records,
        })
    }

    /// Rebuild an inference-only model holding exactly the stored values.
    pub fn into_model(self) -> Result<Model> {
        let mut config = ModelConfig::new(self.header.kind, self.header.n_values);
        if self.header.kind.is_conv() {
            let k = self
                .records
                .iter()
                .find(|r| r.dims.len() == 4)
                .map(|r| r.dims[2])
                .ok_or_else(|| Error::Format("convolution model without filter records".into()))?;
            config.conv_filter_size = k;
        }
        let mut model = build_model(&config).map_err(|e| Error::Format(format!("cannot rebuild model: {e}")))?;
        let groups = model.params().groups().to_vec();
        if groups.len() != self.records.len() {
            return Err(Error::Format(format!(
                "{} records for a {} with {} layers",
                self.records.len(),
                self.header.kind,
                groups.len()
            )));
        }
        let store = model.params_mut();
        for (group, rec) in groups.iter().zip(self.records) {
            let w = store.get(group.weight);
            if rec.name != group.name || rec.dims != w.value.shape() {
                return Err(Error::Format(format!(
                    "record {} {:?} does not match layer {} {:?}",
                    rec.name,
                    rec.dims,
                    group.name,
                    w.value.shape()
                )));
            }
            if w.quantized == rec.is_raw() {
                return Err(Error::Format(format!("layer {}: unexpected record precision", rec.name)));
            }
            let w = store.get_mut(group.weight);
            if rec.is_raw() {
                w.value = Tensor::new(rec.dims.clone(), bytes_to_floats(&rec.payload))?;
            } else {
                let n = self.header.n_values.expect("checked at decode");
                let w_q = Tensor::new(rec.dims.clone(), unpack_layer(&rec.payload, n, rec.count())?)?;
                let q = QuantResult { w_q, gamma: rec.gamma };
                w.value = q.effective();
                w.frozen = Some(q);
            }
            match (group.bias, rec.bias) {
                (Some(b), Some(values)) => {
                    let p = store.get_mut(b);
                    p.value = Tensor::new(p.value.shape().to_vec(), values)?;
                }
                (None, None) => {}
                _ => return Err(Error::Format(format!("layer {}: bias presence mismatch", group.name))),
            }
        }
        model.set_inference_only();
        Ok(model)
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, PackedFile::from_model(model)?.encode()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    PackedFile::decode(&fs::read(path)?)?.into_model()
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in 32 bits")))
}

fn floats_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|f| f.to_le_bytes()).collect()
}

fn bytes_to_floats(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
