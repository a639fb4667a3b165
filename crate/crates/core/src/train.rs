//! Loss, SGD with momentum, the epoch loop and per-epoch metrics.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::{Forward, ParamId, ParamStore};
use crate::tensor::{Prng, Purpose, Tape, Tensor};

pub const DEFAULT_MOMENTUM: f32 = 0.92;
pub const DEFAULT_BATCH_SIZE: usize = 256;
/// Guard inside `ln(p + eps)` of the cross-entropy.
pub const CE_EPS: f32 = 1e-9;
/// Rows per inference pass in [`evaluate`].
const EVAL_CHUNK: usize = 100;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,epoch_time_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Record measured epoch durations; when off the column is written as 0 so
    /// that reruns produce byte-identical metrics.
    pub wall_clock_timing: bool,
}

impl TrainConfig {
    pub fn new(lr: f32, epochs: usize) -> Self {
        TrainConfig {
            lr,
            momentum: DEFAULT_MOMENTUM,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs,
            augment: AugmentConfig::default(),
            seed: 0,
            wall_clock_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Mean over rows of `-Σ y · ln(p + eps)` for probability rows `pred`.
pub fn cross_entropy(pred: &Tensor, target: &Tensor) -> Result<f32> {
    if pred.shape() != target.shape() || pred.rank() != 2 || pred.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -(y as f64) * ((p + CE_EPS) as f64).ln())
        .sum();
    Ok((total / pred.shape()[0] as f64) as f32)
}

/// One heavy-ball update: `v ← μ v + g`, `w ← w − lr · v`.
pub fn sgd_momentum_step(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, momentum: f32) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_momentum_step",
            lhs: vec![w.len()],
            rhs: vec![g.len(), v.len()],
        });
    }
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers, one per trainable parameter, created on first use.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    velocity: Vec<Option<Vec<f32>>>,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f32]> {
        self.velocity.get(id.index())?.as_deref()
    }

    /// Apply `grads` to the 32-bit masters in `store`. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Tensor)], lr: f32, momentum: f32) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &(id, g) in grads {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_momentum_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            sgd_momentum_step(p.value.data_mut(), g.data(), v, lr, momentum)?;
            if !p.value.is_finite() {
                return Err(Error::NonFinite { op: "sgd_momentum_step" });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub epoch_time_s: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.epoch_time_s
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Appends one CSV line per epoch as training progresses.
pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.csv_line())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Mean loss and accuracy over `ds` with inference-mode forwards.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for b in batches(ds, EVAL_CHUNK, Prng::new(0), 0, false)? {
        let probs = model.predict(&b.x)?;
        loss += cross_entropy(&probs, &b.y)? as f64 * b.labels.len() as f64;
        correct += count_correct(&probs, &b.labels);
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

fn count_correct(probs: &Tensor, labels: &[u8]) -> usize {
    probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count()
}

/// One pass over `train` followed by evaluation on `val`. `epoch` counts from 1.
pub fn train_epoch(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    opt: &mut OptState,
    epoch: usize,
) -> Result<MetricsRow> {
    if model.inference_only() {
        return Err(Error::InferenceOnly);
    }
    cfg.validate()?;
    let start = Instant::now();
    let prng = Prng::new(cfg.seed);
    let diverged = |batch: usize, e: Error| Error::Diverged {
        epoch,
        batch,
        source: Box::new(e),
    };
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let it = batches(train, cfg.batch_size, prng, epoch as u64, true)?.with_augment(cfg.augment);
    for (i, b) in it.enumerate() {
        let mut tape = Tape::new();
        let dropout_rng = prng.substream(Purpose::Dropout, epoch as u64, i as u64);
        let (loss, probs, bindings) = {
            let mut f = Forward::training(&mut tape, model.params(), dropout_rng);
            let step = (|| {
                let x = f.tape.constant(b.x.clone())?;
                let probs = model.forward(&mut f, x)?;
                let loss = f.tape.cross_entropy(probs, &b.y, CE_EPS)?;
                Ok::<_, Error>((loss, probs))
            })();
            let (loss, probs) = step.map_err(|e| diverged(i, e))?;
            (loss, probs, f.bindings())
        };
        loss_sum += tape.value(loss).data()[0] as f64 * b.labels.len() as f64;
        correct += count_correct(tape.value(probs), &b.labels);
        tape.backward(loss).map_err(|e| diverged(i, e))?;
        let grads: Vec<(ParamId, &Tensor)> = bindings
            .iter()
            .filter_map(|&(id, v)| tape.grad(v).map(|g| (id, g)))
            .collect();
        opt.step(model.params_mut(), &grads, cfg.lr, cfg.momentum)
            .map_err(|e| diverged(i, e))?;
    }
    let (val_loss, val_acc) = evaluate(model, val)?;
    Ok(MetricsRow {
        epoch,
        train_loss: loss_sum / train.len() as f64,
        train_acc: correct as f64 / train.len() as f64,
        val_loss,
        val_acc,
        epoch_time_s: if cfg.wall_clock_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

/// `cfg.epochs` epochs; `on_epoch` sees each row as soon as it is produced.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    let mut opt = OptState::new();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let row = train_epoch(model, train, val, cfg, &mut opt, epoch)?;
        on_epoch(&row)?;
        rows.push(row);
    }
    Ok(rows)
}
