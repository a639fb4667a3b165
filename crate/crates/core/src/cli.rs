//! Run configuration and the `lowbit` command-line tool.
//!
//! ```text
//! lowbit train   --config run.json [--data DIR] [--out DIR] [--seed N]
//! lowbit eval    MODEL.lbq [--config run.json] [--data DIR] [--split train|val|test]
//! lowbit pack    --config run.json [--out DIR] [--seed N]
//! lowbit inspect MODEL.lbq
//! ```
//!
//! Exit codes: 0 success, 1 I/O or dataset failure, 2 invalid configuration,
//! 3 training diverged (non-finite loss or weights), 4 malformed model file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{load_cifar10, make_synthetic_split, AugmentConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig, ModelKind};
use crate::packing::{memory_reduction, save_model, weights_per_byte, PackedFile};
use crate::quant::{MeanMode, DEFAULT_BETA};
use crate::train::{evaluate, fit, MetricsWriter, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_MOMENTUM};

pub const DATA_DIR_ENV: &str = "LOWBIT_DATA_DIR";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.lbq";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// Grid size, or `"full"` for 32-bit weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NValues {
    Full,
    Count(u16),
}

impl NValues {
    pub fn as_option(self) -> Option<u16> {
        match self {
            NValues::Full => None,
            NValues::Count(n) => Some(n),
        }
    }
}

impl Serialize for NValues {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NValues::Full => s.serialize_str("full"),
            NValues::Count(n) => s.serialize_u16(*n),
        }
    }
}

impl<'de> Deserialize<'de> for NValues {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u16),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(NValues::Count(n)),
            Raw::Text(s) if s == "full" => Ok(NValues::Full),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "expected an integer or \"full\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// CIFAR-10 binary batches. `path` falls back to `--data` and then `LOWBIT_DATA_DIR`.
    Cifar10 {
        #[serde(default)]
        path: Option<PathBuf>,
        /// Use only the first `train_limit` training images.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        n_per_class: usize,
        #[serde(default = "default_val_per_class")]
        val_per_class: usize,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_val_per_class() -> usize {
    10
}

/// Everything a run needs. Missing optional keys are filled in by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub n_values: NValues,
    #[serde(default = "default_beta")]
    pub beta: f32,
    #[serde(default)]
    pub mean_mode: MeanMode,
    #[serde(default = "default_filter")]
    pub conv_filter_size: usize,
    /// Defaults to 0.001, or 0.01 for the ViT models.
    #[serde(default)]
    pub lr: Option<f32>,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub augment: bool,
    /// Overrides the standard augmentation ranges when present.
    #[serde(default)]
    pub augmentation: Option<AugmentConfig>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub wall_clock_timing: bool,
}

fn default_beta() -> f32 {
    DEFAULT_BETA
}
fn default_filter() -> usize {
    3
}
fn default_momentum() -> f32 {
    DEFAULT_MOMENTUM
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(json_field(&e.to_string()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Materialize every default and check all fields.
    pub fn resolve(mut self) -> Result<Self> {
        self.lr.get_or_insert(self.model.default_lr());
        let augmentation = self.augmentation.get_or_insert_with(AugmentConfig::default);
        augmentation.enabled = self.augment;
        if let DatasetSpec::Synthetic { seed, .. } = &mut self.dataset {
            seed.get_or_insert(self.seed);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if let NValues::Count(n) = self.n_values {
            if n < 2 {
                return Err(Error::config("n_values", format!("must be at least 2 or \"full\", got {n}")));
            }
            weights_per_byte(n).map_err(|e| Error::config("n_values", e.to_string()))?;
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("beta", format!("must be positive, got {}", self.beta)));
        }
        if !matches!(self.conv_filter_size, 3 | 5) {
            return Err(Error::config(
                "conv_filter_size",
                format!("must be 3 or 5, got {}", self.conv_filter_size),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if let Some(a) = &self.augmentation {
            for (field, v) in [
                ("augmentation.h_shift_frac", a.h_shift_frac),
                ("augmentation.v_shift_frac", a.v_shift_frac),
                ("augmentation.zoom_frac", a.zoom_frac),
                ("augmentation.rot_deg", a.rot_deg),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::config(field, format!("must be non-negative, got {v}")));
                }
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                n_per_class,
                val_per_class,
                ..
            } => {
                if *n_per_class == 0 || *val_per_class == 0 {
                    return Err(Error::config("dataset.synthetic", "sample counts must be at least 1"));
                }
            }
            DatasetSpec::Cifar10 {
                train_limit, test_limit, ..
            } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return Err(Error::config("dataset.cifar10", "limits must be at least 1"));
                }
            }
        }
        self.train_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            n_values: self.n_values.as_option(),
            beta: self.beta,
            mean_mode: self.mean_mode,
            conv_filter_size: self.conv_filter_size,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut augment = self.augmentation.unwrap_or_default();
        augment.enabled = self.augment;
        TrainConfig {
            lr: self.lr.unwrap_or(self.model.default_lr()),
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            augment,
            seed: self.seed,
            wall_clock_timing: self.wall_clock_timing,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Field named in a serde error message such as "unknown field `foo`".
fn json_field(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .filter(|f| !f.is_empty())
        .unwrap_or("config")
        .to_string()
}

/// Training and validation splits named by `spec`.
pub fn load_dataset(spec: &DatasetSpec, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Synthetic {
            n_per_class,
            val_per_class,
            seed,
        } => {
            let seed = seed.unwrap_or(0);
            Ok((
                make_synthetic_split(*n_per_class, 10, seed, Split::Train)?,
                make_synthetic_split(*val_per_class, 10, seed, Split::Val)?,
            ))
        }
        DatasetSpec::Cifar10 {
            path,
            train_limit,
            test_limit,
        } => {
            let dir = data_dir
                .map(Path::to_path_buf)
                .or_else(|| path.clone())
                .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| {
                    Error::config("dataset.cifar10.path", format!("no data directory given and {DATA_DIR_ENV} is unset"))
                })?;
            let (train, test) = load_cifar10(&dir)?;
            Ok((
                train.take(train_limit.unwrap_or(usize::MAX)),
                test.take(test_limit.unwrap_or(usize::MAX)),
            ))
        }
    }
}

/// Files written by [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub model: PathBuf,
    pub resolved_config: PathBuf,
}

/// Train per `cfg` (already resolved) and write metrics, model and the resolved config.
pub fn cmd_train(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<TrainOutputs> {
    cfg.validate()?;
    let (train, val) = load_dataset(&cfg.dataset, data_dir)?;
    let mut model = build_model(&cfg.model_config())?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let outputs = TrainOutputs {
        metrics: out.join(METRICS_FILE),
        model: out.join(MODEL_FILE),
        resolved_config: out.join(RESOLVED_CONFIG_FILE),
    };
    fs::write(&outputs.resolved_config, cfg.to_json())?;
    let mut writer = MetricsWriter::create(&outputs.metrics)?;
    fit(&mut model, &train, &val, &cfg.train_config(), |row| {
        eprintln!(
            "epoch {:>4}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            row.epoch, row.train_loss, row.train_acc, row.val_loss, row.val_acc
        );
        writer.append(row)
    })?;
    save_model(&model, &outputs.model)?;
    Ok(outputs)
}

/// Write the freshly initialized model described by `cfg`.
pub fn cmd_pack(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let model = build_model(&cfg.model_config())?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(MODEL_FILE);
    save_model(&model, &path)?;
    Ok(path)
}

/// `(loss, accuracy)` of a packed model on a dataset.
pub fn cmd_eval(model_path: &Path, ds: &Dataset) -> Result<(f64, f64)> {
    let model = read_model(model_path)?;
    evaluate(&model, ds)
}

pub fn eval_line(loss: f64, accuracy: f64) -> String {
    format!("loss={loss} accuracy={accuracy}")
}

fn read_model(path: &Path) -> Result<Model> {
    PackedFile::decode(&fs::read(path)?)?.into_model()
}

/// Per-layer listing and storage summary of a packed file.
pub fn cmd_inspect(model_path: &Path) -> Result<String> {
    let file = PackedFile::decode(&fs::read(model_path)?)?;
    let h = &file.header;
    let mut s = String::new();
    let n_label = h.n_values.map_or("full (32-bit)".to_string(), |n| format!("{n} ({:.2} bits)", (n as f64).log2()));
    let _ = writeln!(s, "model:     {}", h.kind);
    let _ = writeln!(s, "format:    LBQ1 v{}", h.version);
    let _ = writeln!(s, "n_values:  {n_label}");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<28} {:<20} {:>10} {:>8} {:>10}", "layer", "shape", "weights", "bias", "bytes");
    let (mut total, mut q_weights, mut q_bytes) = (0usize, 0usize, 0usize);
    for r in &file.records {
        let bias = r.bias.as_ref().map_or(0, Vec::len);
        let kind = if r.is_raw() { "f32" } else { "packed" };
        let _ = writeln!(
            s,
            "{:<28} {:<20} {:>10} {:>8} {:>10} {kind}",
            r.name,
            format!("{:?}", r.dims),
            r.count(),
            bias,
            r.payload.len()
        );
        total += r.count() + bias;
        if !r.is_raw() {
            q_weights += r.count();
            q_bytes += r.payload.len();
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "total parameters:  {total}");
    if let Some(n) = h.n_values {
        let _ = writeln!(s, "quantized weights: {q_weights} in {q_bytes} bytes");
        let _ = writeln!(
            s,
            "memory reduction:  {}x nominal, {:.2}x measured (quantized weights vs 32-bit)",
            memory_reduction(n)?,
            4.0 * q_weights as f64 / q_bytes.max(1) as f64
        );
    } else {
        let _ = writeln!(s, "memory reduction:  1x (32-bit model)");
    }
    Ok(s)
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Diverged { .. } => 3,
        Error::BadMagic(_)
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_)
        | Error::Format(_)
        | Error::CorruptPayload(_)
        | Error::OffGrid { .. } => 4,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "lowbit", version, about = "Train and pack image classifiers with low-bit weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv, model.lbq and config.resolved.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// CIFAR-10 directory (overrides the config and LOWBIT_DATA_DIR).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print "loss=<v> accuracy=<v>" for a packed model.
    Eval {
        model: PathBuf,
        /// Run config whose dataset to use; CIFAR-10 test split otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalSplit::Val)]
        split: EvalSplit,
    },
    /// Build the configured model and write it, untrained, as model.lbq.
    Pack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Describe the layers and storage of a packed model.
    Inspect { model: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplit {
    Train,
    /// The validation split; for CIFAR-10 this is the test batch.
    Val,
}

fn resolved(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.resolve()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = resolved(&config, out, seed)?;
            let outputs = cmd_train(&cfg, data.as_deref())?;
            println!("{}", outputs.model.display());
        }
        Command::Eval {
            model,
            config,
            data,
            split,
        } => {
            let spec = match config {
                Some(path) => RunConfig::load(&path)?.resolve()?.dataset,
                None => DatasetSpec::Cifar10 {
                    path: None,
                    train_limit: None,
                    test_limit: None,
                },
            };
            let (train, val) = load_dataset(&spec, data.as_deref())?;
            let ds = match split {
                EvalSplit::Train => train,
                EvalSplit::Val => val,
            };
            let (loss, acc) = cmd_eval(&model, &ds)?;
            println!("{}", eval_line(loss, acc));
        }
        Command::Pack { config, out, seed } => {
            let cfg = resolved(&config, out, seed)?;
            println!("{}", cmd_pack(&cfg)?.display());
        }
        Command::Inspect { model } => print!("{}", cmd_inspect(&model)?),
    }
    Ok(())
}

/// Parse `args` (including the program name), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
