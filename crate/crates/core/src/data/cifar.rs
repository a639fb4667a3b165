use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, Split, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::models::{CHANNELS, IMAGE_SIZE, NUM_CLASSES};
use crate::tensor::Tensor;

/// One label byte followed by the red, green and blue 32×32 planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + IMAGE_LEN;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: usize = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Directory holding the batch files: `dir` itself or its `cifar-10-batches-bin` child.
fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// The 50,000-image training split and the 10,000-image test split.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = batch_dir(dir);
    let mut images = Vec::with_capacity(TRAIN_FILES.len() * CIFAR_RECORDS_PER_FILE * IMAGE_LEN);
    let mut labels = Vec::with_capacity(TRAIN_FILES.len() * CIFAR_RECORDS_PER_FILE);
    for name in TRAIN_FILES {
        let path = dir.join(name);
        let bytes = read_full_file(&path)?;
        decode_records(&path, &bytes, &mut images, &mut labels)?;
    }
    let n = labels.len();
    let train = Dataset {
        images: Tensor::new([n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], images)?,
        labels,
        split: Split::Train,
    };
    let test_path = dir.join(TEST_FILE);
    let test = read_cifar_batch(&test_path, Split::Test)?;
    if test.len() != CIFAR_RECORDS_PER_FILE {
        return Err(dataset_err(&test_path, "unexpected record count"));
    }
    Ok((train, test))
}

fn read_full_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| dataset_err(path, e.to_string()))?;
    if bytes.len() != CIFAR_FILE_BYTES {
        return Err(dataset_err(
            path,
            format!("expected {CIFAR_FILE_BYTES} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

/// Read any file of whole 3073-byte records.
pub fn read_cifar_batch(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| dataset_err(path, e.to_string()))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(dataset_err(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records", bytes.len()),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES * IMAGE_LEN);
    let mut labels = Vec::new();
    decode_records(path, &bytes, &mut images, &mut labels)?;
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new([n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], images)?,
        labels,
        split,
    })
}

fn decode_records(path: &Path, bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<u8>) -> Result<()> {
    const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= NUM_CLASSES {
            return Err(dataset_err(path, format!("record {r} has label {label}")));
        }
        labels.push(label);
        let planes = &rec[1..];
        for p in 0..PLANE {
            for c in 0..CHANNELS {
                images.push(planes[c * PLANE + p] as f32 / 255.0);
            }
        }
    }
    Ok(())
}

/// Write `ds` in the CIFAR-10 binary layout; pixels are rounded to the nearest 1/255.
pub fn write_cifar_batch(path: &Path, ds: &Dataset) -> Result<()> {
    const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        let img = ds.image(i);
        for c in 0..CHANNELS {
            for p in 0..PLANE {
                out.push((img[p * CHANNELS + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_stride() {
        assert_eq!(CIFAR_RECORD_BYTES, 3073);
        assert_eq!(CIFAR_FILE_BYTES, 30_730_000);
    }

    #[test]
    fn planes_become_interleaved_channels() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 1024));
        rec.extend((0..1024).map(|i| (i % 256) as u8));
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        decode_records(Path::new("mem"), &rec, &mut images, &mut labels).unwrap();
        assert_eq!(labels, [7]);
        assert_eq!(&images[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(images[3 * 5 + 2], 5.0 / 255.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut rec = vec![10u8];
        rec.extend(vec![0u8; IMAGE_LEN]);
        let err = decode_records(Path::new("mem"), &rec, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }));
    }
}
