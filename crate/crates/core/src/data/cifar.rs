//! CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes
//! (1024 per channel, row-major).

use std::path::Path;

use super::{Dataset, Samples, Split};
use crate::error::{DmpError, Result};

pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.247, 0.243, 0.261];

const RECORD: usize = 1 + 3 * 32 * 32;
const PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

pub fn normalize(pixel: u8, mean: f64, std: f64) -> f64 {
    (pixel as f64 / 255.0 - mean) / std
}

pub fn denormalize(value: f64, mean: f64, std: f64) -> f64 {
    (value * std + mean) * 255.0
}

fn read_batch(path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    let expected = RECORD * PER_FILE;
    let bytes = std::fs::read(path).map_err(|e| DmpError::Data {
        path: path.to_path_buf(),
        message: format!("cannot read ({e}); expected {expected} bytes"),
    })?;
    if bytes.len() != expected {
        return Err(DmpError::Data {
            path: path.to_path_buf(),
            message: format!("holds {} bytes, expected {expected}", bytes.len()),
        });
    }
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] > 9 {
            return Err(DmpError::Data {
                path: path.to_path_buf(),
                message: format!("label byte {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn load_split(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::with_capacity(files.len() * PER_FILE * (RECORD - 1));
    let mut labels = Vec::with_capacity(files.len() * PER_FILE);
    for f in files {
        read_batch(&dir.join(f), &mut pixels, &mut labels)?;
    }
    Dataset::new(
        split,
        10,
        Samples::Bytes {
            shape: vec![3, 32, 32],
            data: pixels,
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        },
        labels,
    )
}

/// Load the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_split(dir, &TRAIN_FILES, Split::Train)?;
    let test = load_split(dir, &[TEST_FILE], Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BatchInput;

    fn write_archive(dir: &Path, truncate: Option<&str>) {
        for (k, f) in TRAIN_FILES.iter().chain(Some(&TEST_FILE)).enumerate() {
            let mut bytes = vec![0u8; RECORD * PER_FILE];
            for (r, rec) in bytes.chunks_exact_mut(RECORD).enumerate() {
                rec[0] = ((r + k) % 10) as u8;
                rec[1] = 255; // red, pixel (0,0)
                rec[1 + 1024 + 5] = 128; // green, pixel (0,5)
                rec[1 + 2048 + 1023] = 7; // blue, pixel (31,31)
            }
            if truncate == Some(*f) {
                bytes.truncate(bytes.len() - 1);
            }
            std::fs::write(dir.join(f), bytes).unwrap();
        }
    }

    #[test]
    fn decodes_a_known_archive() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), None);
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(train.labels[10_001], 2);
        let b = train.batch(&[0]).unwrap();
        let BatchInput::Dense(x) = b.input else { panic!() };
        let d = x.data();
        // hand-normalized pixels
        assert!((d[0] - (1.0 - 0.4914) / 0.247).abs() < 1e-12);
        assert!((d[1024 + 5] - (128.0 / 255.0 - 0.4822) / 0.243).abs() < 1e-12);
        assert!((d[2048 + 1023] - (7.0 / 255.0 - 0.4465) / 0.261).abs() < 1e-12);
        assert!((d[1] - (0.0 - 0.4914) / 0.247).abs() < 1e-12);
    }

    #[test]
    fn truncated_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), Some("data_batch_3.bin"));
        let err = load_cifar10(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data_batch_3.bin"), "{err}");
        assert!(err.contains(&(RECORD * PER_FILE).to_string()), "{err}");
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data_batch_1.bin"), "{err}");
    }

    #[test]
    fn normalization_round_trips() {
        for p in [0u8, 1, 77, 128, 254, 255] {
            for c in 0..3 {
                let v = normalize(p, CIFAR_MEAN[c], CIFAR_STD[c]);
                assert!((denormalize(v, CIFAR_MEAN[c], CIFAR_STD[c]) - p as f64).abs() < 1e-12);
            }
        }
    }
}
