//! Datasets: the CIFAR-10 binary loader, augmentation and synthetic
//! generators used for desk-scale runs.

pub mod augment;
pub mod cifar;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::model::BatchInput;
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, Crop};
pub use cifar::{load_cifar10, CIFAR_MEAN, CIFAR_STD};
pub use synth::{synth_classification, synth_images, synth_lm, synth_sequences, MarkovChain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    /// Real-valued samples of a fixed shape, stored back to back.
    Dense { shape: Vec<usize>, data: Vec<f64> },
    /// 8-bit images normalized per channel when batched.
    Bytes {
        shape: Vec<usize>,
        data: Vec<u8>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    /// Token sequences, each with one label.
    Sequences(Vec<Vec<usize>>),
    /// Token streams of length `T + 1`; the model reads the first `T`
    /// tokens and predicts the last `T`.
    Streams(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    /// Classes, or vocabulary size for streams.
    pub num_classes: usize,
    pub samples: Samples,
    /// One label per sample; empty for streams.
    pub labels: Vec<usize>,
}

/// Inputs and flattened targets for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: BatchInput,
    /// Row-aligned with the model's logits (time-major for streams).
    pub targets: Vec<usize>,
}

impl Dataset {
    pub fn new(split: Split, num_classes: usize, samples: Samples, labels: Vec<usize>) -> Result<Self> {
        let d = Dataset {
            split,
            num_classes,
            samples,
            labels,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DmpError::InvalidArgument(m));
        let n = self.len();
        match &self.samples {
            Samples::Streams(s) => {
                if !self.labels.is_empty() {
                    return bad("token streams carry no labels".into());
                }
                if s.iter()
                    .any(|t| t.len() < 2 || t.iter().any(|&v| v >= self.num_classes))
                {
                    return bad("streams need ≥ 2 tokens, all inside the vocabulary".into());
                }
            }
            _ => {
                if self.labels.len() != n {
                    return bad(format!("{n} samples but {} labels", self.labels.len()));
                }
                if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
                    return bad(format!("label {l} outside [0, {})", self.num_classes));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Dense { shape, data } => data.len() / shape.iter().product::<usize>(),
            Samples::Bytes { shape, data, .. } => data.len() / shape.iter().product::<usize>(),
            Samples::Sequences(s) | Samples::Streams(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_stream(&self) -> bool {
        matches!(self.samples, Samples::Streams(_))
    }

    /// Per-sample shape of dense or image samples.
    pub fn sample_shape(&self) -> Option<&[usize]> {
        match &self.samples {
            Samples::Dense { shape, .. } | Samples::Bytes { shape, .. } => Some(shape),
            _ => None,
        }
    }

    /// Normalized value of a zero pixel per channel, used as padding.
    pub fn pad_values(&self) -> Option<Vec<f64>> {
        match &self.samples {
            Samples::Bytes { mean, std, .. } => Some(mean.iter().zip(std).map(|(m, s)| -m / s).collect()),
            Samples::Dense { shape, .. } if shape.len() == 3 => Some(vec![0.0; shape[0]]),
            _ => None,
        }
    }

    /// Assemble the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(DmpError::InvalidArgument("empty batch".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DmpError::InvalidArgument(format!(
                "sample {i} out of range ({})",
                self.len()
            )));
        }
        let labels = || indices.iter().map(|&i| self.labels[i]).collect::<Vec<_>>();
        match &self.samples {
            Samples::Dense { shape, data } => {
                let per: usize = shape.iter().product();
                let mut out = Vec::with_capacity(per * indices.len());
                for &i in indices {
                    out.extend_from_slice(&data[i * per..(i + 1) * per]);
                }
                let mut full = vec![indices.len()];
                full.extend(shape);
                Ok(Batch {
                    input: BatchInput::Dense(Tensor::new(full, out)?),
                    targets: labels(),
                })
            }
            Samples::Bytes { shape, data, mean, std } => {
                let per: usize = shape.iter().product();
                let plane = per / shape[0];
                let mut out = Vec::with_capacity(per * indices.len());
                for &i in indices {
                    for (j, &p) in data[i * per..(i + 1) * per].iter().enumerate() {
                        let c = j / plane;
                        out.push(cifar::normalize(p, mean[c], std[c]));
                    }
                }
                let mut full = vec![indices.len()];
                full.extend(shape);
                Ok(Batch {
                    input: BatchInput::Dense(Tensor::new(full, out)?),
                    targets: labels(),
                })
            }
            Samples::Sequences(seqs) => Ok(Batch {
                input: BatchInput::Tokens(indices.iter().map(|&i| seqs[i].clone()).collect()),
                targets: labels(),
            }),
            Samples::Streams(streams) => {
                let picked: Vec<&Vec<usize>> = indices.iter().map(|&i| &streams[i]).collect();
                let t = picked[0].len() - 1;
                if picked.iter().any(|s| s.len() != t + 1) {
                    return Err(DmpError::shape("streams in a batch must share a length"));
                }
                let mut targets = Vec::with_capacity(t * picked.len());
                for step in 1..=t {
                    targets.extend(picked.iter().map(|s| s[step]));
                }
                Ok(Batch {
                    input: BatchInput::Tokens(picked.iter().map(|s| s[..t].to_vec()).collect()),
                    targets,
                })
            }
        }
    }

    /// Line-oriented text form of token data: `label<TAB>tokens` for
    /// sequences, bare tokens for streams.
    pub fn to_lines(&self) -> Result<String> {
        let join = |s: &[usize]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        match &self.samples {
            Samples::Sequences(seqs) => Ok(seqs
                .iter()
                .zip(&self.labels)
                .map(|(s, l)| format!("{l}\t{}\n", join(s)))
                .collect()),
            Samples::Streams(streams) => Ok(streams.iter().map(|s| format!("{}\n", join(s))).collect()),
            _ => Err(DmpError::InvalidArgument(
                "only token datasets have a line format".into(),
            )),
        }
    }

    pub fn from_lines(text: &str, split: Split, num_classes: usize, streams: bool) -> Result<Self> {
        let parse = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| DmpError::InvalidArgument(format!("bad token `{t}`")))
                })
                .collect()
        };
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if streams {
                seqs.push(parse(line)?);
            } else {
                let (l, rest) = line
                    .split_once('\t')
                    .ok_or_else(|| DmpError::InvalidArgument(format!("missing label in `{line}`")))?;
                labels.push(
                    l.trim()
                        .parse()
                        .map_err(|_| DmpError::InvalidArgument(format!("bad label `{l}`")))?,
                );
                seqs.push(parse(rest)?);
            }
        }
        let samples = if streams {
            Samples::Streams(seqs)
        } else {
            Samples::Sequences(seqs)
        };
        Dataset::new(split, num_classes, samples, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_batches_are_time_major() {
        let d = Dataset::new(
            Split::Train,
            5,
            Samples::Streams(vec![vec![0, 1, 2], vec![3, 4, 0]]),
            vec![],
        )
        .unwrap();
        let b = d.batch(&[0, 1]).unwrap();
        assert_eq!(b.targets, vec![1, 4, 2, 0]);
        match b.input {
            BatchInput::Tokens(t) => assert_eq!(t, vec![vec![0, 1], vec![3, 4]]),
            _ => panic!("expected tokens"),
        }
    }

    #[test]
    fn labels_are_range_checked() {
        let s = Samples::Dense {
            shape: vec![2],
            data: vec![0.0; 4],
        };
        assert!(Dataset::new(Split::Train, 2, s, vec![0, 2]).is_err());
    }

    #[test]
    fn token_lines_round_trip() {
        let d = synth_sequences(20, 6, 8, 3).unwrap();
        let back = Dataset::from_lines(&d.to_lines().unwrap(), Split::Train, 2, false).unwrap();
        assert_eq!(back, d);
        let chain = MarkovChain::new(vec![vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        let lm = synth_lm(&chain, 5, 10, 1).unwrap();
        let back = Dataset::from_lines(&lm.to_lines().unwrap(), Split::Train, 2, true).unwrap();
        assert_eq!(back, lm);
    }
}
