//! Deterministic synthetic datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Samples, Split};
use crate::error::{DmpError, Result};

/// Class structure (means, templates) is a function of the task shape only,
/// so train and test sets drawn with different seeds share it.
const TASK_SEED: u64 = 0x7a5c;

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(DmpError::InvalidArgument("need at least two classes".into()));
    }
    Ok(())
}

/// Gaussian blobs with unit noise whose class means sit `margin` apart
/// (in units of the noise σ) in every pair.
pub fn synth_classification(n: usize, classes: usize, dim: usize, margin: f64, seed: u64) -> Result<Dataset> {
    check_classes(classes)?;
    if dim < classes {
        return Err(DmpError::InvalidArgument(format!(
            "equidistant means need dim ≥ classes ({dim} < {classes})"
        )));
    }
    // orthogonal means m·e_π(k) are pairwise m·√2 apart
    let mut task = ChaCha8Rng::seed_from_u64(TASK_SEED);
    let mut axes: Vec<usize> = (0..dim).collect();
    axes.shuffle(&mut task);
    let scale = margin / 2f64.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(n, classes, &mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z + if d == axes[l] { scale } else { 0.0 });
        }
    }
    Dataset::new(Split::Train, classes, Samples::Dense { shape: vec![dim], data }, labels)
}

/// Image-shaped blobs: a fixed random template per class, randomly shifted
/// by up to one pixel (circularly), scaled by `margin` and buried in unit
/// Gaussian noise.
pub fn synth_images(n: usize, classes: usize, channels: usize, size: usize, margin: f64, seed: u64) -> Result<Dataset> {
    check_classes(classes)?;
    let plane = size * size;
    let per = channels * plane;
    let mut task = ChaCha8Rng::seed_from_u64(TASK_SEED ^ (classes * 1_000_003 + per) as u64);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let t: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut task)).collect();
            let rms = (t.iter().map(|v| v * v).sum::<f64>() / per as f64).sqrt();
            t.into_iter().map(|v| v / rms).collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(n, classes, &mut rng);
    let mut data = Vec::with_capacity(n * per);
    for &l in &labels {
        let dy = rng.random_range(0..3) + size - 1;
        let dx = rng.random_range(0..3) + size - 1;
        for c in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let src = c * plane + ((y + dy) % size) * size + (x + dx) % size;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(margin * templates[l][src] + z);
                }
            }
        }
    }
    Dataset::new(
        Split::Train,
        classes,
        Samples::Dense {
            shape: vec![channels, size, size],
            data,
        },
        labels,
    )
}

/// Marker tokens of the sequence task.
pub const MARKER_A: usize = 0;
pub const MARKER_B: usize = 1;

/// 1 when marker A outnumbers marker B.
pub fn majority_label(seq: &[usize]) -> usize {
    let a = seq.iter().filter(|&&t| t == MARKER_A).count();
    let b = seq.iter().filter(|&&t| t == MARKER_B).count();
    usize::from(a > b)
}

/// Noise-token sequences with an odd number (1, 3 or 5) of planted markers;
/// the label says which marker is in the majority.
pub fn synth_sequences(n: usize, vocab: usize, len: usize, seed: u64) -> Result<Dataset> {
    if vocab < 4 {
        return Err(DmpError::InvalidArgument(format!(
            "vocabulary must hold at least 4 tokens, got {vocab}"
        )));
    }
    if len == 0 {
        return Err(DmpError::InvalidArgument("sequence length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = balanced_labels(n, 2, &mut rng);
    let mut seqs = Vec::with_capacity(n);
    for &label in &want {
        let mut s: Vec<usize> = (0..len).map(|_| rng.random_range(2..vocab)).collect();
        let max_markers = if len.is_multiple_of(2) { len - 1 } else { len }.min(5);
        let k = 2 * rng.random_range(0..=(max_markers - 1) / 2) + 1;
        let majority = rng.random_range(k / 2 + 1..=k);
        let mut pos: Vec<usize> = (0..len).collect();
        pos.shuffle(&mut rng);
        let (win, lose) = if label == 1 {
            (MARKER_A, MARKER_B)
        } else {
            (MARKER_B, MARKER_A)
        };
        for (j, &p) in pos[..k].iter().enumerate() {
            s[p] = if j < majority { win } else { lose };
        }
        debug_assert_eq!(majority_label(&s), label);
        seqs.push(s);
    }
    Dataset::new(Split::Train, 2, Samples::Sequences(seqs), want)
}

/// First-order Markov chain over tokens `0..states`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(transition: Vec<Vec<f64>>) -> Result<Self> {
        let n = transition.len();
        if n < 2 {
            return Err(DmpError::InvalidArgument("chain needs at least two states".into()));
        }
        for (i, row) in transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(DmpError::InvalidArgument(format!(
                    "row {i} is not a probability distribution"
                )));
            }
        }
        Ok(MarkovChain { transition })
    }

    /// A random chain whose rows concentrate on a few successors.
    pub fn random(states: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..states)
            .map(|_| {
                let w: Vec<f64> = (0..states).map(|_| rng.random::<f64>().powi(4)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.states();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (i, row) in self.transition.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats: `Σ_i π_i · H(P_i·)`.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        self.transition
            .iter()
            .zip(&pi)
            .map(|(row, &p)| p * row.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum::<f64>())
            .sum()
    }

    /// Lowest perplexity any next-token model can reach.
    pub fn optimal_perplexity(&self) -> f64 {
        self.entropy_rate().exp()
    }

    fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// A run of `len` states started from the stationary distribution.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut s = Vec::with_capacity(len);
        if len == 0 {
            return s;
        }
        s.push(Self::draw(&self.stationary(), rng));
        while s.len() < len {
            let last = *s.last().expect("non-empty");
            s.push(Self::draw(&self.transition[last], rng));
        }
        s
    }
}

/// `n` streams of `len + 1` tokens from `chain`.
pub fn synth_lm(chain: &MarkovChain, n: usize, len: usize, seed: u64) -> Result<Dataset> {
    if len == 0 {
        return Err(DmpError::InvalidArgument("stream length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streams = (0..n).map(|_| chain.sample(len + 1, &mut rng)).collect();
    Dataset::new(Split::Train, chain.states(), Samples::Streams(streams), vec![])
}
