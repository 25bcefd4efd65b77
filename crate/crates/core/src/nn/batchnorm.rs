//! Per-channel batch normalization for `[b,c,H,W]` (or `[b,c]`) tensors.

use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{BackwardRule, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ParamKind::Affine, Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), ParamKind::Affine, Tensor::zeros(&[channels]));
        BatchNorm {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalize `x`; in train mode the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = batchnorm_train(tape, x, gamma, beta, self.eps)?;
                let m = self.momentum;
                for c in 0..self.channels() {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.unbiased_var[c];
                }
                Ok(y)
            }
            Mode::Eval => batchnorm_eval(tape, x, gamma, beta, &self.running_mean, &self.running_var, self.eps),
        }
    }
}

pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

/// (batch, channels, spatial) extents.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(DmpError::shape(format!(
            "batchnorm needs [b,c] or [b,c,H,W], got {shape:?}"
        ))),
    }
}

fn check_affine(tape: &Tape, c: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
    if tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] {
        return Err(DmpError::shape(format!(
            "batchnorm over {c} channels got affine parameters {:?} / {:?}",
            tape.value(gamma).shape(),
            tape.value(beta).shape()
        )));
    }
    Ok(())
}

#[inline]
fn idx(b: usize, ch: usize, s: usize, c: usize, hw: usize) -> usize {
    (b * c + ch) * hw + s
}

/// Train-mode normalization with batch statistics (biased variance).
pub fn batchnorm_train(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> Result<(NodeId, BatchStats)> {
    let (nb, c, hw) = layout(tape.value(x).shape())?;
    check_affine(tape, c, gamma, beta)?;
    let n = (nb * hw) as f64;
    let xv = tape.value(x);
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..nb {
            for p in 0..hw {
                s += xv.data()[idx(b, ch, p, c, hw)];
            }
        }
        mean[ch] = s / n;
        let mut v = 0.0;
        for b in 0..nb {
            for p in 0..hw {
                let d = xv.data()[idx(b, ch, p, c, hw)] - mean[ch];
                v += d * d;
            }
        }
        var[ch] = v / n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for b in 0..nb {
        for ch in 0..c {
            for p in 0..hw {
                let i = idx(b, ch, p, c, hw);
                xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    let unbiased_var = var
        .iter()
        .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
        .collect();

    let rule: BackwardRule = Box::new(move |ctx| {
        let g = ctx.upstream.data();
        let gamma = ctx.inputs[1].data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..nb {
            for ch in 0..c {
                for p in 0..hw {
                    let i = idx(b, ch, p, c, hw);
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for ch in 0..c {
                // Σ dxhat = γ·Σg,  Σ dxhat·xhat = γ·Σ g·xhat
                let k = gamma[ch] * inv_std[ch] / n;
                for b in 0..nb {
                    for p in 0..hw {
                        let i = idx(b, ch, p, c, hw);
                        dx[i] = k * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                    }
                }
            }
            Tensor::new(ctx.inputs[0].shape().to_vec(), dx).expect("shape")
        });
        vec![
            dx,
            Some(Tensor::new(vec![c], dgamma).expect("shape")),
            Some(Tensor::new(vec![c], dbeta).expect("shape")),
        ]
    });
    let node = tape.push("batchnorm_train", value, vec![x, gamma, beta], Some(rule));
    Ok((
        node,
        BatchStats {
            mean,
            var,
            unbiased_var,
        },
    ))
}

/// Eval-mode normalization with fixed statistics.
pub fn batchnorm_eval(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<NodeId> {
    let (nb, c, hw) = layout(tape.value(x).shape())?;
    check_affine(tape, c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(DmpError::shape(format!(
            "batchnorm running statistics have {} channels, input has {c}",
            running_mean.len()
        )));
    }
    let mean = running_mean.to_vec();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xv = tape.value(x);
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut out = vec![0.0; xv.len()];
    for b in 0..nb {
        for ch in 0..c {
            for p in 0..hw {
                let i = idx(b, ch, p, c, hw);
                out[i] = gv[ch] * (xv.data()[i] - mean[ch]) * inv_std[ch] + bv[ch];
            }
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    let rule: BackwardRule = Box::new(move |ctx| {
        let (x, gamma) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.upstream.data();
        let mut dx = vec![0.0; g.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..nb {
            for ch in 0..c {
                for p in 0..hw {
                    let i = idx(b, ch, p, c, hw);
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    dx[i] = g[i] * gamma[ch] * inv_std[ch];
                    dgamma[ch] += g[i] * xh;
                    dbeta[ch] += g[i];
                }
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape().to_vec(), dx).expect("shape")),
            Some(Tensor::new(vec![c], dgamma).expect("shape")),
            Some(Tensor::new(vec![c], dbeta).expect("shape")),
        ]
    });
    Ok(tape.push("batchnorm_eval", value, vec![x, gamma, beta], Some(rule)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn channel_moments(t: &Tensor, ch: usize) -> (f64, f64) {
        let (nb, c, hw) = layout(t.shape()).unwrap();
        let vals: Vec<f64> = (0..nb)
            .flat_map(|b| (0..hw).map(move |p| (b, p)))
            .map(|(b, p)| t.data()[idx(b, ch, p, c, hw)])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        // large spread so that eps is negligible at 1e-6
        let x = Tensor::randn(&[4, 3, 5, 5], 30.0, &mut rng).map(|v| v + 7.0);
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let g = tape.input(Tensor::ones(&[3]));
        let b = tape.input(Tensor::zeros(&[3]));
        let (y, _) = batchnorm_train(&mut tape, xn, g, b, DEFAULT_EPS).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(tape.value(y), ch);
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_with_unit_stats_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let g = tape.input(Tensor::ones(&[3]));
        let b = tape.input(Tensor::zeros(&[3]));
        let y = batchnorm_eval(&mut tape, xn, g, b, &[0.0; 3], &[1.0; 3], DEFAULT_EPS).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - e).abs() <= e.abs() * DEFAULT_EPS);
        }
    }

    #[test]
    fn channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[2, 3, 2, 2]));
        let g = tape.input(Tensor::ones(&[4]));
        let b = tape.input(Tensor::zeros(&[4]));
        assert!(matches!(
            batchnorm_train(&mut tape, x, g, b, DEFAULT_EPS),
            Err(DmpError::Shape(_))
        ));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 1, 0.1, DEFAULT_EPS);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&mut tape, &store, x, Mode::Train).unwrap();
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-15);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
        assert!(bn.running_var.iter().all(|&v| v > 0.0));
    }
}
