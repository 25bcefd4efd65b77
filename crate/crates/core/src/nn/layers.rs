use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::gate::{apply_gate, GateAxis, GateParam, Granularity, DEFAULT_ALPHA_INIT, DEFAULT_BETA};
use crate::nn::batchnorm::{BatchNorm, Mode};
use crate::nn::conv::conv2d;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{BackwardRule, NodeId, Tape};
use crate::tensor::Tensor;

/// How new gates are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSettings {
    pub granularity: Granularity,
    /// `None` picks the granularity's default threshold.
    pub threshold: Option<f64>,
    pub beta: f64,
    pub alpha_init: f64,
}

impl GateSettings {
    pub fn new(granularity: Granularity) -> Self {
        GateSettings {
            granularity,
            threshold: None,
            beta: DEFAULT_BETA,
            alpha_init: DEFAULT_ALPHA_INIT,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or_else(|| self.granularity.default_threshold())
    }

    /// Register a gate whose factors have `shape`.
    pub fn make(&self, store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<GateParam> {
        let alpha = store.add(
            format!("{name}.alpha"),
            ParamKind::Alpha,
            Tensor::full(shape, self.alpha_init),
        );
        let dim = shape.iter().product();
        GateParam::new(alpha, dim, self.threshold(), self.beta, self.granularity)
    }
}

/// Conv → BatchNorm → gate → (ReLU). The gate sits after normalization so
/// the scaling factors are not normalized away.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub name: String,
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub gate: Option<GateParam>,
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        gate: Option<&GateSettings>,
        bn: (f64, f64),
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::randn(&[filters, in_channels, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
        );
        let bn = BatchNorm::new(store, &format!("{name}.bn"), filters, bn.0, bn.1);
        let gate = gate.map(|g| g.make(store, name, &[filters])).transpose()?;
        Ok(ConvUnit {
            name: name.to_string(),
            weight,
            bn,
            gate,
            in_channels,
            filters,
            kernel,
            stride,
            padding: kernel / 2,
            relu,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let xs = tape.value(x).shape();
        if xs.len() != 4 || xs[1] != self.in_channels {
            return Err(DmpError::shape(format!(
                "{}: expected [b,{},H,W] input, got {:?}",
                self.name, self.in_channels, xs
            )));
        }
        let w = tape.param(store, self.weight);
        let y = conv2d(tape, x, w, self.stride, self.padding)?;
        let mut y = self.bn.forward(tape, store, y, mode)?;
        if let Some(gate) = &self.gate {
            let alpha = tape.param(store, gate.alpha);
            y = apply_gate(tape, y, alpha, gate, GateAxis::Axis(1))?;
        }
        if self.relu {
            y = tape.relu(y)?;
        }
        Ok(y)
    }
}

/// Fully connected layer `x·Wᵀ + b`, optionally gated per weight.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub gate: Option<GateParam>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
        gate: Option<&GateSettings>,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::uniform(&[outputs, inputs], bound, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::uniform(&[outputs], bound, rng),
        );
        let gate = gate.map(|g| g.make(store, name, &[outputs, inputs])).transpose()?;
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias,
            gate,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut w = tape.param(store, self.weight);
        if let Some(gate) = &self.gate {
            let alpha = tape.param(store, gate.alpha);
            w = apply_gate(tape, w, alpha, gate, GateAxis::Elementwise)?;
        }
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub name: String,
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.add(
            format!("{name}.table"),
            ParamKind::Embedding,
            Tensor::randn(&[vocab, dim], 1.0, rng),
        );
        Embedding {
            name: name.to_string(),
            table,
            vocab,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        let table = tape.param(store, self.table);
        embedding_lookup(tape, table, ids)
    }
}

/// Gather rows of `table: [V, e]` → `[ids.len(), e]`.
pub fn embedding_lookup(tape: &mut Tape, table: NodeId, ids: &[usize]) -> Result<NodeId> {
    let tv = tape.value(table);
    if tv.rank() != 2 {
        return Err(DmpError::shape(format!(
            "embedding table must be rank 2, got {:?}",
            tv.shape()
        )));
    }
    let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(DmpError::InvalidArgument(format!(
            "token id {bad} out of range for vocabulary of {vocab}"
        )));
    }
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &i in ids {
        data.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
    }
    let value = Tensor::new(vec![ids.len(), dim], data)?;
    let ids = ids.to_vec();
    let rule: BackwardRule = Box::new(move |ctx| {
        let g = ctx.upstream.data();
        let mut gt = vec![0.0; vocab * dim];
        for (r, &i) in ids.iter().enumerate() {
            for k in 0..dim {
                gt[i * dim + k] += g[r * dim + k];
            }
        }
        vec![Some(Tensor::new(vec![vocab, dim], gt).expect("shape"))]
    });
    Ok(tape.push("embedding", value, vec![table], Some(rule)))
}

/// Stack rank-2 tensors with equal column counts along rows.
pub fn concat_rows(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    let Some(&first) = parts.first() else {
        return Err(DmpError::InvalidArgument("concat_rows of nothing".into()));
    };
    let cols = tape.value(first).shape().get(1).copied().unwrap_or(0);
    let mut rows = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for &p in parts {
        let v = tape.value(p);
        if v.rank() != 2 || v.shape()[1] != cols {
            return Err(DmpError::shape(format!(
                "concat_rows: part {:?} does not have {cols} columns",
                v.shape()
            )));
        }
        rows.push(v.shape()[0]);
        data.extend_from_slice(v.data());
    }
    let total: usize = rows.iter().sum();
    let value = Tensor::new(vec![total, cols], data)?;
    let rule: BackwardRule = Box::new(move |ctx| {
        let g = ctx.upstream.data();
        let mut offset = 0;
        rows.iter()
            .map(|&r| {
                let part = g[offset * cols..(offset + r) * cols].to_vec();
                offset += r;
                Some(Tensor::new(vec![r, cols], part).expect("shape"))
            })
            .collect()
    });
    Ok(tape.push("concat_rows", value, parts.to_vec(), Some(rule)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::batchnorm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BN: (f64, f64) = (DEFAULT_MOMENTUM, DEFAULT_EPS);

    fn unit(gated: bool, seed: u64) -> (ParamStore, ConvUnit) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GateSettings::new(Granularity::Filter);
        let u = ConvUnit::new(&mut store, &mut rng, "c", 2, 3, 3, 1, true, gated.then_some(&g), BN).unwrap();
        (store, u)
    }

    fn input(seed: u64) -> Tensor {
        Tensor::randn(&[4, 2, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn run(store: &ParamStore, u: &mut ConvUnit, x: &Tensor, mode: Mode) -> Tensor {
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let y = u.forward(&mut tape, store, xn, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, &mut rng, "fc", 2, 1, None).unwrap();
        *store.get_mut(l.weight) = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        *store.get_mut(l.bias) = Tensor::from_vec(vec![0.5]);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let y = l.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5]);

        let id = Linear::new(&mut store, &mut rng, "id", 3, 3, None).unwrap();
        *store.get_mut(id.weight) = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        *store.get_mut(id.bias) = Tensor::zeros(&[3]);
        let xv = Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0.25, -7.]).unwrap();
        let x = tape.input(xv.clone());
        let y = id.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn unit_gates_at_one_are_invisible() {
        let (gs, mut gated) = unit(true, 3);
        let (ps, mut plain) = unit(false, 3);
        for mode in [Mode::Train, Mode::Eval] {
            let x = input(4);
            assert_eq!(run(&gs, &mut gated, &x, mode), run(&ps, &mut plain, &x, mode));
        }
    }

    #[test]
    fn masked_filter_gives_zero_channel() {
        let (mut store, mut u) = unit(true, 5);
        let alpha = u.gate.as_ref().unwrap().alpha;
        store.get_mut(alpha).data_mut()[1] = 5e-5;
        let y = run(&store, &mut u, &input(6), Mode::Train);
        let plane = 25;
        for b in 0..4 {
            let ch = |c: usize| &y.data()[(b * 3 + c) * plane..(b * 3 + c + 1) * plane];
            assert!(ch(1).iter().all(|&v| v == 0.0));
            assert!(ch(0).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn batchnorm_cancels_weight_scale() {
        // exact only as eps → 0: the residual is O(eps / var)
        let (mut store, mut u) = unit(false, 7);
        u.bn.eps = 1e-10;
        let x = input(8);
        let before = run(&store, &mut u, &x, Mode::Train);
        let w = store.get(u.weight).map(|v| 2.0 * v);
        *store.get_mut(u.weight) = w;
        let after = run(&store, &mut u, &x, Mode::Train);
        let diff = before.zip_map(&after, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn wrong_input_channels() {
        let (store, mut u) = unit(false, 1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 3, 4, 4]));
        assert!(matches!(
            u.forward(&mut tape, &store, x, Mode::Train),
            Err(DmpError::Shape(_))
        ));
    }
}
