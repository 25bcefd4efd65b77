//! Complete networks: MLP, toy convnet, small ResNet and LSTM models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::gate::{GateParam, Granularity};
use crate::nn::batchnorm::{BatchNorm, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::nn::conv::{conv_out_size, global_avg_pool};
use crate::nn::layers::{concat_rows, ConvUnit, Embedding, GateSettings, Linear};
use crate::nn::lstm::LstmCell;
use crate::nn::residual::ResidualBlock;
use crate::params::{ParamId, ParamStore};
use crate::prune::LayerCost;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mlp,
    ToyConvnet,
    ResnetSmall,
    LstmClassifier,
    LstmLm,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::ToyConvnet => "toy-convnet",
            Arch::ResnetSmall => "resnet-small",
            Arch::LstmClassifier => "lstm-classifier",
            Arch::LstmLm => "lstm-lm",
        }
    }

    /// Gate granularities this architecture can host.
    pub fn supported_granularities(self) -> &'static [Granularity] {
        match self {
            Arch::Mlp => &[Granularity::Weight],
            Arch::ToyConvnet => &[Granularity::Filter],
            Arch::ResnetSmall => &[Granularity::Filter, Granularity::Subnetwork],
            Arch::LstmClassifier | Arch::LstmLm => &[Granularity::Node],
        }
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, Arch::LstmClassifier | Arch::LstmLm)
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `None` builds the plain, ungated network.
    pub gates: Option<GateSettings>,
    /// Output classes, or vocabulary size for the language model.
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub input_dim: usize,
    /// Conv widths (toy convnet), stage widths (ResNet) or hidden sizes (MLP).
    pub widths: Vec<usize>,
    /// Per-unit strides for the toy convnet.
    pub strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl ModelSpec {
    fn base(arch: Arch) -> Self {
        ModelSpec {
            arch,
            gates: None,
            num_classes: 10,
            in_channels: 3,
            image_size: 32,
            input_dim: 0,
            widths: vec![],
            strides: vec![],
            blocks_per_stage: 0,
            vocab: 0,
            embed: 0,
            hidden: 0,
            lstm_layers: 1,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_eps: DEFAULT_EPS,
            init_seed: 0,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            widths: hidden.to_vec(),
            num_classes,
            ..Self::base(Arch::Mlp)
        }
    }

    pub fn toy_convnet(
        in_channels: usize,
        image_size: usize,
        widths: &[usize],
        strides: &[usize],
        num_classes: usize,
    ) -> Self {
        ModelSpec {
            in_channels,
            image_size,
            widths: widths.to_vec(),
            strides: strides.to_vec(),
            num_classes,
            ..Self::base(Arch::ToyConvnet)
        }
    }

    /// ResNet for CIFAR-style inputs: a 3×3 stem at `widths[0]`, then one
    /// stage per width with `blocks_per_stage` basic blocks; every stage
    /// after the first halves the resolution.
    pub fn resnet(
        in_channels: usize,
        image_size: usize,
        widths: &[usize],
        blocks_per_stage: usize,
        num_classes: usize,
    ) -> Self {
        ModelSpec {
            in_channels,
            image_size,
            widths: widths.to_vec(),
            blocks_per_stage,
            num_classes,
            ..Self::base(Arch::ResnetSmall)
        }
    }

    /// ResNet-56 for CIFAR-10: three stages of nine blocks at widths 16/32/64.
    pub fn resnet56() -> Self {
        Self::resnet(3, 32, &[16, 32, 64], 9, 10)
    }

    pub fn lstm_classifier(vocab: usize, embed: usize, hidden: usize, layers: usize, num_classes: usize) -> Self {
        ModelSpec {
            vocab,
            embed,
            hidden,
            lstm_layers: layers,
            num_classes,
            ..Self::base(Arch::LstmClassifier)
        }
    }

    pub fn lstm_lm(vocab: usize, embed: usize, hidden: usize, layers: usize) -> Self {
        ModelSpec {
            vocab,
            embed,
            hidden,
            lstm_layers: layers,
            num_classes: vocab,
            ..Self::base(Arch::LstmLm)
        }
    }

    pub fn with_gates(mut self, gates: GateSettings) -> Self {
        self.gates = Some(gates);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DmpError::InvalidArgument(m));
        if let Some(g) = &self.gates {
            if !self.arch.supported_granularities().contains(&g.granularity) {
                return bad(format!(
                    "{} gates are not supported by {}",
                    g.granularity.as_str(),
                    self.arch.as_str()
                ));
            }
            crate::gate::validate_gate_settings(g.threshold(), g.beta)?;
        }
        if self.num_classes < 2 {
            return bad("need at least two output classes".into());
        }
        match self.arch {
            Arch::Mlp if self.input_dim == 0 => bad("mlp needs input_dim > 0".into()),
            Arch::ToyConvnet if self.widths.is_empty() || self.strides.len() != self.widths.len() => {
                bad("toy convnet needs one stride per width".into())
            }
            Arch::ResnetSmall if self.widths.is_empty() || self.blocks_per_stage == 0 => {
                bad("resnet needs stage widths and blocks_per_stage > 0".into())
            }
            Arch::LstmClassifier | Arch::LstmLm
                if self.vocab == 0 || self.embed == 0 || self.hidden == 0 || !(1..=2).contains(&self.lstm_layers) =>
            {
                bad("lstm needs vocab, embed, hidden > 0 and 1-2 layers".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum Net {
    Mlp {
        layers: Vec<Linear>,
    },
    Conv {
        units: Vec<ConvUnit>,
        head: Linear,
    },
    Residual {
        stem: ConvUnit,
        blocks: Vec<ResidualBlock>,
        head: Linear,
    },
    Lstm {
        embed: Embedding,
        cells: Vec<LstmCell>,
        head: Linear,
    },
}

/// A batch of model inputs.
#[derive(Debug, Clone)]
pub enum BatchInput {
    /// `[b, ...]` dense features or images.
    Dense(Tensor),
    /// `b` token sequences of equal length.
    Tokens(Vec<Vec<usize>>),
}

impl BatchInput {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Dense(t) => t.shape()[0],
            BatchInput::Tokens(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which slice of a weight tensor a gate component owns, for masked ℓ2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLayout {
    /// Component `i` owns slice `[i, ...]`.
    Rows,
    /// One component owns the whole tensor.
    Whole,
    /// One component per element.
    Elementwise,
}

/// A weight tensor under ℓ2 and the gate (index into [`Model::gates`]) that masks it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L2Term {
    pub param: ParamId,
    pub gate: Option<(usize, MaskLayout)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    net: Net,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let gates = spec.gates.as_ref();
        let bn = (spec.bn_momentum, spec.bn_eps);
        let net = match spec.arch {
            Arch::Mlp => {
                let mut layers = Vec::new();
                let mut fan_in = spec.input_dim;
                for (i, &w) in spec.widths.iter().chain(Some(&spec.num_classes)).enumerate() {
                    layers.push(Linear::new(
                        &mut store,
                        &mut rng,
                        &format!("fc{}", i + 1),
                        fan_in,
                        w,
                        gates,
                    )?);
                    fan_in = w;
                }
                Net::Mlp { layers }
            }
            Arch::ToyConvnet => {
                let mut units = Vec::new();
                let mut ch = spec.in_channels;
                for (i, (&w, &s)) in spec.widths.iter().zip(&spec.strides).enumerate() {
                    units.push(ConvUnit::new(
                        &mut store,
                        &mut rng,
                        &format!("conv{}", i + 1),
                        ch,
                        w,
                        3,
                        s,
                        true,
                        gates,
                        bn,
                    )?);
                    ch = w;
                }
                let head = Linear::new(&mut store, &mut rng, "head", ch, spec.num_classes, None)?;
                Net::Conv { units, head }
            }
            Arch::ResnetSmall => {
                let filter_gates = gates.filter(|g| g.granularity == Granularity::Filter);
                let stem = ConvUnit::new(
                    &mut store,
                    &mut rng,
                    "stem",
                    spec.in_channels,
                    spec.widths[0],
                    3,
                    1,
                    true,
                    filter_gates,
                    bn,
                )?;
                let mut blocks = Vec::new();
                let mut ch = spec.widths[0];
                for (s, &w) in spec.widths.iter().enumerate() {
                    for b in 0..spec.blocks_per_stage {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        blocks.push(ResidualBlock::new(
                            &mut store,
                            &mut rng,
                            &format!("stage{}.block{}", s + 1, b + 1),
                            ch,
                            w,
                            stride,
                            gates,
                            bn,
                        )?);
                        ch = w;
                    }
                }
                let head = Linear::new(&mut store, &mut rng, "head", ch, spec.num_classes, None)?;
                Net::Residual { stem, blocks, head }
            }
            Arch::LstmClassifier | Arch::LstmLm => {
                let embed = Embedding::new(&mut store, &mut rng, "embed", spec.vocab, spec.embed);
                let mut cells = Vec::new();
                let mut input = spec.embed;
                for l in 0..spec.lstm_layers {
                    cells.push(LstmCell::new(
                        &mut store,
                        &mut rng,
                        &format!("lstm{}", l + 1),
                        input,
                        spec.hidden,
                        gates,
                    )?);
                    input = spec.hidden;
                }
                let head = Linear::new(&mut store, &mut rng, "head", spec.hidden, spec.num_classes, None)?;
                Net::Lstm { embed, cells, head }
            }
        };
        Ok(Model {
            spec,
            params: store,
            net,
        })
    }

    pub fn is_gated(&self) -> bool {
        self.spec.gates.is_some()
    }

    /// Record the forward pass and return logits `[rows, classes]`. The
    /// language model emits one row per (time step, sequence), time-major.
    pub fn forward(&mut self, tape: &mut Tape, input: &BatchInput, mode: Mode) -> Result<NodeId> {
        let store = &self.params;
        match (&mut self.net, input) {
            (Net::Mlp { layers }, BatchInput::Dense(x)) => {
                let x = flatten_tensor(x)?;
                let mut h = tape.constant(x);
                let last = layers.len() - 1;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(tape, store, h)?;
                    if i < last {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            (Net::Conv { units, head }, BatchInput::Dense(x)) => {
                let mut h = tape.constant(x.clone());
                for u in units.iter_mut() {
                    h = u.forward(tape, store, h, mode)?;
                }
                let pooled = global_avg_pool(tape, h)?;
                head.forward(tape, store, pooled)
            }
            (Net::Residual { stem, blocks, head }, BatchInput::Dense(x)) => {
                let x = tape.constant(x.clone());
                let mut h = stem.forward(tape, store, x, mode)?;
                for b in blocks.iter_mut() {
                    h = b.forward(tape, store, h, mode)?;
                }
                let pooled = global_avg_pool(tape, h)?;
                head.forward(tape, store, pooled)
            }
            (Net::Lstm { embed, cells, head }, BatchInput::Tokens(seqs)) => {
                let lm = self.spec.arch == Arch::LstmLm;
                let batch = seqs.len();
                let steps = seqs.first().map_or(0, |s| s.len());
                if batch == 0 || steps == 0 || seqs.iter().any(|s| s.len() != steps) {
                    return Err(DmpError::shape(
                        "token batch must hold non-empty sequences of equal length",
                    ));
                }
                let hidden = self.spec.hidden;
                let mut state: Vec<(NodeId, NodeId)> = cells
                    .iter()
                    .map(|_| {
                        let h = tape.constant(Tensor::zeros(&[batch, hidden]));
                        let c = tape.constant(Tensor::zeros(&[batch, hidden]));
                        (h, c)
                    })
                    .collect();
                let mut outputs = Vec::new();
                for t in 0..steps {
                    let ids: Vec<usize> = seqs.iter().map(|s| s[t]).collect();
                    let mut x = embed.forward(tape, store, &ids)?;
                    for (cell, st) in cells.iter().zip(state.iter_mut()) {
                        let (h, c) = cell.step(tape, store, x, st.0, st.1)?;
                        *st = (h, c);
                        x = h;
                    }
                    if lm {
                        outputs.push(head.forward(tape, store, x)?);
                    }
                }
                if lm {
                    concat_rows(tape, &outputs)
                } else {
                    let last = state.last().expect("at least one layer").0;
                    head.forward(tape, store, last)
                }
            }
            (_, input) => Err(DmpError::InvalidArgument(format!(
                "{} cannot consume {} input",
                self.spec.arch.as_str(),
                match input {
                    BatchInput::Dense(_) => "dense",
                    BatchInput::Tokens(_) => "token",
                }
            ))),
        }
    }

    /// Every gate, in a fixed order.
    pub fn gates(&self) -> Vec<&GateParam> {
        match &self.net {
            Net::Mlp { layers } => layers.iter().filter_map(|l| l.gate.as_ref()).collect(),
            Net::Conv { units, .. } => units.iter().filter_map(|u| u.gate.as_ref()).collect(),
            Net::Residual { stem, blocks, .. } => {
                let mut out: Vec<&GateParam> = stem.gate.iter().collect();
                for b in blocks {
                    out.extend(b.gate.iter());
                    out.extend(b.conv1.gate.iter());
                    out.extend(b.conv2.gate.iter());
                }
                out
            }
            Net::Lstm { cells, .. } => cells
                .iter()
                .filter_map(|c| c.gates.as_ref())
                .flat_map(|g| g.iter())
                .collect(),
        }
    }

    /// Human-readable owner name per gate, parallel to [`Model::gates`].
    pub fn gate_names(&self) -> Vec<String> {
        let ids: Vec<ParamId> = self.gates().iter().map(|g| g.alpha).collect();
        ids.iter()
            .map(|&id| self.params.name(id).trim_end_matches(".alpha").to_string())
            .collect()
    }

    fn gate_index(&self, alpha: ParamId) -> usize {
        self.gates()
            .iter()
            .position(|g| g.alpha == alpha)
            .expect("gate belongs to this model")
    }

    /// Weight tensors under the masked ℓ2 penalty and their masking gates.
    pub fn l2_terms(&self) -> Vec<L2Term> {
        let plain = |p: ParamId| L2Term { param: p, gate: None };
        let gated = |p: ParamId, g: Option<&GateParam>, layout: MaskLayout| L2Term {
            param: p,
            gate: g.map(|g| (self.gate_index(g.alpha), layout)),
        };
        let mut out = Vec::new();
        match &self.net {
            Net::Mlp { layers } => {
                for l in layers {
                    out.push(gated(l.weight, l.gate.as_ref(), MaskLayout::Elementwise));
                    out.push(plain(l.bias));
                }
            }
            Net::Conv { units, head } => {
                for u in units {
                    out.push(gated(u.weight, u.gate.as_ref(), MaskLayout::Rows));
                }
                out.push(plain(head.weight));
                out.push(plain(head.bias));
            }
            Net::Residual { stem, blocks, head } => {
                out.push(gated(stem.weight, stem.gate.as_ref(), MaskLayout::Rows));
                for b in blocks {
                    for u in [&b.conv1, &b.conv2] {
                        match (&b.gate, &u.gate) {
                            (Some(bg), _) => out.push(gated(u.weight, Some(bg), MaskLayout::Whole)),
                            (None, g) => out.push(gated(u.weight, g.as_ref(), MaskLayout::Rows)),
                        }
                    }
                    if let Some(d) = &b.downsample {
                        out.push(plain(d.weight));
                    }
                }
                out.push(plain(head.weight));
                out.push(plain(head.bias));
            }
            Net::Lstm { cells, head, .. } => {
                for c in cells {
                    for k in 0..4 {
                        let g = c.gates.as_ref().map(|g| &g[k]);
                        out.push(gated(c.weights[k], g, MaskLayout::Rows));
                        out.push(gated(c.biases[k], g, MaskLayout::Rows));
                    }
                }
                out.push(plain(head.weight));
                out.push(plain(head.bias));
            }
        }
        out
    }

    /// Static cost description consumed by the prune manager.
    pub fn layer_costs(&self) -> Vec<LayerCost> {
        let gi = |g: &Option<GateParam>| g.as_ref().map(|g| self.gate_index(g.alpha));
        let mut out = Vec::new();
        let conv_cost = |u: &ConvUnit, size: usize, input_from: Option<usize>, block_gate: Option<usize>| {
            let o = conv_out_size(size, u.kernel, u.stride, u.padding).expect("validated geometry");
            (
                LayerCost::Conv {
                    name: u.name.clone(),
                    filters: u.filters,
                    in_channels: u.in_channels,
                    kernel: u.kernel,
                    out_size: o,
                    out_gate: gi(&u.gate),
                    block_gate,
                    input_from,
                    relu: u.relu,
                },
                o,
            )
        };
        match &self.net {
            Net::Mlp { layers } => {
                for l in layers {
                    out.push(LayerCost::Linear {
                        name: l.name.clone(),
                        outputs: l.outputs,
                        inputs: l.inputs,
                        weight_gate: gi(&l.gate),
                        input_from: None,
                    });
                }
            }
            Net::Conv { units, head } => {
                let mut size = self.spec.image_size;
                for (i, u) in units.iter().enumerate() {
                    let (c, o) = conv_cost(u, size, i.checked_sub(1), None);
                    out.push(c);
                    size = o;
                }
                let last = out.len() - 1;
                out.push(LayerCost::Pool {
                    name: "pool".into(),
                    channels: head.inputs,
                    size,
                    input_from: Some(last),
                });
                out.push(LayerCost::Linear {
                    name: head.name.clone(),
                    outputs: head.outputs,
                    inputs: head.inputs,
                    weight_gate: None,
                    input_from: Some(last),
                });
            }
            Net::Residual { stem, blocks, head } => {
                let (c, mut size) = conv_cost(stem, self.spec.image_size, None, None);
                out.push(c);
                for (bi, b) in blocks.iter().enumerate() {
                    // the stem's dead channels reach only the first block's convs
                    let from_stem = (bi == 0).then_some(0);
                    let bg = gi(&b.gate);
                    let (c1, o) = conv_cost(&b.conv1, size, from_stem, bg);
                    let c1_idx = out.len();
                    out.push(c1);
                    let (c2, _) = conv_cost(&b.conv2, o, Some(c1_idx), bg);
                    out.push(c2);
                    if let Some(d) = &b.downsample {
                        let (cd, _) = conv_cost(d, size, from_stem, None);
                        out.push(cd);
                    }
                    size = o;
                }
                out.push(LayerCost::Pool {
                    name: "pool".into(),
                    channels: head.inputs,
                    size,
                    input_from: None,
                });
                out.push(LayerCost::Linear {
                    name: head.name.clone(),
                    outputs: head.outputs,
                    inputs: head.inputs,
                    weight_gate: None,
                    input_from: None,
                });
            }
            Net::Lstm { embed, cells, head } => {
                out.push(LayerCost::Embedding {
                    name: embed.name.clone(),
                    vocab: embed.vocab,
                    dim: embed.dim,
                });
                for (l, c) in cells.iter().enumerate() {
                    let gates = c
                        .gates
                        .as_ref()
                        .map(|g| [0, 1, 2, 3].map(|k| self.gate_index(g[k].alpha)));
                    out.push(LayerCost::Lstm {
                        name: c.name.clone(),
                        hidden: c.hidden,
                        input: c.input,
                        gates,
                        input_from: (l > 0).then(|| out.len() - 1),
                    });
                }
                let last = out.len() - 1;
                out.push(LayerCost::Linear {
                    name: head.name.clone(),
                    outputs: head.outputs,
                    inputs: head.inputs,
                    weight_gate: None,
                    input_from: Some(last),
                });
            }
        }
        out
    }

    fn batchnorms(&self) -> Vec<(String, &BatchNorm)> {
        fn unit(u: &ConvUnit) -> (String, &BatchNorm) {
            (format!("{}.bn", u.name), &u.bn)
        }
        let mut out = Vec::new();
        match &self.net {
            Net::Conv { units, .. } => out.extend(units.iter().map(unit)),
            Net::Residual { stem, blocks, .. } => {
                out.push(unit(stem));
                for b in blocks {
                    out.push(unit(&b.conv1));
                    out.push(unit(&b.conv2));
                    out.extend(b.downsample.iter().map(unit));
                }
            }
            _ => {}
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics), by name.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        self.batchnorms()
            .into_iter()
            .flat_map(|(name, bn)| {
                [
                    (format!("{name}.running_mean"), bn.running_mean.clone()),
                    (format!("{name}.running_var"), bn.running_var.clone()),
                ]
            })
            .collect()
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let mut units: Vec<&mut ConvUnit> = Vec::new();
        match &mut self.net {
            Net::Conv { units: u, .. } => units.extend(u.iter_mut()),
            Net::Residual { stem, blocks, .. } => {
                units.push(stem);
                for b in blocks {
                    units.push(&mut b.conv1);
                    units.push(&mut b.conv2);
                    units.extend(b.downsample.iter_mut());
                }
            }
            _ => {}
        }
        let slot = units.into_iter().find_map(|u| {
            let base = format!("{}.bn", u.name);
            if name == format!("{base}.running_mean") {
                Some(&mut u.bn.running_mean)
            } else if name == format!("{base}.running_var") {
                Some(&mut u.bn.running_var)
            } else {
                None
            }
        });
        let Some(slot) = slot else {
            return Err(DmpError::Checkpoint(format!("unknown buffer `{name}`")));
        };
        if slot.len() != values.len() {
            return Err(DmpError::Checkpoint(format!(
                "buffer `{name}` holds {} values, checkpoint has {}",
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    /// Indices of masked blocks (subnetwork granularity only).
    pub fn masked_blocks(&self) -> Vec<usize> {
        match &self.net {
            Net::Residual { blocks, .. } => blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.is_masked(&self.params))
                .map(|(i, _)| i)
                .collect(),
            _ => vec![],
        }
    }

    /// Run the stem and blocks up to (not including) `block`, then return the
    /// block's output and its skip path. Eval mode never evaluates a masked
    /// branch; train mode runs it and relies on the gate to zero it (and
    /// updates batch-norm running statistics).
    pub fn probe_block(&mut self, x: &Tensor, block: usize, mode: Mode) -> Result<(Tensor, Tensor)> {
        let store = &self.params;
        let Net::Residual { stem, blocks, .. } = &mut self.net else {
            return Err(DmpError::InvalidArgument("probe_block needs a residual model".into()));
        };
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let mut h = stem.forward(&mut tape, store, x, mode)?;
        for b in blocks.iter_mut().take(block) {
            h = b.forward(&mut tape, store, h, mode)?;
        }
        let blk = blocks
            .get_mut(block)
            .ok_or_else(|| DmpError::InvalidArgument(format!("no block {block}")))?;
        let skip = blk.skip(&mut tape, store, h, mode)?;
        let out = blk.forward(&mut tape, store, h, mode)?;
        Ok((tape.value(out).clone(), tape.value(skip).clone()))
    }
}

fn flatten_tensor(x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    x.reshape(&[b, x.len() / b])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet56_layout() {
        let m = Model::new(ModelSpec::resnet56().with_gates(GateSettings::new(Granularity::Subnetwork))).unwrap();
        assert_eq!(m.gates().len(), 27);
        let f = Model::new(ModelSpec::resnet56().with_gates(GateSettings::new(Granularity::Filter))).unwrap();
        let k: usize = f.gates().iter().map(|g| g.dim).sum();
        assert_eq!(k, 2032);
    }

    #[test]
    fn unsupported_granularity_is_rejected() {
        let spec = ModelSpec::toy_convnet(3, 8, &[4], &[1], 10).with_gates(GateSettings::new(Granularity::Node));
        assert!(Model::new(spec).is_err());
    }

    #[test]
    fn buffers_round_trip() {
        let mut m = Model::new(ModelSpec::toy_convnet(3, 8, &[4, 8], &[1, 1], 10)).unwrap();
        let bufs = m.buffers();
        assert_eq!(bufs.len(), 4);
        m.set_buffer("conv2.bn.running_var", &[2.0; 8]).unwrap();
        assert!(m
            .buffers()
            .iter()
            .any(|(n, v)| n == "conv2.bn.running_var" && v[0] == 2.0));
        assert!(m.set_buffer("nope", &[1.0]).is_err());
    }
}
