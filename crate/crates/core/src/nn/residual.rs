use rand::Rng;

use crate::error::{DmpError, Result};
use crate::gate::{apply_gate, GateAxis, GateParam, Granularity};
use crate::nn::batchnorm::Mode;
use crate::nn::layers::{ConvUnit, GateSettings};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};

/// Basic residual block: `gate·branch(x) + skip(x)` where the branch is two
/// 3×3 conv units. A masked block collapses to its skip path.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub name: String,
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
    /// 1×1 projection used when the block changes resolution or width.
    /// Never gated: removing it would break the graph.
    pub downsample: Option<ConvUnit>,
    pub gate: Option<GateParam>,
}

impl ResidualBlock {
    /// `gates` applies to filters or to the whole block depending on its granularity.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        gates: Option<&GateSettings>,
        bn: (f64, f64),
    ) -> Result<Self> {
        let filter_gates = gates.filter(|g| g.granularity == Granularity::Filter);
        let block_gate = gates.filter(|g| g.granularity == Granularity::Subnetwork);
        if let Some(g) = gates {
            if !matches!(g.granularity, Granularity::Filter | Granularity::Subnetwork) {
                return Err(DmpError::InvalidArgument(format!(
                    "residual blocks support filter or subnetwork gates, not {}",
                    g.granularity.as_str()
                )));
            }
        }
        let conv1 = ConvUnit::new(
            store,
            rng,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            stride,
            true,
            filter_gates,
            bn,
        )?;
        let conv2 = ConvUnit::new(
            store,
            rng,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            1,
            false,
            filter_gates,
            bn,
        )?;
        let downsample = if stride != 1 || in_channels != out_channels {
            Some(ConvUnit::new(
                store,
                rng,
                &format!("{name}.downsample"),
                in_channels,
                out_channels,
                1,
                stride,
                false,
                None,
                bn,
            )?)
        } else {
            None
        };
        let gate = block_gate.map(|g| g.make(store, name, &[1])).transpose()?;
        Ok(ResidualBlock {
            name: name.to_string(),
            conv1,
            conv2,
            downsample,
            gate,
        })
    }

    pub fn is_masked(&self, store: &ParamStore) -> bool {
        self.gate
            .as_ref()
            .is_some_and(|g| crate::gate::mask_value(store.get(g.alpha).item(), g.threshold) == 0.0)
    }

    pub fn skip(&mut self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        match &mut self.downsample {
            Some(proj) => proj.forward(tape, store, x, mode),
            None => Ok(x),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let skip = self.skip(tape, store, x, mode)?;
        // Masked branches contribute exactly zero; at inference they are not evaluated.
        if mode == Mode::Eval && self.is_masked(store) {
            return Ok(skip);
        }
        let h = self.conv1.forward(tape, store, x, mode)?;
        let mut branch = self.conv2.forward(tape, store, h, mode)?;
        if let Some(gate) = &self.gate {
            let alpha = tape.param(store, gate.alpha);
            branch = apply_gate(tape, branch, alpha, gate, GateAxis::Whole)?;
        }
        if tape.value(branch).shape() != tape.value(skip).shape() {
            return Err(DmpError::shape(format!(
                "{}: branch {:?} and skip {:?} disagree",
                self.name,
                tape.value(branch).shape(),
                tape.value(skip).shape()
            )));
        }
        tape.add(branch, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::batchnorm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(gated: bool, stride: usize) -> (ParamStore, ResidualBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GateSettings::new(Granularity::Subnetwork);
        let out = if stride == 1 { 3 } else { 4 };
        let b = ResidualBlock::new(
            &mut store,
            &mut rng,
            "blk",
            3,
            out,
            stride,
            gated.then_some(&g),
            (DEFAULT_MOMENTUM, DEFAULT_EPS),
        )
        .unwrap();
        (store, b)
    }

    fn outputs(store: &ParamStore, b: &mut ResidualBlock, mode: Mode) -> (Tensor, Tensor) {
        let x = Tensor::randn(&[3, 3, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let y = b.forward(&mut tape, store, xn, mode).unwrap();
        let s = b.skip(&mut tape, store, xn, mode).unwrap();
        (tape.value(y).clone(), tape.value(s).clone())
    }

    #[test]
    fn masked_block_is_its_skip_path() {
        for stride in [1, 2] {
            let (mut store, mut b) = block(true, stride);
            let alpha = b.gate.as_ref().unwrap().alpha;
            *store.get_mut(alpha) = Tensor::scalar(-2e-4);
            assert!(b.is_masked(&store));
            for mode in [Mode::Train, Mode::Eval] {
                let (y, s) = outputs(&store, &mut b, mode);
                assert_eq!(y, s);
            }
        }
    }

    #[test]
    fn unit_gate_is_a_plain_block() {
        for stride in [1, 2] {
            let (gs, mut gated) = block(true, stride);
            let (ps, mut plain) = block(false, stride);
            let (yg, _) = outputs(&gs, &mut gated, Mode::Train);
            let (yp, sp) = outputs(&ps, &mut plain, Mode::Train);
            assert_eq!(yg, yp);
            assert_ne!(yp, sp);
        }
    }
}
