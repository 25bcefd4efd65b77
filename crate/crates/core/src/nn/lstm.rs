use rand::Rng;

use crate::error::{DmpError, Result};
use crate::gate::{apply_gate, mask_node, scale_along, GateAxis, GateParam, Granularity};
use crate::nn::layers::GateSettings;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Gate order used for weights, biases and gates: forget, input, cell, output.
pub const GATE_NAMES: [&str; 4] = ["f", "i", "g", "o"];

/// LSTM cell with node pruning inside the cell:
///
/// ```text
/// f = I(α_f) ⊙ σ(α_f ⊙ (W_f[h,x] + b_f))     (same for i and o)
/// g = I(α_g) ⊙ tanh(α_g ⊙ (W_g[h,x] + b_g))
/// c' = f ⊙ c + i ⊙ g,   h' = o ⊙ tanh(c')
/// ```
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub name: String,
    pub hidden: usize,
    pub input: usize,
    /// `[hidden, hidden + input]` each, acting on `[h_prev, x_t]`.
    pub weights: [ParamId; 4],
    pub biases: [ParamId; 4],
    pub gates: Option<[GateParam; 4]>,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        gates: Option<&GateSettings>,
    ) -> Result<Self> {
        if let Some(g) = gates {
            if g.granularity != Granularity::Node {
                return Err(DmpError::InvalidArgument(format!(
                    "LSTM cells support node gates, not {}",
                    g.granularity.as_str()
                )));
            }
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for g in GATE_NAMES {
            weights.push(store.add(
                format!("{name}.w_{g}"),
                ParamKind::Weight,
                Tensor::uniform(&[hidden, hidden + input], bound, rng),
            ));
            biases.push(store.add(
                format!("{name}.b_{g}"),
                ParamKind::Bias,
                Tensor::uniform(&[hidden], bound, rng),
            ));
        }
        let gates = match gates {
            Some(s) => {
                let mut made = Vec::with_capacity(4);
                for g in GATE_NAMES {
                    made.push(s.make(store, &format!("{name}.{g}"), &[hidden])?);
                }
                Some(made.try_into().expect("four gates"))
            }
            None => None,
        };
        Ok(LstmCell {
            name: name.to_string(),
            hidden,
            input,
            weights: weights.try_into().expect("four weights"),
            biases: biases.try_into().expect("four biases"),
            gates,
        })
    }

    /// One time step; returns `(h_t, c_t)`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (xs, hs, cs) = (
            tape.value(x_t).shape().to_vec(),
            tape.value(h_prev).shape().to_vec(),
            tape.value(c_prev).shape().to_vec(),
        );
        if xs.len() != 2 || xs[1] != self.input || hs != [xs[0], self.hidden] || cs != hs {
            return Err(DmpError::shape(format!(
                "{}: x {:?}, h {:?}, c {:?} do not fit input {} / hidden {}",
                self.name, xs, hs, cs, self.input, self.hidden
            )));
        }
        let hx = tape.concat_cols(h_prev, x_t)?;
        let mut acts = Vec::with_capacity(4);
        for k in 0..4 {
            let w = tape.param(store, self.weights[k]);
            let b = tape.param(store, self.biases[k]);
            let mut z = tape.linear(hx, w, Some(b))?;
            let gate = self.gates.as_ref().map(|g| &g[k]);
            if let Some(gate) = gate {
                let alpha = tape.param(store, gate.alpha);
                z = apply_gate(tape, z, alpha, gate, GateAxis::Axis(1))?;
            }
            let mut a = if k == 2 { tape.tanh(z)? } else { tape.sigmoid(z)? };
            if let Some(gate) = gate {
                let alpha = tape.param(store, gate.alpha);
                let mask = mask_node(tape, alpha, gate);
                a = scale_along(tape, a, mask, GateAxis::Axis(1))?;
            }
            acts.push(a);
        }
        let (f, i, g, o) = (acts[0], acts[1], acts[2], acts[3]);
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: usize = 3;
    const E: usize = 2;
    const B: usize = 2;

    fn cell(gated: bool) -> (ParamStore, LstmCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = GateSettings::new(Granularity::Node);
        let c = LstmCell::new(&mut store, &mut rng, "lstm", E, H, gated.then_some(&g)).unwrap();
        (store, c)
    }

    fn state(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[B, E], 1.0, &mut rng),
            Tensor::randn(&[B, H], 1.0, &mut rng),
            Tensor::randn(&[B, H], 1.0, &mut rng),
        )
    }

    fn step(store: &ParamStore, c: &LstmCell, (x, h, cp): &(Tensor, Tensor, Tensor)) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let (x, h, cp) = (tape.input(x.clone()), tape.input(h.clone()), tape.input(cp.clone()));
        let (h, c) = c.step(&mut tape, store, x, h, cp).unwrap();
        (tape.value(h).clone(), tape.value(c).clone())
    }

    /// Textbook LSTM step written out with scalar loops.
    fn reference(store: &ParamStore, c: &LstmCell, (x, h, cp): &(Tensor, Tensor, Tensor)) -> (Vec<f64>, Vec<f64>) {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut hn, mut cn) = (vec![0.0; B * H], vec![0.0; B * H]);
        for b in 0..B {
            let hx: Vec<f64> = h.data()[b * H..(b + 1) * H]
                .iter()
                .chain(&x.data()[b * E..(b + 1) * E])
                .copied()
                .collect();
            for j in 0..H {
                let pre = |k: usize| {
                    let w = &store.get(c.weights[k]).data()[j * (H + E)..(j + 1) * (H + E)];
                    w.iter().zip(&hx).map(|(a, b)| a * b).sum::<f64>() + store.get(c.biases[k]).data()[j]
                };
                let (f, i, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
                let cc = f * cp.data()[b * H + j] + i * g;
                cn[b * H + j] = cc;
                hn[b * H + j] = o * cc.tanh();
            }
        }
        (hn, cn)
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let (mut store, c) = cell(true);
        for id in c.weights.iter().chain(&c.biases) {
            let z = Tensor::zeros(store.get(*id).shape());
            *store.get_mut(*id) = z;
        }
        let (x, h, _) = state(1);
        let (h, cc) = step(&store, &c, &(x, h, Tensor::zeros(&[B, H])));
        assert!(h.data().iter().chain(cc.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gates_match_the_textbook_cell() {
        let (gs, gated) = cell(true);
        let (ps, plain) = cell(false);
        let s = state(2);
        let (hg, cg) = step(&gs, &gated, &s);
        let (hp, cp) = step(&ps, &plain, &s);
        assert_eq!((&hg, &cg), (&hp, &cp));
        let (hr, cr) = reference(&ps, &plain, &s);
        assert!(close(hp.data(), &hr) && close(cp.data(), &cr));
    }

    #[test]
    fn masked_output_node_silences_hidden_unit() {
        let (mut store, c) = cell(true);
        let alpha_o = c.gates.as_ref().unwrap()[3].alpha;
        store.get_mut(alpha_o).data_mut()[1] = 0.0;
        let (h, _) = step(&store, &c, &state(3));
        for b in 0..B {
            assert_eq!(h.data()[b * H + 1], 0.0);
            assert_ne!(h.data()[b * H], 0.0);
        }
    }

    #[test]
    fn masked_input_node_blocks_new_content() {
        let (mut store, c) = cell(true);
        let alpha_i = c.gates.as_ref().unwrap()[1].alpha;
        store.get_mut(alpha_i).data_mut()[2] = -1e-5;
        let (x, h, _) = state(4);
        let (_, cc) = step(&store, &c, &(x, h, Tensor::zeros(&[B, H])));
        for b in 0..B {
            assert_eq!(cc.data()[b * H + 2], 0.0);
        }
    }

    #[test]
    fn rejects_filter_gates() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GateSettings::new(Granularity::Filter);
        assert!(LstmCell::new(&mut store, &mut rng, "l", 2, 2, Some(&g)).is_err());
    }
}
