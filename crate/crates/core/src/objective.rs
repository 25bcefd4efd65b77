//! Training objective: task loss, ℓ1 on scaling factors, masked ℓ2 on
//! weights and the remaining-ratio hinge.

use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::gate::{hard_mask, mask_value, surrogate_mask_grad, GateParam};
use crate::model::{L2Term, MaskLayout};
use crate::params::ParamStore;
use crate::tape::{BackwardRule, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Target fraction of entities that stay active.
    pub target_c: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda1: 1e-3,
            lambda2: 1e-4,
            lambda3: 0.0,
            target_c: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DmpError::config(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.target_c > 0.0 && self.target_c <= 1.0) {
            return Err(DmpError::config(
                "target_c",
                format!("must lie in (0, 1], got {}", self.target_c),
            ));
        }
        Ok(())
    }
}

/// Per-row stable log-softmax of `[b, classes]` logits.
fn log_softmax_rows(logits: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    if logits.rank() != 2 {
        return Err(DmpError::shape(format!(
            "logits must be [b, classes], got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(b * k);
    for row in logits.data().chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Ok((b, k, out))
}

fn check_labels(labels: &[usize], b: usize, k: usize) -> Result<()> {
    if labels.len() != b {
        return Err(DmpError::shape(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(DmpError::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Mean negative log-likelihood, without a tape.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k, logp) = log_softmax_rows(logits)?;
    check_labels(labels, b, k)?;
    Ok(-labels.iter().enumerate().map(|(i, &l)| logp[i * k + l]).sum::<f64>() / b as f64)
}

/// Mean cross-entropy of `[b, classes]` logits against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (b, k, logp) = log_softmax_rows(tape.value(logits))?;
    check_labels(labels, b, k)?;
    let loss = -labels.iter().enumerate().map(|(i, &l)| logp[i * k + l]).sum::<f64>() / b as f64;
    let labels = labels.to_vec();
    let rule: BackwardRule = Box::new(move |ctx| {
        let up = ctx.upstream.item() / b as f64;
        let mut g: Vec<f64> = logp.iter().map(|&lp| lp.exp() * up).collect();
        for (i, &l) in labels.iter().enumerate() {
            g[i * k + l] -= up;
        }
        vec![Some(Tensor::new(vec![b, k], g).expect("shape"))]
    });
    Ok(tape.push("cross_entropy", Tensor::scalar(loss), vec![logits], Some(rule)))
}

/// `Σ |α|` over every gate.
pub fn l1_alpha(tape: &mut Tape, store: &ParamStore, gates: &[&GateParam]) -> Result<NodeId> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for g in gates {
        let a = tape.param(store, g.alpha);
        let abs = tape.abs(a)?;
        let s = tape.sum(abs)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// `Σ m·w²` with the mask held constant.
pub fn masked_sq_sum(tape: &mut Tape, w: NodeId, mask: Tensor) -> Result<NodeId> {
    let wv = tape.value(w);
    if wv.shape() != mask.shape() {
        return Err(DmpError::shape(format!(
            "mask {:?} does not match weight {:?}",
            mask.shape(),
            wv.shape()
        )));
    }
    let value: f64 = wv.data().iter().zip(mask.data()).map(|(&w, &m)| m * w * w).sum();
    let rule: BackwardRule = Box::new(move |ctx| {
        let up = ctx.upstream.item();
        let g = ctx.inputs[0].zip_map(&mask, |w, m| 2.0 * m * w * up).expect("shape");
        vec![Some(g)]
    });
    Ok(tape.push("masked_sq_sum", Tensor::scalar(value), vec![w], Some(rule)))
}

/// Broadcast a gate's hard mask over the weight slices it owns.
pub fn expand_mask(mask: &Tensor, layout: MaskLayout, weight_shape: &[usize]) -> Result<Tensor> {
    let n: usize = weight_shape.iter().product();
    let data = match layout {
        MaskLayout::Whole => {
            if mask.len() != 1 {
                return Err(DmpError::shape(format!(
                    "whole-tensor mask must be a single value, got {}",
                    mask.len()
                )));
            }
            vec![mask.data()[0]; n]
        }
        MaskLayout::Elementwise => {
            if mask.shape() != weight_shape {
                return Err(DmpError::shape(format!(
                    "elementwise mask {:?} does not match weight {weight_shape:?}",
                    mask.shape()
                )));
            }
            mask.data().to_vec()
        }
        MaskLayout::Rows => {
            if weight_shape.first() != Some(&mask.len()) {
                return Err(DmpError::shape(format!(
                    "{} mask components for weight {weight_shape:?}",
                    mask.len()
                )));
            }
            let per = n / mask.len();
            mask.data().iter().flat_map(|&m| std::iter::repeat_n(m, per)).collect()
        }
    };
    Tensor::new(weight_shape.to_vec(), data)
}

/// `Σ ‖I(α)θ‖²` over the listed weights; `gates` is indexed by [`L2Term::gate`].
pub fn masked_l2(tape: &mut Tape, store: &ParamStore, gates: &[&GateParam], terms: &[L2Term]) -> Result<NodeId> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for term in terms {
        let shape = store.get(term.param).shape().to_vec();
        let mask = match term.gate {
            Some((gi, layout)) => {
                let gate = gates
                    .get(gi)
                    .ok_or_else(|| DmpError::InvalidArgument(format!("l2 term refers to missing gate {gi}")))?;
                expand_mask(&hard_mask(store.get(gate.alpha), gate.threshold), layout, &shape)?
            }
            None => Tensor::ones(&shape),
        };
        let w = tape.param(store, term.param);
        let s = masked_sq_sum(tape, w, mask)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Fraction of gate components whose hard mask is on.
pub fn active_fraction(store: &ParamStore, gates: &[&GateParam], k: usize) -> f64 {
    let active: f64 = gates
        .iter()
        .flat_map(|g| {
            store
                .get(g.alpha)
                .data()
                .iter()
                .map(move |&a| mask_value(a, g.threshold))
        })
        .sum();
    active / k as f64
}

/// Hinge value `max(0, active/K − c)` without a tape.
pub fn hinge_value(active: usize, k: usize, c: f64) -> Result<f64> {
    if k == 0 {
        return Err(DmpError::InvalidArgument("entity count K must be positive".into()));
    }
    Ok((active as f64 / k as f64 - c).max(0.0))
}

/// `max(0, active/K − c)`; the backward pass swaps the hard mask for the
/// surrogate so the penalty can push scaling factors down.
pub fn ratio_hinge(tape: &mut Tape, store: &ParamStore, gates: &[&GateParam], k: usize, c: f64) -> Result<NodeId> {
    if k == 0 {
        return Err(DmpError::InvalidArgument("entity count K must be positive".into()));
    }
    let dims: usize = gates.iter().map(|g| g.dim).sum();
    if dims != k {
        return Err(DmpError::InvalidArgument(format!(
            "K = {k} but the gates hold {dims} components"
        )));
    }
    let alphas: Vec<NodeId> = gates.iter().map(|g| tape.param(store, g.alpha)).collect();
    let fraction = active_fraction(store, gates, k);
    let value = (fraction - c).max(0.0);
    let settings: Vec<(f64, f64)> = gates.iter().map(|g| (g.threshold, g.beta)).collect();
    let node = tape.custom_grad_with_inputs("ratio_hinge", Tensor::scalar(value), &alphas, move |up, inputs| {
        let up = up.item();
        inputs
            .iter()
            .zip(&settings)
            .map(|(a, &(t, beta))| {
                if value > 0.0 {
                    a.map(|a| up * surrogate_mask_grad(a, t, beta) / k as f64)
                } else {
                    Tensor::zeros(a.shape())
                }
            })
            .collect()
    });
    Ok(node)
}

/// Weighted contributions; they add up (in this order) to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub task: f64,
    pub l1: f64,
    pub l2: f64,
    pub hinge: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.task + self.l1 + self.l2 + self.hinge
    }
}

pub struct Objective {
    pub total: NodeId,
    pub terms: ObjectiveTerms,
}

/// `C + λ1·Σ|α| + λ2·Σ‖I(α)θ‖² + λ3·max(0, active/K − c)`.
///
/// Without gates the ℓ1 and hinge terms are exact zeros, so an ungated
/// model sees the same arithmetic as a gated one whose penalties vanish.
pub fn total_objective(
    tape: &mut Tape,
    task_loss: NodeId,
    store: &ParamStore,
    gates: &[&GateParam],
    l2_terms: &[L2Term],
    cfg: &ObjectiveConfig,
    k: usize,
) -> Result<Objective> {
    cfg.validate()?;
    let (l1, hinge) = if gates.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        (
            l1_alpha(tape, store, gates)?,
            ratio_hinge(tape, store, gates, k, cfg.target_c)?,
        )
    };
    let l2 = masked_l2(tape, store, gates, l2_terms)?;
    let l1w = tape.scale(l1, cfg.lambda1)?;
    let l2w = tape.scale(l2, cfg.lambda2)?;
    let hw = tape.scale(hinge, cfg.lambda3)?;
    let j = tape.add(task_loss, l1w)?;
    let j = tape.add(j, l2w)?;
    let j = tape.add(j, hw)?;
    let terms = ObjectiveTerms {
        task: tape.value(task_loss).item(),
        l1: tape.value(l1w).item(),
        l2: tape.value(l2w).item(),
        hinge: tape.value(hw).item(),
    };
    Ok(Objective { total: j, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::Granularity;
    use crate::gradcheck::check_op;
    use crate::params::ParamKind;
    use proptest::prelude::*;

    fn gate(store: &mut ParamStore, values: &[f64], g: Granularity) -> GateParam {
        let id = store.add(
            format!("g{}", store.len()),
            ParamKind::Alpha,
            Tensor::from_vec(values.to_vec()),
        );
        GateParam::new(id, values.len(), g.default_threshold(), 5.0, g).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 10]);
        assert!((cross_entropy_value(&uniform, &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-9);
        let mut sharp = Tensor::zeros(&[1, 3]);
        sharp.data_mut()[1] = 1000.0;
        assert!(cross_entropy_value(&sharp, &[1]).unwrap() < 1e-12);
        assert!(cross_entropy_value(&uniform, &[0, 10, 1]).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::from_vec((0..12).map(|i| (i as f64 * 0.7).sin()).collect())
            .reshape(&[4, 3])
            .unwrap();
        let r = check_op("cross_entropy", &[logits], |t, x| cross_entropy(t, x[0], &[0, 2, 1, 1])).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn l1_examples() {
        let mut s = ParamStore::new();
        let a = gate(&mut s, &[1.0, -2.0], Granularity::Filter);
        let b = gate(&mut s, &[0.5], Granularity::Filter);
        let mut tape = Tape::new();
        let l = l1_alpha(&mut tape, &s, &[&a, &b]).unwrap();
        assert_eq!(tape.value(l).item(), 3.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param(a.alpha).unwrap().data(), &[1.0, -1.0]);

        let z = gate(&mut s, &[0.0, 0.0], Granularity::Filter);
        let mut tape = Tape::new();
        let l = l1_alpha(&mut tape, &s, &[&z]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert_eq!(tape.backward(l).unwrap().param(z.alpha).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_l2_single_entity() {
        let mut s = ParamStore::new();
        let w = s.add(
            "w",
            ParamKind::Weight,
            Tensor::from_vec(vec![3.0, 4.0]).reshape(&[1, 2]).unwrap(),
        );
        let on = gate(&mut s, &[1.0], Granularity::Filter);
        let off = gate(&mut s, &[0.0], Granularity::Filter);
        let term = [L2Term {
            param: w,
            gate: Some((0, MaskLayout::Rows)),
        }];

        let mut tape = Tape::new();
        let l = masked_l2(&mut tape, &s, &[&on], &term).unwrap();
        assert_eq!(tape.value(l).item(), 25.0);

        let mut tape = Tape::new();
        let l = masked_l2(&mut tape, &s, &[&off], &term).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert_eq!(tape.backward(l).unwrap().param(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_l2_equals_plain_l2_on_active_slices() {
        let mut s = ParamStore::new();
        let wv: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let w = s.add(
            "w",
            ParamKind::Weight,
            Tensor::new(vec![3, 2, 3, 3], wv.clone()).unwrap(),
        );
        let g = gate(&mut s, &[0.7, 0.0, -1.2], Granularity::Filter);
        let mut tape = Tape::new();
        let l = masked_l2(
            &mut tape,
            &s,
            &[&g],
            &[L2Term {
                param: w,
                gate: Some((0, MaskLayout::Rows)),
            }],
        )
        .unwrap();
        // slice the active filters by hand
        let oracle: f64 = [0usize, 2]
            .iter()
            .flat_map(|&f| wv[f * 18..(f + 1) * 18].iter())
            .map(|v| v * v)
            .sum();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn masked_l2_rejects_mismatched_mask() {
        let mut s = ParamStore::new();
        let w = s.add("w", ParamKind::Weight, Tensor::zeros(&[4, 2]));
        let g = gate(&mut s, &[1.0, 1.0, 1.0], Granularity::Filter);
        let mut tape = Tape::new();
        assert!(masked_l2(
            &mut tape,
            &s,
            &[&g],
            &[L2Term {
                param: w,
                gate: Some((0, MaskLayout::Rows))
            }]
        )
        .is_err());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_value(4, 10, 0.5).unwrap(), 0.0);
        assert!((hinge_value(8, 10, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(hinge_value(4, 4, 1.0).unwrap(), 0.0);
        assert!(hinge_value(0, 0, 0.5).is_err());
    }

    #[test]
    fn hinge_on_tape_matches_table() {
        let mut s = ParamStore::new();
        let mut vals = vec![1.0; 8];
        vals.extend([0.0, 0.0]);
        let g = gate(&mut s, &vals, Granularity::Filter);
        let mut tape = Tape::new();
        let h = ratio_hinge(&mut tape, &s, &[&g], 10, 0.5).unwrap();
        assert!((tape.value(h).item() - 0.3).abs() < 1e-15);
        let grad = tape.backward(h).unwrap();
        let ga = grad.param(g.alpha).unwrap();
        let expect = surrogate_mask_grad(1.0, g.threshold, 5.0) / 10.0;
        assert!((ga.data()[0] - expect).abs() < 1e-15);
        assert!(ratio_hinge(&mut tape, &s, &[&g], 0, 0.5).is_err());
    }

    #[test]
    fn total_objective_reduces_to_task_loss() {
        let mut s = ParamStore::new();
        let w = s.add(
            "w",
            ParamKind::Weight,
            Tensor::from_vec(vec![3.0, 4.0]).reshape(&[1, 2]).unwrap(),
        );
        let g = gate(&mut s, &[0.3], Granularity::Filter);
        let terms = [L2Term {
            param: w,
            gate: Some((0, MaskLayout::Rows)),
        }];
        let cfg = ObjectiveConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            target_c: 0.5,
        };
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(1.234));
        let obj = total_objective(&mut tape, task, &s, &[&g], &terms, &cfg, 1).unwrap();
        assert_eq!(tape.value(obj.total).item(), 1.234);

        let cfg = ObjectiveConfig { lambda2: 1e-4, ..cfg };
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.0));
        let obj = total_objective(&mut tape, task, &s, &[&g], &terms, &cfg, 1).unwrap();
        assert!((tape.value(obj.total).item() - 1e-4 * 25.0).abs() < 1e-15);
    }

    #[test]
    fn total_objective_hand_computed() {
        let mut s = ParamStore::new();
        let w1 = s.add(
            "w1",
            ParamKind::Weight,
            Tensor::from_vec(vec![1.0, 2.0]).reshape(&[1, 2]).unwrap(),
        );
        let w2 = s.add(
            "w2",
            ParamKind::Weight,
            Tensor::from_vec(vec![5.0, -1.0]).reshape(&[1, 2]).unwrap(),
        );
        let g1 = gate(&mut s, &[0.8], Granularity::Filter);
        let g2 = gate(&mut s, &[-0.00005], Granularity::Filter);
        let terms = [
            L2Term {
                param: w1,
                gate: Some((0, MaskLayout::Rows)),
            },
            L2Term {
                param: w2,
                gate: Some((1, MaskLayout::Rows)),
            },
        ];
        let cfg = ObjectiveConfig {
            lambda1: 0.1,
            lambda2: 0.01,
            lambda3: 2.0,
            target_c: 0.25,
        };
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.7));
        let obj = total_objective(&mut tape, task, &s, &[&g1, &g2], &terms, &cfg, 2).unwrap();
        // C = 0.7; l1 = 0.80005; l2 = 1 + 4 (w2 pruned); hinge = 0.5 - 0.25
        let hand = 0.7 + 0.1 * 0.80005 + 0.01 * 5.0 + 2.0 * 0.25;
        let j = tape.value(obj.total).item();
        assert!((j - hand).abs() < 1e-12);
        assert!((obj.terms.total() - j).abs() < 1e-12);
    }

    #[test]
    fn masked_sq_sum_gradient_matches_fd() {
        let w = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.5]);
        let mask = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0]);
        let r = check_op("masked_sq_sum", &[w], move |t, x| masked_sq_sum(t, x[0], mask.clone())).unwrap();
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }

    proptest! {
        #[test]
        fn penalties_are_non_negative(vals in prop::collection::vec(-2.0f64..2.0, 1..12), c in 0.01f64..1.0) {
            let mut s = ParamStore::new();
            let w = s.add("w", ParamKind::Weight, Tensor::from_vec(vals.clone()));
            let g = gate(&mut s, &vals, Granularity::Weight);
            let gates = [&g];
            let mut tape = Tape::new();
            let l1 = l1_alpha(&mut tape, &s, &gates).unwrap();
            let l2 = masked_l2(&mut tape, &s, &gates, &[L2Term { param: w, gate: Some((0, MaskLayout::Elementwise)) }]).unwrap();
            let h = ratio_hinge(&mut tape, &s, &gates, vals.len(), c).unwrap();
            prop_assert!(tape.value(l1).item() >= 0.0);
            prop_assert!(tape.value(l2).item() >= 0.0);
            prop_assert!(tape.value(h).item() >= 0.0);
        }

        #[test]
        fn inactive_hinge_has_zero_gradient(vals in prop::collection::vec(-2.0f64..2.0, 1..12), c in 0.01f64..1.0) {
            let mut s = ParamStore::new();
            let g = gate(&mut s, &vals, Granularity::Weight);
            let mut tape = Tape::new();
            let h = ratio_hinge(&mut tape, &s, &[&g], vals.len(), c).unwrap();
            let grad = tape.backward(h).unwrap();
            let ga = grad.param(g.alpha).unwrap();
            if active_fraction(&s, &[&g], vals.len()) <= c {
                prop_assert_eq!(tape.value(h).item(), 0.0);
                prop_assert!(ga.data().iter().all(|&v| v == 0.0));
            }
        }

        #[test]
        fn pruned_weights_do_not_move_masked_l2(vals in prop::collection::vec(-1.0f64..1.0, 2..10), delta in -3.0f64..3.0) {
            let mut s = ParamStore::new();
            let n = vals.len();
            let w = s.add("w", ParamKind::Weight, Tensor::new(vec![n, 1], vals.clone()).unwrap());
            let mut alphas = vec![1.0; n];
            alphas[0] = 0.0;
            let g = gate(&mut s, &alphas, Granularity::Filter);
            let term = [L2Term { param: w, gate: Some((0, MaskLayout::Rows)) }];
            let eval = |s: &ParamStore| {
                let mut tape = Tape::new();
                let l = masked_l2(&mut tape, s, &[&g], &term).unwrap();
                tape.value(l).item()
            };
            let before = eval(&s);
            s.get_mut(w).data_mut()[0] += delta;
            prop_assert_eq!(eval(&s), before);
            // an active row moves by exactly the plain ℓ2 delta
            let old = s.get(w).data()[1];
            s.get_mut(w).data_mut()[1] += delta;
            let plain = (old + delta).powi(2) - old * old;
            prop_assert!((eval(&s) - before - plain).abs() < 1e-12);
        }
    }
}
