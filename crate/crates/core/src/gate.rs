//! Differentiable mask gate.
//!
//! Forward, a gate multiplies its entity's output by `α·I(α)` where
//! `I(α) = 1` iff `|α| > t`. The indicator has zero derivative almost
//! everywhere, so the backward pass instead differentiates a smooth surrogate
//! built from the first derivative of the foothill function:
//!
//! ```text
//! f(x, β)  = tanh(βx/2) + (βx/2)·sech²(βx/2)
//! f'(x, β) = (β/2)·sech²(βx/2)·(2 − βx·tanh(βx/2))
//! m̃(α)    = (f(|α| − t, β) + 1) / 2
//! ```
//!
//! The scaling factor receives `d/dα[α·m̃(α)] = m̃(α) + α·m̃'(α)`, which stays
//! nonzero below the threshold, so a masked entity can come back to life.

use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::params::ParamId;
use crate::tape::{BackwardRule, NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_ALPHA_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Weight,
    Node,
    Filter,
    Subnetwork,
}

impl Granularity {
    /// Default mask threshold: subnetwork gates use a coarser cut-off.
    pub fn default_threshold(self) -> f64 {
        match self {
            Granularity::Subnetwork => 1e-3,
            _ => 1e-4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Weight => "weight",
            Granularity::Node => "node",
            Granularity::Filter => "filter",
            Granularity::Subnetwork => "subnetwork",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = DmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Granularity::Weight),
            "node" => Ok(Granularity::Node),
            "filter" => Ok(Granularity::Filter),
            "subnetwork" => Ok(Granularity::Subnetwork),
            other => Err(DmpError::InvalidArgument(format!(
                "unknown granularity `{other}` (expected weight, node, filter or subnetwork)"
            ))),
        }
    }
}

/// A prunable entity's gate. The scaling factors live in the model's
/// parameter store under `alpha` so the optimizer treats them like weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParam {
    pub alpha: ParamId,
    pub threshold: f64,
    pub beta: f64,
    pub granularity: Granularity,
    /// Number of scaling factors (1 for a subnetwork gate).
    pub dim: usize,
}

impl GateParam {
    pub fn new(alpha: ParamId, dim: usize, threshold: f64, beta: f64, granularity: Granularity) -> Result<Self> {
        validate_gate_settings(threshold, beta)?;
        if dim == 0 {
            return Err(DmpError::InvalidArgument("gate dimension must be positive".into()));
        }
        Ok(GateParam {
            alpha,
            threshold,
            beta,
            granularity,
            dim,
        })
    }
}

pub fn validate_gate_settings(threshold: f64, beta: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DmpError::InvalidArgument(format!(
            "gate threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(DmpError::InvalidArgument(format!(
            "gate sharpness beta must be positive, got {beta}"
        )));
    }
    Ok(())
}

/// `I(α)` for one factor.
#[inline]
pub fn mask_value(alpha: f64, t: f64) -> f64 {
    if alpha.abs() > t {
        1.0
    } else {
        0.0
    }
}

pub fn hard_mask(alpha: &Tensor, t: f64) -> Tensor {
    alpha.map(|a| mask_value(a, t))
}

#[inline]
fn sech2(u: f64) -> f64 {
    let c = u.cosh();
    1.0 / (c * c)
}

/// First derivative of the foothill function with shape parameter `beta`.
pub fn foothill_fd(x: f64, beta: f64) -> f64 {
    let u = 0.5 * beta * x;
    u.tanh() + u * sech2(u)
}

/// Derivative of [`foothill_fd`] with respect to `x`.
pub fn foothill_fd_grad(x: f64, beta: f64) -> f64 {
    let u = 0.5 * beta * x;
    0.5 * beta * sech2(u) * (2.0 - beta * x * u.tanh())
}

/// Smooth stand-in for `I(α)`, equal to 1/2 at `|α| = t`.
pub fn surrogate_mask(alpha: f64, t: f64, beta: f64) -> f64 {
    0.5 * (foothill_fd(alpha.abs() - t, beta) + 1.0)
}

/// `d m̃ / dα`; zero at the origin where `|α|` has no derivative.
pub fn surrogate_mask_grad(alpha: f64, t: f64, beta: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    0.5 * foothill_fd_grad(alpha.abs() - t, beta) * alpha.signum()
}

/// Surrogate derivative of the gated factor `α·I(α)`.
#[inline]
pub fn gated_scale_grad(alpha: f64, t: f64, beta: f64) -> f64 {
    surrogate_mask(alpha, t, beta) + alpha * surrogate_mask_grad(alpha, t, beta)
}

/// Where a gate's factors line up against the gated tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateAxis {
    /// One factor for the whole tensor.
    Whole,
    /// One factor per index along this axis.
    Axis(usize),
    /// One factor per element.
    Elementwise,
}

/// Node holding `α·I(α)`; backward uses the surrogate product rule.
pub fn gate_scale(tape: &mut Tape, alpha: NodeId, gate: &GateParam) -> NodeId {
    let (t, beta) = (gate.threshold, gate.beta);
    let value = tape.value(alpha).map(|a| a * mask_value(a, t));
    tape.custom_grad_with_inputs("gate_scale", value, &[alpha], move |g, inputs| {
        let a = inputs[0];
        let grad = a
            .zip_map(g, |a, g| g * gated_scale_grad(a, t, beta))
            .expect("gate upstream matches alpha");
        vec![grad]
    })
}

/// Node holding `I(α)`; backward passes `m̃'(α)` to the scaling factors.
pub fn mask_node(tape: &mut Tape, alpha: NodeId, gate: &GateParam) -> NodeId {
    let (t, beta) = (gate.threshold, gate.beta);
    let value = hard_mask(tape.value(alpha), t);
    tape.custom_grad_with_inputs("gate_mask", value, &[alpha], move |g, inputs| {
        let grad = inputs[0]
            .zip_map(g, |a, g| g * surrogate_mask_grad(a, t, beta))
            .expect("mask upstream matches alpha");
        vec![grad]
    })
}

fn axis_layout(x: &[usize], s: &[usize], axis: GateAxis) -> Result<(usize, usize)> {
    // (stride, size) such that factor index = (i / stride) % size
    let d: usize = s.iter().product();
    match axis {
        GateAxis::Whole => {
            if d != 1 {
                return Err(DmpError::shape(format!("whole-tensor gate needs one factor, got {d}")));
            }
            Ok((1, 1))
        }
        GateAxis::Elementwise => {
            if s != x {
                return Err(DmpError::shape(format!(
                    "elementwise gate {s:?} does not match tensor {x:?}"
                )));
            }
            Ok((1, d))
        }
        GateAxis::Axis(a) => {
            if a >= x.len() {
                return Err(DmpError::shape(format!("gate axis {a} out of range for tensor {x:?}")));
            }
            if d == 1 {
                return Ok((1, 1));
            }
            if x[a] != d {
                return Err(DmpError::shape(format!(
                    "gate has {d} factors but axis {a} of {x:?} has size {}",
                    x[a]
                )));
            }
            Ok((x[a + 1..].iter().product(), d))
        }
    }
}

/// `x` scaled by per-index factors `s` along `axis`, with true derivatives.
pub fn scale_along(tape: &mut Tape, x: NodeId, s: NodeId, axis: GateAxis) -> Result<NodeId> {
    let (vx, vs) = (tape.value(x), tape.value(s));
    let (stride, size) = axis_layout(vx.shape(), vs.shape(), axis)?;
    let sd = vs.data();
    let data: Vec<f64> = vx
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * sd[(i / stride) % size])
        .collect();
    let value = Tensor::new(vx.shape().to_vec(), data)?;
    let rule: BackwardRule = Box::new(move |ctx| {
        let (x, s) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.upstream.data();
        let gx = ctx.needs[0].then(|| {
            let d: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, &g)| g * s.data()[(i / stride) % size])
                .collect();
            Tensor::new(x.shape().to_vec(), d).expect("shape")
        });
        let gs = ctx.needs[1].then(|| {
            let mut acc = vec![0.0; s.len()];
            for (i, (&g, &xv)) in g.iter().zip(x.data()).enumerate() {
                acc[(i / stride) % size] += g * xv;
            }
            Tensor::new(s.shape().to_vec(), acc).expect("shape")
        });
        vec![gx, gs]
    });
    Ok(tape.push("scale_along", value, vec![x, s], Some(rule)))
}

/// `α ⊙ I(α) ⊙ x` along `axis`.
pub fn apply_gate(tape: &mut Tape, x: NodeId, alpha: NodeId, gate: &GateParam, axis: GateAxis) -> Result<NodeId> {
    if tape.value(alpha).len() != gate.dim {
        return Err(DmpError::shape(format!(
            "gate declares {} factors but alpha holds {}",
            gate.dim,
            tape.value(alpha).len()
        )));
    }
    // validate geometry before recording anything
    axis_layout(tape.value(x).shape(), tape.value(alpha).shape(), axis)?;
    let s = gate_scale(tape, alpha, gate);
    scale_along(tape, x, s, axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamKind, ParamStore};
    use proptest::prelude::*;

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn hard_mask_examples() {
        assert_eq!(hard_mask(&Tensor::from_vec(vec![0.5]), 1e-3).data(), &[1.0]);
        assert_eq!(hard_mask(&Tensor::from_vec(vec![0.0]), 1e-3).data(), &[0.0]);
        assert_eq!(hard_mask(&Tensor::from_vec(vec![-0.2, 0.05]), 0.1).data(), &[1.0, 0.0]);
        // boundary is exclusive
        assert_eq!(mask_value(0.1, 0.1), 0.0);
    }

    #[test]
    fn foothill_values() {
        assert_eq!(foothill_fd(0.0, 5.0), 0.0);
        // 50-digit evaluation: 0.855341023742973463577...
        assert!((foothill_fd(0.2, 5.0) - 0.855_341_023_742_973).abs() < 1e-12);
        assert!((foothill_fd(10.0, 5.0) - 1.0).abs() < 1e-9);
        assert_eq!(foothill_fd_grad(0.0, 5.0), 5.0);
    }

    #[test]
    fn foothill_grad_matches_finite_difference() {
        for &x in &[0.1, 0.5, 1.0] {
            let fd = central(|v| foothill_fd(v, 5.0), x, 1e-5);
            let an = foothill_fd_grad(x, 5.0);
            assert!(((an - fd) / an).abs() < 1e-6, "x={x}: {an} vs {fd}");
        }
    }

    #[test]
    fn foothill_large_arguments_stay_finite() {
        for &x in &[1e3, -1e3, 1e300] {
            assert!(foothill_fd(x, 5.0).is_finite());
            assert_eq!(foothill_fd_grad(x, 5.0), 0.0);
        }
    }

    #[test]
    fn surrogate_values() {
        for &beta in &[0.5, 5.0, 50.0] {
            assert_eq!(surrogate_mask(0.2, 0.2, beta), 0.5);
            assert_eq!(surrogate_mask(-0.2, 0.2, beta), 0.5);
        }
        assert!((surrogate_mask(10.0, 0.2, 5.0) - 1.0).abs() < 1e-9);
        // (1 - f(0.2, 5)) / 2 with the high-precision value above
        assert!((surrogate_mask(0.0, 0.2, 5.0) - 0.0723).abs() < 1e-3);
        assert_eq!(surrogate_mask_grad(0.0, 0.2, 5.0), 0.0);
        assert_eq!(surrogate_mask_grad(0.3, 0.3, 5.0), 2.5);
    }

    #[test]
    fn surrogate_increases_up_to_foothill_peak() {
        // f(·, β) peaks where βx·tanh(βx/2) = 2, i.e. x ≈ 2.3994/β
        let (t, beta) = (0.2, 5.0);
        let mut prev = surrogate_mask(0.0, t, beta);
        let mut a = 0.0;
        while a < t + 0.47 {
            a += 1e-3;
            let m = surrogate_mask(a, t, beta);
            assert!(m > prev, "not increasing at {a}");
            prev = m;
        }
        // and overshoots 1 before settling back
        assert!(surrogate_mask(t + 0.48, t, beta) > 1.09);
    }

    #[test]
    fn surrogate_grad_matches_finite_difference() {
        let (t, beta) = (0.2, 5.0);
        for i in 0..200 {
            let a = -3.0 + 6.0 * (i as f64 + 0.5) / 200.0;
            if a.abs() < 1e-3 {
                continue;
            }
            let fd = central(|v| surrogate_mask(v, t, beta), a, 1e-6);
            let an = surrogate_mask_grad(a, t, beta);
            let denom = an.abs().max(fd.abs()).max(1e-8);
            // points where the derivative itself vanishes are compared absolutely
            assert!((an - fd).abs() / denom.max(1e-2) < 1e-5, "a={a}: {an} vs {fd}");
        }
    }

    #[test]
    fn hard_mask_agrees_with_rounded_surrogate_away_from_threshold() {
        let (t, beta) = (0.1, 5.0);
        for i in 0..2000 {
            let a = -4.0 + 8.0 * i as f64 / 2000.0;
            if ((a.abs() - t) * beta).abs() > 5.0 {
                assert_eq!(mask_value(a, t), surrogate_mask(a, t, beta).round().abs());
            }
        }
    }

    proptest! {
        #[test]
        fn foothill_symmetries(x in -20.0f64..20.0, beta in 0.1f64..20.0) {
            prop_assert_eq!(foothill_fd(-x, beta), -foothill_fd(x, beta));
            prop_assert_eq!(foothill_fd_grad(-x, beta), foothill_fd_grad(x, beta));
        }

        #[test]
        fn surrogate_grad_is_odd(a in -5.0f64..5.0, t in 1e-4f64..0.9) {
            prop_assert_eq!(surrogate_mask_grad(-a, t, 5.0), -surrogate_mask_grad(a, t, 5.0));
        }
    }

    fn one_gate(alpha: Vec<f64>, t: f64) -> (ParamStore, GateParam) {
        let mut store = ParamStore::new();
        let d = alpha.len();
        let id = store.add("g.alpha", ParamKind::Alpha, Tensor::from_vec(alpha));
        let gate = GateParam::new(id, d, t, DEFAULT_BETA, Granularity::Subnetwork).unwrap();
        (store, gate)
    }

    #[test]
    fn apply_gate_active_scales() {
        let (store, gate) = one_gate(vec![0.5], 1e-3);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let a = tape.param(&store, gate.alpha);
        let y = apply_gate(&mut tape, x, a, &gate, GateAxis::Whole).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 1.0]);
    }

    #[test]
    fn apply_gate_masked_still_trains_alpha() {
        let (store, gate) = one_gate(vec![1e-5], 1e-3);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let a = tape.param(&store, gate.alpha);
        let y = apply_gate(&mut tape, x, a, &gate, GateAxis::Whole).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
        let ga = g.param(gate.alpha).unwrap().item();
        let expected = 3.0 * gated_scale_grad(1e-5, 1e-3, DEFAULT_BETA);
        assert!(ga != 0.0);
        assert!((ga - expected).abs() < 1e-15);
    }

    #[test]
    fn apply_gate_unit_alpha_is_identity() {
        let (store, gate) = one_gate(vec![1.0], 1e-3);
        let mut tape = Tape::new();
        let xv = Tensor::from_vec(vec![0.3, -1.7, 2.5]);
        let x = tape.input(xv.clone());
        let a = tape.param(&store, gate.alpha);
        let y = apply_gate(&mut tape, x, a, &gate, GateAxis::Whole).unwrap();
        assert_eq!(tape.value(y), &xv);
        let w = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum(p).unwrap();
        assert_eq!(tape.backward(l).unwrap().wrt(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn apply_gate_axis_mismatch() {
        let (store, gate) = one_gate(vec![1.0, 1.0, 1.0], 1e-3);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 4]));
        let a = tape.param(&store, gate.alpha);
        assert!(matches!(
            apply_gate(&mut tape, x, a, &gate, GateAxis::Axis(1)),
            Err(DmpError::Shape(_))
        ));
    }

    #[test]
    fn gate_settings_are_validated() {
        let id = ParamId(0);
        assert!(GateParam::new(id, 1, 0.0, 5.0, Granularity::Node).is_err());
        assert!(GateParam::new(id, 1, 1.0, 5.0, Granularity::Node).is_err());
        assert!(GateParam::new(id, 1, 1e-4, 0.0, Granularity::Node).is_err());
        assert!(GateParam::new(id, 1, 1e-4, 5.0, Granularity::Node).is_ok());
    }
}
