//! Central finite-difference checks of tape gradients.
//!
//! Each check projects an op's output onto fixed random weights to get a
//! scalar, differentiates it on the tape, and compares against central
//! differences of the forward pass. Error is measured norm-wise per input:
//! `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Norm-wise relative error; exact agreement on all-zero gradients is 0.
pub fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` with respect to `values[which]`.
pub fn numeric_gradient(
    values: &[Tensor],
    which: usize,
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    step: f64,
) -> Result<Tensor> {
    let mut work = values.to_vec();
    let mut grad = Tensor::zeros(values[which].shape());
    for i in 0..values[which].len() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let up = f(&work)?;
        work[which].data_mut()[i] = orig - step;
        let down = f(&work)?;
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Record `Σ w ⊙ out` with fixed pseudo-random weights `w`.
pub fn project(tape: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    /// Worst error over all checked inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

impl OpCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Project several outputs at once (distinct weights per output).
pub fn project_all(tape: &mut Tape, outs: &[NodeId], seed: u64) -> Result<NodeId> {
    let mut total = project(tape, outs[0], seed)?;
    for (i, &o) in outs.iter().enumerate().skip(1) {
        let p = project(tape, o, seed.wrapping_add(i as u64))?;
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Check tape gradients of stored parameters against central differences
/// taken by perturbing the store. `build` returns the scalar to differentiate.
pub fn check_params<F>(name: &str, store: &ParamStore, ids: &[ParamId], build: F) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    let mut per_input = Vec::with_capacity(ids.len());
    for &id in ids {
        let numeric = param_fd(&mut work, id, &build)?;
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        per_input.push(rel_err(&analytic, &numeric));
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    })
}

/// Central differences of `build`'s scalar with respect to one stored parameter.
pub fn param_fd<F>(store: &mut ParamStore, id: ParamId, build: &F) -> Result<Tensor>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = build(&mut tape, s)?;
        Ok(tape.value(l).item())
    };
    let mut grad = Tensor::zeros(store.get(id).shape());
    for i in 0..grad.len() {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + DEFAULT_STEP;
        let up = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - DEFAULT_STEP;
        let down = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * DEFAULT_STEP);
    }
    Ok(grad)
}

/// Check every input of `build` against finite differences.
pub fn check_op<F>(name: &str, inputs: &[Tensor], build: F) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let wanted: Vec<usize> = (0..inputs.len()).collect();
    check_op_inputs(name, inputs, &wanted, build)
}

/// Like [`check_op`] but only for the inputs listed in `wanted`; the others
/// are still tape inputs but their gradients are not compared.
pub fn check_op_inputs<F>(name: &str, inputs: &[Tensor], wanted: &[usize], build: F) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    const PROJECTION_SEED: u64 = 0x5eed;
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| tape.input(v.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let loss = project(&mut tape, out, PROJECTION_SEED)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.input(v.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let loss = project(&mut tape, out, PROJECTION_SEED)?;
    let grads = tape.backward(loss)?;

    let mut per_input = Vec::with_capacity(wanted.len());
    for &i in wanted {
        let numeric = numeric_gradient(inputs, i, &eval, DEFAULT_STEP)?;
        per_input.push(rel_err(&grads.wrt(ids[i]), &numeric));
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    })
}

/// Scalar check: `grad` against the central difference of `f` at each point.
pub fn check_scalar_fn(name: &str, points: &[f64], f: impl Fn(f64) -> f64, grad: impl Fn(f64) -> f64) -> OpCheck {
    let analytic = Tensor::from_vec(points.iter().map(|&x| grad(x)).collect());
    let numeric = Tensor::from_vec(
        points
            .iter()
            .map(|&x| (f(x + DEFAULT_STEP) - f(x - DEFAULT_STEP)) / (2.0 * DEFAULT_STEP))
            .collect(),
    );
    let per_point: Vec<f64> = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let s = a.abs().max(n.abs());
            if s == 0.0 {
                0.0
            } else {
                (a - n).abs() / s
            }
        })
        .collect();
    OpCheck {
        name: name.to_string(),
        max_rel_err: per_point.iter().cloned().fold(0.0, f64::max),
        per_input: per_point,
    }
}
