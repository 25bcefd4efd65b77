//! Named gradient checks run by the `gradcheck` command.
//!
//! Ops with a true derivative are compared against central differences.
//! Straight-through scaling-factor gradients have no finite-difference
//! counterpart, so they are compared against a composite oracle: the
//! finite-difference gradient with respect to the effective scale, chained
//! with the finite-difference derivative of the surrogate mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DmpError, Result};
use crate::gate::{
    foothill_fd, foothill_fd_grad, gate_scale, mask_node, scale_along, surrogate_mask, surrogate_mask_grad, GateAxis,
    GateParam, Granularity,
};
use crate::gradcheck::{
    check_op, check_op_inputs, check_params, check_scalar_fn, numeric_gradient, param_fd, project, project_all,
    rel_err, OpCheck, DEFAULT_STEP,
};
use crate::nn::batchnorm::{batchnorm_eval, batchnorm_train, Mode};
use crate::nn::conv::{conv2d, flatten, global_avg_pool};
use crate::nn::layers::{concat_rows, embedding_lookup, ConvUnit, GateSettings, Linear};
use crate::nn::lstm::LstmCell;
use crate::nn::residual::ResidualBlock;
use crate::objective::{cross_entropy, masked_sq_sum};
use crate::params::{ParamKind, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Every registered check, in run order.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "abs",
    "scale",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat_cols",
    "concat_rows",
    "matmul",
    "linear",
    "conv2d",
    "conv2d_strided",
    "conv2d_pointwise",
    "global_avg_pool",
    "flatten",
    "batchnorm_train",
    "batchnorm_train_2d",
    "batchnorm_eval",
    "embedding",
    "cross_entropy",
    "masked_sq_sum",
    "scale_along",
    "foothill",
    "surrogate_mask",
    "gate_scale",
    "gate_mask",
    "conv_unit",
    "linear_layer",
    "residual_block",
    "lstm_cell",
    "conv_unit_alpha",
    "linear_alpha",
    "residual_alpha",
    "lstm_alpha",
];

/// Name of the deliberately broken op used as a negative control.
pub const FAULT_FIXTURE: &str = "faulty_relu";

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Scaling factors well clear of both the threshold and zero.
fn rand_alpha(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Finite-difference derivative of a scalar function at each point.
fn fd_scalar(points: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    points
        .iter()
        .map(|&x| (f(x + DEFAULT_STEP) - f(x - DEFAULT_STEP)) / (2.0 * DEFAULT_STEP))
        .collect()
}

pub fn run(name: &str) -> Result<OpCheck> {
    let t = |shape: &[usize], seed| rand_tensor(shape, seed);
    match name {
        "add" => check_op(name, &[t(&[2, 3], 1), t(&[3], 2)], |tp, x| tp.add(x[0], x[1])),
        "sub" => check_op(name, &[t(&[2, 3], 3), t(&[2, 3], 4)], |tp, x| tp.sub(x[0], x[1])),
        "mul" => check_op(name, &[t(&[2, 2, 3], 5), t(&[2, 3], 6)], |tp, x| tp.mul(x[0], x[1])),
        "sigmoid" => check_op(name, &[t(&[4, 3], 7).map(|v| 3.0 * v)], |tp, x| tp.sigmoid(x[0])),
        "tanh" => check_op(name, &[t(&[4, 3], 8).map(|v| 2.0 * v)], |tp, x| tp.tanh(x[0])),
        "relu" => check_op(name, &[rand_away_from_zero(&[4, 3], 9)], |tp, x| tp.relu(x[0])),
        "abs" => check_op(name, &[rand_away_from_zero(&[4, 3], 10)], |tp, x| tp.abs(x[0])),
        "scale" => check_op(name, &[t(&[5], 11)], |tp, x| tp.scale(x[0], -2.5)),
        "sum" => check_op(name, &[t(&[3, 4], 12)], |tp, x| tp.sum(x[0])),
        "mean" => check_op(name, &[t(&[3, 4], 13)], |tp, x| tp.mean(x[0])),
        "reshape" => check_op(name, &[t(&[3, 4], 14)], |tp, x| tp.reshape(x[0], &[2, 6])),
        "transpose" => check_op(name, &[t(&[3, 4], 15)], |tp, x| tp.transpose(x[0])),
        "concat_cols" => check_op(name, &[t(&[3, 2], 16), t(&[3, 4], 17)], |tp, x| {
            tp.concat_cols(x[0], x[1])
        }),
        "concat_rows" => check_op(name, &[t(&[2, 3], 18), t(&[1, 3], 19)], concat_rows),
        "matmul" => check_op(name, &[t(&[3, 4], 20), t(&[4, 2], 21)], |tp, x| tp.matmul(x[0], x[1])),
        "linear" => check_op(name, &[t(&[3, 4], 22), t(&[5, 4], 23), t(&[5], 24)], |tp, x| {
            tp.linear(x[0], x[1], Some(x[2]))
        }),
        "conv2d" => check_op(name, &[t(&[2, 2, 5, 5], 25), t(&[3, 2, 3, 3], 26)], |tp, x| {
            conv2d(tp, x[0], x[1], 1, 1)
        }),
        "conv2d_strided" => check_op(name, &[t(&[2, 2, 6, 6], 27), t(&[3, 2, 3, 3], 28)], |tp, x| {
            conv2d(tp, x[0], x[1], 2, 1)
        }),
        "conv2d_pointwise" => check_op(name, &[t(&[2, 3, 4, 4], 29), t(&[2, 3, 1, 1], 30)], |tp, x| {
            conv2d(tp, x[0], x[1], 2, 0)
        }),
        "global_avg_pool" => check_op(name, &[t(&[2, 3, 4, 4], 31)], |tp, x| global_avg_pool(tp, x[0])),
        "flatten" => check_op(name, &[t(&[2, 3, 2, 2], 32)], |tp, x| flatten(tp, x[0])),
        "batchnorm_train" => check_op(name, &[t(&[3, 2, 3, 3], 33), t(&[2], 34), t(&[2], 35)], |tp, x| {
            Ok(batchnorm_train(tp, x[0], x[1], x[2], 1e-5)?.0)
        }),
        "batchnorm_train_2d" => check_op(name, &[t(&[5, 3], 36), t(&[3], 37), t(&[3], 38)], |tp, x| {
            Ok(batchnorm_train(tp, x[0], x[1], x[2], 1e-5)?.0)
        }),
        "batchnorm_eval" => {
            let mean = t(&[2], 39).into_data();
            let var: Vec<f64> = t(&[2], 40).data().iter().map(|v| v.abs() + 0.5).collect();
            check_op(name, &[t(&[2, 2, 3, 3], 41), t(&[2], 42), t(&[2], 43)], move |tp, x| {
                batchnorm_eval(tp, x[0], x[1], x[2], &mean, &var, 1e-5)
            })
        }
        "embedding" => check_op(name, &[t(&[5, 3], 44)], |tp, x| {
            embedding_lookup(tp, x[0], &[4, 0, 4, 2])
        }),
        "cross_entropy" => check_op(name, &[t(&[4, 5], 45).map(|v| 3.0 * v)], |tp, x| {
            cross_entropy(tp, x[0], &[0, 4, 2, 2])
        }),
        "masked_sq_sum" => {
            let mask = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0])?;
            check_op(name, &[t(&[2, 3], 46)], move |tp, x| {
                masked_sq_sum(tp, x[0], mask.clone())
            })
        }
        "scale_along" => {
            let a = check_op(name, &[t(&[2, 3, 2, 2], 47), t(&[3], 48)], |tp, x| {
                scale_along(tp, x[0], x[1], GateAxis::Axis(1))
            })?;
            let b = check_op(name, &[t(&[3, 4], 49), t(&[3, 4], 50)], |tp, x| {
                scale_along(tp, x[0], x[1], GateAxis::Elementwise)
            })?;
            let c = check_op(name, &[t(&[2, 3], 51), t(&[1], 52)], |tp, x| {
                scale_along(tp, x[0], x[1], GateAxis::Whole)
            })?;
            Ok(merge(name, [a, b, c]))
        }
        "foothill" => Ok(check_scalar_fn(
            name,
            &sample_points(20),
            |x| foothill_fd(x, 5.0),
            |x| foothill_fd_grad(x, 5.0),
        )),
        "surrogate_mask" => {
            let t0 = 1e-3;
            Ok(check_scalar_fn(
                name,
                &sample_points(20).iter().map(|p| p + 0.01).collect::<Vec<_>>(),
                |a| surrogate_mask(a, t0, 5.0),
                |a| surrogate_mask_grad(a, t0, 5.0),
            ))
        }
        "gate_scale" => check_gate_scale(),
        "gate_mask" => check_gate_mask(),
        "conv_unit" => check_conv_unit(),
        "linear_layer" => check_linear_layer(),
        "residual_block" => check_residual_block(),
        "lstm_cell" => check_lstm_cell(),
        "conv_unit_alpha" => check_conv_unit_alpha(),
        "linear_alpha" => check_linear_alpha(),
        "residual_alpha" => check_residual_alpha(),
        "lstm_alpha" => check_lstm_alpha(),
        FAULT_FIXTURE => check_op(name, &[rand_away_from_zero(&[4, 3], 99)], |tp, x| faulty_relu(tp, x[0])),
        _ => Err(DmpError::UnknownOp {
            name: name.to_string(),
            known: OPS.join(", "),
        }),
    }
}

/// 20 points spread over both sides of the foothill's peak, avoiding 0
/// where the odd-symmetric derivative has its inflection.
fn sample_points(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.9 + 3.8 * i as f64 / (n - 1) as f64 + 0.013).collect()
}

fn merge<const N: usize>(name: &str, checks: [OpCheck; N]) -> OpCheck {
    let per_input: Vec<f64> = checks.iter().flat_map(|c| c.per_input.clone()).collect();
    OpCheck {
        name: name.to_string(),
        max_rel_err: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    }
}

/// ReLU whose backward forgets to zero the negative side.
fn faulty_relu(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let value = tape.value(x).map(|v| v.max(0.0));
    Ok(tape.custom_grad(FAULT_FIXTURE, value, &[x], |g| vec![g.clone()]))
}

fn alpha_gate(store: &mut ParamStore, values: Vec<f64>, granularity: Granularity) -> Result<GateParam> {
    let n = values.len();
    let id = store.add("alpha", ParamKind::Alpha, Tensor::from_vec(values));
    GateParam::new(id, n, granularity.default_threshold(), 5.0, granularity)
}

/// Elementwise: the upstream weights times d(α·m̃)/dα, including α below
/// the threshold where the forward value is flat.
fn check_gate_scale() -> Result<OpCheck> {
    let mut alphas = rand_alpha(8, 60);
    alphas.extend([3e-5, 5e-5, -5e-5, 0.0009]);
    let mut store = ParamStore::new();
    let gate = alpha_gate(&mut store, alphas.clone(), Granularity::Filter)?;
    let mut tape = Tape::new();
    let a = tape.param(&store, gate.alpha);
    let s = gate_scale(&mut tape, a, &gate);
    let loss = project(&mut tape, s, 61)?;
    let analytic = tape.backward(loss)?.param(gate.alpha).cloned().expect("alpha reached");
    // the projection weights are the upstream gradient of `s`
    let upstream = projection_weights(&[alphas.len()], 61)?;
    let dsurr = fd_scalar(&alphas, |a| a * surrogate_mask(a, gate.threshold, gate.beta));
    let oracle = Tensor::from_vec(upstream.data().iter().zip(&dsurr).map(|(u, d)| u * d).collect());
    Ok(single("gate_scale", rel_err(&analytic, &oracle)))
}

fn check_gate_mask() -> Result<OpCheck> {
    let mut alphas = rand_alpha(8, 62);
    alphas.extend([0.0, 5e-5, -5e-5]);
    let mut store = ParamStore::new();
    let gate = alpha_gate(&mut store, alphas.clone(), Granularity::Node)?;
    let mut tape = Tape::new();
    let a = tape.param(&store, gate.alpha);
    let m = mask_node(&mut tape, a, &gate);
    let loss = project(&mut tape, m, 63)?;
    let analytic = tape.backward(loss)?.param(gate.alpha).cloned().expect("alpha reached");
    let upstream = projection_weights(&[alphas.len()], 63)?;
    let dsurr = fd_scalar(&alphas, |a| surrogate_mask(a, gate.threshold, gate.beta));
    let oracle = Tensor::from_vec(upstream.data().iter().zip(&dsurr).map(|(u, d)| u * d).collect());
    Ok(single("gate_mask", rel_err(&analytic, &oracle)))
}

/// The weights `project` uses for an output of this shape.
fn projection_weights(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(shape));
    let loss = project(&mut tape, x, seed)?;
    Ok(tape.backward(loss)?.wrt(x))
}

fn single(name: &str, err: f64) -> OpCheck {
    OpCheck {
        name: name.to_string(),
        max_rel_err: err,
        per_input: vec![err],
    }
}

const BN: (f64, f64) = (0.1, 1e-5);

fn conv_fixture(gated: bool) -> Result<(ParamStore, ConvUnit, Tensor)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let gates = GateSettings::new(Granularity::Filter);
    let unit = ConvUnit::new(&mut store, &mut rng, "c", 2, 3, 3, 1, true, gated.then_some(&gates), BN)?;
    if let Some(g) = &unit.gate {
        *store.get_mut(g.alpha) = Tensor::from_vec(rand_alpha(3, 71));
    }
    // perturb BN affine away from its (1, 0) init so every path is exercised
    *store.get_mut(unit.bn.gamma) = rand_tensor(&[3], 72).map(|v| 1.0 + 0.5 * v);
    *store.get_mut(unit.bn.beta) = rand_tensor(&[3], 73).map(|v| 0.5 * v);
    Ok((store, unit, rand_tensor(&[3, 2, 4, 4], 74)))
}

fn check_conv_unit() -> Result<OpCheck> {
    let (store, unit, x) = conv_fixture(true)?;
    let ids = [unit.weight, unit.bn.gamma, unit.bn.beta];
    let xc = x.clone();
    let u2 = unit.clone();
    let params = check_params("conv_unit", &store, &ids, move |tp, s| {
        let x = tp.constant(xc.clone());
        let y = u2.clone().forward(tp, s, x, Mode::Train)?;
        project(tp, y, 75)
    })?;
    let input = check_op("conv_unit", &[x], move |tp, x| {
        unit.clone().forward(tp, &store, x[0], Mode::Train)
    })?;
    Ok(merge("conv_unit", [params, input]))
}

fn linear_fixture() -> Result<(ParamStore, Linear, Tensor)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let gates = GateSettings::new(Granularity::Weight);
    let layer = Linear::new(&mut store, &mut rng, "fc", 4, 3, Some(&gates))?;
    if let Some(g) = &layer.gate {
        *store.get_mut(g.alpha) = Tensor::new(vec![3, 4], rand_alpha(12, 81))?;
    }
    Ok((store, layer, rand_tensor(&[5, 4], 82)))
}

fn check_linear_layer() -> Result<OpCheck> {
    let (store, layer, x) = linear_fixture()?;
    let xc = x.clone();
    let l2 = layer.clone();
    let params = check_params("linear_layer", &store, &[layer.weight, layer.bias], move |tp, s| {
        let x = tp.constant(xc.clone());
        let y = l2.forward(tp, s, x)?;
        project(tp, y, 83)
    })?;
    let input = check_op("linear_layer", &[x], move |tp, x| layer.forward(tp, &store, x[0]))?;
    Ok(merge("linear_layer", [params, input]))
}

fn residual_fixture(granularity: Granularity) -> Result<(ParamStore, ResidualBlock, Tensor)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let gates = GateSettings::new(granularity);
    let block = ResidualBlock::new(&mut store, &mut rng, "b", 2, 3, 2, Some(&gates), BN)?;
    for (i, g) in [&block.gate, &block.conv1.gate, &block.conv2.gate]
        .into_iter()
        .flatten()
        .enumerate()
    {
        *store.get_mut(g.alpha) = Tensor::from_vec(rand_alpha(g.dim, 91 + i as u64));
    }
    Ok((store, block, rand_tensor(&[3, 2, 4, 4], 95)))
}

fn check_residual_block() -> Result<OpCheck> {
    let (store, block, x) = residual_fixture(Granularity::Filter)?;
    let mut ids = vec![block.conv1.weight, block.conv2.weight, block.conv2.bn.gamma];
    ids.extend(block.downsample.as_ref().map(|d| d.weight));
    let xc = x.clone();
    let b2 = block.clone();
    let params = check_params("residual_block", &store, &ids, move |tp, s| {
        let x = tp.constant(xc.clone());
        let y = b2.clone().forward(tp, s, x, Mode::Train)?;
        project(tp, y, 96)
    })?;
    let input = check_op("residual_block", &[x], move |tp, x| {
        block.clone().forward(tp, &store, x[0], Mode::Train)
    })?;
    Ok(merge("residual_block", [params, input]))
}

fn lstm_fixture() -> Result<(ParamStore, LstmCell, [Tensor; 3])> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let gates = GateSettings::new(Granularity::Node);
    let cell = LstmCell::new(&mut store, &mut rng, "lstm", 3, 4, Some(&gates))?;
    for (k, g) in cell.gates.iter().flatten().enumerate() {
        *store.get_mut(g.alpha) = Tensor::from_vec(rand_alpha(4, 101 + k as u64));
    }
    Ok((
        store,
        cell,
        [
            rand_tensor(&[2, 3], 105),
            rand_tensor(&[2, 4], 106),
            rand_tensor(&[2, 4], 107),
        ],
    ))
}

fn lstm_loss(tp: &mut Tape, cell: &LstmCell, s: &ParamStore, x: &[NodeId]) -> Result<NodeId> {
    let (h, c) = cell.step(tp, s, x[0], x[1], x[2])?;
    project_all(tp, &[h, c], 108)
}

fn check_lstm_cell() -> Result<OpCheck> {
    let (store, cell, inputs) = lstm_fixture()?;
    let mut ids: Vec<_> = cell.weights.to_vec();
    ids.extend(cell.biases);
    let ic = inputs.clone();
    let c2 = cell.clone();
    let params = check_params("lstm_cell", &store, &ids, move |tp, s| {
        let x: Vec<NodeId> = ic.iter().map(|v| tp.constant(v.clone())).collect();
        lstm_loss(tp, &c2, s, &x)
    })?;
    let wrt_inputs = check_op_inputs("lstm_cell", &inputs, &[0, 1, 2], move |tp, x| {
        let (h, c) = cell.step(tp, &store, x[0], x[1], x[2])?;
        let hc = tp.concat_cols(h, c)?;
        Ok(hc)
    })?;
    Ok(merge("lstm_cell", [params, wrt_inputs]))
}

/// Composite oracle for layers whose scaling factors enter only through
/// `α·I(α)`: with every |α| clear of the threshold the forward pass sees
/// α itself, so differencing α differences the effective scale.
fn composite_alpha_check<F>(name: &str, store: &ParamStore, gates: &[GateParam], build: F) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    let mut per_input = Vec::new();
    for g in gates {
        let alphas = store.get(g.alpha).data().to_vec();
        assert!(alphas.iter().all(|a| a.abs() > g.threshold + 10.0 * DEFAULT_STEP));
        let d_scale = param_fd(&mut work, g.alpha, &build)?;
        let d_surr = fd_scalar(&alphas, |a| a * surrogate_mask(a, g.threshold, g.beta));
        let oracle = d_scale.zip_map(&Tensor::new(d_scale.shape().to_vec(), d_surr)?, |a, b| a * b)?;
        let analytic = grads.param(g.alpha).cloned().expect("alpha reached");
        per_input.push(rel_err(&analytic, &oracle));
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    })
}

fn check_conv_unit_alpha() -> Result<OpCheck> {
    let (store, unit, x) = conv_fixture(true)?;
    let gate = unit.gate.clone().expect("gated fixture");
    composite_alpha_check("conv_unit_alpha", &store, &[gate], move |tp, s| {
        let xn = tp.constant(x.clone());
        let y = unit.clone().forward(tp, s, xn, Mode::Train)?;
        project(tp, y, 110)
    })
}

fn check_linear_alpha() -> Result<OpCheck> {
    let (store, layer, x) = linear_fixture()?;
    let gate = layer.gate.clone().expect("gated fixture");
    composite_alpha_check("linear_alpha", &store, &[gate], move |tp, s| {
        let xn = tp.constant(x.clone());
        let y = layer.forward(tp, s, xn)?;
        project(tp, y, 111)
    })
}

fn check_residual_alpha() -> Result<OpCheck> {
    let (store, block, x) = residual_fixture(Granularity::Subnetwork)?;
    let gate = block.gate.clone().expect("gated fixture");
    composite_alpha_check("residual_alpha", &store, &[gate], move |tp, s| {
        let xn = tp.constant(x.clone());
        let y = block.clone().forward(tp, s, xn, Mode::Train)?;
        project(tp, y, 112)
    })
}

/// LSTM gates use α twice, as the pre-activation scale and as the output
/// mask. The oracle differences an independent rebuild of the step with
/// the scale `s` and mask `m` as free inputs, then chains
/// `∂L/∂s·(α m̃)' + ∂L/∂m·m̃'`.
fn check_lstm_alpha() -> Result<OpCheck> {
    let (store, cell, inputs) = lstm_fixture()?;
    let gates = cell.gates.clone().expect("gated fixture");

    let mut tape = Tape::new();
    let x: Vec<NodeId> = inputs.iter().map(|v| tape.constant(v.clone())).collect();
    let loss = lstm_loss(&mut tape, &cell, &store, &x)?;
    let grads = tape.backward(loss)?;

    // reference inputs: x, h, c, then (W, b, s, m) per gate
    let mut vals: Vec<Tensor> = inputs.to_vec();
    for (k, g) in gates.iter().enumerate() {
        vals.push(store.get(cell.weights[k]).clone());
        vals.push(store.get(cell.biases[k]).clone());
        vals.push(store.get(g.alpha).clone());
        vals.push(Tensor::ones(&[g.dim]));
    }
    let eval = |v: &[Tensor]| -> Result<f64> {
        let mut tp = Tape::new();
        let ids: Vec<NodeId> = v.iter().map(|t| tp.input(t.clone())).collect();
        let hx = tp.concat_cols(ids[1], ids[0])?;
        let mut acts = Vec::new();
        for k in 0..4 {
            let o = 3 + 4 * k;
            let z = tp.linear(hx, ids[o], Some(ids[o + 1]))?;
            let z = scale_along(&mut tp, z, ids[o + 2], GateAxis::Axis(1))?;
            let a = if k == 2 { tp.tanh(z)? } else { tp.sigmoid(z)? };
            acts.push(scale_along(&mut tp, a, ids[o + 3], GateAxis::Axis(1))?);
        }
        let fc = tp.mul(acts[0], ids[2])?;
        let ig = tp.mul(acts[1], acts[2])?;
        let c = tp.add(fc, ig)?;
        let tc = tp.tanh(c)?;
        let h = tp.mul(acts[3], tc)?;
        let l = project_all(&mut tp, &[h, c], 108)?;
        Ok(tp.value(l).item())
    };
    let mut per_input = Vec::new();
    for (k, g) in gates.iter().enumerate() {
        let o = 3 + 4 * k;
        let d_s = numeric_gradient(&vals, o + 2, &eval, DEFAULT_STEP)?;
        let d_m = numeric_gradient(&vals, o + 3, &eval, DEFAULT_STEP)?;
        let alphas = store.get(g.alpha).data().to_vec();
        let d_scale = fd_scalar(&alphas, |a| a * surrogate_mask(a, g.threshold, g.beta));
        let d_mask = fd_scalar(&alphas, |a| surrogate_mask(a, g.threshold, g.beta));
        let oracle: Vec<f64> = (0..g.dim)
            .map(|j| d_s.data()[j] * d_scale[j] + d_m.data()[j] * d_mask[j])
            .collect();
        let analytic = grads.param(g.alpha).cloned().expect("alpha reached");
        per_input.push(rel_err(&analytic, &Tensor::from_vec(oracle)));
    }
    Ok(OpCheck {
        name: "lstm_alpha".to_string(),
        max_rel_err: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    })
}
