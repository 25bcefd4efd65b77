//! Independent oracles for prune accounting on a small filter-gated convnet:
//! a perturbation probe for live parameters and a loop enumeration for FLOPs.

use dmp::gate::Granularity;
use dmp::model::{BatchInput, Model, ModelSpec};
use dmp::nn::batchnorm::Mode;
use dmp::nn::GateSettings;
use dmp::params::ParamKind;
use dmp::prune::PruneManager;
use dmp::tape::Tape;
use dmp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IN_CH: usize = 3;
pub const SIZE: usize = 6;
pub const WIDTHS: [usize; 3] = [4, 6, 5];
pub const STRIDES: [usize; 3] = [1, 2, 1];
pub const CLASSES: usize = 3;
pub const K: usize = 3;

pub fn toy() -> Model {
    let spec = ModelSpec::toy_convnet(IN_CH, SIZE, &WIDTHS, &STRIDES, CLASSES)
        .with_gates(GateSettings::new(Granularity::Filter))
        .with_seed(5);
    Model::new(spec).unwrap()
}

pub fn apply_masks(model: &mut Model, masks: &[Vec<bool>]) {
    let ids: Vec<_> = model.gates().iter().map(|g| g.alpha).collect();
    for (id, m) in ids.into_iter().zip(masks) {
        for (a, &on) in model.params.get_mut(id).data_mut().iter_mut().zip(m) {
            *a = if on { 1.0 } else { 0.0 };
        }
    }
}

pub fn logits(model: &mut Model, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let y = model
        .forward(&mut tape, &BatchInput::Dense(x.clone()), Mode::Eval)
        .unwrap();
    tape.value(y).clone()
}

/// Non-gate parameters whose perturbation moves the logits.
pub fn live_params_by_perturbation(model: &mut Model) -> u64 {
    let x = Tensor::randn(&[6, IN_CH, SIZE, SIZE], 1.0, &mut ChaCha8Rng::seed_from_u64(99));
    let base = logits(model, &x);
    let ids: Vec<_> = model
        .params
        .ids()
        .filter(|&id| model.params.kind(id) != ParamKind::Alpha)
        .collect();
    let mut live = 0;
    for id in ids {
        for i in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[i];
            let mut moved = false;
            for d in [3.0, -3.0] {
                model.params.get_mut(id).data_mut()[i] = orig + d;
                moved |= logits(model, &x) != base;
            }
            model.params.get_mut(id).data_mut()[i] = orig;
            live += u64::from(moved);
        }
    }
    live
}

pub fn out_size(size: usize, stride: usize) -> usize {
    (size + 2 * (K / 2) - K) / stride + 1
}

/// FLOPs counted one operation at a time under the documented convention.
pub fn flops_by_enumeration(masks: &[Vec<bool>]) -> u64 {
    let mut flops = 0u64;
    let mut size = SIZE;
    let mut in_live = vec![true; IN_CH];
    for (l, &s) in STRIDES.iter().enumerate() {
        let o = out_size(size, s);
        for &filter_live in &masks[l] {
            if !filter_live {
                continue;
            }
            for _y in 0..o {
                for _x in 0..o {
                    for &c in &in_live {
                        if !c {
                            continue;
                        }
                        for _ in 0..K * K {
                            flops += 2; // multiply, accumulate
                        }
                    }
                    flops += 2; // batch norm
                    flops += 1; // relu
                }
            }
        }
        in_live = masks[l].clone();
        size = o;
    }
    for &c in &in_live {
        if c {
            flops += (size * size) as u64; // pooling
        }
    }
    for _ in 0..CLASSES {
        for &c in &in_live {
            if c {
                flops += 2;
            }
        }
        flops += 1; // bias
    }
    flops
}

/// Random masks that keep at least one filter per layer. A layer with every
/// filter masked cuts the network: upstream filters feed nothing and
/// downstream ones emit only their batch-norm shift, so which parameters
/// still matter depends on their values rather than on the masks.
pub fn random_masks(rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    loop {
        let m: Vec<Vec<bool>> = WIDTHS
            .iter()
            .map(|&w| (0..w).map(|_| rng.random_bool(0.6)).collect())
            .collect();
        if m.iter().all(|l| l.contains(&true)) {
            return m;
        }
    }
}

/// Dense, fully pruned and random mask patterns, each checked against both
/// oracles. Returns the first disagreement.
pub fn check_cases(random_cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = vec![
        WIDTHS.iter().map(|&w| vec![true; w]).collect::<Vec<_>>(),
        WIDTHS.iter().map(|&w| vec![false; w]).collect(),
    ];
    for _ in 0..random_cases {
        cases.push(random_masks(&mut rng));
    }
    for masks in &cases {
        let mut model = toy();
        apply_masks(&mut model, masks);
        let mut pm = PruneManager::register(&model).map_err(|e| e.to_string())?;
        let report = pm.snapshot(&model.params, 0);
        let seen: Vec<Vec<bool>> = report.gates.iter().map(|g| g.active.clone()).collect();
        if &seen != masks {
            return Err(format!("reported masks {seen:?} differ from {masks:?}"));
        }
        let live_params = report.totals.total_params - report.totals.pruned_params;
        let live_flops = report.totals.total_flops - report.totals.pruned_flops;
        let (p, f) = (live_params_by_perturbation(&mut model), flops_by_enumeration(masks));
        if live_params != p || live_flops != f {
            return Err(format!(
                "masks {masks:?}: params {live_params} vs oracle {p}, flops {live_flops} vs oracle {f}"
            ));
        }
    }
    Ok(cases.len())
}
