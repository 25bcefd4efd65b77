//! SGD-with-momentum training, evaluation and per-epoch metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset};
use crate::error::{DmpError, Result};
use crate::model::{BatchInput, Model};
use crate::nn::Mode;
use crate::objective::{cross_entropy, cross_entropy_value, total_objective, ObjectiveConfig, ObjectiveTerms};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::prune::PruneManager;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Prune snapshots every this many steps (0: only at epoch ends).
    pub snapshot_every: u64,
    /// Hold every scaling factor at its current value.
    pub freeze_gates: bool,
    /// Pad-crop-flip augmentation of image training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            base_lr: 0.1,
            momentum: 0.9,
            decay_epochs: vec![],
            decay_factor: 0.1,
            seed: 0,
            objective: ObjectiveConfig::default(),
            snapshot_every: 0,
            freeze_gates: false,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(DmpError::config(f, m));
        if self.epochs == 0 {
            return err("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("base_lr", format!("must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return err("decay_factor", format!("must lie in (0, 1), got {}", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return err("decay_epochs", "must be strictly increasing".into());
        }
        self.objective.validate()
    }
}

/// Step-decay schedule: `base_lr · decay_factor^(#decay epochs ≤ epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * cfg.decay_factor.powi(decays as i32)
}

/// `v ← μv + g; p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(DmpError::shape(format!(
            "sgd: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a parameter store.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
        lr: f64,
        momentum: f64,
        skip: impl Fn(ParamKind) -> bool,
    ) -> Result<()> {
        for (&id, g) in grads {
            if skip(store.kind(id)) {
                continue;
            }
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            sgd_momentum_step(store.get_mut(id), g, v, lr, momentum)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean cross-entropy per prediction.
    pub loss: f64,
    /// Misclassified fraction (classification only).
    pub error: Option<f64>,
    /// `exp(loss)` (language modelling only).
    pub perplexity: Option<f64>,
}

/// Fraction of rows whose arg-max logit is not the label.
pub fn error_rate(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(DmpError::shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let wrong = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            best != l
        })
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Eval-mode pass over a whole dataset.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(DmpError::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut wrong, mut rows) = (0.0, 0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch.input, Mode::Eval)?;
        let lv = tape.value(logits);
        let n = batch.targets.len();
        loss += cross_entropy_value(lv, &batch.targets)? * n as f64;
        wrong += error_rate(lv, &batch.targets)? * n as f64;
        rows += n;
    }
    let loss = loss / rows as f64;
    Ok(if data.is_stream() {
        Evaluation {
            loss,
            error: None,
            perplexity: Some(loss.exp()),
        }
    } else {
        Evaluation {
            loss,
            error: Some(wrong / rows as f64),
            perplexity: None,
        }
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub schema_version: u32,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Epoch means of the weighted objective terms.
    pub task_loss: f64,
    pub l1_term: f64,
    pub l2_term: f64,
    pub hinge_term: f64,
    pub objective: f64,
    pub test_loss: f64,
    pub test_error: Option<f64>,
    pub test_perplexity: Option<f64>,
    /// Active components per gate.
    pub active_counts: Vec<usize>,
    pub active_entities: usize,
    pub k: usize,
    pub pruned_ratio: f64,
    pub pruned_params_fraction: f64,
    pub pruned_flops_fraction: f64,
    pub events: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub manager: PruneManager,
    pub steps: u64,
}

fn non_finite(tape: &Tape, step: u64) -> DmpError {
    match tape.first_non_finite() {
        Some((node, op)) => DmpError::NonFinite(format!(
            "step {step}: first non-finite tensor is node #{} ({op})",
            node.index()
        )),
        None => DmpError::NonFinite(format!("step {step}: objective is not finite")),
    }
}

/// Train `model` in place, calling `on_epoch` after each epoch.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DmpError::InvalidArgument("empty training set".into()));
    }
    let mut manager = PruneManager::register(model)?;
    let k = manager.k();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::default();
    let pad = if cfg.augment { train_set.pad_values() } else { None };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sums = ObjectiveTerms::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // batch-norm statistics need two samples
            if chunk.len() < 2 && batches > 0 {
                continue;
            }
            let mut batch = train_set.batch(chunk)?;
            if let (Some(pad), BatchInput::Dense(x)) = (&pad, &batch.input) {
                batch.input = BatchInput::Dense(augment(x, pad, &mut rng)?);
            }
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &batch.input, Mode::Train)?;
            let task = cross_entropy(&mut tape, logits, &batch.targets)?;
            let gates: Vec<_> = model.gates().into_iter().cloned().collect();
            let gate_refs: Vec<_> = gates.iter().collect();
            let obj = total_objective(
                &mut tape,
                task,
                &model.params,
                &gate_refs,
                &model.l2_terms(),
                &cfg.objective,
                k,
            )?;
            if !tape.value(obj.total).all_finite() {
                return Err(non_finite(&tape, step));
            }
            let grads = tape.backward(obj.total)?;
            if let Some((id, _)) = grads.params().iter().find(|(_, g)| !g.all_finite()) {
                return Err(DmpError::NonFinite(format!(
                    "step {step}: gradient of `{}` is not finite",
                    model.params.name(*id)
                )));
            }
            let frozen = cfg.freeze_gates;
            opt.step(&mut model.params, grads.params(), lr, cfg.momentum, |kind| {
                frozen && kind == ParamKind::Alpha
            })?;
            sums.task += obj.terms.task;
            sums.l1 += obj.terms.l1;
            sums.l2 += obj.terms.l2;
            sums.hinge += obj.terms.hinge;
            batches += 1;
            step += 1;
            if cfg.snapshot_every > 0 && step.is_multiple_of(cfg.snapshot_every) {
                manager.snapshot(&model.params, step);
            }
        }
        let report = manager.snapshot(&model.params, step);
        let eval = evaluate(model, test_set, cfg.batch_size.max(64))?;
        let n = batches as f64;
        let m = EpochMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            epoch,
            step,
            lr,
            task_loss: sums.task / n,
            l1_term: sums.l1 / n,
            l2_term: sums.l2 / n,
            hinge_term: sums.hinge / n,
            objective: sums.total() / n,
            test_loss: eval.loss,
            test_error: eval.error,
            test_perplexity: eval.perplexity,
            active_counts: report
                .gates
                .iter()
                .map(|g| g.active.iter().filter(|&&a| a).count())
                .collect(),
            active_entities: report.totals.active_entities,
            k,
            pruned_ratio: report.totals.pruned_ratio,
            pruned_params_fraction: report.totals.pruned_params_fraction,
            pruned_flops_fraction: report.totals.pruned_flops_fraction,
            events: report.events.len(),
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        metrics,
        manager,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Samples, Split};
    use crate::gate::Granularity;
    use crate::model::ModelSpec;
    use crate::nn::GateSettings;

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_decay_schedule() {
        let c = TrainConfig {
            base_lr: 0.1,
            decay_epochs: vec![80, 120],
            decay_factor: 0.1,
            ..cfg()
        };
        assert_eq!(lr_at(79, &c), 0.1);
        assert!((lr_at(80, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(120, &c) - 0.001).abs() < 1e-15);
        let flat = TrainConfig {
            decay_epochs: vec![],
            ..c
        };
        assert_eq!(lr_at(500, &flat), 0.1);
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::from_vec(vec![5.0]);
        let mut v = Tensor::zeros(&[1]);
        sgd_momentum_step(&mut p, &Tensor::from_vec(vec![2.0]), &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p.data(), &[3.0]);

        let mut p = Tensor::from_vec(vec![0.0]);
        let mut v = Tensor::zeros(&[1]);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &Tensor::from_vec(vec![1.0]), &mut v, 1.0, 0.9).unwrap();
        }
        assert!((p.data()[0] + 2.9).abs() < 1e-15);

        let mut p = Tensor::from_vec(vec![1.5]);
        let mut v = Tensor::zeros(&[1]);
        sgd_momentum_step(&mut p, &Tensor::zeros(&[1]), &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert!(sgd_momentum_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { base_lr: 0.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig {
            decay_factor: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            decay_epochs: vec![5, 5],
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn error_rate_examples() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(error_rate(&logits, &[0, 1, 0]).unwrap(), 0.0);
        // random scores over 10 classes are right about one time in ten
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Tensor::uniform(&[4000, 10], 1.0, &mut rng);
        let labels: Vec<usize> = (0..4000).map(|i| i % 10).collect();
        assert!((error_rate(&noise, &labels).unwrap() - 0.9).abs() < 0.03);
    }

    #[test]
    fn uniform_language_model_has_vocab_perplexity() {
        let spec = ModelSpec::lstm_lm(7, 4, 5, 1);
        let mut model = Model::new(spec).unwrap();
        // zero head weights and bias → uniform predictions
        for (id, p) in model
            .params
            .iter()
            .map(|(i, p)| (i, p.name.clone()))
            .collect::<Vec<_>>()
        {
            if p.starts_with("head") {
                model.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let data =
            crate::data::Dataset::new(Split::Test, 7, Samples::Streams(vec![vec![1, 2, 3, 4]; 3]), vec![]).unwrap();
        let e = evaluate(&mut model, &data, 2).unwrap();
        assert!((e.perplexity.unwrap() - 7.0).abs() < 1e-12);
        assert!(e.error.is_none());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model = Model::new(ModelSpec::mlp(2, &[], 2)).unwrap();
        let data = crate::data::Dataset::new(
            Split::Test,
            2,
            Samples::Dense {
                shape: vec![2],
                data: vec![],
            },
            vec![],
        )
        .unwrap();
        assert!(evaluate(&mut model, &data, 4).is_err());
    }

    #[test]
    fn l1_alone_shrinks_active_alphas() {
        // zero inputs into a single gated layer: the task loss cannot reach α
        let spec = ModelSpec::mlp(3, &[], 2).with_gates(GateSettings::new(Granularity::Weight));
        let mut model = Model::new(spec).unwrap();
        let data = crate::data::Dataset::new(
            Split::Train,
            2,
            Samples::Dense {
                shape: vec![3],
                data: vec![0.0; 3 * 16],
            },
            vec![1; 16],
        )
        .unwrap();
        let c = TrainConfig {
            epochs: 1,
            batch_size: 16,
            base_lr: 0.1,
            momentum: 0.0,
            objective: ObjectiveConfig {
                lambda1: 0.1,
                lambda2: 0.0,
                lambda3: 0.0,
                target_c: 1.0,
            },
            ..cfg()
        };
        let gate = model.gates()[0].clone();
        let mut prev = model.params.get(gate.alpha).clone();
        let mut steps = 0;
        while prev.data().iter().any(|a| a.abs() > gate.threshold) {
            train(&mut model, &data, &data, &c, |_| Ok(())).unwrap();
            let now = model.params.get(gate.alpha).clone();
            for (a, b) in now.data().iter().zip(prev.data()) {
                if b.abs() > gate.threshold {
                    assert!(a < b, "{a} !< {b}");
                }
            }
            prev = now;
            steps += 1;
            assert!(steps < 200, "scaling factors never masked");
        }
    }

    #[test]
    fn nan_aborts_with_a_named_tensor() {
        let spec = ModelSpec::mlp(2, &[3], 2);
        let mut model = Model::new(spec).unwrap();
        let id = model.params.find("fc1.weight").unwrap();
        model.params.get_mut(id).data_mut()[0] = f64::NAN;
        let data = crate::data::synth_classification(16, 2, 2, 3.0, 0).unwrap();
        let err = train(&mut model, &data, &data, &cfg(), |_| Ok(()))
            .unwrap_err()
            .to_string();
        assert!(err.contains("param:fc1.weight"), "{err}");
    }
}
