//! Registry of prunable entities, parameter/FLOPs accounting and the
//! rejuvenation log.
//!
//! FLOPs convention: one multiply-accumulate is two FLOPs; batch norm adds
//! two per output element, ReLU one, a bias add one; pooling one per input
//! element. LSTM costs are per time step, with two extra FLOPs per live gate
//! row (bias, activation) and five per live unit (cell update and output).
//!
//! Dead channels propagate forward only: a weight is dead when its output
//! entity is masked or its input channel is dead. A layer with every entity
//! masked disconnects the network; upstream costs are still counted then.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::gate::{mask_value, GateParam, Granularity};
use crate::model::Model;
use crate::params::ParamStore;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Static cost description of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCost {
    /// Conv → BN (→ ReLU). `out_gate` masks filters; `block_gate` masks the
    /// whole residual branch this conv belongs to.
    Conv {
        name: String,
        filters: usize,
        in_channels: usize,
        kernel: usize,
        out_size: usize,
        out_gate: Option<usize>,
        block_gate: Option<usize>,
        input_from: Option<usize>,
        relu: bool,
    },
    /// `[outputs, inputs]` weights plus bias; `weight_gate` is elementwise.
    Linear {
        name: String,
        outputs: usize,
        inputs: usize,
        weight_gate: Option<usize>,
        input_from: Option<usize>,
    },
    /// Four gate matrices `[hidden, hidden + input]` plus biases.
    Lstm {
        name: String,
        hidden: usize,
        input: usize,
        /// Gate indices for f, i, g, o.
        gates: Option<[usize; 4]>,
        input_from: Option<usize>,
    },
    Embedding {
        name: String,
        vocab: usize,
        dim: usize,
    },
    Pool {
        name: String,
        channels: usize,
        size: usize,
        input_from: Option<usize>,
    },
}

impl LayerCost {
    pub fn name(&self) -> &str {
        match self {
            LayerCost::Conv { name, .. }
            | LayerCost::Linear { name, .. }
            | LayerCost::Lstm { name, .. }
            | LayerCost::Embedding { name, .. }
            | LayerCost::Pool { name, .. } => name,
        }
    }
}

/// Multiply-accumulates of a dense conv producing `out_size × out_size` maps.
pub fn conv_macs(filters: usize, in_channels: usize, kernel: usize, out_size: usize) -> u64 {
    (filters * in_channels * kernel * kernel * out_size * out_size) as u64
}

/// FLOPs of conv → BN (→ ReLU) with every filter and channel alive.
pub fn conv_flops(filters: usize, in_channels: usize, kernel: usize, out_size: usize, relu: bool) -> u64 {
    let per_elem = 2 + u64::from(relu);
    2 * conv_macs(filters, in_channels, kernel, out_size) + per_elem * (filters * out_size * out_size) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

/// One registered gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub granularity: Granularity,
    /// Number of independently masked components.
    pub components: usize,
    /// Parameters and FLOPs the gate masks directly.
    pub owned: Cost,
    /// Layers whose input channels die with this gate's components.
    pub dependents: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "1->0")]
    Deactivated,
    #[serde(rename = "0->1")]
    Reactivated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub entity: String,
    pub component: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStatus {
    pub id: String,
    pub active: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub entities: usize,
    pub active_entities: usize,
    pub total: Cost,
    pub active: Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub k: usize,
    pub active_entities: usize,
    pub pruned_ratio: f64,
    pub total_params: u64,
    pub pruned_params: u64,
    pub pruned_params_fraction: f64,
    pub total_flops: u64,
    pub pruned_flops: u64,
    pub pruned_flops_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub schema_version: u32,
    pub step: u64,
    pub gates: Vec<GateStatus>,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
    pub events: Vec<Event>,
}

impl PruneReport {
    /// `"pruned / K, ratio R"` with the ratio in percent.
    pub fn summary_line(&self) -> String {
        let t = &self.totals;
        format!(
            "{} / {}, ratio {:.1}",
            t.k - t.active_entities,
            t.k,
            100.0 * t.pruned_ratio
        )
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("step {}\n", self.step));
        out.push_str(&format!(
            "{:<28} {:>15} {:>21} {:>21}\n",
            "layer", "active/total", "params active/total", "flops active/total"
        ));
        for l in &self.layers {
            let ent = format!("{}/{}", l.active_entities, l.entities);
            out.push_str(&format!(
                "{:<28} {:>15} {:>21} {:>21}\n",
                l.name,
                ent,
                format!("{}/{}", l.active.params, l.total.params),
                format!("{}/{}", l.active.flops, l.total.flops),
            ));
        }
        let t = &self.totals;
        out.push_str(&format!("pruned entities: {}\n", self.summary_line()));
        out.push_str(&format!("pruned params fraction: {:.4}\n", t.pruned_params_fraction));
        out.push_str(&format!("pruned flops fraction: {:.4}\n", t.pruned_flops_fraction));
        let deact = self
            .events
            .iter()
            .filter(|e| e.direction == Direction::Deactivated)
            .count();
        let react = self.events.len() - deact;
        out.push_str(&format!(
            "rejuvenation events: {} (deactivated {deact}, reactivated {react})\n",
            self.events.len()
        ));
        out
    }
}

/// Live view over a model's gates.
#[derive(Debug, Clone)]
pub struct PruneManager {
    records: Vec<EntityRecord>,
    gates: Vec<GateParam>,
    costs: Vec<LayerCost>,
    last: Vec<Vec<bool>>,
    events: Vec<Event>,
}

impl PruneManager {
    pub fn register(model: &Model) -> Result<Self> {
        let gates: Vec<GateParam> = model.gates().into_iter().cloned().collect();
        Self::from_parts(model.gate_names(), gates, model.layer_costs())
    }

    pub fn from_parts(names: Vec<String>, gates: Vec<GateParam>, costs: Vec<LayerCost>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (n, g) in names.iter().zip(&gates) {
            if !seen.insert(g.alpha) {
                return Err(DmpError::DuplicateGate(n.clone()));
            }
        }
        let all_on: Vec<Vec<bool>> = gates.iter().map(|g| vec![true; g.dim]).collect();
        let mut records = Vec::new();
        for (gi, (name, g)) in names.iter().zip(&gates).enumerate() {
            // cost masked by this gate alone
            let mut masks = all_on.clone();
            masks[gi] = vec![false; g.dim];
            let dense = account(&costs, &all_on);
            let without = account(&costs, &masks);
            let diff = |f: fn(&Cost) -> u64| {
                dense.iter().map(|c| f(&c.1)).sum::<u64>() - without.iter().map(|c| f(&c.1)).sum::<u64>()
            };
            let owner_layers: HashSet<usize> = costs
                .iter()
                .enumerate()
                .filter(|(_, c)| layer_gates(c).contains(&gi))
                .map(|(i, _)| i)
                .collect();
            let dependents = costs
                .iter()
                .filter(|c| input_from(c).is_some_and(|f| owner_layers.contains(&f)))
                .map(|c| c.name().to_string())
                .collect();
            records.push(EntityRecord {
                id: name.clone(),
                granularity: g.granularity,
                components: g.dim,
                owned: Cost {
                    params: diff(|c| c.params),
                    flops: diff(|c| c.flops),
                },
                dependents,
            });
        }
        Ok(PruneManager {
            records,
            gates,
            costs,
            last: all_on,
            events: Vec::new(),
        })
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn costs(&self) -> &[LayerCost] {
        &self.costs
    }

    /// Total entity count.
    pub fn k(&self) -> usize {
        self.gates.iter().map(|g| g.dim).sum()
    }

    pub fn gates(&self) -> &[GateParam] {
        &self.gates
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Restore a previously recorded event log and the state it leads to.
    pub fn restore_events(&mut self, events: Vec<Event>) -> Result<()> {
        let mut state: Vec<Vec<bool>> = self.gates.iter().map(|g| vec![true; g.dim]).collect();
        for e in &events {
            let gi = self
                .records
                .iter()
                .position(|r| r.id == e.entity)
                .ok_or_else(|| DmpError::Checkpoint(format!("event names unknown entity `{}`", e.entity)))?;
            let slot = state[gi]
                .get_mut(e.component)
                .ok_or_else(|| DmpError::Checkpoint(format!("event component {} out of range", e.component)))?;
            *slot = e.direction == Direction::Reactivated;
        }
        self.last = state;
        self.events = events;
        Ok(())
    }

    pub fn masks(&self, store: &ParamStore) -> Vec<Vec<bool>> {
        self.gates
            .iter()
            .map(|g| {
                store
                    .get(g.alpha)
                    .data()
                    .iter()
                    .map(|&a| mask_value(a, g.threshold) == 1.0)
                    .collect()
            })
            .collect()
    }

    /// Recompute masks, log flips since the previous snapshot and report.
    pub fn snapshot(&mut self, store: &ParamStore, step: u64) -> PruneReport {
        let masks = self.masks(store);
        for (gi, (now, before)) in masks.iter().zip(&self.last).enumerate() {
            for (c, (&n, &b)) in now.iter().zip(before).enumerate() {
                if n != b {
                    self.events.push(Event {
                        step,
                        entity: self.records[gi].id.clone(),
                        component: c,
                        direction: if n {
                            Direction::Reactivated
                        } else {
                            Direction::Deactivated
                        },
                    });
                }
            }
        }
        self.last = masks.clone();
        self.report_for(&masks, step)
    }

    /// Report for explicit masks without touching the event log.
    pub fn report_for(&self, masks: &[Vec<bool>], step: u64) -> PruneReport {
        let all_on: Vec<Vec<bool>> = self.gates.iter().map(|g| vec![true; g.dim]).collect();
        let dense = account(&self.costs, &all_on);
        let live = account(&self.costs, masks);
        let layers: Vec<LayerReport> = self
            .costs
            .iter()
            .zip(dense.iter().zip(&live))
            .map(|(c, ((_, total), (_, active)))| {
                let owned = layer_gates(c);
                LayerReport {
                    name: c.name().to_string(),
                    entities: owned.iter().map(|&g| masks[g].len()).sum(),
                    active_entities: owned.iter().map(|&g| masks[g].iter().filter(|&&m| m).count()).sum(),
                    total: *total,
                    active: *active,
                }
            })
            .collect();
        let k = self.k();
        let active_entities: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        let total_params: u64 = dense.iter().map(|c| c.1.params).sum();
        let total_flops: u64 = dense.iter().map(|c| c.1.flops).sum();
        let pruned_params = total_params - live.iter().map(|c| c.1.params).sum::<u64>();
        let pruned_flops = total_flops - live.iter().map(|c| c.1.flops).sum::<u64>();
        let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        PruneReport {
            schema_version: REPORT_SCHEMA_VERSION,
            step,
            gates: self
                .records
                .iter()
                .zip(masks)
                .map(|(r, m)| GateStatus {
                    id: r.id.clone(),
                    active: m.clone(),
                })
                .collect(),
            layers,
            totals: Totals {
                k,
                active_entities,
                pruned_ratio: if k == 0 {
                    0.0
                } else {
                    1.0 - active_entities as f64 / k as f64
                },
                total_params,
                pruned_params,
                pruned_params_fraction: frac(pruned_params, total_params),
                total_flops,
                pruned_flops,
                pruned_flops_fraction: frac(pruned_flops, total_flops),
            },
            events: self.events.clone(),
        }
    }
}

fn input_from(c: &LayerCost) -> Option<usize> {
    match c {
        LayerCost::Conv { input_from, .. }
        | LayerCost::Linear { input_from, .. }
        | LayerCost::Lstm { input_from, .. }
        | LayerCost::Pool { input_from, .. } => *input_from,
        LayerCost::Embedding { .. } => None,
    }
}

fn layer_gates(c: &LayerCost) -> Vec<usize> {
    match c {
        LayerCost::Conv {
            out_gate, block_gate, ..
        } => out_gate.iter().chain(block_gate.iter()).copied().collect(),
        LayerCost::Linear { weight_gate, .. } => weight_gate.iter().copied().collect(),
        LayerCost::Lstm { gates, .. } => gates.iter().flatten().copied().collect(),
        _ => vec![],
    }
}

fn on(masks: &[Vec<bool>], gate: Option<usize>, i: usize) -> bool {
    gate.is_none_or(|g| masks[g][i])
}

/// Which output channels of layer `idx` carry signal.
fn live_outputs(costs: &[LayerCost], masks: &[Vec<bool>], idx: usize) -> Vec<bool> {
    match &costs[idx] {
        LayerCost::Conv {
            filters,
            out_gate,
            block_gate,
            ..
        } => {
            let block = on(masks, *block_gate, 0);
            (0..*filters).map(|o| block && on(masks, *out_gate, o)).collect()
        }
        LayerCost::Lstm { hidden, gates, .. } => (0..*hidden)
            .map(|j| match gates {
                // f alone cannot silence a unit; i, g or o can
                Some([_, gi, gg, go]) => masks[*gi][j] && masks[*gg][j] && masks[*go][j],
                None => true,
            })
            .collect(),
        LayerCost::Linear { outputs, .. } => vec![true; *outputs],
        LayerCost::Pool {
            channels, input_from, ..
        } => match input_from {
            Some(f) => live_outputs(costs, masks, *f),
            None => vec![true; *channels],
        },
        LayerCost::Embedding { dim, .. } => vec![true; *dim],
    }
}

fn live_inputs(costs: &[LayerCost], masks: &[Vec<bool>], from: Option<usize>, n: usize) -> Vec<bool> {
    match from {
        Some(f) => {
            let v = live_outputs(costs, masks, f);
            assert_eq!(v.len(), n, "layer input width disagrees with its source");
            v
        }
        None => vec![true; n],
    }
}

/// Per-layer dense-equivalent cost of what remains alive under `masks`.
fn account(costs: &[LayerCost], masks: &[Vec<bool>]) -> Vec<(String, Cost)> {
    costs
        .iter()
        .enumerate()
        .map(|(idx, c)| {
            let cost = match c {
                LayerCost::Conv {
                    in_channels,
                    kernel,
                    out_size,
                    input_from,
                    relu,
                    ..
                } => {
                    let outs = live_outputs(costs, masks, idx);
                    let ins = live_inputs(costs, masks, *input_from, *in_channels);
                    let (ao, ai) = (count(&outs), count(&ins));
                    let pairs = (ao * ai) as u64;
                    let k2 = (kernel * kernel) as u64;
                    let hw = (out_size * out_size) as u64;
                    Cost {
                        params: k2 * pairs + 2 * ao as u64,
                        flops: 2 * k2 * pairs * hw + (2 + u64::from(*relu)) * ao as u64 * hw,
                    }
                }
                LayerCost::Linear {
                    outputs,
                    inputs,
                    weight_gate,
                    input_from,
                    ..
                } => {
                    let ins = live_inputs(costs, masks, *input_from, *inputs);
                    let mut macs = 0u64;
                    for o in 0..*outputs {
                        for (i, &alive) in ins.iter().enumerate() {
                            if alive && on(masks, *weight_gate, o * inputs + i) {
                                macs += 1;
                            }
                        }
                    }
                    Cost {
                        params: macs + *outputs as u64,
                        flops: 2 * macs + *outputs as u64,
                    }
                }
                LayerCost::Lstm {
                    input,
                    gates,
                    input_from,
                    ..
                } => {
                    let units = live_outputs(costs, masks, idx);
                    let ins = live_inputs(costs, masks, *input_from, *input);
                    let cols = (count(&units) + count(&ins)) as u64;
                    let mut rows = 0u64;
                    for k in 0..4 {
                        let g = gates.map(|g| g[k]);
                        rows += units.iter().enumerate().filter(|&(j, &u)| u && on(masks, g, j)).count() as u64;
                    }
                    let macs = rows * cols;
                    Cost {
                        params: macs + rows,
                        flops: 2 * macs + 2 * rows + 5 * count(&units) as u64,
                    }
                }
                LayerCost::Embedding { vocab, dim, .. } => Cost {
                    params: (vocab * dim) as u64,
                    flops: 0,
                },
                LayerCost::Pool { size, .. } => {
                    let live = live_outputs(costs, masks, idx);
                    Cost {
                        params: 0,
                        flops: (count(&live) * size * size) as u64,
                    }
                }
            };
            (c.name().to_string(), cost)
        })
        .collect()
}

fn count(v: &[bool]) -> usize {
    v.iter().filter(|&&b| b).count()
}
